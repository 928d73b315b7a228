//! Grid parcel polygons into crop abundances, attach them to a panel and
//! keep only cells that are mostly cropland.
//!
//! cargo run --example ingest_panel

use std::collections::BTreeMap;
use std::path::Path;

use agrocausal::data_model::{filter_cropland, load_canonical_panel, write_panel};
use agrocausal::practices::{apply_abundances, grid_abundances, load_grid, load_parcels_geojson};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let mut panel = load_canonical_panel(fixtures.join("panel.csv"))?;
    let parcels = load_parcels_geojson(fixtures.join("parcels.geojson"))?;
    let grid = load_grid(fixtures.join("grid.csv"), 500.0)?;
    println!("{} cells, years {:?}, {} parcels", panel.cells.len(), panel.study_years, parcels.len());

    let mut by_year = BTreeMap::new();
    for &year in &panel.study_years {
        by_year.insert(year, grid_abundances(&parcels, &grid, year)?);
    }
    for (cell, crops) in &by_year[&2011] {
        println!("2011 {cell}: {crops:?}");
    }
    apply_abundances(&mut panel, &by_year);

    for (cell, total) in panel.mean_total_abundance() {
        println!("mean cropland share of {cell}: {total:.2}");
    }
    let kept = filter_cropland(&panel, 0.8)?;
    println!("{} cells pass the 80% cropland filter", kept.cells.len());
    write_panel(&kept, std::io::stdout())?;
    Ok(())
}
