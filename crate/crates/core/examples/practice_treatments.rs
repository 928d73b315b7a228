//! Shannon diversity and crop rotation per cell, aggregated over the study
//! period and split at the median into treated and control cells.
//!
//! cargo run --example practice_treatments

use std::collections::BTreeMap;
use std::path::Path;

use agrocausal::data_model::{filter_cropland, load_canonical_panel};
use agrocausal::practices::{
    apply_abundances, build_cross_section, crop_rotation, grid_abundances, load_grid, load_parcels_geojson,
    shannon_diversity, TreatmentKind,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!("H(0.5, 0.5) = {:.6}", shannon_diversity([0.5, 0.5])?);
    println!("H(0.7, 0.2, 0.1) = {:.6}", shannon_diversity([0.7, 0.2, 0.1])?);
    let year = |pairs: &[(&str, f64)]| pairs.iter().map(|(c, a)| (c.to_string(), *a)).collect::<BTreeMap<_, _>>();
    let rotation = crop_rotation(&[
        year(&[("maize", 1.0)]),
        year(&[("wheat", 1.0)]),
        year(&[("maize", 1.0)]),
    ])?;
    println!("maize/wheat/maize rotation = {rotation}");

    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let mut panel = load_canonical_panel(fixtures.join("panel.csv"))?;
    let parcels = load_parcels_geojson(fixtures.join("parcels.geojson"))?;
    let grid = load_grid(fixtures.join("grid.csv"), 500.0)?;
    let by_year = panel
        .study_years
        .iter()
        .map(|&y| Ok((y, grid_abundances(&parcels, &grid, y)?)))
        .collect::<Result<BTreeMap<_, _>, agrocausal::practices::PracticeError>>()?;
    apply_abundances(&mut panel, &by_year);
    let panel = filter_cropland(&panel, 0.8)?;

    let majors = panel.major_crops(0.02);
    for kind in [TreatmentKind::CropRotation, TreatmentKind::LandscapeCropDiversity] {
        let (table, _, _) = build_cross_section(&panel, kind, &majors)?;
        println!("\n{} with controls {:?}", kind.short_name(), table.feature_names);
        for row in &table.rows {
            println!(
                "  {} raw {:.3} treated {}",
                row.cell_id,
                row.treatment_raw,
                row.treatment.unwrap_or(0)
            );
        }
    }
    Ok(())
}
