//! Agricultural practices derived from crop declarations.
//!
//! Parcels are rasterized to per-cell crop abundances, from which two
//! treatments are computed: landscape crop diversity (Shannon index of the
//! crop mix, averaged over years) and crop rotation (summed year-to-year
//! change in crop abundances).

pub mod geometry;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::data_model::{
    aggregate_temporal, AggregationKind, CrossSectionTable, DataError, GridCell, PanelDataset,
    ABUNDANCE_SUM_TOLERANCE,
};
use geometry::{Polygon, Rect};

#[derive(Debug, Error)]
pub enum PracticeError {
    #[error("polygon has fewer than 3 distinct vertices or zero area")]
    DegeneratePolygon,
    #[error("polygon is self-intersecting")]
    NonSimplePolygon,
    #[error("parcel `{parcel}`: {source}")]
    Parcel {
        parcel: String,
        #[source]
        source: Box<PracticeError>,
    },
    #[error("abundances in cell `{cell}` sum to {total} > 1; parcels overlap")]
    OverlappingParcels { cell: String, total: f64 },
    #[error("every abundance is zero")]
    AllZero,
    #[error("abundance {0} is negative or not finite")]
    InvalidAbundance(f64),
    #[error("crop rotation needs at least 2 years, got {0}")]
    TooFewYears(usize),
    #[error("treatment has fewer than 2 distinct values")]
    ConstantTreatment,
    #[error("malformed GeoJSON: {0}")]
    GeoJson(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A declared crop parcel for one year.
#[derive(Debug, Clone, PartialEq)]
pub struct Parcel {
    pub parcel_id: String,
    pub polygon: Polygon,
    pub crop: String,
    pub year: i32,
}

/// Per-cell, per-year practice metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PracticeRecord {
    pub cell_id: String,
    pub year: i32,
    /// Shannon diversity of the crop mix, in nats.
    pub shannon_h: f64,
    /// Rotation contribution of the pair (previous available year, `year`);
    /// `None` for the first year of a cell.
    pub rotation_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentAssignment {
    pub cell_id: String,
    pub treatment_raw: f64,
    pub treated: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatmentKind {
    #[serde(alias = "cr")]
    CropRotation,
    #[serde(alias = "lcd")]
    LandscapeCropDiversity,
}

impl TreatmentKind {
    pub fn aggregation(&self) -> AggregationKind {
        match self {
            TreatmentKind::CropRotation => AggregationKind::Sum,
            TreatmentKind::LandscapeCropDiversity => AggregationKind::Mean,
        }
    }

    pub fn short_name(&self) -> &'static str {
        match self {
            TreatmentKind::CropRotation => "cr",
            TreatmentKind::LandscapeCropDiversity => "lcd",
        }
    }
}

impl std::str::FromStr for TreatmentKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cr" | "crop_rotation" => Ok(TreatmentKind::CropRotation),
            "lcd" | "landscape_crop_diversity" => Ok(TreatmentKind::LandscapeCropDiversity),
            other => Err(format!("unknown treatment `{other}` (expected cr or lcd)")),
        }
    }
}

/// Crop abundances of every grid cell for the parcels of one year.
///
/// Each abundance is the area of the crop's parcels inside the cell divided
/// by the cell area. Cells without any parcel map to an empty crop map.
pub fn grid_abundances(
    parcels: &[Parcel],
    grid: &[GridCell],
    year: i32,
) -> Result<BTreeMap<String, BTreeMap<String, f64>>, PracticeError> {
    let rects: Vec<Rect> = grid
        .iter()
        .map(|c| {
            let (x0, y0, x1, y1) = c.bounds();
            Rect::new(x0, y0, x1, y1)
        })
        .collect();
    // cells sorted by xmin so each parcel only scans cells that may overlap it
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| rects[a].xmin.total_cmp(&rects[b].xmin));
    let max_width = rects.iter().map(|r| r.xmax - r.xmin).fold(0.0, f64::max);

    let mut out: BTreeMap<String, BTreeMap<String, f64>> =
        grid.iter().map(|c| (c.cell_id.clone(), BTreeMap::new())).collect();

    for parcel in parcels.iter().filter(|p| p.year == year) {
        parcel.polygon.validate().map_err(|e| PracticeError::Parcel {
            parcel: parcel.parcel_id.clone(),
            source: Box::new(e),
        })?;
        let bbox = parcel.polygon.bounding_box();
        let start = order.partition_point(|&i| rects[i].xmin < bbox.xmin - max_width);
        for &i in &order[start..] {
            let rect = &rects[i];
            if rect.xmin >= bbox.xmax {
                break;
            }
            if !rect.intersects(&bbox) {
                continue;
            }
            let area = parcel.polygon.intersection_area(rect);
            if area > 0.0 {
                let cell = &grid[i];
                *out.get_mut(&cell.cell_id)
                    .expect("cell present")
                    .entry(parcel.crop.clone())
                    .or_insert(0.0) += area / rect.area();
            }
        }
    }

    for (cell, crops) in &out {
        let total: f64 = crops.values().sum();
        if total > 1.0 + ABUNDANCE_SUM_TOLERANCE {
            return Err(PracticeError::OverlappingParcels {
                cell: cell.clone(),
                total,
            });
        }
    }
    Ok(out)
}

/// Shannon diversity `H' = -Σ p ln p` over the positive entries, with
/// `p` the abundances renormalized to proportions.
pub fn shannon_diversity<I>(abundances: I) -> Result<f64, PracticeError>
where
    I: IntoIterator<Item = f64>,
{
    let values: Vec<f64> = abundances.into_iter().collect();
    if let Some(&bad) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(PracticeError::InvalidAbundance(bad));
    }
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return Err(PracticeError::AllZero);
    }
    if values.iter().filter(|v| **v > 0.0).count() <= 1 {
        return Ok(0.0);
    }
    let h = values
        .iter()
        .filter(|v| **v > 0.0)
        .map(|v| {
            let p = v / total;
            -p * p.ln()
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

/// Summed absolute change of every crop's abundance between consecutive
/// years. Crops absent in a year count as zero.
pub fn rotation_delta(prev: &BTreeMap<String, f64>, next: &BTreeMap<String, f64>) -> f64 {
    let crops: BTreeSet<&String> = prev.keys().chain(next.keys()).collect();
    crops
        .into_iter()
        .map(|c| {
            let a = prev.get(c).copied().unwrap_or(0.0);
            let b = next.get(c).copied().unwrap_or(0.0);
            (b - a).abs()
        })
        .sum()
}

/// Total crop rotation over an ordered series of yearly abundance maps.
pub fn crop_rotation(series: &[BTreeMap<String, f64>]) -> Result<f64, PracticeError> {
    if series.len() < 2 {
        return Err(PracticeError::TooFewYears(series.len()));
    }
    Ok(series.windows(2).map(|w| rotation_delta(&w[0], &w[1])).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Binarization {
    pub median: f64,
    pub assignments: Vec<TreatmentAssignment>,
}

/// Splits cells at the median raw treatment; cells strictly above it are
/// treated, ties go to control.
pub fn binarize_treatment(values: &[(String, f64)]) -> Result<Binarization, PracticeError> {
    if let Some((_, bad)) = values.iter().find(|(_, v)| !v.is_finite()) {
        return Err(PracticeError::Data(DataError::InvalidArgument(format!(
            "treatment value {bad} is not finite"
        ))));
    }
    let mut sorted: Vec<f64> = values.iter().map(|(_, v)| *v).collect();
    let median = crate::data_model::median(&mut sorted).ok_or(PracticeError::ConstantTreatment)?;
    if sorted.first() == sorted.last() {
        return Err(PracticeError::ConstantTreatment);
    }
    let assignments = values
        .iter()
        .map(|(id, v)| TreatmentAssignment {
            cell_id: id.clone(),
            treatment_raw: *v,
            treated: u8::from(*v > median),
        })
        .collect();
    Ok(Binarization { median, assignments })
}

/// Binarizes the raw treatment column of a table in place.
pub fn binarize_table(table: &mut CrossSectionTable) -> Result<Binarization, PracticeError> {
    let values: Vec<(String, f64)> = table
        .rows
        .iter()
        .map(|r| (r.cell_id.clone(), r.treatment_raw))
        .collect();
    let b = binarize_treatment(&values)?;
    for (row, a) in table.rows.iter_mut().zip(&b.assignments) {
        row.treatment = Some(a.treated);
    }
    Ok(b)
}

/// Per cell-year Shannon index and rotation contribution. A year in which a
/// cell has no crop at all scores a diversity of zero.
pub fn practice_records(panel: &PanelDataset) -> Result<Vec<PracticeRecord>, PracticeError> {
    let mut out = Vec::with_capacity(panel.records.len());
    for (cell_id, recs) in panel.by_cell() {
        for (k, rec) in recs.iter().enumerate() {
            let shannon_h = match shannon_diversity(rec.abundances.values().copied()) {
                Ok(h) => h,
                Err(PracticeError::AllZero) => 0.0,
                Err(e) => return Err(e),
            };
            let rotation_delta = (k > 0).then(|| rotation_delta(&recs[k - 1].abundances, &rec.abundances));
            out.push(PracticeRecord {
                cell_id: cell_id.to_string(),
                year: rec.year,
                shannon_h,
                rotation_delta,
            });
        }
    }
    Ok(out)
}

/// Per-cell yearly series feeding [`aggregate_temporal`]: rotation deltas of
/// consecutive year pairs, or yearly Shannon indices.
pub fn treatment_series(records: &[PracticeRecord], kind: TreatmentKind) -> BTreeMap<String, Vec<f64>> {
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        let entry = out.entry(r.cell_id.clone()).or_default();
        match kind {
            TreatmentKind::CropRotation => {
                if let Some(d) = r.rotation_delta {
                    entry.push(d);
                }
            }
            TreatmentKind::LandscapeCropDiversity => entry.push(r.shannon_h),
        }
    }
    out
}

/// Practice records, temporal aggregation and median binarization in one go.
pub fn build_cross_section(
    panel: &PanelDataset,
    kind: TreatmentKind,
    major_crops: &[String],
) -> Result<(CrossSectionTable, Vec<PracticeRecord>, Vec<crate::data_model::Diagnostic>), PracticeError> {
    let records = practice_records(panel)?;
    let series = treatment_series(&records, kind);
    let agg = aggregate_temporal(panel, &series, kind.aggregation(), major_crops)?;
    let mut table = agg.table;
    binarize_table(&mut table)?;
    Ok((table, records, agg.dropped))
}

/// Replaces the abundances of matching panel records with gridded ones.
/// `by_year` maps year to cell to crop fractions.
pub fn apply_abundances(
    panel: &mut PanelDataset,
    by_year: &BTreeMap<i32, BTreeMap<String, BTreeMap<String, f64>>>,
) {
    for rec in &mut panel.records {
        if let Some(cells) = by_year.get(&rec.year) {
            if let Some(crops) = cells.get(&rec.cell_id) {
                rec.abundances = crops.clone();
            }
        }
    }
}

fn parse_ring(v: &Value) -> Result<Vec<geometry::Point>, PracticeError> {
    let arr = v
        .as_array()
        .ok_or_else(|| PracticeError::GeoJson("ring is not an array".into()))?;
    let ring = arr
        .iter()
        .map(|p| {
            let xy = p.as_array().filter(|a| a.len() >= 2);
            match xy.and_then(|a| Some([a[0].as_f64()?, a[1].as_f64()?])) {
                Some(pt) => Ok(pt),
                None => Err(PracticeError::GeoJson("position is not [x, y]".into())),
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(geometry::open_ring(ring))
}

fn parse_polygon(coords: &Value) -> Result<Polygon, PracticeError> {
    let rings = coords
        .as_array()
        .filter(|r| !r.is_empty())
        .ok_or_else(|| PracticeError::GeoJson("polygon has no rings".into()))?;
    let mut polygon = Polygon::new(parse_ring(&rings[0])?);
    for hole in &rings[1..] {
        polygon.holes.push(parse_ring(hole)?);
    }
    Ok(polygon)
}

fn property_string(props: &Value, key: &str) -> Option<String> {
    match props.get(key)? {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Parses a GeoJSON `FeatureCollection` of parcels with `parcel_id`, `crop`
/// and `year` properties. `MultiPolygon` features yield one parcel per part,
/// with `#<k>` appended to the id.
pub fn parse_parcels_geojson(text: &str) -> Result<Vec<Parcel>, PracticeError> {
    let doc: Value = serde_json::from_str(text)?;
    if doc.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(PracticeError::GeoJson("expected a FeatureCollection".into()));
    }
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| PracticeError::GeoJson("missing features array".into()))?;

    let mut parcels = Vec::new();
    for (i, feat) in features.iter().enumerate() {
        let props = feat
            .get("properties")
            .ok_or_else(|| PracticeError::GeoJson(format!("feature {i} has no properties")))?;
        let missing = |k: &str| PracticeError::GeoJson(format!("feature {i} lacks property `{k}`"));
        let parcel_id = property_string(props, "parcel_id").ok_or_else(|| missing("parcel_id"))?;
        let crop = props
            .get("crop")
            .and_then(Value::as_str)
            .ok_or_else(|| missing("crop"))?
            .to_string();
        let year = props
            .get("year")
            .and_then(Value::as_i64)
            .and_then(|y| i32::try_from(y).ok())
            .ok_or_else(|| missing("year"))?;
        let geom = feat
            .get("geometry")
            .ok_or_else(|| PracticeError::GeoJson(format!("feature {i} has no geometry")))?;
        let coords = geom
            .get("coordinates")
            .ok_or_else(|| PracticeError::GeoJson(format!("feature {i} has no coordinates")))?;
        match geom.get("type").and_then(Value::as_str) {
            Some("Polygon") => parcels.push(Parcel {
                parcel_id,
                polygon: parse_polygon(coords)?,
                crop,
                year,
            }),
            Some("MultiPolygon") => {
                let parts = coords
                    .as_array()
                    .ok_or_else(|| PracticeError::GeoJson("multipolygon is not an array".into()))?;
                for (k, part) in parts.iter().enumerate() {
                    parcels.push(Parcel {
                        parcel_id: format!("{parcel_id}#{k}"),
                        polygon: parse_polygon(part)?,
                        crop: crop.clone(),
                        year,
                    });
                }
            }
            other => {
                return Err(PracticeError::GeoJson(format!(
                    "feature {i}: unsupported geometry type {other:?}"
                )))
            }
        }
    }
    Ok(parcels)
}

pub fn load_parcels_geojson(path: impl AsRef<Path>) -> Result<Vec<Parcel>, PracticeError> {
    parse_parcels_geojson(&std::fs::read_to_string(path)?)
}

/// Reads a grid description: `cell_id,lon,lat[,cell_size_m]`.
pub fn load_grid(path: impl AsRef<Path>, default_size: f64) -> Result<Vec<GridCell>, PracticeError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(DataError::from)?;
    let header = rdr.headers().map_err(DataError::from)?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| DataError::MissingColumn(name.to_string()));
    let (id, lon, lat) = (need("cell_id")?, need("lon")?, need("lat")?);
    let size = col("cell_size_m");
    let mut cells = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(DataError::from)?;
        let num = |j: usize| -> Result<f64, PracticeError> {
            rec.get(j)
                .and_then(|s| s.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    PracticeError::Data(DataError::Rejected(vec![crate::data_model::Diagnostic {
                        row: i + 1,
                        code: crate::data_model::DiagnosticCode::MalformedNumber,
                        detail: format!("grid column {j} is not a finite number"),
                    }]))
                })
        };
        let s = match size {
            Some(j) => num(j)?,
            None => default_size,
        };
        cells.push(GridCell::new(rec.get(id).unwrap_or(""), num(lon)?, num(lat)?, s));
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn square_parcel(id: &str, crop: &str, x0: f64, y0: f64, x1: f64, y1: f64) -> Parcel {
        Parcel {
            parcel_id: id.into(),
            polygon: Polygon::new(vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]]),
            crop: crop.into(),
            year: 2010,
        }
    }

    fn cell() -> GridCell {
        GridCell::new("c", 250.0, 250.0, 500.0)
    }

    #[test]
    fn full_cover_is_one() {
        let p = square_parcel("p", "maize", 0.0, 0.0, 500.0, 500.0);
        let ab = grid_abundances(&[p], &[cell()], 2010).unwrap();
        assert_eq!(ab["c"], map(&[("maize", 1.0)]));
    }

    #[test]
    fn halves_split_evenly() {
        let a = square_parcel("a", "maize", 0.0, 0.0, 250.0, 500.0);
        let b = square_parcel("b", "wheat", 250.0, 0.0, 500.0, 500.0);
        let ab = grid_abundances(&[a, b], &[cell()], 2010).unwrap();
        assert_eq!(ab["c"], map(&[("maize", 0.5), ("wheat", 0.5)]));
    }

    #[test]
    fn other_years_are_ignored_and_overlaps_rejected() {
        let mut a = square_parcel("a", "maize", 0.0, 0.0, 500.0, 500.0);
        a.year = 2011;
        let ab = grid_abundances(&[a], &[cell()], 2010).unwrap();
        assert!(ab["c"].is_empty());

        let a = square_parcel("a", "maize", 0.0, 0.0, 500.0, 500.0);
        let b = square_parcel("b", "wheat", 0.0, 0.0, 300.0, 500.0);
        assert!(matches!(
            grid_abundances(&[a, b], &[cell()], 2010),
            Err(PracticeError::OverlappingParcels { .. })
        ));
    }

    #[test]
    fn invalid_parcels_are_reported() {
        let mut bad = square_parcel("bow", "maize", 0.0, 0.0, 100.0, 100.0);
        bad.polygon = Polygon::new(vec![[0.0, 0.0], [100.0, 100.0], [100.0, 0.0], [0.0, 100.0]]);
        match grid_abundances(&[bad], &[cell()], 2010) {
            Err(PracticeError::Parcel { parcel, source }) => {
                assert_eq!(parcel, "bow");
                assert!(matches!(*source, PracticeError::NonSimplePolygon));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parcel_spanning_cells_is_shared() {
        let grid = vec![
            GridCell::new("w", 250.0, 250.0, 500.0),
            GridCell::new("e", 750.0, 250.0, 500.0),
        ];
        let p = square_parcel("p", "maize", 125.0, 0.0, 875.0, 500.0);
        let ab = grid_abundances(&[p], &grid, 2010).unwrap();
        assert_eq!(ab["w"]["maize"], 0.75);
        assert_eq!(ab["e"]["maize"], 0.75);
    }

    #[test]
    fn shannon_examples() {
        assert_eq!(shannon_diversity([1.0]).unwrap(), 0.0);
        let h2 = shannon_diversity([0.5, 0.5]).unwrap();
        assert!((h2 - std::f64::consts::LN_2).abs() < 1e-12);
        // -(0.7 ln 0.7 + 0.2 ln 0.2 + 0.1 ln 0.1), evaluated by hand
        let h3 = shannon_diversity([0.7, 0.2, 0.1]).unwrap();
        assert!((h3 - 0.801819).abs() < 1e-6);
        assert!(matches!(shannon_diversity([0.0, 0.0]), Err(PracticeError::AllZero)));
        assert!(matches!(
            shannon_diversity([0.5, -0.1]),
            Err(PracticeError::InvalidAbundance(_))
        ));
    }

    #[test]
    fn rotation_examples() {
        let same = vec![map(&[("maize", 0.6)]); 3];
        assert_eq!(crop_rotation(&same).unwrap(), 0.0);
        let two = vec![map(&[("maize", 0.6), ("wheat", 0.4)]), map(&[("maize", 0.3), ("wheat", 0.7)])];
        assert!((crop_rotation(&two).unwrap() - 0.6).abs() < 1e-15);
        let flip = vec![map(&[("a", 1.0)]), map(&[("b", 1.0)]), map(&[("a", 1.0)])];
        assert_eq!(crop_rotation(&flip).unwrap(), 4.0);
        assert!(matches!(crop_rotation(&flip[..1]), Err(PracticeError::TooFewYears(1))));
    }

    fn labelled(values: &[f64]) -> Vec<(String, f64)> {
        values.iter().enumerate().map(|(i, v)| (format!("c{i}"), *v)).collect()
    }

    fn treated(values: &[f64]) -> Vec<u8> {
        binarize_treatment(&labelled(values))
            .unwrap()
            .assignments
            .iter()
            .map(|a| a.treated)
            .collect()
    }

    #[test]
    fn binarization_examples() {
        assert_eq!(treated(&[1.0, 2.0, 3.0, 4.0]), vec![0, 0, 1, 1]);
        assert_eq!(treated(&[1.0, 2.0, 2.0, 9.0]), vec![0, 0, 0, 1]);
        assert!(matches!(
            binarize_treatment(&labelled(&[5.0, 5.0, 5.0])),
            Err(PracticeError::ConstantTreatment)
        ));
        assert_eq!(binarize_treatment(&labelled(&[1.0, 2.0, 3.0, 4.0])).unwrap().median, 2.5);
    }

    #[test]
    fn triangle_matches_monte_carlo() {
        // right triangle over the lower-left half of the cell
        let tri = Parcel {
            parcel_id: "t".into(),
            polygon: Polygon::new(vec![[0.0, 0.0], [500.0, 0.0], [0.0, 500.0]]),
            crop: "maize".into(),
            year: 2010,
        };
        let ab = grid_abundances(std::slice::from_ref(&tri), &[cell()], 2010).unwrap();
        let exact = ab["c"]["maize"];
        assert!((exact - 0.5).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples = 1_000_000;
        let inside = (0..samples)
            .filter(|_| {
                let p = [rng.random::<f64>() * 500.0, rng.random::<f64>() * 500.0];
                point_in_ring(p, &tri.polygon.exterior)
            })
            .count();
        let mc = inside as f64 / samples as f64;
        assert!((mc - exact).abs() < 2e-3, "mc {mc} exact {exact}");
    }

    /// Even-odd ray casting, independent of the trapezoid integration.
    fn point_in_ring(p: [f64; 2], ring: &[[f64; 2]]) -> bool {
        let mut inside = false;
        let n = ring.len();
        let mut j = n - 1;
        for i in 0..n {
            let (a, b) = (ring[i], ring[j]);
            if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0] {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    #[test]
    fn concave_parcel_matches_monte_carlo() {
        let ring = vec![
            [-100.0, -50.0],
            [420.0, 80.0],
            [260.0, 300.0],
            [610.0, 560.0],
            [90.0, 430.0],
            [150.0, 200.0],
        ];
        let p = Parcel {
            parcel_id: "z".into(),
            polygon: Polygon::new(ring.clone()),
            crop: "potato".into(),
            year: 2010,
        };
        let exact = grid_abundances(&[p], &[cell()], 2010).unwrap()["c"]["potato"];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples = 1_000_000;
        let inside = (0..samples)
            .filter(|_| point_in_ring([rng.random::<f64>() * 500.0, rng.random::<f64>() * 500.0], &ring))
            .count();
        let mc = inside as f64 / samples as f64;
        assert!((mc - exact).abs() < 2e-3, "mc {mc} exact {exact}");
    }

    #[test]
    fn geojson_parcels_parse() {
        let text = r#"{"type":"FeatureCollection","features":[
            {"type":"Feature","properties":{"parcel_id":7,"crop":"maize","year":2010},
             "geometry":{"type":"Polygon","coordinates":[[[0,0],[500,0],[500,500],[0,500],[0,0]]]}},
            {"type":"Feature","properties":{"parcel_id":"m","crop":"wheat","year":2011},
             "geometry":{"type":"MultiPolygon","coordinates":[[[[0,0],[1,0],[0,1],[0,0]]],[[[5,5],[6,5],[5,6],[5,5]]]]}}
        ]}"#;
        let parcels = parse_parcels_geojson(text).unwrap();
        assert_eq!(parcels.len(), 3);
        assert_eq!(parcels[0].parcel_id, "7");
        assert_eq!(parcels[0].polygon.exterior.len(), 4);
        assert_eq!(parcels[2].parcel_id, "m#1");
        assert!(parse_parcels_geojson(r#"{"type":"Feature"}"#).is_err());
    }

    fn abundance_map() -> impl Strategy<Value = BTreeMap<String, f64>> {
        prop::collection::btree_map("[a-e]", 0.0f64..1.0, 0..5)
    }

    proptest! {
        #[test]
        fn shannon_is_permutation_and_scale_invariant(
            mut v in prop::collection::vec(0.0f64..1.0, 2..8),
            scale in 0.01f64..100.0,
        ) {
            prop_assume!(v.iter().sum::<f64>() > 1e-6);
            let h = shannon_diversity(v.iter().copied()).unwrap();
            let scaled = shannon_diversity(v.iter().map(|x| x * scale)).unwrap();
            v.reverse();
            let permuted = shannon_diversity(v.iter().copied()).unwrap();
            prop_assert!((h - scaled).abs() < 1e-9);
            prop_assert!((h - permuted).abs() < 1e-12);
            let positive = v.iter().filter(|x| **x > 0.0).count().max(1) as f64;
            prop_assert!(h <= positive.ln() + 1e-12);
        }

        #[test]
        fn rotation_is_label_invariant_and_bounded(series in prop::collection::vec(abundance_map(), 2..6)) {
            // keep each year a valid abundance map (sum <= 1)
            let series: Vec<BTreeMap<String, f64>> = series
                .into_iter()
                .map(|m| {
                    let total: f64 = m.values().sum();
                    let scale = if total > 1.0 { 1.0 / total } else { 1.0 };
                    m.into_iter().map(|(k, v)| (k, v * scale)).collect()
                })
                .collect();
            let cr = crop_rotation(&series).unwrap();
            let relabeled: Vec<BTreeMap<String, f64>> = series
                .iter()
                .map(|m| m.iter().map(|(k, v)| (format!("crop-{k}"), *v)).collect())
                .collect();
            prop_assert!((cr - crop_rotation(&relabeled).unwrap()).abs() < 1e-12);
            for w in series.windows(2) {
                prop_assert!(rotation_delta(&w[0], &w[1]) <= 2.0 + 1e-12);
            }
            prop_assert!(cr <= 2.0 * (series.len() - 1) as f64 + 1e-12);
        }

        #[test]
        fn binarization_is_invariant_under_monotone_transforms(v in prop::collection::vec(-10.0f64..10.0, 2..40)) {
            prop_assume!(v.iter().any(|x| *x != v[0]));
            let base = treated(&v);
            let n_treated = base.iter().filter(|t| **t == 1).count();
            prop_assert!(n_treated < v.len());
            let transformed: Vec<f64> = v.iter().map(|x| x.exp()).collect();
            prop_assert_eq!(treated(&transformed), base);
        }
    }
}
