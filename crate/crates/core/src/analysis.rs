//! Diagnostics and exports computed from a fitted effect model.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::data_model::CrossSectionTable;
use crate::dml::{CateModel, DmlError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("input is constant")]
    ConstantInput,
    #[error("no data")]
    EmptyData,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("need at least one bin")]
    NoBins,
    #[error("value {0} is not finite")]
    NonFinite(f64),
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("cell `{0}` has no grid geometry")]
    MissingCell(String),
    #[error(transparent)]
    Model(#[from] DmlError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Average ranks, one-based; tied values share the mean of their positions.
pub fn mid_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && v[order[j]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64, AnalysisError> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(AnalysisError::ConstantInput);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with mid-ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64, AnalysisError> {
    if a.len() != b.len() {
        return Err(AnalysisError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 3 {
        return Err(AnalysisError::TooFewPoints(a.len()));
    }
    if let Some(v) = a.iter().chain(b).find(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite(*v));
    }
    pearson(&mid_ranks(a), &mid_ranks(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpearmanEntry {
    pub feature: String,
    /// `None` when the feature is constant over the sample.
    pub rho: Option<f64>,
}

/// Correlation of every feature with the CATEs.
pub fn spearman_table(x: ArrayView2<f64>, names: &[String], cates: &[f64]) -> Result<Vec<SpearmanEntry>, AnalysisError> {
    if names.len() != x.ncols() {
        return Err(AnalysisError::LengthMismatch(names.len(), x.ncols()));
    }
    names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let col = x.column(j).to_vec();
            let rho = match spearman(&col, cates) {
                Ok(r) => Some(r),
                Err(AnalysisError::ConstantInput) => None,
                Err(e) => return Err(e),
            };
            Ok(SpearmanEntry {
                feature: name.clone(),
                rho,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Equal-width histogram over `[min, max]`.
pub fn cate_histogram(cates: &[f64], bins: usize) -> Result<Histogram, AnalysisError> {
    if bins == 0 {
        return Err(AnalysisError::NoBins);
    }
    if cates.is_empty() {
        return Err(AnalysisError::EmptyData);
    }
    if let Some(v) = cates.iter().find(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite(*v));
    }
    let lo = cates.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = cates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut edges: Vec<f64> = (0..=bins).map(|k| lo + k as f64 * width).collect();
    edges[bins] = hi;
    let mut counts = vec![0; bins];
    for &v in cates {
        let mut k = if width > 0.0 {
            (((v - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        // the arithmetic guess can be off by one at an edge
        while k > 0 && v < edges[k] {
            k -= 1;
        }
        while k + 1 < bins && v >= edges[k + 1] {
            k += 1;
        }
        counts[k] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos - pos.floor());
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuitabilityRow {
    pub cell_id: String,
    pub centroid_lon: f64,
    pub centroid_lat: f64,
    pub cate: f64,
    pub treated: u8,
    pub treatment_raw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuitabilityMap {
    /// Sorted by `cell_id`.
    pub rows: Vec<SuitabilityRow>,
}

impl SuitabilityMap {
    /// One row per table row, joined to the grid by cell id.
    pub fn build(table: &CrossSectionTable, cates: &[f64]) -> Result<Self, AnalysisError> {
        if cates.len() != table.rows.len() {
            return Err(AnalysisError::LengthMismatch(cates.len(), table.rows.len()));
        }
        let cells: BTreeMap<&str, _> = table.cells.iter().map(|c| (c.cell_id.as_str(), c)).collect();
        let mut rows = Vec::with_capacity(cates.len());
        for (row, &cate) in table.rows.iter().zip(cates) {
            if !cate.is_finite() {
                return Err(AnalysisError::NonFinite(cate));
            }
            let cell = cells
                .get(row.cell_id.as_str())
                .ok_or_else(|| AnalysisError::MissingCell(row.cell_id.clone()))?;
            rows.push(SuitabilityRow {
                cell_id: row.cell_id.clone(),
                centroid_lon: cell.centroid_lon,
                centroid_lat: cell.centroid_lat,
                cate,
                treated: row.treatment.unwrap_or(0),
                treatment_raw: row.treatment_raw,
            });
        }
        rows.sort_by(|a, b| a.cell_id.cmp(&b.cell_id));
        Ok(Self { rows })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), AnalysisError> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_geojson(&self) -> Value {
        let features: Vec<Value> = self
            .rows
            .iter()
            .map(|r| {
                json!({
                    "type": "Feature",
                    "geometry": {"type": "Point", "coordinates": [r.centroid_lon, r.centroid_lat]},
                    "properties": {
                        "cell_id": r.cell_id,
                        "cate": r.cate,
                        "treated": r.treated,
                        "treatment_raw": r.treatment_raw,
                    },
                })
            })
            .collect();
        json!({"type": "FeatureCollection", "features": features})
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Writes `<stem>.csv` and `<stem>.geojson` into `dir`.
pub fn export_map(map: &SuitabilityMap, dir: &Path, stem: &str) -> Result<[PathBuf; 2], AnalysisError> {
    let csv_path = dir.join(format!("{stem}.csv"));
    let geo_path = dir.join(format!("{stem}.geojson"));
    map.write_csv(std::fs::File::create(&csv_path)?)?;
    let text = serde_json::to_string_pretty(&map.to_geojson()).expect("json value serializes");
    std::fs::write(&geo_path, text + "\n")?;
    Ok([csv_path, geo_path])
}

/// Long-format `(feature, value, cate)` rows for CATE-vs-feature plots.
pub fn write_feature_pairs<W: Write>(
    writer: W,
    x: ArrayView2<f64>,
    names: &[String],
    cates: &[f64],
) -> Result<(), AnalysisError> {
    if names.len() != x.ncols() {
        return Err(AnalysisError::LengthMismatch(names.len(), x.ncols()));
    }
    if cates.len() != x.nrows() {
        return Err(AnalysisError::LengthMismatch(cates.len(), x.nrows()));
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["feature", "value", "cate"])?;
    for (j, name) in names.iter().enumerate() {
        for (i, cate) in cates.iter().enumerate() {
            w.write_record([name.clone(), x[[i, j]].to_string(), cate.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    /// Additive change per named feature.
    pub deltas: BTreeMap<String, f64>,
    /// Flagged fraction above which the whole shift counts as extrapolation.
    #[serde(default = "default_extrapolation_threshold")]
    pub extrapolation_threshold: f64,
}

fn default_extrapolation_threshold() -> f64 {
    0.1
}

impl ShiftSpec {
    pub fn new(deltas: impl IntoIterator<Item = (String, f64)>) -> Self {
        Self {
            deltas: deltas.into_iter().collect(),
            extrapolation_threshold: default_extrapolation_threshold(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub baseline: Vec<f64>,
    pub shifted: Vec<f64>,
    /// Rows with some shifted feature outside the training range.
    pub flagged: Vec<bool>,
    pub flagged_fraction: f64,
    /// `flagged_fraction > extrapolation_threshold`.
    pub extrapolating: bool,
    pub mean_change: f64,
}

/// Effects at `x + delta` next to those at `x`.
pub fn counterfactual_shift(model: &CateModel, x: ArrayView2<f64>, shift: &ShiftSpec) -> Result<ShiftReport, AnalysisError> {
    let mut moves = Vec::with_capacity(shift.deltas.len());
    for (name, delta) in &shift.deltas {
        let j = model
            .feature_index(name)
            .map_err(|_| AnalysisError::UnknownFeature(name.clone()))?;
        if !delta.is_finite() {
            return Err(AnalysisError::NonFinite(*delta));
        }
        moves.push((j, *delta));
    }
    let baseline = model.predict_cate(x)?.to_vec();
    let mut moved: Array2<f64> = x.to_owned();
    for &(j, delta) in &moves {
        moved.column_mut(j).mapv_inplace(|v| v + delta);
    }
    let shifted = model.predict_cate(moved.view())?.to_vec();
    let flagged: Vec<bool> = (0..moved.nrows())
        .map(|i| {
            moves.iter().any(|&(j, _)| {
                let (lo, hi) = model.feature_ranges[j];
                let v = moved[[i, j]];
                v < lo || v > hi
            })
        })
        .collect();
    let n = baseline.len().max(1) as f64;
    let flagged_fraction = flagged.iter().filter(|f| **f).count() as f64 / n;
    let mean_change = shifted.iter().zip(&baseline).map(|(s, b)| s - b).sum::<f64>() / n;
    Ok(ShiftReport {
        baseline,
        shifted,
        flagged,
        flagged_fraction,
        extrapolating: flagged_fraction > shift.extrapolation_threshold,
        mean_change,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CateSummary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    /// Keys `q05`, `q25`, `q50`, `q75`, `q95`.
    pub quantiles: BTreeMap<String, f64>,
}

pub fn summarize_cates(cates: &[f64]) -> Result<CateSummary, AnalysisError> {
    if cates.is_empty() {
        return Err(AnalysisError::EmptyData);
    }
    let mut sorted = cates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = cates.len() as f64;
    let mean = cates.iter().sum::<f64>() / n;
    let std = (cates.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n).sqrt();
    let quantiles = [5, 25, 50, 75, 95]
        .iter()
        .map(|&q| (format!("q{q:02}"), quantile_sorted(&sorted, q as f64 / 100.0)))
        .collect();
    Ok(CateSummary {
        n: cates.len(),
        mean,
        std,
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        quantiles,
    })
}

/// Run-level results in one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub treatment: String,
    pub n_units: usize,
    pub ate: f64,
    pub ate_se: f64,
    pub ate_ci: (f64, f64),
    pub cates: CateSummary,
    pub histogram: Histogram,
    pub spearman: Vec<SpearmanEntry>,
}

impl RunSummary {
    pub fn build(
        treatment: &str,
        model: &CateModel,
        x: ArrayView2<f64>,
        cates: &[f64],
        bins: usize,
    ) -> Result<Self, AnalysisError> {
        Ok(Self {
            treatment: treatment.to_string(),
            n_units: cates.len(),
            ate: model.ate,
            ate_se: model.ate_se,
            ate_ci: model.ate_ci,
            cates: summarize_cates(cates)?,
            histogram: cate_histogram(cates, bins)?,
            spearman: spearman_table(x, &model.feature_names, cates)?,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}
