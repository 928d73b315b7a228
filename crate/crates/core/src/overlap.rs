//! Propensity scores and overlap trimming.

use std::io::Write;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learners::{cross_val_predict, kfold_assignments, BoostingParams, LearnError, LearnerSpec, Task};

pub const DEFAULT_LOW: f64 = 0.2;
pub const DEFAULT_HIGH: f64 = 0.8;
/// Reported scores are clipped to `[SCORE_CLIP, 1 - SCORE_CLIP]`.
pub const SCORE_CLIP: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum OverlapError {
    #[error("propensity model: {0}")]
    Learn(#[from] LearnError),
    #[error("treatment has a single class")]
    SingleClass,
    #[error("no unit has a propensity strictly inside ({low}, {high})")]
    EmptyResult { low: f64, high: f64 },
    #[error("trim bounds must satisfy 0 <= low < high <= 1, got ({low}, {high})")]
    InvalidBounds { low: f64, high: f64 },
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensitySpec {
    pub model: LearnerSpec,
    pub k_folds: usize,
    pub seed: u64,
}

impl Default for PropensitySpec {
    fn default() -> Self {
        Self {
            model: LearnerSpec::GradientBoosting(BoostingParams::default()),
            k_folds: 3,
            seed: 0,
        }
    }
}

impl PropensitySpec {
    pub fn describe(&self) -> String {
        format!("{} classifier, {}-fold out-of-fold", self.model.family(), self.k_folds)
    }
}

/// Out-of-fold probability of `T = 1`, clipped away from 0 and 1.
pub fn estimate_propensity(x: ArrayView2<f64>, t: &[f64], spec: &PropensitySpec) -> Result<Vec<f64>, OverlapError> {
    if spec.k_folds < 2 {
        return Err(OverlapError::InvalidArgument("k_folds must be at least 2".into()));
    }
    let folds = kfold_assignments(t.len(), spec.k_folds, spec.seed);
    estimate_propensity_with_folds(x, t, &spec.model, &folds)
}

/// Same as [`estimate_propensity`] with caller-chosen folds.
pub fn estimate_propensity_with_folds(
    x: ArrayView2<f64>,
    t: &[f64],
    model: &LearnerSpec,
    folds: &[usize],
) -> Result<Vec<f64>, OverlapError> {
    if folds.len() != t.len() {
        return Err(OverlapError::InvalidArgument("one fold id per unit required".into()));
    }
    let ones = t.iter().filter(|v| **v == 1.0).count();
    if ones == 0 || ones == t.len() {
        return Err(OverlapError::SingleClass);
    }
    let scores = cross_val_predict(model, x, t, Task::Classification, folds, true).map_err(|e| match e {
        LearnError::SingleClass => OverlapError::SingleClass,
        other => OverlapError::Learn(other),
    })?;
    Ok(scores.into_iter().map(|p| p.clamp(SCORE_CLIP, 1.0 - SCORE_CLIP)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityReport {
    pub scores: Vec<f64>,
    pub kept: Vec<bool>,
    pub low: f64,
    pub high: f64,
    pub estimator: String,
}

impl PropensityReport {
    pub fn n_kept(&self) -> usize {
        self.kept.iter().filter(|k| **k).count()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.kept.iter().enumerate().filter(|(_, k)| **k).map(|(i, _)| i).collect()
    }

    /// Delimited text with columns `cell_id,score,kept`.
    pub fn write_csv<W: Write>(&self, cell_ids: &[String], out: W) -> Result<(), OverlapError> {
        if cell_ids.len() != self.scores.len() {
            return Err(OverlapError::InvalidArgument("one cell id per score required".into()));
        }
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| OverlapError::Io(e.into());
        w.write_record(["cell_id", "score", "kept"]).map_err(io)?;
        for ((id, s), k) in cell_ids.iter().zip(&self.scores).zip(&self.kept) {
            w.write_record([id.as_str(), &s.to_string(), if *k { "1" } else { "0" }]).map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Keeps units with `low < score < high`.
pub fn trim_overlap(scores: &[f64], low: f64, high: f64) -> Result<(Vec<usize>, PropensityReport), OverlapError> {
    trim_with_estimator(scores, low, high, String::new())
}

pub fn trim_with_estimator(
    scores: &[f64],
    low: f64,
    high: f64,
    estimator: String,
) -> Result<(Vec<usize>, PropensityReport), OverlapError> {
    if !(0.0 <= low && low < high && high <= 1.0) {
        return Err(OverlapError::InvalidBounds { low, high });
    }
    let kept: Vec<bool> = scores.iter().map(|s| low < *s && *s < high).collect();
    let report = PropensityReport {
        scores: scores.to_vec(),
        kept,
        low,
        high,
        estimator,
    };
    let idx = report.kept_indices();
    if idx.is_empty() {
        return Err(OverlapError::EmptyResult { low, high });
    }
    Ok((idx, report))
}
