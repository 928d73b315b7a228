//! Honest causal forest on DML residuals and the shallow tree used to
//! summarize its effect estimates.

mod interpret;
pub mod tree;

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learners::{train_test_split, LearnError, MaxFeatures};

pub use interpret::{interpret_tree, InterpretationNode, InterpretationTree, LeafSummary};
pub use tree::{CausalNode, CausalTree, TreeSettings, MIN_TREATMENT_WEIGHT};

#[derive(Debug, Error)]
pub enum CausalForestError {
    #[error("treatment residuals carry no variation")]
    DegenerateResiduals,
    #[error("{n} units is too few for min_samples_leaf {min_leaf} (need at least {need})")]
    TooFewUnits { n: usize, min_leaf: usize, need: usize },
    #[error("invalid forest spec: {0}")]
    InvalidSpec(String),
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no data")]
    EmptyData,
    #[error(transparent)]
    Learn(#[from] LearnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CausalForestSpec {
    pub n_trees: usize,
    /// Share of units drawn, without replacement, for each tree.
    pub subsample_fraction: f64,
    /// Share of a tree's subsample used to place splits; the rest fills leaves.
    pub honesty_fraction: f64,
    /// Applied to both the structure and the estimation half.
    pub min_samples_leaf: usize,
    pub max_depth: Option<usize>,
    pub max_features: MaxFeatures,
    pub seed: u64,
}

impl Default for CausalForestSpec {
    fn default() -> Self {
        Self {
            n_trees: 1000,
            subsample_fraction: 0.45,
            honesty_fraction: 0.5,
            min_samples_leaf: 5,
            max_depth: None,
            max_features: MaxFeatures::All,
            seed: 0,
        }
    }
}

impl CausalForestSpec {
    pub fn validate(&self) -> Result<(), CausalForestError> {
        let bad = |m: &str| Err(CausalForestError::InvalidSpec(m.to_string()));
        if self.n_trees == 0 {
            return bad("n_trees must be at least 1");
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return bad("subsample_fraction must lie in (0, 1]");
        }
        if !(self.honesty_fraction > 0.0 && self.honesty_fraction < 1.0) {
            return bad("honesty_fraction must lie in (0, 1)");
        }
        if self.min_samples_leaf == 0 {
            return bad("min_samples_leaf must be at least 1");
        }
        Ok(())
    }

    fn settings(&self) -> TreeSettings {
        TreeSettings {
            min_samples_leaf: self.min_samples_leaf,
            max_depth: self.max_depth,
            max_features: self.max_features,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalForest {
    pub trees: Vec<CausalTree>,
    pub spec: CausalForestSpec,
    pub n_features: usize,
}

fn check_residuals(x: ArrayView2<f64>, y_res: &[f64], t_res: &[f64]) -> Result<(), CausalForestError> {
    if y_res.is_empty() {
        return Err(CausalForestError::EmptyData);
    }
    if x.nrows() != y_res.len() || t_res.len() != y_res.len() {
        return Err(CausalForestError::Learn(LearnError::LengthMismatch {
            rows: x.nrows(),
            targets: y_res.len(),
        }));
    }
    if !(x.iter().chain(y_res).chain(t_res).all(|v| v.is_finite())) {
        return Err(CausalForestError::Learn(LearnError::NonFinite("residuals or features")));
    }
    Ok(())
}

impl CausalForest {
    /// Fits on features `x` and residuals `Y~`, `T~`.
    pub fn fit(x: ArrayView2<f64>, y_res: &[f64], t_res: &[f64], spec: &CausalForestSpec) -> Result<Self, CausalForestError> {
        spec.validate()?;
        check_residuals(x, y_res, t_res)?;
        let n = y_res.len();
        let need = 4 * spec.min_samples_leaf;
        if n < need {
            return Err(CausalForestError::TooFewUnits {
                n,
                min_leaf: spec.min_samples_leaf,
                need,
            });
        }
        let tt: Vec<f64> = t_res.iter().map(|t| t * t).collect();
        if tt.iter().sum::<f64>() < MIN_TREATMENT_WEIGHT {
            return Err(CausalForestError::DegenerateResiduals);
        }
        let ty: Vec<f64> = t_res.iter().zip(y_res).map(|(t, y)| t * y).collect();
        let n_sub = ((n as f64 * spec.subsample_fraction).round() as usize).clamp(2, n);
        let n_structure = ((n_sub as f64 * spec.honesty_fraction).round() as usize).clamp(1, n_sub - 1);
        let settings = spec.settings();

        let trees = (0..spec.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = crate::learners::forest::tree_rng(spec.seed, t);
                let drawn = sample(&mut rng, n, n_sub).into_vec();
                let structure: Vec<u32> = drawn[..n_structure].iter().map(|&i| i as u32).collect();
                let estimation: Vec<u32> = drawn[n_structure..].iter().map(|&i| i as u32).collect();
                CausalTree::fit(x, &ty, &tt, structure, estimation, &settings, &mut rng)
            })
            .collect::<Vec<_>>();
        let trees = trees
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or(CausalForestError::DegenerateResiduals)?;
        Ok(Self {
            trees,
            spec: spec.clone(),
            n_features: x.ncols(),
        })
    }

    /// Mean of the trees' leaf effects for one row. Leaf values are summed
    /// in sorted order, so the result does not depend on tree order.
    pub fn predict_row(&self, row: ArrayView1<f64>) -> f64 {
        let mut values: Vec<f64> = self.trees.iter().map(|t| t.predict_row(row)).collect();
        values.sort_by(f64::total_cmp);
        values.iter().sum::<f64>() / values.len() as f64
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array1<f64>, CausalForestError> {
        if x.ncols() != self.n_features {
            return Err(CausalForestError::DimensionMismatch {
                expected: self.n_features,
                got: x.ncols(),
            });
        }
        let out: Vec<f64> = (0..x.nrows())
            .into_par_iter()
            .map(|i| self.predict_row(x.row(i)))
            .collect();
        Ok(Array1::from(out))
    }

    /// Largest absolute leaf effect across all trees.
    pub fn max_abs_leaf(&self) -> f64 {
        self.trees
            .iter()
            .flat_map(|t| t.nodes.iter())
            .filter_map(|n| match n {
                CausalNode::Leaf { tau_hat, .. } => Some(tau_hat.abs()),
                CausalNode::Split { .. } => None,
            })
            .fold(0.0, f64::max)
    }
}

/// Residual objective `sum (Y~ - theta(x) T~)^2`.
pub fn residual_loss(theta: &[f64], y_res: &[f64], t_res: &[f64]) -> f64 {
    theta
        .iter()
        .zip(y_res)
        .zip(t_res)
        .map(|((th, y), t)| (y - th * t).powi(2))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningResult {
    pub best_index: usize,
    pub holdout_losses: Vec<f64>,
    pub best_spec: CausalForestSpec,
}

/// Picks the candidate with the lowest held-out residual objective; the
/// earliest candidate wins ties. The caller refits the winner on all rows.
pub fn tune_causal_forest(
    x: ArrayView2<f64>,
    y_res: &[f64],
    t_res: &[f64],
    candidates: &[CausalForestSpec],
    holdout_fraction: f64,
    seed: u64,
) -> Result<TuningResult, CausalForestError> {
    if candidates.is_empty() {
        return Err(CausalForestError::InvalidSpec("no candidate specs".into()));
    }
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(CausalForestError::InvalidSpec("holdout_fraction must lie in (0, 1)".into()));
    }
    check_residuals(x, y_res, t_res)?;
    let (train, test) = train_test_split(y_res.len(), holdout_fraction, seed);
    let pick = |idx: &[usize], v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
    let (xt, xv) = (x.select(Axis(0), &train), x.select(Axis(0), &test));
    let mut losses = Vec::with_capacity(candidates.len());
    for spec in candidates {
        let forest = CausalForest::fit(xt.view(), &pick(&train, y_res), &pick(&train, t_res), spec)?;
        let theta = forest.predict(xv.view())?;
        losses.push(residual_loss(theta.as_slice().expect("contiguous"), &pick(&test, y_res), &pick(&test, t_res)));
    }
    let mut best = 0;
    for (i, l) in losses.iter().enumerate() {
        if *l < losses[best] {
            best = i;
        }
    }
    Ok(TuningResult {
        best_index: best,
        best_spec: candidates[best].clone(),
        holdout_losses: losses,
    })
}
