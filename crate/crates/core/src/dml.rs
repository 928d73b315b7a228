//! Double machine learning for the partially linear model
//! `Y = theta(X) T + g(X) + e`, `T = f(X) + eta`.
//!
//! Nuisance models are cross-fitted to produce residuals `Y~`, `T~`; the
//! final stage regresses `Y~` on `theta(X) T~`, either with a linear
//! `theta` or with an honest causal forest.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::causal_forest::{tune_causal_forest, CausalForest, CausalForestError, CausalForestSpec, TuningResult};
use crate::data_model::{CrossSectionTable, DataError};
use crate::learners::metrics::classify;
use crate::learners::{
    cross_val_predict, default_searches, f1_score, kfold_assignments, r2_score, select_model, train_test_split,
    GridSearchResult, LearnError, LearnerSpec, MaxAbsScaler, SearchSpec, Task,
};
use crate::linalg::ols_hc0;

pub const Z_95: f64 = 1.96;
pub const DEFAULT_MIN_UNITS: usize = 200;
/// `T~` with variance below this cannot identify an effect.
pub const MIN_TREATMENT_RESIDUAL_VARIANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DmlError {
    #[error("treatment has a single class")]
    SingleClass,
    #[error("treatment residuals are degenerate (variance {0:e})")]
    DegenerateResiduals(f64),
    #[error("{n} units, at least {min} required")]
    TooFewUnits { n: usize, min: usize },
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("first stage: {0}")]
    Learn(LearnError),
    #[error("causal forest: {0}")]
    Forest(CausalForestError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl From<LearnError> for DmlError {
    fn from(e: LearnError) -> Self {
        match e {
            LearnError::SingleClass => DmlError::SingleClass,
            other => DmlError::Learn(other),
        }
    }
}

impl From<CausalForestError> for DmlError {
    fn from(e: CausalForestError) -> Self {
        match e {
            CausalForestError::DegenerateResiduals => DmlError::DegenerateResiduals(0.0),
            CausalForestError::UnknownFeature(f) => DmlError::UnknownFeature(f),
            CausalForestError::DimensionMismatch { expected, got } => DmlError::DimensionMismatch { expected, got },
            other => DmlError::Forest(other),
        }
    }
}

/// A nuisance learner: fixed, or chosen by cross-validated grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "spec")]
pub enum ModelChoice {
    Fixed(LearnerSpec),
    Search(Vec<SearchSpec>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NuisanceSpec {
    /// `g`: Y ~ X.
    pub outcome_model: ModelChoice,
    /// `f`: T ~ X, a classifier.
    pub treatment_model: ModelChoice,
    pub k_folds: usize,
    /// Hold-out share for the reported first-stage scores.
    pub eval_split: f64,
}

impl Default for NuisanceSpec {
    fn default() -> Self {
        Self {
            outcome_model: ModelChoice::Search(default_searches(Task::Regression, 0)),
            treatment_model: ModelChoice::Search(default_searches(Task::Classification, 0)),
            k_folds: 3,
            eval_split: 0.2,
        }
    }
}

impl NuisanceSpec {
    pub fn fixed(outcome: LearnerSpec, treatment: LearnerSpec) -> Self {
        Self {
            outcome_model: ModelChoice::Fixed(outcome),
            treatment_model: ModelChoice::Fixed(treatment),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), DmlError> {
        if self.k_folds < 2 {
            return Err(DmlError::InvalidSpec("k_folds must be at least 2".into()));
        }
        if !(self.eval_split > 0.0 && self.eval_split <= 0.5) {
            return Err(DmlError::InvalidSpec("eval_split must lie in (0, 0.5]".into()));
        }
        for choice in [&self.outcome_model, &self.treatment_model] {
            if let ModelChoice::Search(s) = choice {
                if s.is_empty() {
                    return Err(DmlError::InvalidSpec("empty model search".into()));
                }
                for spec in s {
                    if spec.grid.values().any(|v| v.is_empty()) {
                        return Err(DmlError::InvalidSpec("empty hyperparameter grid".into()));
                    }
                    if spec.k_folds < 2 {
                        return Err(DmlError::InvalidSpec("search k_folds must be at least 2".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstStageReport {
    pub outcome_model: LearnerSpec,
    pub treatment_model: LearnerSpec,
    pub outcome_train_r2: f64,
    pub outcome_test_r2: f64,
    pub treatment_train_f1: f64,
    pub treatment_test_f1: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outcome_search: Vec<GridSearchResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub treatment_search: Vec<GridSearchResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualizedData {
    /// `Y - g^(X)`, out of fold.
    pub y_res: Vec<f64>,
    /// `T - p^(X)`, out of fold.
    pub t_res: Vec<f64>,
    pub y_hat: Vec<f64>,
    pub t_hat: Vec<f64>,
    pub fold_id: Vec<usize>,
    pub report: FirstStageReport,
}

impl ResidualizedData {
    pub fn len(&self) -> usize {
        self.y_res.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_res.is_empty()
    }
}

fn subset(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}

fn scaled_split(x: ArrayView2<f64>, train: &[usize], test: &[usize]) -> (Array2<f64>, Array2<f64>) {
    let (xt, xv) = (x.select(Axis(0), train), x.select(Axis(0), test));
    let s = MaxAbsScaler::fit(xt.view());
    (s.transform(xt.view()), s.transform(xv.view()))
}

fn score_f1(truth: &[f64], prob: &[f64]) -> f64 {
    // no positives anywhere scores 0
    f1_score(truth, &classify(prob)).unwrap_or(0.0)
}

/// Selects (if searching) and evaluates one nuisance model on the hold-out
/// split; returns the spec used for cross-fitting.
fn first_stage_model(
    choice: &ModelChoice,
    xt: ArrayView2<f64>,
    xv: ArrayView2<f64>,
    yt: &[f64],
    yv: &[f64],
    task: Task,
    seed: u64,
) -> Result<(LearnerSpec, f64, f64, Vec<GridSearchResult>), DmlError> {
    let (spec, model, searches) = match choice {
        ModelChoice::Fixed(s) => {
            let s = s.seeded(seed);
            let m = s.fit(xt, yt, task)?;
            (s, m, Vec::new())
        }
        ModelChoice::Search(s) => {
            let s: Vec<SearchSpec> = s
                .iter()
                .map(|sp| SearchSpec {
                    base: sp.base.seeded(seed),
                    seed,
                    ..sp.clone()
                })
                .collect();
            let (m, results) = select_model(&s, xt, yt, task)?;
            let mut best = 0;
            for (i, r) in results.iter().enumerate() {
                if r.best_score > results[best].best_score {
                    best = i;
                }
            }
            (results[best].best_spec.clone(), m, results)
        }
    };
    let (train_score, test_score) = match task {
        Task::Regression => (
            r2_score(yt, model.predict(xt).as_slice().expect("contiguous"))?,
            r2_score(yv, model.predict(xv).as_slice().expect("contiguous"))?,
        ),
        Task::Classification => (
            score_f1(yt, model.predict(xt).as_slice().expect("contiguous")),
            score_f1(yv, model.predict(xv).as_slice().expect("contiguous")),
        ),
    };
    Ok((spec, train_score, test_score, searches))
}

/// Cross-fitted residuals of `y` and binary `t` on `x`.
///
/// Model selection and the reported train/test scores use one hold-out
/// split; the residuals come from `k_folds` cross-fitting over all units
/// with the selected models.
pub fn crossfit_residualize(
    x: ArrayView2<f64>,
    y: &[f64],
    t: &[f64],
    spec: &NuisanceSpec,
    seed: u64,
) -> Result<ResidualizedData, DmlError> {
    spec.validate()?;
    let n = y.len();
    if x.nrows() != n || t.len() != n {
        return Err(DmlError::Learn(LearnError::LengthMismatch { rows: x.nrows(), targets: n }));
    }
    let ones = t.iter().filter(|v| **v == 1.0).count();
    if !t.iter().all(|v| *v == 0.0 || *v == 1.0) {
        return Err(DmlError::Learn(LearnError::NotBinary));
    }
    if ones == 0 || ones == n {
        return Err(DmlError::SingleClass);
    }

    let (train, test) = train_test_split(n, spec.eval_split, seed);
    let (xt, xv) = scaled_split(x, &train, &test);
    let (outcome_model, outcome_train_r2, outcome_test_r2, outcome_search) = first_stage_model(
        &spec.outcome_model,
        xt.view(),
        xv.view(),
        &subset(y, &train),
        &subset(y, &test),
        Task::Regression,
        seed,
    )?;
    let (treatment_model, treatment_train_f1, treatment_test_f1, treatment_search) = first_stage_model(
        &spec.treatment_model,
        xt.view(),
        xv.view(),
        &subset(t, &train),
        &subset(t, &test),
        Task::Classification,
        seed,
    )?;

    let fold_id = kfold_assignments(n, spec.k_folds, seed);
    let y_hat = cross_val_predict(&outcome_model, x, y, Task::Regression, &fold_id, true)?;
    let t_hat = cross_val_predict(&treatment_model, x, t, Task::Classification, &fold_id, true)?;
    let y_res: Vec<f64> = y.iter().zip(&y_hat).map(|(a, b)| a - b).collect();
    let t_res: Vec<f64> = t.iter().zip(&t_hat).map(|(a, b)| a - b).collect();

    let mean = t_res.iter().sum::<f64>() / n as f64;
    let var = t_res.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    if !(var >= MIN_TREATMENT_RESIDUAL_VARIANCE) {
        return Err(DmlError::DegenerateResiduals(var));
    }
    Ok(ResidualizedData {
        y_res,
        t_res,
        y_hat,
        t_hat,
        fold_id,
        report: FirstStageReport {
            outcome_model,
            treatment_model,
            outcome_train_r2,
            outcome_test_r2,
            treatment_train_f1,
            treatment_test_f1,
            outcome_search,
            treatment_search,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LinearBasis {
    /// `theta(x) = b0`.
    #[default]
    InterceptOnly,
    /// `theta(x) = b0 + b . x`.
    LinearInX,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearCate {
    pub basis: LinearBasis,
    /// Intercept first, then one coefficient per feature for `LinearInX`.
    pub coefficients: Vec<f64>,
    /// Robust covariance of `coefficients`, row-major.
    pub covariance: Vec<Vec<f64>>,
}

impl LinearCate {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        match self.basis {
            LinearBasis::InterceptOnly => self.coefficients[0],
            LinearBasis::LinearInX => {
                self.coefficients[0] + row.iter().zip(&self.coefficients[1..]).map(|(a, b)| a * b).sum::<f64>()
            }
        }
    }

    /// Average effect over rows of `x` and its robust standard error.
    pub fn average_effect(&self, x: ArrayView2<f64>) -> (f64, f64) {
        let phi: Vec<f64> = match self.basis {
            LinearBasis::InterceptOnly => vec![1.0],
            LinearBasis::LinearInX => std::iter::once(1.0)
                .chain(x.mean_axis(Axis(0)).expect("non-empty").iter().copied())
                .collect(),
        };
        let ate: f64 = phi.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum();
        let mut var = 0.0;
        for (a, pa) in phi.iter().enumerate() {
            for (b, pb) in phi.iter().enumerate() {
                var += pa * self.covariance[a][b] * pb;
            }
        }
        (ate, var.max(0.0).sqrt())
    }
}

/// `sum T~ Y~ / sum T~^2` with its HC0 standard error.
pub fn intercept_only_effect(y_res: &[f64], t_res: &[f64]) -> Result<(f64, f64), DmlError> {
    let stt: f64 = t_res.iter().map(|t| t * t).sum();
    if !(stt > 0.0) {
        return Err(DmlError::DegenerateResiduals(0.0));
    }
    let sty: f64 = t_res.iter().zip(y_res).map(|(t, y)| t * y).sum();
    let theta = sty / stt;
    let meat: f64 = t_res.iter().zip(y_res).map(|(t, y)| (t * (y - theta * t)).powi(2)).sum();
    Ok((theta, meat.sqrt() / stt))
}

/// Least squares of `Y~` on `T~ phi(X)`.
pub fn fit_linear_cate(y_res: &[f64], t_res: &[f64], x: ArrayView2<f64>, basis: LinearBasis) -> Result<LinearCate, DmlError> {
    let n = y_res.len();
    if t_res.len() != n || x.nrows() != n {
        return Err(DmlError::Learn(LearnError::LengthMismatch { rows: x.nrows(), targets: n }));
    }
    if n == 0 {
        return Err(DmlError::Learn(LearnError::EmptyData));
    }
    let mean = t_res.iter().sum::<f64>() / n as f64;
    let var = t_res.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let stt: f64 = t_res.iter().map(|t| t * t).sum();
    if !(stt > 0.0) {
        return Err(DmlError::DegenerateResiduals(var));
    }
    match basis {
        LinearBasis::InterceptOnly => {
            let (theta, se) = intercept_only_effect(y_res, t_res)?;
            Ok(LinearCate {
                basis,
                coefficients: vec![theta],
                covariance: vec![vec![se * se]],
            })
        }
        LinearBasis::LinearInX => {
            let p = x.ncols() + 1;
            let z = DMatrix::from_fn(n, p, |i, j| t_res[i] * if j == 0 { 1.0 } else { x[[i, j - 1]] });
            let (beta, cov) = ols_hc0(&z, &DVector::from_column_slice(y_res)).ok_or(DmlError::DegenerateResiduals(var))?;
            Ok(LinearCate {
                basis,
                coefficients: beta.iter().copied().collect(),
                covariance: (0..p).map(|a| (0..p).map(|b| cov[(a, b)]).collect()).collect(),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FinalStage {
    Linear {
        #[serde(default)]
        basis: LinearBasis,
    },
    CausalForest {
        #[serde(default)]
        spec: CausalForestSpec,
    },
    /// Causal forest whose spec is picked from `candidates` by held-out
    /// residual loss.
    TunedCausalForest {
        candidates: Vec<CausalForestSpec>,
        #[serde(default = "default_holdout")]
        holdout_fraction: f64,
    },
}

fn default_holdout() -> f64 {
    0.2
}

impl Default for FinalStage {
    fn default() -> Self {
        FinalStage::CausalForest {
            spec: CausalForestSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CateKind {
    Linear,
    CausalForest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "estimator", content = "fit")]
pub enum CateEstimator {
    Linear(LinearCate),
    CausalForest(CausalForest),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CateModel {
    pub kind: CateKind,
    pub feature_names: Vec<String>,
    /// Observed `[min, max]` of each feature in the estimation sample.
    pub feature_ranges: Vec<(f64, f64)>,
    pub estimator: CateEstimator,
    pub ate: f64,
    pub ate_se: f64,
    pub ate_ci: (f64, f64),
    pub n_units: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_stage: Option<FirstStageReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tuning: Option<TuningResult>,
}

impl CateModel {
    /// CATE for each row of `x`, whose columns follow `feature_names`.
    pub fn predict_cate(&self, x: ArrayView2<f64>) -> Result<Array1<f64>, DmlError> {
        if x.ncols() != self.feature_names.len() {
            return Err(DmlError::DimensionMismatch {
                expected: self.feature_names.len(),
                got: x.ncols(),
            });
        }
        match &self.estimator {
            CateEstimator::Linear(l) => Ok(x.rows().into_iter().map(|r| l.predict_row(&r.to_vec())).collect()),
            CateEstimator::CausalForest(f) => Ok(f.predict(x)?),
        }
    }

    /// Like [`predict_cate`](Self::predict_cate) with columns named by
    /// `names`, reordered to the model's features.
    pub fn predict_named(&self, names: &[String], x: ArrayView2<f64>) -> Result<Array1<f64>, DmlError> {
        if names.len() != x.ncols() {
            return Err(DmlError::DimensionMismatch {
                expected: names.len(),
                got: x.ncols(),
            });
        }
        if let Some(extra) = names.iter().find(|n| !self.feature_names.contains(n)) {
            return Err(DmlError::UnknownFeature(extra.clone()));
        }
        let order = self
            .feature_names
            .iter()
            .map(|f| {
                names
                    .iter()
                    .position(|n| n == f)
                    .ok_or_else(|| DmlError::UnknownFeature(f.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.predict_cate(x.select(Axis(1), &order).view())
    }

    pub fn feature_index(&self, name: &str) -> Result<usize, DmlError> {
        self.feature_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| DmlError::UnknownFeature(name.to_string()))
    }

    pub fn to_json(&self) -> Result<String, DmlError> {
        Ok(crate::learners::to_versioned_json(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, DmlError> {
        Ok(crate::learners::from_versioned_json(text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmlConfig {
    pub nuisance: NuisanceSpec,
    pub final_stage: FinalStage,
    pub seed: u64,
    pub min_units: usize,
}

impl Default for DmlConfig {
    fn default() -> Self {
        Self {
            nuisance: NuisanceSpec::default(),
            final_stage: FinalStage::default(),
            seed: 0,
            min_units: DEFAULT_MIN_UNITS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DmlFit {
    pub model: CateModel,
    pub residuals: ResidualizedData,
    /// In-sample CATE of every unit.
    pub cates: Vec<f64>,
}

/// Cross-fits the nuisances, then the final stage. For a forest final
/// stage the ATE is the mean in-sample CATE and its interval is built from
/// the intercept-only standard error on the same residuals.
pub fn fit_dml(
    x: ArrayView2<f64>,
    feature_names: &[String],
    y: &[f64],
    t: &[f64],
    config: &DmlConfig,
) -> Result<DmlFit, DmlError> {
    let n = y.len();
    if n < config.min_units {
        return Err(DmlError::TooFewUnits { n, min: config.min_units });
    }
    if feature_names.len() != x.ncols() {
        return Err(DmlError::DimensionMismatch {
            expected: x.ncols(),
            got: feature_names.len(),
        });
    }
    let residuals = crossfit_residualize(x, y, t, &config.nuisance, config.seed)?;
    let (y_res, t_res) = (&residuals.y_res, &residuals.t_res);
    let feature_ranges = x
        .columns()
        .into_iter()
        .map(|c| c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v))))
        .collect();

    let (_, se_reference) = intercept_only_effect(y_res, t_res)?;
    let (kind, estimator, tuning) = match &config.final_stage {
        FinalStage::Linear { basis } => (
            CateKind::Linear,
            CateEstimator::Linear(fit_linear_cate(y_res, t_res, x, *basis)?),
            None,
        ),
        FinalStage::CausalForest { spec } => {
            let spec = CausalForestSpec {
                seed: config.seed,
                ..spec.clone()
            };
            (
                CateKind::CausalForest,
                CateEstimator::CausalForest(CausalForest::fit(x, y_res, t_res, &spec)?),
                None,
            )
        }
        FinalStage::TunedCausalForest {
            candidates,
            holdout_fraction,
        } => {
            let candidates: Vec<CausalForestSpec> = candidates
                .iter()
                .map(|c| CausalForestSpec {
                    seed: config.seed,
                    ..c.clone()
                })
                .collect();
            let tuned = tune_causal_forest(x, y_res, t_res, &candidates, *holdout_fraction, config.seed)?;
            let forest = CausalForest::fit(x, y_res, t_res, &tuned.best_spec)?;
            (CateKind::CausalForest, CateEstimator::CausalForest(forest), Some(tuned))
        }
    };
    let mut model = CateModel {
        kind,
        feature_names: feature_names.to_vec(),
        feature_ranges,
        estimator,
        ate: 0.0,
        ate_se: 0.0,
        ate_ci: (0.0, 0.0),
        n_units: n,
        first_stage: Some(residuals.report.clone()),
        tuning,
    };
    let cates = model.predict_cate(x)?.to_vec();
    let (ate, se) = match &model.estimator {
        CateEstimator::Linear(l) => l.average_effect(x),
        CateEstimator::CausalForest(_) => (cates.iter().sum::<f64>() / n as f64, se_reference),
    };
    model.ate = ate;
    model.ate_se = se;
    model.ate_ci = (ate - Z_95 * se, ate + Z_95 * se);
    Ok(DmlFit {
        model,
        residuals,
        cates,
    })
}

/// [`fit_dml`] on a cross-section table with a binarized treatment.
pub fn fit_dml_table(table: &CrossSectionTable, config: &DmlConfig) -> Result<DmlFit, DmlError> {
    let x = table.feature_matrix();
    let y = table.outcomes();
    let t = table.treatments()?;
    fit_dml(
        x.view(),
        &table.feature_names,
        y.as_slice().expect("contiguous"),
        t.as_slice().expect("contiguous"),
        config,
    )
}
