//! Supervised learners used for the nuisance models, plus model selection.

pub mod boosting;
pub mod cv;
pub mod forest;
pub mod lasso;
pub mod logistic;
pub mod metrics;
pub mod scaler;
pub mod tree;

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use boosting::{BoostingLoss, BoostingParams, GradientBoostingModel};
pub use cv::{cross_val_predict, kfold_assignments, select_model, train_test_split, GridSearchResult, Scoring, SearchSpec};
pub use forest::{ForestParams, RandomForestRegressor};
pub use lasso::LassoModel;
pub use logistic::LogisticRegressionModel;
pub use metrics::{f1_score, r2_score};
pub use scaler::MaxAbsScaler;
pub use tree::{MaxFeatures, RegressionTree, TreeParams};

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("no data to fit or score")]
    EmptyData,
    #[error("feature matrix has {rows} rows but target has {targets} values")]
    LengthMismatch { rows: usize, targets: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("binary target contains a single class")]
    SingleClass,
    #[error("target must be 0/1")]
    NotBinary,
    #[error("did not converge within {0} iterations")]
    NonConvergence(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unknown parameter `{param}` for {family}")]
    UnknownParameter { family: &'static str, param: String },
    #[error("target has zero variance")]
    ZeroVariance,
    #[error("F1 undefined: no predicted or actual positives")]
    UndefinedF1,
    #[error("{family} cannot be used for {task:?}")]
    UnsupportedTask { family: &'static str, task: Task },
    #[error("model format: {0}")]
    Format(String),
}

pub(crate) fn check_xy(x: ArrayView2<f64>, y: &[f64]) -> Result<(), LearnError> {
    if y.is_empty() || x.nrows() == 0 {
        return Err(LearnError::EmptyData);
    }
    if x.nrows() != y.len() {
        return Err(LearnError::LengthMismatch {
            rows: x.nrows(),
            targets: y.len(),
        });
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(LearnError::NonFinite("features"));
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(LearnError::NonFinite("target"));
    }
    Ok(())
}

pub(crate) fn check_binary(t: &[f64]) -> Result<(), LearnError> {
    if !t.iter().all(|v| *v == 0.0 || *v == 1.0) {
        return Err(LearnError::NotBinary);
    }
    let ones = t.iter().filter(|v| **v == 1.0).count();
    if ones == 0 || ones == t.len() {
        return Err(LearnError::SingleClass);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Continuous target; predictions are values.
    Regression,
    /// 0/1 target; predictions are probabilities of class 1.
    Classification,
}

/// A grid value. Integers and floats are kept apart so `max_depth: 10`
/// and `learning_rate: 0.1` both round-trip through TOML and JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
}

impl ParamValue {
    fn as_usize(&self, name: &str) -> Result<usize, LearnError> {
        match self {
            ParamValue::Int(v) if *v >= 0 => Ok(*v as usize),
            _ => Err(LearnError::InvalidParameter(format!("`{name}` expects a non-negative integer"))),
        }
    }

    fn as_opt_usize(&self, name: &str) -> Result<Option<usize>, LearnError> {
        match self {
            ParamValue::Null => Ok(None),
            ParamValue::Text(s) if s.eq_ignore_ascii_case("none") => Ok(None),
            other => other.as_usize(name).map(Some),
        }
    }

    fn as_f64(&self, name: &str) -> Result<f64, LearnError> {
        match self {
            ParamValue::Float(v) => Ok(*v),
            ParamValue::Int(v) => Ok(*v as f64),
            _ => Err(LearnError::InvalidParameter(format!("`{name}` expects a number"))),
        }
    }

    fn as_bool(&self, name: &str) -> Result<bool, LearnError> {
        match self {
            ParamValue::Bool(b) => Ok(*b),
            _ => Err(LearnError::InvalidParameter(format!("`{name}` expects a boolean"))),
        }
    }

    fn as_max_features(&self, name: &str) -> Result<MaxFeatures, LearnError> {
        match self {
            ParamValue::Null => Ok(MaxFeatures::All),
            ParamValue::Text(s) if s == "all" => Ok(MaxFeatures::All),
            ParamValue::Text(s) if s == "sqrt" => Ok(MaxFeatures::Sqrt),
            ParamValue::Int(_) => self.as_usize(name).map(MaxFeatures::Count),
            ParamValue::Float(f) if *f > 0.0 && *f <= 1.0 => Ok(MaxFeatures::Fraction(*f)),
            _ => Err(LearnError::InvalidParameter(format!(
                "`{name}` expects \"all\", \"sqrt\", a count or a fraction in (0, 1]"
            ))),
        }
    }
}

/// A model family with all hyperparameters fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum LearnerSpec {
    RegressionTree(TreeParams),
    RandomForest(ForestParams),
    GradientBoosting(BoostingParams),
    Lasso { l1_penalty: f64 },
    Logistic { l2_penalty: f64 },
}

impl LearnerSpec {
    pub fn family(&self) -> &'static str {
        match self {
            LearnerSpec::RegressionTree(_) => "regression_tree",
            LearnerSpec::RandomForest(_) => "random_forest",
            LearnerSpec::GradientBoosting(_) => "gradient_boosting",
            LearnerSpec::Lasso { .. } => "lasso",
            LearnerSpec::Logistic { .. } => "logistic",
        }
    }

    /// Copy with one hyperparameter replaced.
    pub fn with_param(&self, name: &str, value: &ParamValue) -> Result<Self, LearnError> {
        let unknown = || LearnError::UnknownParameter {
            family: self.family(),
            param: name.to_string(),
        };
        let mut out = self.clone();
        match &mut out {
            LearnerSpec::RegressionTree(p) => match name {
                "max_depth" => p.max_depth = value.as_opt_usize(name)?,
                "min_samples_leaf" => p.min_samples_leaf = value.as_usize(name)?,
                "max_features" => p.max_features = value.as_max_features(name)?,
                _ => return Err(unknown()),
            },
            LearnerSpec::RandomForest(p) => match name {
                "n_trees" => p.n_trees = value.as_usize(name)?,
                "max_depth" => p.max_depth = value.as_opt_usize(name)?,
                "min_samples_leaf" => p.min_samples_leaf = value.as_usize(name)?,
                "max_features" => p.max_features = value.as_max_features(name)?,
                "bootstrap" => p.bootstrap = value.as_bool(name)?,
                "seed" => p.seed = value.as_usize(name)? as u64,
                _ => return Err(unknown()),
            },
            LearnerSpec::GradientBoosting(p) => match name {
                "n_stages" => p.n_stages = value.as_usize(name)?,
                "learning_rate" => p.learning_rate = value.as_f64(name)?,
                "max_depth" => p.max_depth = value.as_usize(name)?,
                "min_samples_leaf" => p.min_samples_leaf = value.as_usize(name)?,
                _ => return Err(unknown()),
            },
            LearnerSpec::Lasso { l1_penalty } => match name {
                "l1_penalty" => *l1_penalty = value.as_f64(name)?,
                _ => return Err(unknown()),
            },
            LearnerSpec::Logistic { l2_penalty } => match name {
                "l2_penalty" => *l2_penalty = value.as_f64(name)?,
                _ => return Err(unknown()),
            },
        }
        Ok(out)
    }

    /// Same spec with every random seed set to `seed`.
    pub fn seeded(&self, seed: u64) -> Self {
        let mut out = self.clone();
        if let LearnerSpec::RandomForest(p) = &mut out {
            p.seed = seed;
        }
        out
    }

    pub fn fit(&self, x: ArrayView2<f64>, y: &[f64], task: Task) -> Result<FittedModel, LearnError> {
        let unsupported = || LearnError::UnsupportedTask {
            family: self.family(),
            task,
        };
        Ok(match (self, task) {
            (LearnerSpec::RegressionTree(p), Task::Regression) => FittedModel::RegressionTree(RegressionTree::fit(x, y, p)?),
            (LearnerSpec::RandomForest(p), Task::Regression) => {
                FittedModel::RandomForest(RandomForestRegressor::fit(x, y, p)?)
            }
            (LearnerSpec::RandomForest(p), Task::Classification) => {
                // probability forest: regression on the 0/1 labels
                check_binary(y)?;
                FittedModel::RandomForest(RandomForestRegressor::fit(x, y, p)?)
            }
            (LearnerSpec::GradientBoosting(p), Task::Regression) => {
                FittedModel::GradientBoosting(GradientBoostingModel::fit(x, y, p, BoostingLoss::Squared)?)
            }
            (LearnerSpec::GradientBoosting(p), Task::Classification) => {
                FittedModel::GradientBoosting(GradientBoostingModel::fit(x, y, p, BoostingLoss::Logistic)?)
            }
            (LearnerSpec::Lasso { l1_penalty }, Task::Regression) => FittedModel::Lasso(LassoModel::fit(x, y, *l1_penalty)?),
            (LearnerSpec::Logistic { l2_penalty }, Task::Classification) => {
                FittedModel::Logistic(LogisticRegressionModel::fit(x, y, *l2_penalty)?)
            }
            _ => return Err(unsupported()),
        })
    }
}

/// Default search grids, one per family, for a task.
pub fn default_searches(task: Task, seed: u64) -> Vec<SearchSpec> {
    use ParamValue::{Float, Int, Null};
    let scoring = Scoring::for_task(task);
    let mut out = Vec::new();
    let forest = SearchSpec::new(
        LearnerSpec::RandomForest(ForestParams {
            n_trees: 100,
            seed,
            ..Default::default()
        }),
        scoring,
    )
    .with("max_depth", vec![Null, Int(10), Int(20)])
    .with("min_samples_leaf", vec![Int(1), Int(5), Int(20)]);
    let boosting = SearchSpec::new(LearnerSpec::GradientBoosting(BoostingParams::default()), scoring)
        .with("n_stages", vec![Int(100), Int(300)])
        .with("learning_rate", vec![Float(0.05), Float(0.1)]);
    out.push(forest);
    out.push(boosting);
    match task {
        Task::Regression => out.push(
            SearchSpec::new(LearnerSpec::Lasso { l1_penalty: 1.0 }, scoring)
                .with("l1_penalty", (0..=4).map(|k| Float(10f64.powi(-k))).rev().collect()),
        ),
        Task::Classification => out.push(
            SearchSpec::new(LearnerSpec::Logistic { l2_penalty: 1.0 }, scoring)
                .with("l2_penalty", vec![Float(0.01), Float(0.1), Float(1.0)]),
        ),
    }
    for s in &mut out {
        s.seed = seed;
    }
    out
}

/// A fitted learner of any family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family", content = "model")]
pub enum FittedModel {
    RegressionTree(RegressionTree),
    RandomForest(RandomForestRegressor),
    GradientBoosting(GradientBoostingModel),
    Lasso(LassoModel),
    Logistic(LogisticRegressionModel),
}

pub const MODEL_FORMAT: &str = "agrocausal-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    model: T,
}

/// Wraps any serializable model in the versioned envelope.
pub fn to_versioned_json<T: Serialize>(model: &T) -> Result<String, LearnError> {
    serde_json::to_string_pretty(&Envelope {
        format: MODEL_FORMAT.to_string(),
        version: MODEL_FORMAT_VERSION,
        model,
    })
    .map_err(|e| LearnError::Format(e.to_string()))
}

pub fn from_versioned_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T, LearnError> {
    let env: Envelope<T> = serde_json::from_str(text).map_err(|e| LearnError::Format(e.to_string()))?;
    if env.format != MODEL_FORMAT {
        return Err(LearnError::Format(format!("unexpected format `{}`", env.format)));
    }
    if env.version != MODEL_FORMAT_VERSION {
        return Err(LearnError::Format(format!("unsupported version {}", env.version)));
    }
    Ok(env.model)
}

impl FittedModel {
    /// Predicted values, or probabilities of class 1 for classifiers.
    pub fn predict(&self, x: ArrayView2<f64>) -> Array1<f64> {
        match self {
            FittedModel::RegressionTree(m) => m.predict(x),
            FittedModel::RandomForest(m) => m.predict(x),
            FittedModel::GradientBoosting(m) => m.predict(x),
            FittedModel::Lasso(m) => m.predict(x),
            FittedModel::Logistic(m) => m.predict_proba(x),
        }
    }

    pub fn to_json(&self) -> Result<String, LearnError> {
        to_versioned_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self, LearnError> {
        from_versioned_json(text)
    }
}

/// Parameter grid written as `name -> values` for configuration files.
pub type ParamGrid = BTreeMap<String, Vec<ParamValue>>;
