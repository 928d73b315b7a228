//! Fold assignment, hold-out splits and grid-search cross-validation.

use std::collections::BTreeMap;

use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{classify, f1_score, r2_score};
use super::scaler::MaxAbsScaler;
use super::{FittedModel, LearnError, LearnerSpec, ParamValue, Task};

/// Fold id in `0..k` for each of `n` units, a function of `(n, k, seed)` only.
pub fn kfold_assignments(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k;
    }
    fold
}

/// Seeded shuffle split into `(train, test)` index lists, each ascending.
pub fn train_test_split(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64) * test_fraction).round() as usize;
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    R2,
    F1,
}

impl Scoring {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Regression => Scoring::R2,
            Task::Classification => Scoring::F1,
        }
    }

    /// Score of predictions (probabilities for F1) against the truth. An
    /// undefined F1 (no positives anywhere) scores 0.
    pub fn score(&self, truth: &[f64], predicted: &[f64]) -> Result<f64, LearnError> {
        match self {
            Scoring::R2 => r2_score(truth, predicted),
            Scoring::F1 => match f1_score(truth, &classify(predicted)) {
                Err(LearnError::UndefinedF1) => Ok(0.0),
                other => other,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpec {
    /// Model family and the values of parameters not on the grid.
    pub base: LearnerSpec,
    /// Parameter name to candidate values; expanded in key order with the
    /// last key varying fastest.
    pub grid: BTreeMap<String, Vec<ParamValue>>,
    #[serde(default = "default_folds")]
    pub k_folds: usize,
    pub scoring: Scoring,
    #[serde(default)]
    pub seed: u64,
}

fn default_folds() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvEntry {
    pub spec: LearnerSpec,
    pub fold_scores: Vec<f64>,
    pub mean_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best_index: usize,
    pub best_spec: LearnerSpec,
    pub best_score: f64,
    pub table: Vec<CvEntry>,
}

impl SearchSpec {
    pub fn new(base: LearnerSpec, scoring: Scoring) -> Self {
        Self {
            base,
            grid: BTreeMap::new(),
            k_folds: 3,
            scoring,
            seed: 0,
        }
    }

    pub fn with(mut self, name: &str, values: Vec<ParamValue>) -> Self {
        self.grid.insert(name.to_string(), values);
        self
    }

    /// Every grid point as a concrete learner spec.
    pub fn candidates(&self) -> Result<Vec<LearnerSpec>, LearnError> {
        let mut out = vec![self.base.clone()];
        for (name, values) in &self.grid {
            if values.is_empty() {
                return Err(LearnError::InvalidParameter(format!("grid for `{name}` is empty")));
            }
            let mut next = Vec::with_capacity(out.len() * values.len());
            for spec in &out {
                for v in values {
                    next.push(spec.with_param(name, v)?);
                }
            }
            out = next;
        }
        Ok(out)
    }

    /// Mean out-of-fold score of every grid point; the best wins, earliest
    /// grid point on ties.
    pub fn run(&self, x: ArrayView2<f64>, y: &[f64], task: Task) -> Result<GridSearchResult, LearnError> {
        if self.k_folds < 2 {
            return Err(LearnError::InvalidParameter("k_folds must be at least 2".into()));
        }
        if y.len() < self.k_folds {
            return Err(LearnError::EmptyData);
        }
        let folds = kfold_assignments(y.len(), self.k_folds, self.seed);
        let candidates = self.candidates()?;
        let mut table = Vec::with_capacity(candidates.len());
        for spec in candidates {
            let mut fold_scores = Vec::with_capacity(self.k_folds);
            for k in 0..self.k_folds {
                let train: Vec<usize> = (0..y.len()).filter(|&i| folds[i] != k).collect();
                let test: Vec<usize> = (0..y.len()).filter(|&i| folds[i] == k).collect();
                let xt = x.select(Axis(0), &train);
                let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
                let model = spec.fit(xt.view(), &yt, task)?;
                let xv = x.select(Axis(0), &test);
                let yv: Vec<f64> = test.iter().map(|&i| y[i]).collect();
                let pred = model.predict(xv.view());
                fold_scores.push(self.scoring.score(&yv, pred.as_slice().expect("contiguous"))?);
            }
            let mean_score = fold_scores.iter().sum::<f64>() / fold_scores.len() as f64;
            table.push(CvEntry {
                spec,
                fold_scores,
                mean_score,
            });
        }
        let mut best_index = 0;
        for (i, e) in table.iter().enumerate() {
            if e.mean_score > table[best_index].mean_score {
                best_index = i;
            }
        }
        Ok(GridSearchResult {
            best_index,
            best_spec: table[best_index].spec.clone(),
            best_score: table[best_index].mean_score,
            table,
        })
    }
}

/// Out-of-fold predictions: unit `i` is predicted by a model fit on the
/// rows whose fold differs from `folds[i]`. With `scale`, a max-abs scaler
/// is fit on each training part and applied to both parts.
pub fn cross_val_predict(
    spec: &LearnerSpec,
    x: ArrayView2<f64>,
    y: &[f64],
    task: Task,
    folds: &[usize],
    scale: bool,
) -> Result<Vec<f64>, LearnError> {
    let k = folds.iter().max().map_or(0, |m| m + 1);
    let mut out = vec![f64::NAN; y.len()];
    for fold in 0..k {
        let train: Vec<usize> = (0..y.len()).filter(|&i| folds[i] != fold).collect();
        let test: Vec<usize> = (0..y.len()).filter(|&i| folds[i] == fold).collect();
        if test.is_empty() {
            continue;
        }
        let (xt, xv) = (x.select(Axis(0), &train), x.select(Axis(0), &test));
        let (xt, xv) = if scale {
            let s = MaxAbsScaler::fit(xt.view());
            (s.transform(xt.view()), s.transform(xv.view()))
        } else {
            (xt, xv)
        };
        let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let model = spec.fit(xt.view(), &yt, task)?;
        for (&i, p) in test.iter().zip(model.predict(xv.view())) {
            out[i] = p;
        }
    }
    Ok(out)
}

/// Runs every search and refits the overall winner on all rows. Earlier
/// searches win ties.
pub fn select_model(
    searches: &[SearchSpec],
    x: ArrayView2<f64>,
    y: &[f64],
    task: Task,
) -> Result<(FittedModel, Vec<GridSearchResult>), LearnError> {
    if searches.is_empty() {
        return Err(LearnError::InvalidParameter("no search specified".into()));
    }
    let results = searches
        .iter()
        .map(|s| s.run(x, y, task))
        .collect::<Result<Vec<_>, _>>()?;
    let mut best = 0;
    for (i, r) in results.iter().enumerate() {
        if r.best_score > results[best].best_score {
            best = i;
        }
    }
    let model = results[best].best_spec.fit(x, y, task)?;
    Ok((model, results))
}
