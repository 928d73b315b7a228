//! Random forest regressor (bagged CART with per-node feature subsampling).

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{MaxFeatures, RegressionTree, TreeParams};
use super::LearnError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub max_features: MaxFeatures,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: None,
            min_samples_leaf: 1,
            max_features: MaxFeatures::All,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestParams {
    fn tree_params(&self) -> TreeParams {
        TreeParams {
            max_depth: self.max_depth,
            min_samples_leaf: self.min_samples_leaf,
            max_features: self.max_features,
        }
    }
}

/// Per-tree generator: one ChaCha stream per tree index, so results do not
/// depend on how trees are scheduled across threads.
pub(crate) fn tree_rng(seed: u64, tree: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tree as u64);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForestRegressor {
    pub trees: Vec<RegressionTree>,
    pub params: ForestParams,
}

impl RandomForestRegressor {
    pub fn fit(x: ArrayView2<f64>, y: &[f64], params: &ForestParams) -> Result<Self, LearnError> {
        super::check_xy(x, y)?;
        if params.n_trees == 0 {
            return Err(LearnError::InvalidParameter("n_trees must be at least 1".into()));
        }
        let n = y.len();
        let tree_params = params.tree_params();
        let trees = (0..params.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = tree_rng(params.seed, t);
                let rows: Vec<usize> = if params.bootstrap {
                    (0..n).map(|_| rng.random_range(0..n)).collect()
                } else {
                    (0..n).collect()
                };
                RegressionTree::fit_rows(x, y, &rows, &tree_params, Some(&mut rng))
            })
            .collect();
        Ok(Self {
            trees,
            params: params.clone(),
        })
    }

    pub fn predict_row(&self, row: ArrayView1<f64>) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict_row(row)).sum();
        sum / self.trees.len() as f64
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Array1<f64> {
        let rows: Vec<f64> = (0..x.nrows())
            .into_par_iter()
            .map(|i| self.predict_row(x.row(i)))
            .collect();
        Array1::from(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::metrics::r2_score;
    use ndarray::Array2;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn constant_target_predicts_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((50, 3), |_| rng.random::<f64>());
        let y = vec![-2.25; 50];
        let f = RandomForestRegressor::fit(x.view(), &y, &ForestParams::default()).unwrap();
        assert!(f.predict(x.view()).iter().all(|p| *p == -2.25));
    }

    #[test]
    fn degenerate_forest_equals_single_tree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((120, 4), |_| rng.random::<f64>());
        let y: Vec<f64> = (0..120).map(|i| x[[i, 1]].sin() + x[[i, 2]] * x[[i, 0]]).collect();
        let params = ForestParams {
            n_trees: 1,
            bootstrap: false,
            max_features: MaxFeatures::All,
            min_samples_leaf: 3,
            ..Default::default()
        };
        let f = RandomForestRegressor::fit(x.view(), &y, &params).unwrap();
        let t = RegressionTree::fit(
            x.view(),
            &y,
            &TreeParams {
                min_samples_leaf: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(f.trees[0], t);
        assert_eq!(f.predict(x.view()), t.predict(x.view()));
    }

    #[test]
    fn linear_signal_is_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let make = |rng: &mut ChaCha8Rng, n: usize| {
            let x = Array2::from_shape_fn((n, 3), |_| rng.random::<f64>());
            let y: Vec<f64> = (0..n).map(|i| 3.0 * x[[i, 0]] + noise.sample(rng)).collect();
            (x, y)
        };
        let (x, y) = make(&mut rng, 2000);
        let (xt, yt) = make(&mut rng, 1000);
        let params = ForestParams {
            n_trees: 50,
            min_samples_leaf: 5,
            seed: 7,
            ..Default::default()
        };
        let f = RandomForestRegressor::fit(x.view(), &y, &params).unwrap();
        let r2 = r2_score(&yt, f.predict(xt.view()).as_slice().unwrap()).unwrap();
        assert!(r2 >= 0.9, "test r2 {r2}");
    }

    #[test]
    fn prediction_is_mean_of_trees_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Array2::from_shape_fn((80, 2), |_| rng.random::<f64>());
        let y: Vec<f64> = (0..80).map(|i| x[[i, 0]] - x[[i, 1]]).collect();
        let params = ForestParams {
            n_trees: 9,
            max_features: MaxFeatures::Count(1),
            seed: 99,
            ..Default::default()
        };
        let a = RandomForestRegressor::fit(x.view(), &y, &params).unwrap();
        let b = RandomForestRegressor::fit(x.view(), &y, &params).unwrap();
        assert_eq!(a, b);
        for i in 0..x.nrows() {
            let manual: f64 = a.trees.iter().map(|t| t.predict_row(x.row(i))).sum::<f64>() / 9.0;
            assert_eq!(a.predict_row(x.row(i)), manual);
        }
    }

    #[test]
    fn zero_trees_is_an_error() {
        let x = Array2::<f64>::zeros((4, 1));
        let params = ForestParams {
            n_trees: 0,
            ..Default::default()
        };
        assert!(RandomForestRegressor::fit(x.view(), &[0.0; 4], &params).is_err());
    }
}
