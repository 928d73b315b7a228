//! Gradient boosted regression trees for squared and logistic loss.

use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::tree::{MaxFeatures, Node, RegressionTree, TreeParams};
use super::LearnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoostingLoss {
    Squared,
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostingParams {
    pub n_stages: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
}

impl Default for BoostingParams {
    fn default() -> Self {
        Self {
            n_stages: 100,
            learning_rate: 0.1,
            max_depth: 3,
            min_samples_leaf: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientBoostingModel {
    /// Initial raw score: the mean for squared loss, the log-odds for logistic.
    pub init: f64,
    pub base_trees: Vec<RegressionTree>,
    pub learning_rate: f64,
    pub loss: BoostingLoss,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl GradientBoostingModel {
    pub fn fit(
        x: ArrayView2<f64>,
        y: &[f64],
        params: &BoostingParams,
        loss: BoostingLoss,
    ) -> Result<Self, LearnError> {
        super::check_xy(x, y)?;
        if params.n_stages == 0 {
            return Err(LearnError::InvalidParameter("n_stages must be at least 1".into()));
        }
        if !(params.learning_rate > 0.0) {
            return Err(LearnError::InvalidParameter("learning_rate must be positive".into()));
        }
        let n = y.len();
        let mean = y.iter().sum::<f64>() / n as f64;
        let init = match loss {
            BoostingLoss::Squared => mean,
            BoostingLoss::Logistic => {
                super::check_binary(y)?;
                (mean / (1.0 - mean)).ln()
            }
        };
        let tree_params = TreeParams {
            max_depth: Some(params.max_depth),
            min_samples_leaf: params.min_samples_leaf,
            max_features: MaxFeatures::All,
        };
        let mut raw = vec![init; n];
        let mut trees = Vec::with_capacity(params.n_stages);
        let mut gradient = vec![0.0; n];

        for _ in 0..params.n_stages {
            for i in 0..n {
                gradient[i] = match loss {
                    BoostingLoss::Squared => y[i] - raw[i],
                    BoostingLoss::Logistic => y[i] - sigmoid(raw[i]),
                };
            }
            let mut tree = RegressionTree::fit(x, &gradient, &tree_params)?;
            let leaves: Vec<usize> = (0..n).map(|i| tree.leaf_index(x.row(i))).collect();
            if loss == BoostingLoss::Logistic {
                // one Newton step per leaf: sum(gradient) / sum(p (1 - p))
                let mut num = vec![0.0; tree.nodes.len()];
                let mut den = vec![0.0; tree.nodes.len()];
                for i in 0..n {
                    let p = sigmoid(raw[i]);
                    num[leaves[i]] += gradient[i];
                    den[leaves[i]] += p * (1.0 - p);
                }
                for (leaf, node) in tree.nodes.clone().iter().enumerate() {
                    if let Node::Leaf { .. } = node {
                        let value = if den[leaf] < 1e-150 { 0.0 } else { num[leaf] / den[leaf] };
                        tree.set_leaf_prediction(leaf, value);
                    }
                }
            }
            for i in 0..n {
                if let Node::Leaf { prediction, .. } = tree.nodes[leaves[i]] {
                    raw[i] += params.learning_rate * prediction;
                }
            }
            trees.push(tree);
        }

        Ok(Self {
            init,
            base_trees: trees,
            learning_rate: params.learning_rate,
            loss,
        })
    }

    /// Raw additive score after all stages.
    pub fn decision_function(&self, x: ArrayView2<f64>) -> Array1<f64> {
        self.staged_decision(x, self.base_trees.len())
    }

    /// Raw score using only the first `stages` trees.
    pub fn staged_decision(&self, x: ArrayView2<f64>, stages: usize) -> Array1<f64> {
        x.rows()
            .into_iter()
            .map(|row| {
                self.base_trees[..stages.min(self.base_trees.len())]
                    .iter()
                    .fold(self.init, |acc, t| acc + self.learning_rate * t.predict_row(row))
            })
            .collect()
    }

    /// Regression value, or probability of class 1 for logistic loss.
    pub fn predict(&self, x: ArrayView2<f64>) -> Array1<f64> {
        self.staged_predict(x, self.base_trees.len())
    }

    pub fn staged_predict(&self, x: ArrayView2<f64>, stages: usize) -> Array1<f64> {
        let raw = self.staged_decision(x, stages);
        match self.loss {
            BoostingLoss::Squared => raw,
            BoostingLoss::Logistic => raw.mapv(sigmoid),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_full_stage_equals_a_tree_on_centered_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((60, 2), |_| rng.random::<f64>());
        let y: Vec<f64> = (0..60).map(|i| (x[[i, 0]] * 6.0).sin() + x[[i, 1]]).collect();
        let params = BoostingParams {
            n_stages: 1,
            learning_rate: 1.0,
            ..Default::default()
        };
        let m = GradientBoostingModel::fit(x.view(), &y, &params, BoostingLoss::Squared).unwrap();
        let mean = y.iter().sum::<f64>() / 60.0;
        let centered: Vec<f64> = y.iter().map(|v| v - mean).collect();
        let tree = RegressionTree::fit(
            x.view(),
            &centered,
            &TreeParams {
                max_depth: Some(3),
                ..Default::default()
            },
        )
        .unwrap();
        let expected = tree.predict(x.view()).mapv(|v| mean + v);
        let got = m.predict(x.view());
        for (g, e) in got.iter().zip(expected.iter()) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_target_stays_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((30, 2), |_| rng.random::<f64>());
        let y = vec![4.0; 30];
        let m = GradientBoostingModel::fit(x.view(), &y, &BoostingParams::default(), BoostingLoss::Squared).unwrap();
        for t in &m.base_trees {
            assert!(t.predict(x.view()).iter().all(|v| *v == 0.0));
        }
        assert!(m.predict(x.view()).iter().all(|v| *v == 4.0));
    }

    #[test]
    fn staircase_training_loss_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 500;
        let x = Array2::from_shape_fn((n, 2), |_| rng.random::<f64>() * 10.0);
        let y: Vec<f64> = (0..n).map(|i| x[[i, 0]].floor() + 0.1 * rng.random::<f64>()).collect();
        let params = BoostingParams {
            n_stages: 60,
            learning_rate: 0.3,
            ..Default::default()
        };
        let m = GradientBoostingModel::fit(x.view(), &y, &params, BoostingLoss::Squared).unwrap();
        let mse = |k: usize| {
            let p = m.staged_predict(x.view(), k);
            p.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64
        };
        let mut prev = mse(0);
        for k in 1..=60 {
            let cur = mse(k);
            assert!(cur <= prev + 1e-12, "stage {k}: {cur} > {prev}");
            prev = cur;
        }
        assert!(prev < 0.05);
    }

    #[test]
    fn staged_prediction_is_prefix_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array2::from_shape_fn((100, 2), |_| rng.random::<f64>());
        let y: Vec<f64> = (0..100).map(|i| f64::from(u8::from(x[[i, 0]] + x[[i, 1]] > 1.0))).collect();
        let m = GradientBoostingModel::fit(x.view(), &y, &BoostingParams::default(), BoostingLoss::Logistic).unwrap();
        assert_eq!(m.staged_predict(x.view(), m.base_trees.len()), m.predict(x.view()));
        let p = m.predict(x.view());
        assert!(p.iter().all(|v| *v > 0.0 && *v < 1.0));
        let accuracy = p
            .iter()
            .zip(&y)
            .filter(|(p, y)| (**p > 0.5) == (**y == 1.0))
            .count();
        assert!(accuracy >= 95);
    }

    #[test]
    fn logistic_loss_requires_binary_labels() {
        let x = Array2::<f64>::zeros((3, 1));
        assert!(GradientBoostingModel::fit(x.view(), &[0.0, 0.5, 1.0], &BoostingParams::default(), BoostingLoss::Logistic).is_err());
    }
}
