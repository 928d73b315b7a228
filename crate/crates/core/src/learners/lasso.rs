//! Lasso regression by cyclic coordinate descent.
//!
//! Minimizes `1/(2n) |y - b - X w|^2 + l1 |w|_1` with an unpenalized intercept.

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::LearnError;

pub const COEFFICIENT_TOLERANCE: f64 = 1e-10;
pub const MAX_SWEEPS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub l1_penalty: f64,
    pub sweeps: usize,
}

fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Objective value for given weights and intercept.
pub fn lasso_objective(x: ArrayView2<f64>, y: &[f64], l1: f64, weights: &[f64], intercept: f64) -> f64 {
    let n = y.len() as f64;
    let rss: f64 = x
        .rows()
        .into_iter()
        .zip(y)
        .map(|(row, yi)| {
            let pred = intercept + row.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>();
            (yi - pred).powi(2)
        })
        .sum();
    rss / (2.0 * n) + l1 * weights.iter().map(|w| w.abs()).sum::<f64>()
}

impl LassoModel {
    pub fn fit(x: ArrayView2<f64>, y: &[f64], l1_penalty: f64) -> Result<Self, LearnError> {
        Self::fit_traced(x, y, l1_penalty, |_, _| {})
    }

    /// Like [`fit`](Self::fit), calling `on_sweep(weights, intercept)` after each sweep.
    pub fn fit_traced(
        x: ArrayView2<f64>,
        y: &[f64],
        l1_penalty: f64,
        mut on_sweep: impl FnMut(&[f64], f64),
    ) -> Result<Self, LearnError> {
        super::check_xy(x, y)?;
        if !(l1_penalty >= 0.0) {
            return Err(LearnError::InvalidParameter("l1_penalty must be non-negative".into()));
        }
        let (n, d) = x.dim();
        let nf = n as f64;
        let x_mean: Vec<f64> = (0..d).map(|j| x.column(j).sum() / nf).collect();
        let y_mean = y.iter().sum::<f64>() / nf;
        // centered copies, column-major for cheap column access
        let cols: Vec<Vec<f64>> = (0..d)
            .map(|j| x.column(j).iter().map(|v| v - x_mean[j]).collect())
            .collect();
        let col_sq: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>() / nf).collect();
        let mut residual: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
        let mut w = vec![0.0; d];

        for sweep in 1..=MAX_SWEEPS {
            let mut max_change: f64 = 0.0;
            for j in 0..d {
                if col_sq[j] == 0.0 {
                    continue;
                }
                let col = &cols[j];
                let rho = col.iter().zip(&residual).map(|(a, r)| a * r).sum::<f64>() / nf + col_sq[j] * w[j];
                let new = soft_threshold(rho, l1_penalty) / col_sq[j];
                let delta = new - w[j];
                if delta != 0.0 {
                    for (r, a) in residual.iter_mut().zip(col) {
                        *r -= delta * a;
                    }
                    w[j] = new;
                }
                max_change = max_change.max(delta.abs());
            }
            let intercept = y_mean - x_mean.iter().zip(&w).map(|(m, b)| m * b).sum::<f64>();
            on_sweep(&w, intercept);
            if max_change <= COEFFICIENT_TOLERANCE {
                return Ok(Self {
                    weights: w,
                    intercept,
                    l1_penalty,
                    sweeps: sweep,
                });
            }
        }
        Err(LearnError::NonConvergence(MAX_SWEEPS))
    }

    pub fn predict_row(&self, row: ArrayView1<f64>) -> f64 {
        self.intercept + row.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Array1<f64> {
        x.rows().into_iter().map(|r| self.predict_row(r)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn data(seed: u64, n: usize) -> (Array2<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, 3), |_| rng.random::<f64>() * 2.0 - 1.0);
        let y = (0..n)
            .map(|i| 1.5 + 2.0 * x[[i, 0]] - 0.7 * x[[i, 1]] + 0.05 * x[[i, 2]] + 0.3 * (rng.random::<f64>() - 0.5))
            .collect();
        (x, y)
    }

    #[test]
    fn zero_penalty_is_ordinary_least_squares() {
        let (x, y) = data(1, 100);
        let m = LassoModel::fit(x.view(), &y, 0.0).unwrap();
        let design = DMatrix::from_fn(100, 4, |i, j| if j == 0 { 1.0 } else { x[[i, j - 1]] });
        let beta = (design.transpose() * &design)
            .lu()
            .solve(&(design.transpose() * DVector::from_vec(y.clone())))
            .unwrap();
        assert!((m.intercept - beta[0]).abs() < 1e-6);
        for j in 0..3 {
            assert!((m.weights[j] - beta[j + 1]).abs() < 1e-6);
        }
    }

    #[test]
    fn penalty_at_kill_threshold_zeroes_all_weights() {
        let (x, y) = data(2, 80);
        let n = y.len() as f64;
        let ybar = y.iter().sum::<f64>() / n;
        let kill = (0..3)
            .map(|j| (0..80).map(|i| x[[i, j]] * (y[i] - ybar)).sum::<f64>().abs() / n)
            .fold(0.0, f64::max);
        let m = LassoModel::fit(x.view(), &y, kill).unwrap();
        assert!(m.weights.iter().all(|w| *w == 0.0));
        assert!((m.intercept - ybar).abs() < 1e-12);
        let below = LassoModel::fit(x.view(), &y, kill * 0.99).unwrap();
        assert!(below.weights.iter().any(|w| *w != 0.0));
    }

    /// FISTA proximal gradient on the same objective, run to a tight tolerance.
    fn proximal_gradient_oracle(x: &Array2<f64>, y: &[f64], l1: f64) -> (Vec<f64>, f64) {
        let (n, d) = x.dim();
        let nf = n as f64;
        // Lipschitz constant of the smooth part: largest eigenvalue of [1 X]^T [1 X] / n
        let design = DMatrix::from_fn(n, d + 1, |i, j| if j == 0 { 1.0 } else { x[[i, j - 1]] });
        let gram = design.transpose() * &design / nf;
        let lipschitz = gram.symmetric_eigenvalues().max();
        let step = 1.0 / lipschitz;
        let yv = DVector::from_vec(y.to_vec());
        let mut theta = DVector::<f64>::zeros(d + 1);
        let mut z = theta.clone();
        let mut tk = 1.0f64;
        for _ in 0..200_000 {
            let grad = design.transpose() * (&design * &z - &yv) / nf;
            let mut next = &z - step * grad;
            for j in 1..=d {
                next[j] = soft_threshold(next[j], step * l1);
            }
            let t_next = (1.0 + (1.0 + 4.0 * tk * tk).sqrt()) / 2.0;
            z = &next + ((tk - 1.0) / t_next) * (&next - &theta);
            theta = next;
            tk = t_next;
        }
        (theta.iter().skip(1).copied().collect(), theta[0])
    }

    #[test]
    fn matches_independent_convex_solver() {
        let (x, y) = data(3, 60);
        for l1 in [0.01, 0.1, 0.4] {
            let m = LassoModel::fit(x.view(), &y, l1).unwrap();
            let (w, b) = proximal_gradient_oracle(&x, &y, l1);
            assert!((m.intercept - b).abs() < 1e-4);
            for j in 0..3 {
                assert!((m.weights[j] - w[j]).abs() < 1e-4, "l1 {l1} j {j}: {} vs {}", m.weights[j], w[j]);
            }
        }
    }

    #[test]
    fn objective_never_increases_across_sweeps() {
        let (x, y) = data(4, 120);
        let mut trace = Vec::new();
        LassoModel::fit_traced(x.view(), &y, 0.05, |w, b| {
            trace.push(lasso_objective(x.view(), &y, 0.05, w, b));
        })
        .unwrap();
        let start = lasso_objective(x.view(), &y, 0.05, &[0.0; 3], y.iter().sum::<f64>() / 120.0);
        assert!(trace[0] <= start);
        assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }
}
