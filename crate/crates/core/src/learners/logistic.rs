//! L2-penalized logistic regression fitted by damped Newton iterations.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::LearnError;

/// Converged when the Euclidean norm of the objective gradient is at most this.
pub const GRADIENT_TOLERANCE: f64 = 1e-8;
pub const MAX_ITERATIONS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticRegressionModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub l2_penalty: f64,
    pub iterations: usize,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + exp(z))` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Mean negative log-likelihood plus `l2 / 2 * |w|^2`; `params = [b, w...]`.
pub fn penalized_loss(x: ArrayView2<f64>, t: &[f64], l2: f64, params: &[f64]) -> f64 {
    let n = t.len() as f64;
    let mut nll = 0.0;
    for (i, row) in x.rows().into_iter().enumerate() {
        let z = params[0] + row.iter().zip(&params[1..]).map(|(a, b)| a * b).sum::<f64>();
        // -[t z - log(1 + e^z)]
        nll += softplus(z) - t[i] * z;
    }
    nll / n + 0.5 * l2 * params[1..].iter().map(|w| w * w).sum::<f64>()
}

impl LogisticRegressionModel {
    pub fn fit(x: ArrayView2<f64>, t: &[f64], l2_penalty: f64) -> Result<Self, LearnError> {
        super::check_xy(x, t)?;
        super::check_binary(t)?;
        if !(l2_penalty >= 0.0) {
            return Err(LearnError::InvalidParameter("l2_penalty must be non-negative".into()));
        }
        let (n, d) = x.dim();
        let nf = n as f64;
        let p = d + 1;
        let mut params = vec![0.0; p];
        let mean_t = t.iter().sum::<f64>() / nf;
        params[0] = (mean_t / (1.0 - mean_t)).ln();

        let design = |i: usize, j: usize| if j == 0 { 1.0 } else { x[[i, j - 1]] };

        for iter in 0..MAX_ITERATIONS {
            let mut grad = DVector::<f64>::zeros(p);
            let mut hess = DMatrix::<f64>::zeros(p, p);
            for i in 0..n {
                let z = params[0] + (0..d).map(|j| x[[i, j]] * params[j + 1]).sum::<f64>();
                let prob = sigmoid(z);
                let r = prob - t[i];
                let w = prob * (1.0 - prob);
                for a in 0..p {
                    let xa = design(i, a);
                    grad[a] += r * xa;
                    for b in a..p {
                        hess[(a, b)] += w * xa * design(i, b);
                    }
                }
            }
            for a in 0..p {
                grad[a] /= nf;
                for b in a..p {
                    hess[(a, b)] /= nf;
                    hess[(b, a)] = hess[(a, b)];
                }
            }
            for j in 1..p {
                grad[j] += l2_penalty * params[j];
                hess[(j, j)] += l2_penalty;
            }

            if grad.norm() <= GRADIENT_TOLERANCE {
                return Ok(Self {
                    intercept: params[0],
                    weights: params[1..].to_vec(),
                    l2_penalty,
                    iterations: iter,
                });
            }

            let step = solve_psd(&hess, &grad);
            let current = penalized_loss(x, t, l2_penalty, &params);
            let slope = -grad.dot(&step);
            let mut scale = 1.0;
            let mut next = params.clone();
            loop {
                for j in 0..p {
                    next[j] = params[j] - scale * step[j];
                }
                // close to the optimum loss differences drown in rounding; take the full step
                if grad.norm() < 1e-4 {
                    break;
                }
                let value = penalized_loss(x, t, l2_penalty, &next);
                if value <= current + 1e-4 * scale * slope || scale < 1e-10 {
                    break;
                }
                scale *= 0.5;
            }
            params = next;
        }
        Err(LearnError::NonConvergence(MAX_ITERATIONS))
    }

    pub fn decision_row(&self, row: ArrayView1<f64>) -> f64 {
        self.intercept + row.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Probability of class 1 for each row.
    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Array1<f64> {
        x.rows()
            .into_iter()
            .map(|r| sigmoid(self.decision_row(r)).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
            .collect()
    }
}

/// Solves `H s = g` for a symmetric positive semi-definite `H`, adding a
/// small ridge when the Cholesky factorization fails.
fn solve_psd(h: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let mut jitter = 0.0;
    let scale = h.diagonal().amax().max(1.0);
    loop {
        let mut m = h.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(ch) = m.cholesky() {
            return ch.solve(g);
        }
        jitter = if jitter == 0.0 { 1e-12 * scale } else { jitter * 10.0 };
    }
}
