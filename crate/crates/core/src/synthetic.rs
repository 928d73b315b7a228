//! Partially linear data with a known effect function.
//!
//! `Y = theta(X) T + g(X) + sigma e` with `T` drawn from a propensity that
//! depends on the same features as `g`, so naive comparisons are biased
//! while `theta` is known exactly.

use std::io::Write;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{CrossSection, CrossSectionTable, DataError, GridCell, DEFAULT_CELL_SIZE_M, TRUE_CATE_COLUMN};
use crate::practices::binarize_table;

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Effect function. Feature indices are zero-based positions in `X`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ThetaSpec {
    /// `theta(x) = c`.
    Constant { c: f64 },
    /// `theta(x) = a . x + b`; missing trailing entries of `a` are zero.
    Linear { a: Vec<f64>, b: f64 },
    /// `theta(x) = value` if `x[feature] > threshold`, else 0.
    Step { feature: usize, threshold: f64, value: f64 },
    /// `theta(x) = a + b x[feature] + c x[feature]^2`.
    Quadratic { feature: usize, a: f64, b: f64, c: f64 },
}

impl ThetaSpec {
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        match self {
            ThetaSpec::Constant { c } => *c,
            ThetaSpec::Linear { a, b } => b + a.iter().zip(x).map(|(p, q)| p * q).sum::<f64>(),
            ThetaSpec::Step { feature, threshold, value } => {
                if x[*feature] > *threshold {
                    *value
                } else {
                    0.0
                }
            }
            ThetaSpec::Quadratic { feature, a, b, c } => {
                let v = x[*feature];
                a + b * v + c * v * v
            }
        }
    }

    /// Highest feature index the function reads, if any.
    fn max_feature(&self) -> Option<usize> {
        match self {
            ThetaSpec::Constant { .. } => None,
            ThetaSpec::Linear { a, .. } => a.len().checked_sub(1),
            ThetaSpec::Step { feature, .. } | ThetaSpec::Quadratic { feature, .. } => Some(*feature),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Assignment {
    /// `T ~ Bernoulli(sigmoid(gamma w . z / temperature))`.
    Logistic,
    /// `T = 1{x[feature] > threshold}`: no overlap at all.
    Deterministic { feature: usize, threshold: f64 },
    /// Continuous raw treatment `gamma w . z + temperature L` with `L`
    /// standard logistic, binarized at its sample median.
    ContinuousMedian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    pub theta: ThetaSpec,
    /// `gamma`: strength of the features' pull on treatment.
    pub confounding_strength: f64,
    /// `sigma`: outcome noise standard deviation.
    pub outcome_noise: f64,
    /// Scale of the logistic treatment noise.
    pub temperature: f64,
    pub assignment: Assignment,
    /// Range of the uniform features (even positions); odd positions are
    /// standard normal.
    pub uniform_range: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 5000,
            d: 6,
            theta: ThetaSpec::Constant { c: 2.0 },
            confounding_strength: 1.0,
            outcome_noise: 1.0,
            temperature: 1.0,
            assignment: Assignment::Logistic,
            uniform_range: (0.0, 1.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub table: CrossSectionTable,
    pub true_cate: Vec<f64>,
    /// `P(T = 1 | X)` of each unit.
    pub propensity: Vec<f64>,
    /// `g(X)` of each unit.
    pub baseline: Vec<f64>,
}

impl SyntheticData {
    /// Cross-section CSV with an extra `true_cate` column.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        self.table.write_csv(writer, &[(TRUE_CATE_COLUMN, &self.true_cate)])
    }

    pub fn features(&self) -> Array2<f64> {
        self.table.feature_matrix()
    }

    pub fn outcomes(&self) -> Vec<f64> {
        self.table.rows.iter().map(|r| r.outcome).collect()
    }

    pub fn treatments(&self) -> Vec<f64> {
        self.table.rows.iter().map(|r| f64::from(r.treatment.unwrap_or(0))).collect()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn feature_names(d: usize) -> Vec<String> {
    (1..=d).map(|j| format!("x{j}")).collect()
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        let bad = |m: String| Err(SyntheticError::InvalidSpec(m));
        if self.n < 10 {
            return bad(format!("n = {} is below 10", self.n));
        }
        if self.d == 0 {
            return bad("d must be at least 1".into());
        }
        if let Some(f) = self.theta.max_feature() {
            if f >= self.d {
                return bad(format!("theta reads feature {f} but d = {}", self.d));
            }
        }
        if let Assignment::Deterministic { feature, .. } = self.assignment {
            if feature >= self.d {
                return bad(format!("assignment reads feature {feature} but d = {}", self.d));
            }
        }
        if !(self.confounding_strength >= 0.0 && self.confounding_strength.is_finite()) {
            return bad("confounding_strength must be finite and non-negative".into());
        }
        if !(self.outcome_noise >= 0.0 && self.outcome_noise.is_finite()) {
            return bad("outcome_noise must be finite and non-negative".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive".into());
        }
        let (lo, hi) = self.uniform_range;
        if !(lo < hi && lo.is_finite() && hi.is_finite()) {
            return bad("uniform_range must be a finite interval with lo < hi".into());
        }
        Ok(())
    }

    /// Exact effect at `x`.
    pub fn oracle_cate(&self, x: &[f64]) -> Result<f64, SyntheticError> {
        if x.len() != self.d {
            return Err(SyntheticError::DimensionMismatch {
                expected: self.d,
                got: x.len(),
            });
        }
        Ok(self.theta.evaluate(x))
    }

    /// Features standardized by their population moments.
    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        let (lo, hi) = self.uniform_range;
        let (mid, sd) = ((lo + hi) / 2.0, (hi - lo) / 12f64.sqrt());
        x.iter()
            .enumerate()
            .map(|(j, v)| if j % 2 == 0 { (v - mid) / sd } else { *v })
            .collect()
    }

    /// Linear index `w . z` of the treatment model, `|w| = 1`.
    fn treatment_index(&self, z: &[f64]) -> f64 {
        const SIGNS: [f64; 3] = [1.0, -1.0, 1.0];
        let k = z.len().min(3);
        let norm = (k as f64).sqrt();
        (0..k).map(|j| SIGNS[j] * z[j]).sum::<f64>() / norm
    }

    /// Confounding function `g`, built on the same leading features.
    pub fn baseline(&self, x: &[f64]) -> f64 {
        let z = self.standardize(x);
        let mut g = 2.0 * (1.5 * z[0]).sin();
        if let Some(z1) = z.get(1) {
            g += 0.75 * z1 * z1 - z1;
        }
        if let Some(z2) = z.get(2) {
            g += 1.5 * z2;
        }
        g
    }
}

/// Draws a dataset from `spec`; bit-for-bit reproducible given the seed.
pub fn generate_plm(spec: &SyntheticSpec) -> Result<SyntheticData, SyntheticError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = spec.uniform_range;
    let uniform = Uniform::new(lo, hi).map_err(|e| SyntheticError::InvalidSpec(e.to_string()))?;
    let side = (spec.n as f64).sqrt().ceil() as usize;
    let width = spec.n.to_string().len();

    let mut rows = Vec::with_capacity(spec.n);
    let mut cells = Vec::with_capacity(spec.n);
    let mut true_cate = Vec::with_capacity(spec.n);
    let mut propensity = Vec::with_capacity(spec.n);
    let mut baseline = Vec::with_capacity(spec.n);
    let mut index = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let x: Vec<f64> = (0..spec.d)
            .map(|j| {
                if j % 2 == 0 {
                    uniform.sample(&mut rng)
                } else {
                    StandardNormal.sample(&mut rng)
                }
            })
            .collect();
        let z = spec.standardize(&x);
        let lin = spec.confounding_strength * spec.treatment_index(&z);
        let u: f64 = rng.random();
        let noise: f64 = StandardNormal.sample(&mut rng);
        let (t, p, raw) = match spec.assignment {
            Assignment::Logistic => {
                let p = sigmoid(lin / spec.temperature);
                let t = u8::from(u < p);
                (Some(t), p, f64::from(t))
            }
            Assignment::Deterministic { feature, threshold } => {
                let t = u8::from(x[feature] > threshold);
                (Some(t), f64::from(t), f64::from(t))
            }
            Assignment::ContinuousMedian => {
                // inverse-CDF draw of a standard logistic variable
                let u = u.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
                let latent = lin + spec.temperature * (u / (1.0 - u)).ln();
                (None, f64::NAN, latent)
            }
        };
        let theta = spec.theta.evaluate(&x);
        let g = spec.baseline(&x);
        let outcome = theta * f64::from(t.unwrap_or(0)) + g + spec.outcome_noise * noise;
        let id = format!("c{i:0width$}");
        cells.push(GridCell::new(
            id.clone(),
            (i % side) as f64 * DEFAULT_CELL_SIZE_M,
            (i / side) as f64 * DEFAULT_CELL_SIZE_M,
            DEFAULT_CELL_SIZE_M,
        ));
        rows.push(CrossSection {
            cell_id: id,
            features: x,
            treatment_raw: raw,
            treatment: t,
            outcome,
        });
        true_cate.push(theta);
        propensity.push(p);
        baseline.push(g);
        index.push(lin);
    }
    let mut table = CrossSectionTable {
        feature_names: feature_names(spec.d),
        rows,
        cells,
    };
    if spec.assignment == Assignment::ContinuousMedian {
        let b = binarize_table(&mut table).map_err(|e| SyntheticError::InvalidSpec(e.to_string()))?;
        for (k, row) in table.rows.iter_mut().enumerate() {
            let t = f64::from(row.treatment.unwrap_or(0));
            row.outcome += true_cate[k] * t;
            propensity[k] = sigmoid((index[k] - b.median) / spec.temperature);
        }
    }
    Ok(SyntheticData {
        table,
        true_cate,
        propensity,
        baseline,
    })
}

/// Difference in mean outcomes between treated and control units.
pub fn difference_in_means(y: &[f64], t: &[f64]) -> f64 {
    let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0usize, 0.0, 0usize);
    for (yi, ti) in y.iter().zip(t) {
        if *ti == 1.0 {
            s1 += yi;
            n1 += 1;
        } else {
            s0 += yi;
            n0 += 1;
        }
    }
    s1 / n1 as f64 - s0 / n0 as f64
}
