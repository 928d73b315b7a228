//! Honest causal tree on residualized data.

use ndarray::{ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::learners::tree::{candidate_features, midpoint};
use crate::learners::MaxFeatures;

/// Children with `sum(T~^2)` below this are not allowed.
pub const MIN_TREATMENT_WEIGHT: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "node")]
pub enum CausalNode {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        tau_hat: f64,
        n_estimation_samples: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeSettings {
    pub min_samples_leaf: usize,
    pub max_depth: Option<usize>,
    pub max_features: MaxFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalTree {
    pub nodes: Vec<CausalNode>,
    /// Estimation rows behind each leaf, indexed like `nodes` (empty for
    /// splits). Kept in memory only.
    #[serde(skip)]
    pub leaf_samples: Vec<Vec<u32>>,
    #[serde(skip)]
    pub structure_rows: Vec<u32>,
}

/// Residual moments of a set of rows.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: usize,
    /// sum T~ Y~
    ty: f64,
    /// sum T~^2
    tt: f64,
}

impl Moments {
    fn add(&mut self, ty: f64, tt: f64) {
        self.n += 1;
        self.ty += ty;
        self.tt += tt;
    }

    fn minus(&self, other: &Moments) -> Moments {
        Moments {
            n: self.n - other.n,
            ty: self.ty - other.ty,
            tt: self.tt - other.tt,
        }
    }

    fn tau(&self) -> f64 {
        self.ty / self.tt
    }

    /// `n * tau^2`, one child's share of the heterogeneity score.
    fn score(&self) -> f64 {
        let tau = self.tau();
        self.n as f64 * tau * tau
    }
}

fn moments(rows: &[u32], ty: &[f64], tt: &[f64]) -> Moments {
    let mut m = Moments::default();
    for &r in rows {
        m.add(ty[r as usize], tt[r as usize]);
    }
    m
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    feature: usize,
    threshold: f64,
    score: f64,
}

/// Best split of a node by the heterogeneity score
/// `n_L tau_L^2 + n_R tau_R^2` on the structure rows, subject to
/// `min_leaf` structure and estimation rows and enough treatment
/// variation on both sides of both halves.
fn best_split(
    x: ArrayView2<f64>,
    ty: &[f64],
    tt: &[f64],
    structure: &[u32],
    estimation: &[u32],
    features: &[usize],
    min_leaf: usize,
) -> Option<Candidate> {
    let n = structure.len();
    if n < 2 * min_leaf || estimation.len() < 2 * min_leaf {
        return None;
    }
    let s_total = moments(structure, ty, tt);
    let e_total = moments(estimation, ty, tt);
    let mut best: Option<Candidate> = None;
    let mut s_sorted: Vec<(f64, u32)> = Vec::with_capacity(n);
    let mut e_sorted: Vec<(f64, u32)> = Vec::with_capacity(estimation.len());
    for &f in features {
        s_sorted.clear();
        s_sorted.extend(structure.iter().map(|&r| (x[[r as usize, f]], r)));
        s_sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        if s_sorted[0].0 == s_sorted[n - 1].0 {
            continue;
        }
        e_sorted.clear();
        e_sorted.extend(estimation.iter().map(|&r| (x[[r as usize, f]], r)));
        e_sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

        let mut s_left = Moments::default();
        let mut e_left = Moments::default();
        let mut e_pos = 0;
        for k in 0..n - 1 {
            let r = s_sorted[k].1 as usize;
            s_left.add(ty[r], tt[r]);
            if s_left.n < min_leaf || s_sorted[k].0 == s_sorted[k + 1].0 {
                continue;
            }
            if n - s_left.n < min_leaf {
                break;
            }
            let threshold = midpoint(s_sorted[k].0, s_sorted[k + 1].0);
            while e_pos < e_sorted.len() && e_sorted[e_pos].0 <= threshold {
                let r = e_sorted[e_pos].1 as usize;
                e_left.add(ty[r], tt[r]);
                e_pos += 1;
            }
            let s_right = s_total.minus(&s_left);
            let e_right = e_total.minus(&e_left);
            if e_left.n < min_leaf || e_right.n < min_leaf {
                continue;
            }
            if [s_left.tt, s_right.tt, e_left.tt, e_right.tt]
                .iter()
                .any(|w| *w < MIN_TREATMENT_WEIGHT)
            {
                continue;
            }
            let score = s_left.score() + s_right.score();
            // near-equal scores keep the earlier (feature, threshold)
            if best.is_none_or(|b| score > b.score + 1e-12 * b.score.abs()) {
                best = Some(Candidate { feature: f, threshold, score });
            }
        }
    }
    best
}

impl CausalTree {
    /// Grows the structure on `structure` rows and fills leaf effects from
    /// `estimation` rows. `ty[i] = T~_i Y~_i`, `tt[i] = T~_i^2`.
    /// Returns `None` when the estimation rows carry no treatment variation.
    pub fn fit<R: Rng>(
        x: ArrayView2<f64>,
        ty: &[f64],
        tt: &[f64],
        structure: Vec<u32>,
        estimation: Vec<u32>,
        settings: &TreeSettings,
        rng: &mut R,
    ) -> Option<Self> {
        if moments(&estimation, ty, tt).tt < MIN_TREATMENT_WEIGHT {
            return None;
        }
        let n_features = x.ncols();
        let k = settings.max_features.resolve(n_features);
        let structure_rows = structure.clone();
        let mut nodes = vec![CausalNode::Leaf {
            tau_hat: 0.0,
            n_estimation_samples: 0,
        }];
        let mut leaf_samples = vec![Vec::new()];
        let mut stack = vec![(0usize, structure, estimation, 0usize)];
        while let Some((slot, s_rows, e_rows, depth)) = stack.pop() {
            let depth_ok = settings.max_depth.is_none_or(|d| depth < d);
            let split = if depth_ok {
                let features = candidate_features(n_features, k, Some(&mut *rng));
                best_split(x, ty, tt, &s_rows, &e_rows, &features, settings.min_samples_leaf.max(1))
            } else {
                None
            };
            match split {
                Some(c) => {
                    let goes_left = |r: &u32| x[[*r as usize, c.feature]] <= c.threshold;
                    let (sl, sr): (Vec<u32>, Vec<u32>) = s_rows.iter().partition(|r| goes_left(r));
                    let (el, er): (Vec<u32>, Vec<u32>) = e_rows.iter().partition(|r| goes_left(r));
                    let left = nodes.len();
                    let right = left + 1;
                    for _ in 0..2 {
                        nodes.push(CausalNode::Leaf {
                            tau_hat: 0.0,
                            n_estimation_samples: 0,
                        });
                        leaf_samples.push(Vec::new());
                    }
                    nodes[slot] = CausalNode::Split {
                        feature: c.feature,
                        threshold: c.threshold,
                        left,
                        right,
                    };
                    stack.push((right, sr, er, depth + 1));
                    stack.push((left, sl, el, depth + 1));
                }
                None => {
                    let m = moments(&e_rows, ty, tt);
                    nodes[slot] = CausalNode::Leaf {
                        tau_hat: m.tau(),
                        n_estimation_samples: m.n,
                    };
                    leaf_samples[slot] = e_rows;
                }
            }
        }
        Some(Self {
            nodes,
            leaf_samples,
            structure_rows,
        })
    }

    pub fn leaf_index(&self, row: ArrayView1<f64>) -> usize {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                CausalNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if row[feature] <= threshold { left } else { right },
                CausalNode::Leaf { .. } => return at,
            }
        }
    }

    pub fn predict_row(&self, row: ArrayView1<f64>) -> f64 {
        match self.nodes[self.leaf_index(row)] {
            CausalNode::Leaf { tau_hat, .. } => tau_hat,
            CausalNode::Split { .. } => unreachable!("leaf_index ends at a leaf"),
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, CausalNode::Leaf { .. })).count()
    }

    /// A single-leaf tree with a fixed effect.
    pub fn constant(tau_hat: f64) -> Self {
        Self {
            nodes: vec![CausalNode::Leaf {
                tau_hat,
                n_estimation_samples: 0,
            }],
            leaf_samples: vec![Vec::new()],
            structure_rows: Vec::new(),
        }
    }
}
