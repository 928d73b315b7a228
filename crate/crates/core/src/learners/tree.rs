//! CART regression tree with variance-reduction splits.

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LearnError;

/// How many features are considered at each split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum MaxFeatures {
    #[default]
    All,
    Sqrt,
    Count(usize),
    Fraction(f64),
}

impl MaxFeatures {
    pub fn resolve(&self, n_features: usize) -> usize {
        let k = match *self {
            MaxFeatures::All => n_features,
            MaxFeatures::Sqrt => (n_features as f64).sqrt().floor() as usize,
            MaxFeatures::Count(c) => c,
            MaxFeatures::Fraction(f) => (f * n_features as f64).floor() as usize,
        };
        k.clamp(1, n_features.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub max_features: MaxFeatures,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            max_depth: None,
            min_samples_leaf: 1,
            max_features: MaxFeatures::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "node")]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        n_samples: usize,
    },
    Leaf { prediction: f64, n_samples: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub n_features: usize,
}

/// Best split found for a node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct SplitChoice {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

/// Midpoint threshold that still sends `lo` left and `hi` right.
pub(crate) fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid >= hi || mid < lo {
        lo
    } else {
        mid
    }
}

/// Exhaustive variance-reduction split over the given features. Ties keep
/// the first candidate in (feature, threshold) order.
const TIE_TOLERANCE: f64 = 1e-12;

pub(crate) fn best_variance_split(
    x: ArrayView2<f64>,
    y: &[f64],
    indices: &[usize],
    features: &[usize],
    min_samples_leaf: usize,
) -> Option<SplitChoice> {
    let n = indices.len();
    let min_leaf = min_samples_leaf.max(1);
    if n < 2 * min_leaf {
        return None;
    }
    let total: f64 = indices.iter().map(|&i| y[i]).sum();
    let parent = total * total / n as f64;
    let parent_sse: f64 = {
        let mean = total / n as f64;
        indices.iter().map(|&i| (y[i] - mean).powi(2)).sum()
    };

    // gains are differences of sums of squares, so rounding scales with sum(y^2)
    let tie = TIE_TOLERANCE * indices.iter().map(|&i| y[i] * y[i]).sum::<f64>();
    let mut best: Option<SplitChoice> = None;
    let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(n);
    for &f in features {
        pairs.clear();
        pairs.extend(indices.iter().map(|&i| (x[[i, f]], y[i])));
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pairs[0].0 == pairs[n - 1].0 {
            continue;
        }
        let mut left_sum = 0.0;
        for k in 0..n - 1 {
            left_sum += pairs[k].1;
            let n_left = k + 1;
            if n_left < min_leaf {
                continue;
            }
            if n - n_left < min_leaf {
                break;
            }
            if pairs[k].0 == pairs[k + 1].0 {
                continue;
            }
            let right_sum = total - left_sum;
            let score = left_sum * left_sum / n_left as f64 + right_sum * right_sum / (n - n_left) as f64;
            let gain = score - parent;
            // equal gains up to rounding keep the earlier (feature, threshold)
            if best.is_none_or(|b| gain > b.gain + tie) {
                best = Some(SplitChoice {
                    feature: f,
                    threshold: midpoint(pairs[k].0, pairs[k + 1].0),
                    gain,
                });
            }
        }
    }
    // reject splits whose gain is rounding noise relative to the node's spread
    best.filter(|b| b.gain > 1e-12 * parent_sse.max(f64::MIN_POSITIVE))
}

/// Features considered at one node, ascending.
pub(crate) fn candidate_features<R: Rng + ?Sized>(n_features: usize, k: usize, rng: Option<&mut R>) -> Vec<usize> {
    match rng {
        Some(rng) if k < n_features => {
            let mut f = sample(rng, n_features, k).into_vec();
            f.sort_unstable();
            f
        }
        _ => (0..n_features).collect(),
    }
}

impl RegressionTree {
    /// Fits a tree on every row of `x`.
    pub fn fit(x: ArrayView2<f64>, y: &[f64], params: &TreeParams) -> Result<Self, LearnError> {
        super::check_xy(x, y)?;
        let indices: Vec<usize> = (0..y.len()).collect();
        Ok(Self::fit_rows::<rand_chacha::ChaCha8Rng>(x, y, &indices, params, None))
    }

    /// Fits on a multiset of row indices (bootstrap samples may repeat rows).
    /// Feature subsampling draws from `rng` when given.
    pub fn fit_rows<R: Rng>(
        x: ArrayView2<f64>,
        y: &[f64],
        rows: &[usize],
        params: &TreeParams,
        mut rng: Option<&mut R>,
    ) -> Self {
        let n_features = x.ncols();
        let k = params.max_features.resolve(n_features);
        let mut nodes = Vec::new();
        // (node slot, rows, depth)
        let mut stack: Vec<(usize, Vec<usize>, usize)> = vec![(0, rows.to_vec(), 0)];
        nodes.push(Node::Leaf {
            prediction: 0.0,
            n_samples: 0,
        });

        while let Some((slot, idx, depth)) = stack.pop() {
            let n = idx.len();
            let mean = idx.iter().map(|&i| y[i]).sum::<f64>() / n.max(1) as f64;
            let pure = idx.iter().all(|&i| y[i] == y[idx[0]]);
            let depth_ok = params.max_depth.is_none_or(|d| depth < d);
            let split = if !pure && depth_ok {
                let features = candidate_features(n_features, k, rng.as_deref_mut());
                best_variance_split(x, y, &idx, &features, params.min_samples_leaf)
            } else {
                None
            };
            match split {
                Some(s) => {
                    let (l, r): (Vec<usize>, Vec<usize>) =
                        idx.iter().partition(|&&i| x[[i, s.feature]] <= s.threshold);
                    let left = nodes.len();
                    let right = left + 1;
                    let placeholder = Node::Leaf {
                        prediction: 0.0,
                        n_samples: 0,
                    };
                    nodes.push(placeholder.clone());
                    nodes.push(placeholder);
                    nodes[slot] = Node::Split {
                        feature: s.feature,
                        threshold: s.threshold,
                        left,
                        right,
                        n_samples: n,
                    };
                    // right first so the left subtree is expanded first
                    stack.push((right, r, depth + 1));
                    stack.push((left, l, depth + 1));
                }
                None => {
                    nodes[slot] = Node::Leaf {
                        prediction: if pure && n > 0 { y[idx[0]] } else { mean },
                        n_samples: n,
                    };
                }
            }
        }

        Self {
            nodes,
            max_depth: params.max_depth,
            min_samples_leaf: params.min_samples_leaf,
            n_features,
        }
    }

    /// Index of the leaf node reached by `row`.
    pub fn leaf_index(&self, row: ArrayView1<f64>) -> usize {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => at = if row[*feature] <= *threshold { *left } else { *right },
                Node::Leaf { .. } => return at,
            }
        }
    }

    pub fn predict_row(&self, row: ArrayView1<f64>) -> f64 {
        match self.nodes[self.leaf_index(row)] {
            Node::Leaf { prediction, .. } => prediction,
            Node::Split { .. } => unreachable!("leaf_index returns a leaf"),
        }
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Array1<f64> {
        x.rows().into_iter().map(|r| self.predict_row(r)).collect()
    }

    pub fn set_leaf_prediction(&mut self, leaf: usize, value: f64) {
        if let Node::Leaf { prediction, .. } = &mut self.nodes[leaf] {
            *prediction = value;
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    /// Number of edges on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
                Node::Leaf { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }
}
