use std::fmt::Write as _;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::CausalForestError;
use crate::learners::tree::Node;
use crate::learners::{MaxFeatures, RegressionTree, TreeParams};

const Z_95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafSummary {
    /// Node index in the underlying regression tree.
    pub node: usize,
    pub n: usize,
    pub cate_mean: f64,
    /// Population standard deviation of the leaf's CATEs.
    pub cate_std: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Conditions on the path from the root, e.g. `x1 <= 0.5`.
    pub path: Vec<String>,
}

/// Nested form used for JSON export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InterpretationNode {
    Split {
        feature: String,
        threshold: f64,
        condition: String,
        n: usize,
        cate_mean: f64,
        /// Rows for which `condition` holds.
        left: Box<InterpretationNode>,
        right: Box<InterpretationNode>,
    },
    Leaf(LeafSummary),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretationTree {
    pub feature_names: Vec<String>,
    pub max_depth: usize,
    pub tree: RegressionTree,
    pub leaves: Vec<LeafSummary>,
    /// `(n, mean)` of the CATEs reaching each node.
    pub node_stats: Vec<(usize, f64)>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Regression tree of depth at most `max_depth` fit to per-unit CATEs.
pub fn interpret_tree(
    x: ArrayView2<f64>,
    feature_names: &[String],
    cate: &[f64],
    max_depth: usize,
    min_samples_leaf: usize,
) -> Result<InterpretationTree, CausalForestError> {
    if cate.is_empty() {
        return Err(CausalForestError::EmptyData);
    }
    if feature_names.len() != x.ncols() {
        return Err(CausalForestError::DimensionMismatch {
            expected: x.ncols(),
            got: feature_names.len(),
        });
    }
    let params = TreeParams {
        max_depth: Some(max_depth),
        min_samples_leaf: min_samples_leaf.max(1),
        max_features: MaxFeatures::All,
    };
    let tree = RegressionTree::fit(x, cate, &params)?;

    let mut node_rows: Vec<Vec<usize>> = vec![Vec::new(); tree.nodes.len()];
    let mut paths: Vec<Vec<String>> = vec![Vec::new(); tree.nodes.len()];
    node_rows[0] = (0..cate.len()).collect();
    // parents precede children in the node vector
    for at in 0..tree.nodes.len() {
        if let Node::Split {
            feature,
            threshold,
            left,
            right,
            ..
        } = tree.nodes[at]
        {
            let rows = std::mem::take(&mut node_rows[at]);
            let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x[[i, feature]] <= threshold);
            let cond = format!("{} <= {}", feature_names[feature], threshold);
            let neg = format!("{} > {}", feature_names[feature], threshold);
            paths[left] = paths[at].iter().cloned().chain([cond]).collect();
            paths[right] = paths[at].iter().cloned().chain([neg]).collect();
            node_rows[left] = l;
            node_rows[right] = r;
            node_rows[at] = rows;
        }
    }
    let mut node_stats = Vec::with_capacity(tree.nodes.len());
    let mut leaves = Vec::new();
    for (at, rows) in node_rows.iter().enumerate() {
        let values: Vec<f64> = rows.iter().map(|&i| cate[i]).collect();
        let (mean, std) = mean_std(&values);
        node_stats.push((rows.len(), mean));
        if let Node::Leaf { .. } = tree.nodes[at] {
            let half = Z_95 * std / (rows.len() as f64).sqrt();
            leaves.push(LeafSummary {
                node: at,
                n: rows.len(),
                cate_mean: mean,
                cate_std: std,
                ci_low: mean - half,
                ci_high: mean + half,
                path: paths[at].clone(),
            });
        }
    }
    Ok(InterpretationTree {
        feature_names: feature_names.to_vec(),
        max_depth,
        tree,
        leaves,
        node_stats,
    })
}

impl InterpretationTree {
    pub fn depth(&self) -> usize {
        self.tree.depth()
    }

    pub fn root(&self) -> InterpretationNode {
        self.node(0)
    }

    fn node(&self, at: usize) -> InterpretationNode {
        match self.tree.nodes[at] {
            Node::Split {
                feature,
                threshold,
                left,
                right,
                ..
            } => InterpretationNode::Split {
                feature: self.feature_names[feature].clone(),
                threshold,
                condition: format!("{} <= {}", self.feature_names[feature], threshold),
                n: self.node_stats[at].0,
                cate_mean: self.node_stats[at].1,
                left: Box::new(self.node(left)),
                right: Box::new(self.node(right)),
            },
            Node::Leaf { .. } => InterpretationNode::Leaf(
                self.leaves
                    .iter()
                    .find(|l| l.node == at)
                    .expect("every leaf has a summary")
                    .clone(),
            ),
        }
    }

    /// Indented text; the first child under a condition is where it holds.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        self.render(0, 0, "", &mut out);
        out
    }

    fn render(&self, at: usize, indent: usize, label: &str, out: &mut String) {
        let pad = "  ".repeat(indent);
        match self.node(at) {
            InterpretationNode::Split {
                condition, n, cate_mean, ..
            } => {
                let _ = writeln!(out, "{pad}{label}[{condition}] n={n} cate_mean={cate_mean:.4}");
                if let Node::Split { left, right, .. } = self.tree.nodes[at] {
                    self.render(left, indent + 1, "true: ", out);
                    self.render(right, indent + 1, "false: ", out);
                }
            }
            InterpretationNode::Leaf(l) => {
                let _ = writeln!(
                    out,
                    "{pad}{label}leaf n={} cate_mean={:.4} cate_std={:.4} ci95=[{:.4}, {:.4}]",
                    l.n, l.cate_mean, l.cate_std, l.ci_low, l.ci_high
                );
            }
        }
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Export<'a> {
            max_depth: usize,
            feature_names: &'a [String],
            root: InterpretationNode,
        }
        serde_json::to_string_pretty(&Export {
            max_depth: self.max_depth,
            feature_names: &self.feature_names,
            root: self.root(),
        })
        .expect("tree serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(d: usize) -> Vec<String> {
        (1..=d).map(|j| format!("x{j}")).collect()
    }

    #[test]
    fn constant_cates_give_one_tight_leaf() {
        let x = Array2::from_shape_fn((10, 2), |(i, j)| (i * (j + 1)) as f64);
        let t = interpret_tree(x.view(), &names(2), &[1.5; 10], 2, 1).unwrap();
        assert_eq!(t.leaves.len(), 1);
        assert_eq!(t.leaves[0].cate_std, 0.0);
        assert_eq!(t.leaves[0].ci_low, t.leaves[0].ci_high);
    }

    #[test]
    fn step_on_integer_grid_splits_between_four_and_six() {
        let x = Array2::from_shape_fn((11, 2), |(i, j)| if j == 0 { i as f64 } else { ((i * 7) % 11) as f64 });
        let cate: Vec<f64> = (0..11).map(|i| if i > 5 { 10.0 } else { 0.0 }).collect();
        let t = interpret_tree(x.view(), &names(2), &cate, 2, 1).unwrap();
        match t.tree.nodes[0] {
            Node::Split { feature, threshold, .. } => {
                assert_eq!(feature, 0);
                assert!(threshold > 4.0 && threshold < 6.0);
            }
            _ => panic!("expected a split"),
        }
    }

    #[test]
    fn depth_two_leaf_counts_and_weighted_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 500;
        let x = Array2::from_shape_fn((n, 3), |_| rng.random::<f64>());
        let cate: Vec<f64> = (0..n).map(|i| x[[i, 0]] * 2.0 + x[[i, 2]].powi(2) + rng.random::<f64>()).collect();
        let t = interpret_tree(x.view(), &names(3), &cate, 2, 1).unwrap();
        assert!(t.leaves.len() <= 4 && t.depth() <= 2);
        assert_eq!(t.leaves.iter().map(|l| l.n).sum::<usize>(), n);
        let weighted = t.leaves.iter().map(|l| l.n as f64 * l.cate_mean).sum::<f64>() / n as f64;
        let overall = cate.iter().sum::<f64>() / n as f64;
        assert!((weighted - overall).abs() <= 1e-10);
        for l in &t.leaves {
            let half = 1.96 * l.cate_std / (l.n as f64).sqrt();
            assert!((l.ci_high - l.cate_mean - half).abs() < 1e-12);
        }
        let text = t.render_text();
        assert!(text.starts_with('['));
        assert_eq!(text.matches("leaf n=").count(), t.leaves.len());
        let json: serde_json::Value = serde_json::from_str(&t.to_json()).unwrap();
        assert_eq!(json["root"]["kind"], "split");
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(matches!(
            interpret_tree(Array2::zeros((0, 1)).view(), &names(1), &[], 2, 1),
            Err(CausalForestError::EmptyData)
        ));
    }
}
