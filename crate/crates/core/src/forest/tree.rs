//! Greedy CART regression trees.
//!
//! Splits maximize the weighted impurity decrease
//! `ΔI = (N_t / N) * (var(t) - N_L/N_t var(L) - N_R/N_t var(R))` with
//! population variances, where `N` is the size of the tree's training
//! sample. A node is split only when `ΔI >= min_impurity_decrease`.
//! Candidate thresholds are midpoints between consecutive distinct sorted
//! feature values; samples with `x <= threshold` go left. Candidates whose
//! `ΔI` agree within a relative [`TIE_TOLERANCE`] are ties, resolved in favor
//! of the lower feature index and then the lower threshold.

use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Relative tolerance under which two impurity decreases count as equal.
pub const TIE_TOLERANCE: f64 = 1e-10;

/// Column-major feature storage.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n_samples: usize,
    columns: Vec<Vec<f64>>,
}

impl FeatureMatrix {
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let n_features = rows.first().map_or(0, |r| r.as_ref().len());
        let mut columns = vec![Vec::with_capacity(rows.len()); n_features];
        for row in rows {
            let row = row.as_ref();
            assert_eq!(row.len(), n_features, "ragged feature rows");
            for (col, v) in columns.iter_mut().zip(row) {
                col.push(*v);
            }
        }
        FeatureMatrix {
            n_samples: rows.len(),
            columns,
        }
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn get(&self, sample: usize, feature: usize) -> f64 {
        self.columns[feature][sample]
    }

    pub fn column(&self, feature: usize) -> &[f64] {
        &self.columns[feature]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub min_samples_split: usize,
    pub max_features_fraction: f64,
    pub min_impurity_decrease: f64,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            min_samples_split: 2,
            max_features_fraction: 1.0,
            min_impurity_decrease: 0.001,
        }
    }
}

/// Nested tree representation, used for model files and structural comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        value: f64,
        count: usize,
    },
}

impl TreeNode {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Split { feature, threshold, left, right } => {
                    node = if x[*feature] <= *threshold { left } else { right };
                }
                TreeNode::Leaf { value, .. } => return *value,
            }
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            TreeNode::Split { left, right, .. } => 1 + left.node_count() + right.node_count(),
            TreeNode::Leaf { .. } => 1,
        }
    }

    pub fn max_feature(&self) -> Option<usize> {
        match self {
            TreeNode::Split { feature, left, right, .. } => Some(
                (*feature)
                    .max(left.max_feature().unwrap_or(0))
                    .max(right.max_feature().unwrap_or(0)),
            ),
            TreeNode::Leaf { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Node {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        value: f64,
        count: u32,
    },
}

/// Flat, cache-friendly tree used for prediction. Root is node 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0usize;
        loop {
            match self.nodes[i] {
                Node::Split { feature, threshold, left, right } => {
                    i = if x[feature as usize] <= threshold { left } else { right } as usize;
                }
                Node::Leaf { value, .. } => return value,
            }
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                Node::Split { left, right, .. } => 1 + go(t, left as usize).max(go(t, right as usize)),
                Node::Leaf { .. } => 0,
            }
        }
        go(self, 0)
    }

    pub fn to_node(&self) -> TreeNode {
        fn go(t: &Tree, i: usize) -> TreeNode {
            match t.nodes[i] {
                Node::Split { feature, threshold, left, right } => TreeNode::Split {
                    feature: feature as usize,
                    threshold,
                    left: Box::new(go(t, left as usize)),
                    right: Box::new(go(t, right as usize)),
                },
                Node::Leaf { value, count } => TreeNode::Leaf {
                    value,
                    count: count as usize,
                },
            }
        }
        go(self, 0)
    }

    pub fn from_node(root: &TreeNode) -> Tree {
        fn go(node: &TreeNode, nodes: &mut Vec<Node>) -> u32 {
            let id = nodes.len();
            match node {
                TreeNode::Leaf { value, count } => {
                    nodes.push(Node::Leaf {
                        value: *value,
                        count: *count as u32,
                    });
                }
                TreeNode::Split { feature, threshold, left, right } => {
                    nodes.push(Node::Leaf { value: 0.0, count: 0 });
                    let l = go(left, nodes);
                    let r = go(right, nodes);
                    nodes[id] = Node::Split {
                        feature: *feature as u32,
                        threshold: *threshold,
                        left: l,
                        right: r,
                    };
                }
            }
            id as u32
        }
        let mut nodes = Vec::new();
        go(root, &mut nodes);
        Tree { nodes }
    }
}

/// Midpoint threshold between consecutive distinct sorted values `lo < hi`,
/// falling back to `lo` when rounding lands on `hi`.
pub fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = 0.5 * (lo + hi);
    if mid >= hi || !mid.is_finite() {
        lo
    } else {
        mid
    }
}

/// Whether impurity decrease `candidate` beats `best` beyond the tie tolerance.
pub fn improves(candidate: f64, best: f64) -> bool {
    candidate > best + TIE_TOLERANCE * best.abs()
}

/// Fits one tree on `sample` (row indices into `x`/`y`, duplicates allowed).
/// `rng` is consulted only when `max_features_fraction < 1`.
pub fn fit_tree(x: &FeatureMatrix, y: &[f64], sample: &[usize], params: &TreeParams, rng: &mut ChaCha8Rng) -> Tree {
    assert!(!sample.is_empty(), "cannot fit a tree on an empty sample");
    assert_eq!(x.n_samples(), y.len());
    let mut builder = Builder {
        x,
        y,
        params,
        n_total: sample.len() as f64,
        n_candidates: ((params.max_features_fraction * x.n_features() as f64).ceil() as usize)
            .clamp(1, x.n_features().max(1)),
        rng,
        nodes: Vec::new(),
        pairs: Vec::with_capacity(sample.len()),
        scratch: Vec::with_capacity(sample.len()),
    };
    let mut idx: Vec<u32> = sample.iter().map(|&i| i as u32).collect();
    builder.grow(&mut idx);
    Tree { nodes: builder.nodes }
}

struct Builder<'a, 'r> {
    x: &'a FeatureMatrix,
    y: &'a [f64],
    params: &'a TreeParams,
    n_total: f64,
    n_candidates: usize,
    rng: &'r mut ChaCha8Rng,
    nodes: Vec<Node>,
    pairs: Vec<(f64, f64)>,
    scratch: Vec<u32>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    decrease: f64,
}

impl Builder<'_, '_> {
    fn grow(&mut self, idx: &mut [u32]) -> u32 {
        let id = self.nodes.len();
        let n = idx.len();
        let first = self.y[idx[0] as usize];
        let constant = idx.iter().all(|&i| self.y[i as usize] == first);
        let mean = if constant {
            first
        } else {
            idx.iter().map(|&i| self.y[i as usize]).sum::<f64>() / n as f64
        };
        self.nodes.push(Node::Leaf {
            value: mean,
            count: n as u32,
        });
        if n < self.params.min_samples_split || constant {
            return id as u32;
        }
        let Some(best) = self.best_split(idx, mean) else {
            return id as u32;
        };
        if !(best.decrease >= self.params.min_impurity_decrease) {
            return id as u32;
        }

        // Stable partition: left keeps x <= threshold.
        let col = self.x.column(best.feature);
        self.scratch.clear();
        let mut n_left = 0;
        for k in 0..n {
            let i = idx[k];
            if col[i as usize] <= best.threshold {
                idx[n_left] = i;
                n_left += 1;
            } else {
                self.scratch.push(i);
            }
        }
        idx[n_left..].copy_from_slice(&self.scratch);
        debug_assert!(n_left > 0 && n_left < n);

        let (left_idx, right_idx) = idx.split_at_mut(n_left);
        let left = self.grow(left_idx);
        let right = self.grow(right_idx);
        self.nodes[id] = Node::Split {
            feature: best.feature as u32,
            threshold: best.threshold,
            left,
            right,
        };
        id as u32
    }

    fn candidate_features(&mut self) -> Vec<usize> {
        let n_features = self.x.n_features();
        if self.n_candidates >= n_features {
            (0..n_features).collect()
        } else {
            let mut f = index::sample(self.rng, n_features, self.n_candidates).into_vec();
            f.sort_unstable();
            f
        }
    }

    fn best_split(&mut self, idx: &[u32], mean: f64) -> Option<BestSplit> {
        let n = idx.len();
        let mut best: Option<BestSplit> = None;
        for feature in self.candidate_features() {
            let col = self.x.column(feature);
            self.pairs.clear();
            self.pairs
                .extend(idx.iter().map(|&i| (col[i as usize], self.y[i as usize] - mean)));
            self.pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let total: f64 = self.pairs.iter().map(|p| p.1).sum();
            let mut left_sum = 0.0;
            for k in 0..n - 1 {
                left_sum += self.pairs[k].1;
                let (lo, hi) = (self.pairs[k].0, self.pairs[k + 1].0);
                if !(lo < hi) {
                    continue;
                }
                let n_left = (k + 1) as f64;
                let n_right = (n - k - 1) as f64;
                let right_sum = total - left_sum;
                let decrease =
                    (left_sum * left_sum / n_left + right_sum * right_sum / n_right) / self.n_total;
                if best.as_ref().map_or(true, |b| improves(decrease, b.decrease)) {
                    best = Some(BestSplit {
                        feature,
                        threshold: midpoint(lo, hi),
                        decrease,
                    });
                }
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn constant_targets_make_a_leaf() {
        let x = FeatureMatrix::from_rows(&[[1.0], [2.0], [3.0]]);
        let y = [0.4, 0.4, 0.4];
        let t = fit_tree(&x, &y, &[0, 1, 2], &TreeParams::default(), &mut rng());
        assert_eq!(t.to_node(), TreeNode::Leaf { value: 0.4, count: 3 });
    }

    #[test]
    fn four_point_split() {
        let x = FeatureMatrix::from_rows(&[[1.0], [2.0], [3.0], [4.0]]);
        let y = [1.0, 1.0, 3.0, 3.0];
        let t = fit_tree(&x, &y, &[0, 1, 2, 3], &TreeParams::default(), &mut rng());
        assert_eq!(
            t.to_node(),
            TreeNode::Split {
                feature: 0,
                threshold: 2.5,
                left: Box::new(TreeNode::Leaf { value: 1.0, count: 2 }),
                right: Box::new(TreeNode::Leaf { value: 3.0, count: 2 }),
            }
        );
        assert_eq!(t.predict(&[2.7]), 3.0);
        assert_eq!(t.predict(&[2.5]), 1.0);
    }

    #[test]
    fn gate_blocks_small_decrease() {
        let x = FeatureMatrix::from_rows(&[[1.0], [2.0], [3.0], [4.0]]);
        let y = [0.0, 0.0, 0.02, 0.02];
        // ΔI at the root is 0.0001 < 0.001.
        let t = fit_tree(&x, &y, &[0, 1, 2, 3], &TreeParams::default(), &mut rng());
        assert_eq!(t.node_count(), 1);
        let open = TreeParams { min_impurity_decrease: 0.0, ..Default::default() };
        assert_eq!(fit_tree(&x, &y, &[0, 1, 2, 3], &open, &mut rng()).node_count(), 3);
    }

    #[test]
    fn duplicate_feature_values_are_not_split() {
        let x = FeatureMatrix::from_rows(&[[1.0], [1.0], [1.0]]);
        let y = [0.0, 1.0, 2.0];
        let t = fit_tree(&x, &y, &[0, 1, 2], &TreeParams::default(), &mut rng());
        assert_eq!(t.node_count(), 1);
        assert_eq!(t.predict(&[1.0]), 1.0);
    }

    #[test]
    fn arena_round_trip() {
        let x = FeatureMatrix::from_rows(&[[1.0, 5.0], [2.0, 3.0], [3.0, 1.0], [4.0, 0.0], [5.0, 2.0]]);
        let y = [0.1, 0.5, 0.9, 0.2, 0.7];
        let open = TreeParams { min_impurity_decrease: 0.0, ..Default::default() };
        let t = fit_tree(&x, &y, &[0, 1, 2, 3, 4], &open, &mut rng());
        let back = Tree::from_node(&t.to_node());
        assert_eq!(back, t);
        for i in 0..5 {
            assert_eq!(t.predict(&[x.get(i, 0), x.get(i, 1)]), y[i]);
        }
    }

    #[test]
    fn midpoint_fallback() {
        let lo = 1.0f64;
        let hi = f64::from_bits(lo.to_bits() + 1);
        assert_eq!(midpoint(lo, hi), lo);
        assert_eq!(midpoint(1.0, 2.0), 1.5);
    }
}
