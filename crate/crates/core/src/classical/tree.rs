//! CART classification trees: exact greedy splits on weighted Gini
//! impurity. Used standalone (deterministic, all features) and inside the
//! random forest (bootstrap rows, per-split feature subsample).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::NUM_CLASSES;

use super::ClassicalParams;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum TreeNode {
    Split {
        feature: usize,
        /// Goes left when x[feature] <= threshold.
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        dist: [f64; NUM_CLASSES],
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GiniTree {
    nodes: Vec<TreeNode>,
}

impl GiniTree {
    pub fn proba(&self, x: &[f64]) -> [f64; NUM_CLASSES] {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[*feature] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
                TreeNode::Leaf { dist } => return *dist,
            }
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
}

struct Grower<'a> {
    xs: &'a [Vec<f64>],
    ys: &'a [usize],
    weights: &'a [f64],
    params: TreeParams,
    /// When set, each split considers a random subset of this many features.
    features_per_split: Option<usize>,
    rng: Option<ChaCha20Rng>,
    nodes: Vec<TreeNode>,
}

impl Grower<'_> {
    fn class_hist(&self, idxs: &[usize]) -> ([f64; NUM_CLASSES], f64) {
        let mut hist = [0.0f64; NUM_CLASSES];
        for &i in idxs {
            hist[self.ys[i]] += self.weights[i];
        }
        let total: f64 = hist.iter().sum();
        (hist, total)
    }

    fn leaf(&mut self, hist: [f64; NUM_CLASSES], total: f64) -> u32 {
        let dist = if total > 0.0 {
            hist.map(|h| h / total)
        } else {
            [1.0 / NUM_CLASSES as f64; NUM_CLASSES]
        };
        self.nodes.push(TreeNode::Leaf { dist });
        (self.nodes.len() - 1) as u32
    }

    fn grow(&mut self, idxs: &mut Vec<usize>, depth: usize) -> u32 {
        let (hist, total) = self.class_hist(idxs);
        let pure = hist.iter().filter(|&&h| h > 0.0).count() <= 1;
        if depth >= self.params.max_depth || pure || idxs.len() < 2 * self.params.min_samples_leaf {
            return self.leaf(hist, total);
        }

        let d = self.xs[0].len();
        let candidate_features: Vec<usize> = match (self.features_per_split, &mut self.rng) {
            (Some(m), Some(rng)) => {
                let m = m.min(d);
                rand::seq::index::sample(rng, d, m).into_vec()
            }
            _ => (0..d).collect(),
        };

        let parent_score = gini_score(&hist, total);
        let mut best: Option<(f64, usize, f64)> = None; // (gain, feature, threshold)
        let mut col: Vec<(f64, usize)> = Vec::with_capacity(idxs.len());
        for &f in &candidate_features {
            col.clear();
            col.extend(idxs.iter().map(|&i| (self.xs[i][f], i)));
            col.sort_by(|a, b| a.0.total_cmp(&b.0));

            let mut left_hist = [0.0f64; NUM_CLASSES];
            let mut left_weight = 0.0;
            for k in 0..col.len() - 1 {
                let (v, i) = col[k];
                left_hist[self.ys[i]] += self.weights[i];
                left_weight += self.weights[i];
                let next_v = col[k + 1].0;
                if next_v <= v {
                    continue;
                }
                let left_count = k + 1;
                let right_count = col.len() - left_count;
                if left_count < self.params.min_samples_leaf
                    || right_count < self.params.min_samples_leaf
                {
                    continue;
                }
                let mut right_hist = [0.0f64; NUM_CLASSES];
                for c in 0..NUM_CLASSES {
                    right_hist[c] = hist[c] - left_hist[c];
                }
                let right_weight = total - left_weight;
                let gain = parent_score
                    - gini_score(&left_hist, left_weight)
                    - gini_score(&right_hist, right_weight);
                if gain > 1e-12 && best.map_or(true, |(bg, _, _)| gain > bg) {
                    best = Some((gain, f, v.midpoint(next_v)));
                }
            }
        }

        let Some((_, feature, threshold)) = best else {
            return self.leaf(hist, total);
        };
        let (mut left_idx, mut right_idx): (Vec<usize>, Vec<usize>) =
            idxs.iter().partition(|&&i| self.xs[i][feature] <= threshold);
        // Reserve the slot so children indices are stable.
        self.nodes.push(TreeNode::Leaf {
            dist: [0.0; NUM_CLASSES],
        });
        let slot = (self.nodes.len() - 1) as u32;
        let left = self.grow(&mut left_idx, depth + 1);
        let right = self.grow(&mut right_idx, depth + 1);
        self.nodes[slot as usize] = TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        };
        slot
    }
}

/// Weighted Gini "score": total * (1 - sum p^2), additive across children so
/// gain = parent - left - right.
fn gini_score(hist: &[f64; NUM_CLASSES], total: f64) -> f64 {
    if total <= 0.0 {
        return 0.0;
    }
    let sum_sq: f64 = hist.iter().map(|h| h * h).sum();
    total - sum_sq / total
}

pub fn fit_tree(
    xs: &[Vec<f64>],
    ys: &[usize],
    weights: &[f64],
    params: &ClassicalParams,
) -> GiniTree {
    let mut grower = Grower {
        xs,
        ys,
        weights,
        params: TreeParams {
            max_depth: params.max_depth,
            min_samples_leaf: params.min_samples_leaf,
        },
        features_per_split: None,
        rng: None,
        nodes: Vec::new(),
    };
    let mut idxs: Vec<usize> = (0..xs.len()).collect();
    grower.grow(&mut idxs, 0);
    GiniTree {
        nodes: grower.nodes,
    }
}

pub fn fit_forest(
    xs: &[Vec<f64>],
    ys: &[usize],
    weights: &[f64],
    params: &ClassicalParams,
    seed: u64,
) -> Vec<GiniTree> {
    let d = xs[0].len();
    let features_per_split = (d as f64).sqrt().ceil() as usize;
    (0..params.num_trees)
        .map(|t| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(t as u64));
            let mut idxs: Vec<usize> = (0..xs.len())
                .map(|_| rng.random_range(0..xs.len()))
                .collect();
            let mut grower = Grower {
                xs,
                ys,
                weights,
                params: TreeParams {
                    max_depth: params.max_depth,
                    min_samples_leaf: params.min_samples_leaf,
                },
                features_per_split: Some(features_per_split),
                rng: Some(rng),
                nodes: Vec::new(),
            };
            grower.grow(&mut idxs, 0);
            GiniTree {
                nodes: grower.nodes,
            }
        })
        .collect()
}
