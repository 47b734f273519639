//! Gradient-boosted decision trees with a softmax (multiclass) objective:
//! one regression tree per class per round, second-order leaf weights
//! -G/(H+lambda), shrinkage eta. Two split engines:
//!
//! - Exact: greedy scan over sorted raw feature values, depth-wise growth
//!   to max_depth.
//! - Histogram: features pre-binned into quantile bins, leaf-wise growth
//!   (always split the leaf with the largest gain) up to max_leaves.
//!
//! Both are fully deterministic and accumulate per-feature split gains,
//! which the analysis module consumes as feature importances.

use serde::{Deserialize, Serialize};

use crate::data::NUM_CLASSES;
use crate::error::ModelError;

use super::{softmax4, ClassicalParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitEngine {
    Exact,
    Histogram,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum RegNode {
    Split {
        feature: usize,
        /// Left when x[feature] <= threshold.
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        /// Contribution already scaled by eta.
        value: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RegTree {
    nodes: Vec<RegNode>,
}

impl RegTree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                RegNode::Split {
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
                RegNode::Leaf { value } => return *value,
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GbdtModel {
    width: usize,
    /// trees[round * NUM_CLASSES + class]
    trees: Vec<RegTree>,
    feature_gains: Vec<f64>,
    engine: SplitEngine,
}

impl GbdtModel {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn engine(&self) -> SplitEngine {
        self.engine
    }

    pub fn feature_gains(&self) -> &[f64] {
        &self.feature_gains
    }

    fn logits(&self, x: &[f64]) -> [f64; NUM_CLASSES] {
        let mut z = [0.0f64; NUM_CLASSES];
        for (k, tree) in self.trees.iter().enumerate() {
            z[k % NUM_CLASSES] += tree.predict(x);
        }
        z
    }

    pub fn proba(&self, x: &[f64]) -> [f64; NUM_CLASSES] {
        softmax4(&self.logits(x))
    }
}

fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64) -> f64 {
    let term = |g: f64, h: f64| g * g / (h + lambda);
    0.5 * (term(gl, hl) + term(gr, hr) - term(gl + gr, hl + hr))
}

struct BoostState<'a> {
    xs: &'a [Vec<f64>],
    grad: Vec<f64>,
    hess: Vec<f64>,
    params: &'a ClassicalParams,
    feature_gains: Vec<f64>,
}

impl BoostState<'_> {
    fn leaf_value(&self, g: f64, h: f64) -> f64 {
        -self.params.eta * g / (h + self.params.lambda)
    }

    fn sums(&self, idxs: &[usize]) -> (f64, f64) {
        let mut g = 0.0;
        let mut h = 0.0;
        for &i in idxs {
            g += self.grad[i];
            h += self.hess[i];
        }
        (g, h)
    }
}

// -------- exact engine (depth-wise recursion) --------

fn grow_exact(
    st: &mut BoostState<'_>,
    nodes: &mut Vec<RegNode>,
    idxs: &mut Vec<usize>,
    depth: usize,
) -> u32 {
    let (g, h) = st.sums(idxs);
    let make_leaf = |st: &BoostState<'_>, nodes: &mut Vec<RegNode>| {
        nodes.push(RegNode::Leaf {
            value: st.leaf_value(g, h),
        });
        (nodes.len() - 1) as u32
    };
    if depth >= st.params.max_depth || idxs.len() < 2 * st.params.min_samples_leaf {
        return make_leaf(st, nodes);
    }

    let d = st.xs[0].len();
    let mut best: Option<(f64, usize, f64)> = None;
    let mut col: Vec<(f64, usize)> = Vec::with_capacity(idxs.len());
    for f in 0..d {
        col.clear();
        col.extend(idxs.iter().map(|&i| (st.xs[i][f], i)));
        col.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut gl = 0.0;
        let mut hl = 0.0;
        for k in 0..col.len() - 1 {
            let (v, i) = col[k];
            gl += st.grad[i];
            hl += st.hess[i];
            let next_v = col[k + 1].0;
            if next_v <= v {
                continue;
            }
            let left_count = k + 1;
            if left_count < st.params.min_samples_leaf
                || col.len() - left_count < st.params.min_samples_leaf
            {
                continue;
            }
            let gain = split_gain(gl, hl, g - gl, h - hl, st.params.lambda);
            if gain > 1e-12 && best.map_or(true, |(bg, _, _)| gain > bg) {
                best = Some((gain, f, v.midpoint(next_v)));
            }
        }
    }

    let Some((gain, feature, threshold)) = best else {
        return make_leaf(st, nodes);
    };
    st.feature_gains[feature] += gain;
    let (mut left_idx, mut right_idx): (Vec<usize>, Vec<usize>) =
        idxs.iter().partition(|&&i| st.xs[i][feature] <= threshold);
    nodes.push(RegNode::Leaf { value: 0.0 });
    let slot = (nodes.len() - 1) as u32;
    let left = grow_exact(st, nodes, &mut left_idx, depth + 1);
    let right = grow_exact(st, nodes, &mut right_idx, depth + 1);
    nodes[slot as usize] = RegNode::Split {
        feature,
        threshold,
        left,
        right,
    };
    slot
}

// -------- histogram engine (leaf-wise growth) --------

struct Binned {
    /// Upper edge value per (feature, bin); splitting at bin b means
    /// x <= edges[f][b].
    edges: Vec<Vec<f64>>,
    /// n x d bin indices.
    codes: Vec<Vec<u8>>,
}

fn bin_features(xs: &[Vec<f64>], max_bins: usize) -> Binned {
    let d = xs[0].len();
    let n = xs.len();
    let mut edges = Vec::with_capacity(d);
    for f in 0..d {
        let mut vals: Vec<f64> = xs.iter().map(|r| r[f]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        let mut e = Vec::new();
        if vals.len() <= max_bins {
            e.extend_from_slice(&vals);
        } else {
            for b in 1..=max_bins {
                let rank = (b * vals.len()).div_ceil(max_bins) - 1;
                e.push(vals[rank]);
            }
            e.dedup();
        }
        edges.push(e);
    }
    let codes = (0..n)
        .map(|i| {
            (0..d)
                .map(|f| {
                    // First bin whose upper edge admits the value.
                    edges[f].partition_point(|e| *e < xs[i][f]) as u8
                })
                .collect()
        })
        .collect();
    Binned { edges, codes }
}

struct LeafCandidate {
    members: Vec<usize>,
    g: f64,
    h: f64,
    /// Best split if any: (gain, feature, bin).
    best: Option<(f64, usize, usize)>,
    slot: u32,
}

fn scan_leaf(st: &BoostState<'_>, binned: &Binned, members: &[usize]) -> Option<(f64, usize, usize)> {
    let d = binned.edges.len();
    let (g, h) = st.sums(members);
    let mut best: Option<(f64, usize, usize)> = None;
    let mut hist_g = [0.0f64; 256];
    let mut hist_h = [0.0f64; 256];
    let mut hist_n = [0usize; 256];
    for f in 0..d {
        let nbins = binned.edges[f].len();
        if nbins < 2 {
            continue;
        }
        hist_g[..nbins].fill(0.0);
        hist_h[..nbins].fill(0.0);
        hist_n[..nbins].fill(0);
        for &i in members {
            let b = binned.codes[i][f] as usize;
            hist_g[b] += st.grad[i];
            hist_h[b] += st.hess[i];
            hist_n[b] += 1;
        }
        let mut gl = 0.0;
        let mut hl = 0.0;
        let mut nl = 0usize;
        for b in 0..nbins - 1 {
            gl += hist_g[b];
            hl += hist_h[b];
            nl += hist_n[b];
            if nl < st.params.min_samples_leaf || members.len() - nl < st.params.min_samples_leaf {
                continue;
            }
            let gain = split_gain(gl, hl, g - gl, h - hl, st.params.lambda);
            if gain > 1e-12 && best.map_or(true, |(bg, _, _)| gain > bg) {
                best = Some((gain, f, b));
            }
        }
    }
    best
}

fn grow_histogram(st: &mut BoostState<'_>, binned: &Binned, n: usize) -> Vec<RegNode> {
    let mut nodes: Vec<RegNode> = Vec::new();
    let all: Vec<usize> = (0..n).collect();
    let (g, h) = st.sums(&all);
    nodes.push(RegNode::Leaf {
        value: st.leaf_value(g, h),
    });
    let mut leaves = vec![LeafCandidate {
        best: scan_leaf(st, binned, &all),
        members: all,
        g,
        h,
        slot: 0,
    }];

    while leaves.len() < st.params.max_leaves {
        // Split the leaf with the largest gain.
        let Some(pick) = leaves
            .iter()
            .enumerate()
            .filter(|(_, l)| l.best.is_some())
            .max_by(|a, b| {
                let ga = a.1.best.unwrap().0;
                let gb = b.1.best.unwrap().0;
                ga.total_cmp(&gb).then(b.0.cmp(&a.0))
            })
            .map(|(i, _)| i)
        else {
            break;
        };
        let leaf = leaves.swap_remove(pick);
        let (gain, feature, bin) = leaf.best.unwrap();
        st.feature_gains[feature] += gain;
        let threshold = binned.edges[feature][bin];

        let (left_members, right_members): (Vec<usize>, Vec<usize>) = leaf
            .members
            .iter()
            .partition(|&&i| binned.codes[i][feature] as usize <= bin);
        let (lg, lh) = st.sums(&left_members);
        let left_slot = nodes.len() as u32;
        nodes.push(RegNode::Leaf {
            value: st.leaf_value(lg, lh),
        });
        let right_slot = nodes.len() as u32;
        nodes.push(RegNode::Leaf {
            value: st.leaf_value(leaf.g - lg, leaf.h - lh),
        });
        nodes[leaf.slot as usize] = RegNode::Split {
            feature,
            threshold,
            left: left_slot,
            right: right_slot,
        };
        let left_best = scan_leaf(st, binned, &left_members);
        let right_best = scan_leaf(st, binned, &right_members);
        leaves.push(LeafCandidate {
            g: lg,
            h: lh,
            best: left_best,
            members: left_members,
            slot: left_slot,
        });
        leaves.push(LeafCandidate {
            g: leaf.g - lg,
            h: leaf.h - lh,
            best: right_best,
            members: right_members,
            slot: right_slot,
        });
    }
    nodes
}

pub fn fit(
    xs: &[Vec<f64>],
    ys: &[usize],
    sample_weights: &[f64],
    params: &ClassicalParams,
    engine: SplitEngine,
) -> Result<GbdtModel, ModelError> {
    let n = xs.len();
    let d = xs[0].len();
    let binned = match engine {
        SplitEngine::Histogram => Some(bin_features(xs, params.max_bins.min(256))),
        SplitEngine::Exact => None,
    };

    let mut scores = vec![[0.0f64; NUM_CLASSES]; n];
    let mut trees: Vec<RegTree> = Vec::with_capacity(params.rounds * NUM_CLASSES);
    let mut feature_gains = vec![0.0f64; d];

    for round in 0..params.rounds {
        let probs: Vec<[f64; NUM_CLASSES]> = scores.iter().map(softmax4).collect();
        if probs.iter().flatten().any(|p| !p.is_finite()) {
            return Err(ModelError::Diverged { epoch: round });
        }
        for c in 0..NUM_CLASSES {
            let grad: Vec<f64> = (0..n)
                .map(|i| sample_weights[i] * (probs[i][c] - if ys[i] == c { 1.0 } else { 0.0 }))
                .collect();
            let hess: Vec<f64> = (0..n)
                .map(|i| (sample_weights[i] * probs[i][c] * (1.0 - probs[i][c])).max(1e-12))
                .collect();
            let mut st = BoostState {
                xs,
                grad,
                hess,
                params,
                feature_gains,
            };
            let nodes = match &binned {
                Some(b) => grow_histogram(&mut st, b, n),
                None => {
                    let mut nodes = Vec::new();
                    let mut idxs: Vec<usize> = (0..n).collect();
                    grow_exact(&mut st, &mut nodes, &mut idxs, 0);
                    nodes
                }
            };
            feature_gains = st.feature_gains;
            let tree = RegTree { nodes };
            for (i, x) in xs.iter().enumerate() {
                scores[i][c] += tree.predict(x);
            }
            trees.push(tree);
        }
    }

    Ok(GbdtModel {
        width: d,
        trees,
        feature_gains,
        engine,
    })
}
