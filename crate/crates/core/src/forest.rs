//! Honest subsampled trees and the forest similarity kernel.
//!
//! Each tree draws a size-`s` subsample of the training half and splits it
//! into `S¹` (used to choose splits) and `S²` (used for weights). Splits
//! minimize the SSE of per-observation responses `ψᵢ` computed on the
//! node's `S¹` members by a [`SplitResponder`]; validity (balance and leaf
//! size) is judged on `S²` counts.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DrrfError, Result};
use crate::moments::NuisancePair;

const BAG_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    /// Number of trees `B`.
    pub trees: usize,
    /// Subsample exponent: `s = ⌈n^β⌉`.
    pub beta: f64,
    /// Explicit subsample size, overriding `beta`.
    pub subsample_size: Option<usize>,
    /// Minimum fraction of the parent's `S²` observations on each side of a split.
    pub rho: f64,
    /// Minimum `S²` count per leaf (`r`).
    pub min_leaf: usize,
    /// Probability that a node considers a single uniformly drawn feature.
    pub pi: f64,
    /// L1 penalty of node-level fits; `None` uses [`compute_lambda`].
    pub lambda_node: Option<f64>,
    /// L2 penalty added to Riesz fits.
    pub ridge_alpha: f64,
    pub max_depth: Option<usize>,
    /// Minimum `S¹` count per child; `None` means 5.
    pub min_s1_child: Option<usize>,
    /// Trees per little bag; `1` draws every subsample independently.
    pub bag_size: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            trees: 100,
            beta: 0.88,
            subsample_size: None,
            rho: 0.3,
            min_leaf: 5,
            pi: 1.0,
            lambda_node: None,
            ridge_alpha: 1e-3,
            max_depth: None,
            min_s1_child: None,
            bag_size: 1,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(DrrfError::Config(m.to_string()));
        if self.trees == 0 {
            return fail("number of trees must be at least 1");
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return fail("beta must lie in (0, 1)");
        }
        if !(self.rho > 0.0 && self.rho <= 0.5) {
            return fail("rho must lie in (0, 0.5]");
        }
        if self.min_leaf == 0 {
            return fail("minimum leaf size must be at least 1");
        }
        if !(self.pi > 0.0 && self.pi <= 1.0) {
            return fail("pi must lie in (0, 1]");
        }
        if let Some(l) = self.lambda_node {
            if !(l >= 0.0 && l.is_finite()) {
                return fail("lambda must be finite and non-negative");
            }
        }
        if !(self.ridge_alpha >= 0.0 && self.ridge_alpha.is_finite()) {
            return fail("ridge penalty must be finite and non-negative");
        }
        if self.min_s1_child == Some(0) {
            return fail("minimum S1 child size must be at least 1");
        }
        if self.bag_size == 0 || self.trees % self.bag_size != 0 {
            return fail("bag size must divide the number of trees");
        }
        Ok(())
    }

    /// Subsample size drawn from a training half of `half_size` observations.
    pub fn subsample_size_for(&self, half_size: usize) -> Result<usize> {
        let s = match self.subsample_size {
            Some(s) => s,
            None => (half_size as f64).powf(self.beta).ceil() as usize,
        };
        if s > half_size {
            return Err(DrrfError::Config(format!(
                "subsample size {s} exceeds training half of {half_size}"
            )));
        }
        if s / 2 < self.min_leaf {
            return Err(DrrfError::Size(format!(
                "subsample size {s} leaves fewer than {} weighting observations",
                self.min_leaf
            )));
        }
        Ok(s)
    }
}

/// `√(s·ln(n·d_ν)/n)/5`.
pub fn compute_lambda(n: usize, s: usize, d_nu: usize) -> f64 {
    let (n, s, d_nu) = (n as f64, s as f64, d_nu as f64);
    (s * (n * d_nu).ln() / n).sqrt() / 5.0
}

/// Row-major feature matrix of a training half.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    data: Vec<f64>,
    d: usize,
}

impl Features {
    pub fn new(data: Vec<f64>, d: usize) -> Result<Self> {
        if d == 0 || data.len() % d != 0 {
            return Err(DrrfError::Shape(format!(
                "{} values do not form rows of width {d}",
                data.len()
            )));
        }
        Ok(Self { data, d })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    fn at(&self, i: usize, f: usize) -> f64 {
        self.data[i * self.d + f]
    }
}

/// Index sets of one tree, local to the training half.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subsample {
    pub s1: Vec<usize>,
    pub s2: Vec<usize>,
    pub tree_seed: u64,
}

fn draw_subsample(half_size: usize, s: usize, params: &ForestParams, tree: usize) -> Subsample {
    let tree_seed = params.seed ^ tree as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(tree_seed);
    let mut drawn: Vec<usize> = if params.bag_size > 1 {
        // Trees of one bag share a half-sample and subsample within it.
        let bag = tree / params.bag_size;
        let mut bag_rng = ChaCha8Rng::seed_from_u64(params.seed ^ BAG_SALT);
        bag_rng.set_stream(bag as u64);
        let pool = index::sample(&mut bag_rng, half_size, half_size / 2).into_vec();
        let take = s.min(pool.len());
        index::sample(&mut rng, pool.len(), take)
            .into_iter()
            .map(|k| pool[k])
            .collect()
    } else {
        index::sample(&mut rng, half_size, s).into_vec()
    };
    let cut = drawn.len().div_ceil(2);
    let mut s2 = drawn.split_off(cut);
    let mut s1 = drawn;
    s1.sort_unstable();
    s2.sort_unstable();
    Subsample { s1, s2, tree_seed }
}

/// One subsample per tree, determined by `params.seed` and the tree index.
pub fn draw_subsamples(half_size: usize, params: &ForestParams) -> Result<Vec<Subsample>> {
    params.validate()?;
    let s = params.subsample_size_for(half_size)?;
    Ok((0..params.trees)
        .map(|b| draw_subsample(half_size, s, params, b))
        .collect())
}

/// Supplies split-time responses `ψᵢ` for a node's `S¹` members.
pub trait SplitResponder: Sync {
    /// `members` are local training-half indices; `warm` is the parent's node fit, if any.
    fn node_responses(
        &self,
        members: &[usize],
        warm: Option<&NuisancePair<f64>>,
    ) -> Result<(Vec<f64>, Option<NuisancePair<f64>>)>;
}

/// Responses fixed per observation, independent of the node.
#[derive(Clone, Debug)]
pub struct FixedResponses(pub Vec<f64>);

impl SplitResponder for FixedResponses {
    fn node_responses(
        &self,
        members: &[usize],
        _warm: Option<&NuisancePair<f64>>,
    ) -> Result<(Vec<f64>, Option<NuisancePair<f64>>)> {
        Ok((members.iter().map(|&i| self.0[i]).collect(), None))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        leaf: usize,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeStats {
    /// Leaves left with `≥ 2r` weighting observations because no valid split existed.
    pub oversized_leaves: usize,
    /// Nodes whose node-level fit failed and were turned into leaves.
    pub node_fit_failures: usize,
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HonestTree {
    pub nodes: Vec<TreeNode>,
    /// `S²` members of each leaf, sorted.
    pub leaves: Vec<Vec<usize>>,
    pub subsample: Subsample,
    pub stats: TreeStats,
}

impl HonestTree {
    pub fn leaf_of(&self, x: &[f64]) -> usize {
        let mut id = 0;
        loop {
            match self.nodes[id] {
                TreeNode::Leaf { leaf } => return leaf,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => id = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn leaf_members(&self, x: &[f64]) -> &[usize] {
        &self.leaves[self.leaf_of(x)]
    }
}

/// Best split found for a node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitChoice {
    pub feature: usize,
    pub threshold: f64,
    pub sse: f64,
}

/// Minimum-SSE valid split over `candidates`.
///
/// A split is valid when each side keeps at least `min_s1` of `s1` and
/// at least `min_s2` of `s2`. Ties go to the lowest feature, then the
/// lowest threshold.
pub fn best_split(
    features: &Features,
    s1: &[usize],
    responses: &[f64],
    s2: &[usize],
    candidates: &[usize],
    min_s1: usize,
    min_s2: usize,
) -> Option<SplitChoice> {
    let m = s1.len();
    if m < 2 * min_s1.max(1) || s2.len() < 2 * min_s2 {
        return None;
    }
    let mean = responses.iter().sum::<f64>() / m as f64;
    let mut best: Option<SplitChoice> = None;
    let mut order: Vec<(f64, f64)> = Vec::with_capacity(m);
    let mut s2_vals: Vec<f64> = Vec::with_capacity(s2.len());
    for &f in candidates {
        order.clear();
        order.extend(s1.iter().zip(responses).map(|(&i, &r)| (features.at(i, f), r - mean)));
        order.sort_by(|a, b| a.0.total_cmp(&b.0));
        s2_vals.clear();
        s2_vals.extend(s2.iter().map(|&i| features.at(i, f)));
        s2_vals.sort_by(f64::total_cmp);

        let total: f64 = order.iter().map(|o| o.1).sum();
        let total_sq: f64 = order.iter().map(|o| o.1 * o.1).sum();
        let mut sum = 0.0;
        let mut sq = 0.0;
        for k in 1..m {
            let (prev_x, r) = order[k - 1];
            sum += r;
            sq += r * r;
            let next_x = order[k].0;
            if prev_x >= next_x {
                continue;
            }
            if k < min_s1 || m - k < min_s1 {
                continue;
            }
            let mut threshold = 0.5 * (prev_x + next_x);
            if threshold >= next_x {
                threshold = prev_x;
            }
            let left_s2 = s2_vals.partition_point(|&v| v <= threshold);
            if left_s2 < min_s2 || s2_vals.len() - left_s2 < min_s2 {
                continue;
            }
            let right = (m - k) as f64;
            let sse = (sq - sum * sum / k as f64)
                + ((total_sq - sq) - (total - sum) * (total - sum) / right);
            if best.map_or(true, |b| sse < b.sse) {
                best = Some(SplitChoice {
                    feature: f,
                    threshold,
                    sse,
                });
            }
        }
    }
    best
}

fn sse_of(responses: &[f64]) -> f64 {
    let mean = responses.iter().sum::<f64>() / responses.len() as f64;
    responses.iter().map(|r| (r - mean) * (r - mean)).sum()
}

struct Pending {
    node: usize,
    s1: Vec<usize>,
    s2: Vec<usize>,
    depth: usize,
    warm: Option<NuisancePair<f64>>,
}

/// Grows one honest tree on `subsample`.
pub fn grow_tree(
    features: &Features,
    responder: &dyn SplitResponder,
    subsample: Subsample,
    params: &ForestParams,
) -> Result<HonestTree> {
    let d = features.d();
    for &i in subsample.s1.iter().chain(&subsample.s2) {
        if i >= features.len() {
            return Err(DrrfError::Shape(format!("subsample index {i} out of range")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(subsample.tree_seed);
    rng.set_stream(1);
    let r = params.min_leaf;
    let min_s1 = params.min_s1_child.unwrap_or(5);
    let mut nodes = vec![TreeNode::Leaf { leaf: 0 }];
    let mut leaves = Vec::new();
    let mut stats = TreeStats::default();
    let mut stack = vec![Pending {
        node: 0,
        s1: subsample.s1.clone(),
        s2: subsample.s2.clone(),
        depth: 0,
        warm: None,
    }];
    let all_features: Vec<usize> = (0..d).collect();

    while let Some(Pending {
        node,
        s1,
        s2,
        depth,
        warm,
    }) = stack.pop()
    {
        stats.depth = stats.depth.max(depth);
        let large = s2.len() >= 2 * r;
        let mut make_leaf = |nodes: &mut Vec<TreeNode>, s2: Vec<usize>, stats: &mut TreeStats| {
            if large {
                stats.oversized_leaves += 1;
            }
            nodes[node] = TreeNode::Leaf { leaf: leaves.len() };
            leaves.push(s2);
        };
        let depth_capped = params.max_depth.is_some_and(|cap| depth >= cap);
        if !large || depth_capped || s1.len() < 2 * min_s1 {
            make_leaf(&mut nodes, s2, &mut stats);
            continue;
        }
        let (responses, fit) = match responder.node_responses(&s1, warm.as_ref()) {
            Ok(out) => out,
            Err(_) => {
                stats.node_fit_failures += 1;
                make_leaf(&mut nodes, s2, &mut stats);
                continue;
            }
        };
        let single = rng.gen::<f64>() < params.pi;
        let chosen = if single { vec![rng.gen_range(0..d)] } else { all_features.clone() };
        let min_s2 = r.max((params.rho * s2.len() as f64).ceil() as usize);
        let mut split = best_split(features, &s1, &responses, &s2, &chosen, min_s1, min_s2);
        if split.is_none() && single && d > 1 {
            split = best_split(features, &s1, &responses, &s2, &all_features, min_s1, min_s2);
        }
        let raw_sq: f64 = responses.iter().map(|v| v * v).sum();
        let parent_sse = sse_of(&responses);
        let split = split.filter(|c| parent_sse - c.sse > 1e-12 * (raw_sq + f64::MIN_POSITIVE));
        let Some(split) = split else {
            make_leaf(&mut nodes, s2, &mut stats);
            continue;
        };
        let goes_left = |i: &&usize| features.at(**i, split.feature) <= split.threshold;
        let (l1, r1): (Vec<usize>, Vec<usize>) = s1.iter().partition(goes_left);
        let (l2, r2): (Vec<usize>, Vec<usize>) = s2.iter().partition(goes_left);
        let left = nodes.len();
        let right = left + 1;
        nodes.push(TreeNode::Leaf { leaf: usize::MAX });
        nodes.push(TreeNode::Leaf { leaf: usize::MAX });
        nodes[node] = TreeNode::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        stack.push(Pending {
            node: right,
            s1: r1,
            s2: r2,
            depth: depth + 1,
            warm: fit.clone(),
        });
        stack.push(Pending {
            node: left,
            s1: l1,
            s2: l2,
            depth: depth + 1,
            warm: fit,
        });
    }
    Ok(HonestTree {
        nodes,
        leaves,
        subsample,
        stats,
    })
}

/// Nonnegative weights over training-half indices, sorted by index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseWeights {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

impl SparseWeights {
    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn dot(&self, values: &[f64]) -> f64 {
        self.indices
            .iter()
            .zip(&self.weights)
            .map(|(&i, &k)| k * values[i])
            .sum()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.weights.iter().copied())
    }
}

/// Uniform weights over the `S²` members of the leaf containing `x`.
pub fn tree_weights(tree: &HonestTree, x: &[f64]) -> SparseWeights {
    let members = tree.leaf_members(x);
    let k = 1.0 / members.len() as f64;
    SparseWeights {
        indices: members.to_vec(),
        weights: vec![k; members.len()],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestKernel {
    pub trees: Vec<HonestTree>,
    pub params: ForestParams,
    /// Size of the training half the trees index into.
    pub n_train: usize,
    pub d: usize,
    pub subsample_size: usize,
}

impl ForestKernel {
    /// Grows `params.trees` trees in parallel; output does not depend on scheduling.
    pub fn grow(
        features: &Features,
        responder: &dyn SplitResponder,
        params: &ForestParams,
    ) -> Result<Self> {
        let subsamples = draw_subsamples(features.len(), params)?;
        let subsample_size = params.subsample_size_for(features.len())?;
        let trees = subsamples
            .into_par_iter()
            .map(|sub| grow_tree(features, responder, sub, params))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            trees,
            params: params.clone(),
            n_train: features.len(),
            d: features.d(),
            subsample_size,
        })
    }

    pub fn stats(&self) -> TreeStats {
        self.trees.iter().fold(TreeStats::default(), |acc, t| TreeStats {
            oversized_leaves: acc.oversized_leaves + t.stats.oversized_leaves,
            node_fit_failures: acc.node_fit_failures + t.stats.node_fit_failures,
            depth: acc.depth.max(t.stats.depth),
        })
    }
}

/// Average of the per-tree weights.
pub fn forest_weights(kernel: &ForestKernel, x: &[f64]) -> SparseWeights {
    let b = kernel.trees.len() as f64;
    let mut entries: Vec<(usize, f64)> = Vec::new();
    for tree in &kernel.trees {
        let members = tree.leaf_members(x);
        let k = 1.0 / (members.len() as f64 * b);
        entries.extend(members.iter().map(|&i| (i, k)));
    }
    // Stable sort keeps tree order within an index, so sums are reproducible.
    entries.sort_by_key(|e| e.0);
    let mut out = SparseWeights::default();
    for (i, k) in entries {
        if out.indices.last() == Some(&i) {
            *out.weights.last_mut().unwrap() += k;
        } else {
            out.indices.push(i);
            out.weights.push(k);
        }
    }
    out
}
