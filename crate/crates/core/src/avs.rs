//! Adaptive variable selection: per-sample ν-numbers, the variable selection
//! tree and the composite classifier that routes each sample to a sub-chain
//! model.
//!
//! For a chain of selected length `S`, `q_l` is 1 when sub-chain model `l`
//! puts the true class strictly on top with a margin of at least `0.2 / K`.
//! The ν-number of a sample is the start of the trailing run of ones in
//! `q_1..q_S` (or `S + 1` when `q_S = 0`). A CART regression tree on ν, pruned
//! by cost complexity and cross-validation, partitions the feature space; each
//! leaf is labeled with the α-quantile of the ν values it holds.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{thread_pool, ChainResult};
use crate::data::Dataset;
use crate::error::{io_err, DvcError, Result};
use crate::model::DvcModel;
use crate::numerics::{argmax, Rng};

pub const DEFAULT_ALPHA: f64 = 0.9;

const DIST_TOL: f64 = 1e-6;

/// Margin a correct top class must clear: `0.2 / K`.
pub fn margin_epsilon(classes: usize) -> f64 {
    0.2 / classes as f64
}

pub fn compute_q(posteriors: &[f64], label: usize) -> Result<bool> {
    let k = posteriors.len();
    if label >= k {
        return Err(DvcError::LabelOutOfRange { label, classes: k });
    }
    let sum: f64 = posteriors.iter().sum();
    if !sum.is_finite() || (sum - 1.0).abs() > DIST_TOL || posteriors.iter().any(|&b| b < 0.0) {
        return Err(DvcError::InvalidDistribution { sum });
    }
    let by = posteriors[label];
    let runner_up = posteriors
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label)
        .map(|(_, &b)| b)
        .fold(f64::NEG_INFINITY, f64::max);
    // a tie at the top gives a zero margin, which always fails
    Ok(by > runner_up && by - runner_up >= margin_epsilon(k))
}

/// 1-based start of the trailing all-ones run; `S + 1` when `q_S` is 0.
pub fn compute_nu(q: &[bool]) -> usize {
    let s = q.len();
    let ones = q.iter().rev().take_while(|&&b| b).count();
    if ones == 0 {
        s + 1
    } else {
        s - ones + 1
    }
}

/// Smallest `l` (1-based) whose cumulative count reaches `alpha` of the total.
pub fn leaf_nu(counts: &[usize], alpha: f64) -> Result<usize> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(DvcError::Config(format!("alpha {alpha} outside (0, 1]")));
    }
    let m: usize = counts.iter().sum();
    if m == 0 {
        return Err(DvcError::EmptyLeaf);
    }
    // guards against m * alpha landing one ulp above an integer
    let target = m as f64 * alpha * (1.0 - 1e-12);
    let mut cum = 0usize;
    for (l, &c) in counts.iter().enumerate() {
        cum += c;
        if cum as f64 >= target {
            return Ok(l + 1);
        }
    }
    Ok(counts.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuRecord {
    pub index: usize,
    /// `posteriors[l - 1]` comes from sub-chain model `l`.
    pub posteriors: Vec<Vec<f64>>,
    pub q_bits: Vec<bool>,
    pub nu: usize,
}

pub fn nu_record(models: &[DvcModel], x: &[f64], label: usize, index: usize) -> Result<NuRecord> {
    if models.is_empty() {
        return Err(DvcError::EmptyChain);
    }
    let posteriors = models
        .iter()
        .map(|m| m.posteriors(x))
        .collect::<Result<Vec<_>>>()?;
    let q_bits = posteriors
        .iter()
        .map(|b| compute_q(b, label))
        .collect::<Result<Vec<_>>>()?;
    let nu = compute_nu(&q_bits);
    Ok(NuRecord {
        index,
        posteriors,
        q_bits,
        nu,
    })
}

/// ν-numbers of every sample under sub-chain models `1..=S`.
pub fn compute_nu_dataset(
    models: &[DvcModel],
    data: &Dataset,
    jobs: usize,
) -> Result<Vec<NuRecord>> {
    let pool = thread_pool(jobs)?;
    pool.install(|| {
        (0..data.n())
            .into_par_iter()
            .map(|i| nu_record(models, data.row(i), data.y[i], i))
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeConfig {
    pub min_leaf: usize,
    pub max_depth: usize,
    pub cv_folds: usize,
    /// Standard errors of slack when picking the pruned subtree.
    pub se_rule: f64,
    /// Percentile level for leaf labels.
    pub alpha: f64,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            min_leaf: 5,
            max_depth: 6,
            cv_folds: 5,
            se_rule: 1.0,
            alpha: DEFAULT_ALPHA,
        }
    }
}

impl TreeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_leaf == 0 {
            return Err(DvcError::Config("min_leaf must be at least 1".into()));
        }
        if self.max_depth > 60 {
            return Err(DvcError::Config("max_depth above 60".into()));
        }
        if self.cv_folds < 2 {
            return Err(DvcError::Config("tree cv_folds must be at least 2".into()));
        }
        if !(self.se_rule >= 0.0 && self.se_rule.is_finite()) {
            return Err(DvcError::Config(
                "se_rule must be finite and non-negative".into(),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(DvcError::Config(format!(
                "alpha {} outside (0, 1]",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Unpruned regression tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct GrownTree {
    nodes: Vec<GrownNode>,
}

#[derive(Debug, Clone, PartialEq)]
struct GrownNode {
    n: usize,
    mean: f64,
    sse: f64,
    /// Sample count per ν value `1..=S+1`.
    counts: Vec<usize>,
    split: Option<Split>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Split {
    feature: usize,
    threshold: f64,
    left: usize,
    right: usize,
}

impl GrownTree {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn root_sse(&self) -> f64 {
        self.nodes[0].sse
    }

    fn is_internal(&self, collapsed: &[bool], t: usize) -> bool {
        self.nodes[t].split.is_some() && !collapsed[t]
    }

    /// Node ids reachable from the root when `collapsed` nodes act as leaves.
    pub fn members(&self, collapsed: &[bool]) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![0];
        while let Some(t) = stack.pop() {
            out.push(t);
            if self.is_internal(collapsed, t) {
                let s = self.nodes[t].split.unwrap();
                stack.push(s.right);
                stack.push(s.left);
            }
        }
        out.sort_unstable();
        out
    }

    /// Leaf SSE sum and leaf count of the pruned subtree rooted at `t`.
    fn branch(&self, collapsed: &[bool], t: usize) -> (f64, usize) {
        if !self.is_internal(collapsed, t) {
            return (self.nodes[t].sse, 1);
        }
        let s = self.nodes[t].split.unwrap();
        let (rl, ll) = self.branch(collapsed, s.left);
        let (rr, lr) = self.branch(collapsed, s.right);
        (rl + rr, ll + lr)
    }

    fn leaf_of(&self, collapsed: &[bool], x: &[f64]) -> usize {
        let mut t = 0;
        while self.is_internal(collapsed, t) {
            let s = self.nodes[t].split.unwrap();
            t = if x[s.feature] <= s.threshold {
                s.left
            } else {
                s.right
            };
        }
        t
    }
}

/// Grows a variance-reduction regression tree on `y` using only `allowed` features.
pub fn grow_tree(
    x: &crate::numerics::Matrix,
    rows: &[usize],
    y: &[usize],
    levels: usize,
    allowed: &[usize],
    cfg: &TreeConfig,
) -> Result<GrownTree> {
    if rows.is_empty() {
        return Err(DvcError::EmptyDataset);
    }
    if let Some(&f) = allowed.iter().find(|&&f| f >= x.cols()) {
        return Err(DvcError::FeatureIndex {
            index: f,
            features: x.cols(),
        });
    }
    if let Some(&v) = y.iter().find(|&&v| v == 0 || v > levels) {
        return Err(DvcError::Config(format!(
            "response {v} outside 1..={levels}"
        )));
    }
    let mut allowed = allowed.to_vec();
    allowed.sort_unstable();
    allowed.dedup();
    let mut tree = GrownTree { nodes: Vec::new() };
    grow_node(&mut tree, x, rows.to_vec(), y, levels, &allowed, cfg, 0);
    Ok(tree)
}

#[allow(clippy::too_many_arguments)]
fn grow_node(
    tree: &mut GrownTree,
    x: &crate::numerics::Matrix,
    rows: Vec<usize>,
    y: &[usize],
    levels: usize,
    allowed: &[usize],
    cfg: &TreeConfig,
    depth: usize,
) -> usize {
    let n = rows.len();
    let mean = rows.iter().map(|&i| y[i] as f64).sum::<f64>() / n as f64;
    let sse = rows
        .iter()
        .map(|&i| (y[i] as f64 - mean).powi(2))
        .sum::<f64>();
    let mut counts = vec![0; levels];
    for &i in &rows {
        counts[y[i] - 1] += 1;
    }
    let id = tree.nodes.len();
    tree.nodes.push(GrownNode {
        n,
        mean,
        sse,
        counts,
        split: None,
    });
    if depth >= cfg.max_depth || n < 2 * cfg.min_leaf || sse <= 0.0 {
        return id;
    }
    let Some((feature, threshold)) = best_split(x, &rows, y, allowed, cfg.min_leaf, sse) else {
        return id;
    };
    let (l, r): (Vec<usize>, Vec<usize>) =
        rows.iter().partition(|&&i| x.get(i, feature) <= threshold);
    let left = grow_node(tree, x, l, y, levels, allowed, cfg, depth + 1);
    let right = grow_node(tree, x, r, y, levels, allowed, cfg, depth + 1);
    tree.nodes[id].split = Some(Split {
        feature,
        threshold,
        left,
        right,
    });
    id
}

/// Largest SSE reduction over midpoints of consecutive distinct values;
/// ties keep the lower feature, then the lower threshold.
fn best_split(
    x: &crate::numerics::Matrix,
    rows: &[usize],
    y: &[usize],
    allowed: &[usize],
    min_leaf: usize,
    parent_sse: f64,
) -> Option<(usize, f64)> {
    let n = rows.len();
    let tol = 1e-12 * (1.0 + parent_sse);
    let mut best: Option<(f64, usize, f64)> = None;
    let mut order: Vec<(f64, f64)> = Vec::with_capacity(n);
    for &f in allowed {
        order.clear();
        order.extend(rows.iter().map(|&i| (x.get(i, f), y[i] as f64)));
        order.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = order.iter().map(|v| v.1).sum();
        let total_sq: f64 = order.iter().map(|v| v.1 * v.1).sum();
        let (mut sum_l, mut sq_l) = (0.0, 0.0);
        for cut in 1..n {
            let yv = order[cut - 1].1;
            sum_l += yv;
            sq_l += yv * yv;
            if cut < min_leaf || n - cut < min_leaf || order[cut - 1].0 == order[cut].0 {
                continue;
            }
            let (nl, nr) = (cut as f64, (n - cut) as f64);
            let sum_r = total - sum_l;
            let sse_l = (sq_l - sum_l * sum_l / nl).max(0.0);
            let sse_r = ((total_sq - sq_l) - sum_r * sum_r / nr).max(0.0);
            let gain = parent_sse - sse_l - sse_r;
            if gain <= tol {
                continue;
            }
            let threshold = 0.5 * (order[cut - 1].0 + order[cut].0);
            if best.is_none_or(|(g, _, _)| gain > g) {
                best = Some((gain, f, threshold));
            }
        }
    }
    best.map(|(_, f, t)| (f, t))
}

/// One subtree of the cost-complexity sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneStep {
    pub alpha: f64,
    /// Nodes of the grown tree turned into leaves at this step.
    pub collapsed: Vec<bool>,
    pub leaves: usize,
}

/// Weakest-link pruning sequence from the grown tree down to the root.
/// Complexity parameters are strictly increasing; links whose strength falls
/// within a relative tolerance of the current level are pruned together.
pub fn pruning_path(tree: &GrownTree) -> Vec<PruneStep> {
    let count = tree.nodes.len();
    let tol = 1e-10 * (1.0 + tree.root_sse());
    let mut collapsed = vec![false; count];
    let mut alpha = 0.0;
    let mut path = Vec::new();
    loop {
        // collapsing a branch changes its ancestors' strength, so repeat to a fixed point
        loop {
            let mut changed = false;
            for t in tree.members(&collapsed) {
                if !tree.is_internal(&collapsed, t) {
                    continue;
                }
                if link_strength(tree, &collapsed, t) <= alpha + tol {
                    collapse(tree, &mut collapsed, t);
                    changed = true;
                    break;
                }
            }
            if !changed {
                break;
            }
        }
        let (_, leaves) = tree.branch(&collapsed, 0);
        path.push(PruneStep {
            alpha,
            collapsed: collapsed.clone(),
            leaves,
        });
        let next = tree
            .members(&collapsed)
            .into_iter()
            .filter(|&t| tree.is_internal(&collapsed, t))
            .map(|t| link_strength(tree, &collapsed, t))
            .fold(f64::INFINITY, f64::min);
        if !next.is_finite() {
            break;
        }
        alpha = next.max(alpha);
    }
    path
}

fn link_strength(tree: &GrownTree, collapsed: &[bool], t: usize) -> f64 {
    let (r_branch, leaves) = tree.branch(collapsed, t);
    (tree.nodes[t].sse - r_branch) / (leaves - 1) as f64
}

/// Marks `t` and every internal descendant as collapsed.
fn collapse(tree: &GrownTree, collapsed: &mut [bool], t: usize) {
    collapsed[t] = true;
    if let Some(s) = tree.nodes[t].split {
        collapse(tree, collapsed, s.left);
        collapse(tree, collapsed, s.right);
    }
}

/// True when every node of `inner` is also a node of `outer`.
pub fn is_subtree(tree: &GrownTree, inner: &[bool], outer: &[bool]) -> bool {
    let outer_nodes = tree.members(outer);
    tree.members(inner)
        .iter()
        .all(|t| outer_nodes.binary_search(t).is_ok())
}

fn step_at(path: &[PruneStep], beta: f64) -> &PruneStep {
    path.iter()
        .rev()
        .find(|s| s.alpha <= beta)
        .unwrap_or(&path[0])
}

/// Complexity level, cross-validated squared error and its standard error for
/// one subtree of the pruning sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEntry {
    pub alpha: f64,
    pub leaves: usize,
    pub cv_error: f64,
    pub cv_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum VsNodeKind {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        label: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VsNode {
    /// Heap number: root 1, children of `k` are `2k` and `2k + 1`.
    pub id: u64,
    pub n: usize,
    pub mean_nu: f64,
    /// Training samples per ν value `1..=S+1`.
    pub counts: Vec<usize>,
    #[serde(flatten)]
    pub kind: VsNodeKind,
}

/// Pruned variable selection tree. `nodes[0]` is the root; `left` / `right`
/// index into `nodes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VsTree {
    pub selected_len: usize,
    pub n_features: usize,
    pub feature_names: Vec<String>,
    pub alpha: f64,
    pub nodes: Vec<VsNode>,
    pub path: Vec<PathEntry>,
    /// Index into `path` of the chosen subtree.
    pub chosen: usize,
}

impl VsTree {
    /// Root-only tree with the given ν counts, labeled by the percentile rule.
    pub fn single_leaf(
        selected_len: usize,
        feature_names: Vec<String>,
        counts: Vec<usize>,
        alpha: f64,
    ) -> Result<Self> {
        if counts.len() != selected_len + 1 {
            return Err(DvcError::Shape(format!(
                "leaf counts have {} entries, expected {}",
                counts.len(),
                selected_len + 1
            )));
        }
        let label = leaf_nu(&counts, alpha)?;
        let n: usize = counts.iter().sum();
        let mean_nu = counts
            .iter()
            .enumerate()
            .map(|(j, &c)| (j + 1) as f64 * c as f64)
            .sum::<f64>()
            / n as f64;
        Ok(Self {
            selected_len,
            n_features: feature_names.len(),
            feature_names,
            alpha,
            nodes: vec![VsNode {
                id: 1,
                n,
                mean_nu,
                counts,
                kind: VsNodeKind::Leaf { label },
            }],
            path: Vec::new(),
            chosen: 0,
        })
    }

    pub fn leaves(&self) -> impl Iterator<Item = &VsNode> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, VsNodeKind::Leaf { .. }))
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves().count()
    }

    /// `(heap id, ν̃)` per leaf, in node order.
    pub fn leaf_labels(&self) -> Vec<(u64, usize)> {
        self.nodes
            .iter()
            .filter_map(|n| match n.kind {
                VsNodeKind::Leaf { label } => Some((n.id, label)),
                VsNodeKind::Split { .. } => None,
            })
            .collect()
    }

    /// Features tested by internal nodes, ascending.
    pub fn split_features(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self
            .nodes
            .iter()
            .filter_map(|n| match n.kind {
                VsNodeKind::Split { feature, .. } => Some(feature),
                VsNodeKind::Leaf { .. } => None,
            })
            .collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    /// The leaf that `x` falls into.
    pub fn route(&self, x: &[f64]) -> Result<&VsNode> {
        if x.len() != self.n_features {
            return Err(DvcError::Shape(format!(
                "tree expects {} features, got {}",
                self.n_features,
                x.len()
            )));
        }
        let mut t = 0;
        loop {
            let node = &self.nodes[t];
            match node.kind {
                VsNodeKind::Leaf { .. } => return Ok(node),
                VsNodeKind::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => t = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let tree: VsTree = serde_json::from_str(text)?;
        tree.check()?;
        Ok(tree)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }

    fn check(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(DvcError::Shape("tree has no nodes".into()));
        }
        for node in &self.nodes {
            if node.counts.len() != self.selected_len + 1
                || node.counts.iter().sum::<usize>() != node.n
            {
                return Err(DvcError::Shape(format!(
                    "node {} counts inconsistent",
                    node.id
                )));
            }
            match node.kind {
                VsNodeKind::Split {
                    feature,
                    left,
                    right,
                    ..
                } => {
                    if feature >= self.n_features {
                        return Err(DvcError::FeatureIndex {
                            index: feature,
                            features: self.n_features,
                        });
                    }
                    if left >= self.nodes.len() || right >= self.nodes.len() {
                        return Err(DvcError::Shape(format!(
                            "node {} has a dangling child",
                            node.id
                        )));
                    }
                }
                VsNodeKind::Leaf { label } => {
                    if label == 0 || label > self.selected_len + 1 {
                        return Err(DvcError::Shape(format!(
                            "leaf {} label {label} out of range",
                            node.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Graphviz rendering: one box per node with its id, mean ν and ν
    /// distribution; internal nodes name their split variable.
    pub fn to_dot(&self) -> String {
        let mut out =
            String::from("digraph vs_tree {\n  node [shape=box, fontname=\"Helvetica\"];\n");
        for node in &self.nodes {
            let dist = node
                .counts
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(", ");
            let mut label = format!(
                "node {}\\nmean nu = {:.3}\\nn = {}\\n[{}]",
                node.id, node.mean_nu, node.n, dist
            );
            match &node.kind {
                VsNodeKind::Split {
                    feature, threshold, ..
                } => {
                    let _ = write!(
                        label,
                        "\\n{} <= {:.4}",
                        self.feature_name(*feature),
                        threshold
                    );
                }
                VsNodeKind::Leaf { label: nu } => {
                    let _ = write!(label, "\\nnu~ = {nu}");
                }
            }
            let _ = writeln!(
                out,
                "  n{} [label=\"{}\"];",
                node.id,
                label.replace('"', "\\\"")
            );
        }
        for node in &self.nodes {
            if let VsNodeKind::Split { left, right, .. } = node.kind {
                let _ = writeln!(
                    out,
                    "  n{} -> n{} [label=\"yes\"];",
                    node.id, self.nodes[left].id
                );
                let _ = writeln!(
                    out,
                    "  n{} -> n{} [label=\"no\"];",
                    node.id, self.nodes[right].id
                );
            }
        }
        out.push_str("}\n");
        out
    }

    fn feature_name(&self, f: usize) -> String {
        self.feature_names
            .get(f)
            .cloned()
            .unwrap_or_else(|| format!("x{f}"))
    }
}

/// Fits the variable selection tree on ν-numbers `nu` (values in `1..=S+1`)
/// using only the `allowed` feature columns of `data`, prunes it by
/// cross-validated cost complexity and labels the leaves.
pub fn fit_vs_tree(
    data: &Dataset,
    nu: &[usize],
    selected_len: usize,
    allowed: &[usize],
    cfg: &TreeConfig,
    cv_seed: u64,
) -> Result<VsTree> {
    cfg.validate()?;
    let n = data.n();
    if n < 2 {
        return Err(DvcError::Config(
            "the selection tree needs at least 2 samples".into(),
        ));
    }
    if nu.len() != n {
        return Err(DvcError::Shape(format!(
            "{} nu values for {n} samples",
            nu.len()
        )));
    }
    let levels = selected_len + 1;
    let all: Vec<usize> = (0..n).collect();
    let full = grow_tree(&data.x, &all, nu, levels, allowed, cfg)?;
    let path = pruning_path(&full);

    // fold trees, then held-out squared error at the geometric midpoints of the main path
    let folds = cfg.cv_folds.min(n);
    let mut order = all.clone();
    Rng::new(cv_seed).shuffle(&mut order);
    let mut assign = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        assign[i] = pos % folds;
    }
    let mut sq_err = vec![vec![0.0; n]; path.len()];
    for f in 0..folds {
        let (train, test): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&i| assign[i] != f);
        if train.is_empty() || test.is_empty() {
            continue;
        }
        let fold_tree = grow_tree(&data.x, &train, nu, levels, allowed, cfg)?;
        let fold_path = pruning_path(&fold_tree);
        for (k, step) in path.iter().enumerate() {
            let beta = match path.get(k + 1) {
                Some(next) => (step.alpha * next.alpha).sqrt(),
                None => f64::INFINITY,
            };
            let sub = step_at(&fold_path, beta);
            for &i in &test {
                let leaf = fold_tree.leaf_of(&sub.collapsed, data.row(i));
                sq_err[k][i] = (nu[i] as f64 - fold_tree.nodes[leaf].mean).powi(2);
            }
        }
    }
    let entries: Vec<PathEntry> = path
        .iter()
        .zip(&sq_err)
        .map(|(step, errs)| {
            let mean = errs.iter().sum::<f64>() / n as f64;
            let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            PathEntry {
                alpha: step.alpha,
                leaves: step.leaves,
                cv_error: mean,
                cv_se: (var / n as f64).sqrt(),
            }
        })
        .collect();
    let mut best = 0;
    for (k, e) in entries.iter().enumerate() {
        if e.cv_error < entries[best].cv_error {
            best = k;
        }
    }
    let bound = entries[best].cv_error + cfg.se_rule * entries[best].cv_se;
    let chosen = (0..entries.len())
        .rev()
        .find(|&k| entries[k].cv_error <= bound)
        .unwrap_or(best);

    let mut tree = VsTree {
        selected_len,
        n_features: data.p(),
        feature_names: data.feature_names.clone(),
        alpha: cfg.alpha,
        nodes: Vec::new(),
        path: entries,
        chosen,
    };
    emit(
        &full,
        &path[chosen].collapsed,
        0,
        1,
        cfg.alpha,
        &mut tree.nodes,
    )?;
    Ok(tree)
}

fn emit(
    grown: &GrownTree,
    collapsed: &[bool],
    t: usize,
    heap_id: u64,
    alpha: f64,
    out: &mut Vec<VsNode>,
) -> Result<usize> {
    let g = &grown.nodes[t];
    let slot = out.len();
    out.push(VsNode {
        id: heap_id,
        n: g.n,
        mean_nu: g.mean,
        counts: g.counts.clone(),
        kind: VsNodeKind::Leaf { label: 0 },
    });
    out[slot].kind = if grown.is_internal(collapsed, t) {
        let s = g.split.unwrap();
        let left = emit(grown, collapsed, s.left, 2 * heap_id, alpha, out)?;
        let right = emit(grown, collapsed, s.right, 2 * heap_id + 1, alpha, out)?;
        VsNodeKind::Split {
            feature: s.feature,
            threshold: s.threshold,
            left,
            right,
        }
    } else {
        VsNodeKind::Leaf {
            label: leaf_nu(&g.counts, alpha)?,
        }
    };
    Ok(slot)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvsPrediction {
    pub label: usize,
    /// Leaf label ν̃ of the routed leaf.
    pub nu_tilde: usize,
    pub leaf: u64,
    /// Length of the sub-chain model applied: `min(ν̃, S)`.
    pub model_len: usize,
    pub posteriors: Vec<f64>,
}

/// Routes `x` through the tree and applies sub-chain model `min(ν̃, S)`.
pub fn predict_avs(tree: &VsTree, models: &[DvcModel], x: &[f64]) -> Result<AvsPrediction> {
    if models.len() != tree.selected_len {
        return Err(DvcError::Shape(format!(
            "tree built for {} sub-chain models, got {}",
            tree.selected_len,
            models.len()
        )));
    }
    let leaf = tree.route(x)?;
    let VsNodeKind::Leaf { label: nu_tilde } = leaf.kind else {
        unreachable!("route ends at a leaf")
    };
    let model_len = nu_tilde.min(tree.selected_len);
    let posteriors = models[model_len - 1].posteriors(x)?;
    Ok(AvsPrediction {
        label: argmax(&posteriors),
        nu_tilde,
        leaf: leaf.id,
        model_len,
        posteriors,
    })
}

pub fn predict_avs_dataset(
    tree: &VsTree,
    models: &[DvcModel],
    data: &Dataset,
) -> Result<Vec<AvsPrediction>> {
    (0..data.n())
        .map(|i| predict_avs(tree, models, data.row(i)))
        .collect()
}

/// ν-numbers on `train` from the selected sub-chain models, then the tree on
/// the features of the selected blocks.
pub fn fit_avs(
    chain: &ChainResult,
    train: &Dataset,
    cfg: &TreeConfig,
    cv_seed: u64,
    jobs: usize,
) -> Result<(VsTree, Vec<NuRecord>)> {
    let s = chain.selected_len();
    let records = compute_nu_dataset(chain.selected_models(), train, jobs)?;
    let nu: Vec<usize> = records.iter().map(|r| r.nu).collect();
    let allowed = crate::chain::selected_variables(chain, s)?;
    let tree = fit_vs_tree(train, &nu, s, &allowed, cfg, cv_seed)?;
    Ok((tree, records))
}
