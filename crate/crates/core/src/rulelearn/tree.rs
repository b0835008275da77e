//! Perfect-fit decision trees over aggregated window features.
//!
//! Splits are axis-aligned `x[f] <= θ` / `x[f] > θ` with θ the midpoint
//! between consecutive distinct sorted values. The split maximizing the Gini
//! gain is taken; ties go to the lowest feature index, then the lowest
//! threshold. Gini scores are compared in exact integer arithmetic so tie
//! breaking does not depend on floating-point rounding.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::dataset::{Label, LabeledSet};
use crate::error::{Error, Result};
use crate::windowing::FeatureSpace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
}

impl Comparator {
    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::Le => "≤",
            Comparator::Gt => ">",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub feature: usize,
    pub comparator: Comparator,
    pub threshold: f64,
}

impl Predicate {
    pub fn holds(&self, x: &[f64]) -> bool {
        let gt = x[self.feature] > self.threshold;
        match self.comparator {
            Comparator::Gt => gt,
            Comparator::Le => !gt,
        }
    }

    pub fn display<'a>(&'a self, space: &'a FeatureSpace) -> impl fmt::Display + 'a {
        PredicateDisplay { p: self, space }
    }
}

struct PredicateDisplay<'a> {
    p: &'a Predicate,
    space: &'a FeatureSpace,
}

impl fmt::Display for PredicateDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {}",
            self.space.name(self.p.feature),
            self.p.comparator.symbol(),
            format_threshold(self.p.threshold)
        )
    }
}

/// Four decimals with trailing zeros trimmed.
pub fn format_threshold(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Leaf(Label),
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub kind: NodeKind,
    pub depth: usize,
    pub n_failure: usize,
    pub n_no_failure: usize,
}

impl Node {
    pub fn total(&self) -> usize {
        self.n_failure + self.n_no_failure
    }

    fn majority(&self) -> Label {
        if self.n_failure > self.n_no_failure {
            Label::Failure
        } else {
            Label::NoFailure
        }
    }
}

/// Nodes stored in preorder with the root at index 0. Every node keeps the
/// class counts of the training rows that reached it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    nodes: Vec<Node>,
}

impl DecisionTree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn predict(&self, x: &[f64]) -> Label {
        let mut i = 0;
        loop {
            match &self.nodes[i].kind {
                NodeKind::Leaf(l) => return *l,
                NodeKind::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[*feature] > *threshold {
                        *right
                    } else {
                        *left
                    };
                }
            }
        }
    }

    /// Same splits and leaves, ignoring support counts.
    pub fn same_structure(&self, other: &DecisionTree) -> bool {
        self.nodes.len() == other.nodes.len()
            && self
                .nodes
                .iter()
                .zip(&other.nodes)
                .all(|(a, b)| a.kind == b.kind)
    }

    /// Every feature index used by a split.
    pub fn features(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self
            .nodes
            .iter()
            .filter_map(|n| match n.kind {
                NodeKind::Split { feature, .. } => Some(feature),
                NodeKind::Leaf(_) => None,
            })
            .collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    /// Root-to-leaf predicate conjunctions that end in a failure leaf.
    pub fn failure_paths(&self) -> Vec<Vec<Predicate>> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((i, path)) = stack.pop() {
            match &self.nodes[i].kind {
                NodeKind::Leaf(Label::Failure) => out.push(path),
                NodeKind::Leaf(Label::NoFailure) => {}
                NodeKind::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    let mut r = path.clone();
                    r.push(Predicate {
                        feature: *feature,
                        comparator: Comparator::Gt,
                        threshold: *threshold,
                    });
                    stack.push((*right, r));
                    let mut l = path;
                    l.push(Predicate {
                        feature: *feature,
                        comparator: Comparator::Le,
                        threshold: *threshold,
                    });
                    stack.push((*left, l));
                }
            }
        }
        out
    }

    /// Rule text such as `Flowmeter_max > 16.05 ⇒ Failure`.
    pub fn rule_text(&self, space: &FeatureSpace) -> String {
        let paths = self.failure_paths();
        let conj = |p: &Vec<Predicate>| {
            if p.is_empty() {
                "true".to_string()
            } else {
                p.iter()
                    .map(|q| q.display(space).to_string())
                    .collect::<Vec<_>>()
                    .join(" ∧ ")
            }
        };
        let body = match paths.len() {
            0 => "false".to_string(),
            1 => conj(&paths[0]),
            _ => paths
                .iter()
                .map(|p| format!("({})", conj(p)))
                .collect::<Vec<_>>()
                .join(" ∨ "),
        };
        format!("{body} ⇒ Failure")
    }
}

fn class_counts(data: &LabeledSet<'_>, idx: &[usize]) -> (usize, usize) {
    let fails = idx
        .iter()
        .filter(|&&i| data.labels()[i] == Label::Failure)
        .count();
    (fails, idx.len() - fails)
}

/// Exact Gini comparison. A split is scored by
/// `(aL² + bL²)/nL + (aR² + bR²)/nR`, which is larger for purer children.
#[derive(Debug, Clone, Copy)]
struct SplitScore {
    num: u128,
    den: u128,
}

impl SplitScore {
    fn new(left: (usize, usize), right: (usize, usize)) -> Self {
        let sq = |(a, b): (usize, usize)| (a as u128) * (a as u128) + (b as u128) * (b as u128);
        let (nl, nr) = ((left.0 + left.1) as u128, (right.0 + right.1) as u128);
        Self {
            num: sq(left) * nr + sq(right) * nl,
            den: nl * nr,
        }
    }

    fn better_than(&self, other: &SplitScore) -> bool {
        self.num * other.den > other.num * self.den
    }
}

/// Midpoint that keeps `lo` on the left and `hi` on the right.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = lo + (hi - lo) / 2.0;
    if m < hi && m >= lo {
        m
    } else {
        lo
    }
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    score: SplitScore,
}

fn best_split(data: &LabeledSet<'_>, idx: &[usize], mask: Option<&[bool]>) -> Option<BestSplit> {
    let rows = data.rows();
    let labels = data.labels();
    let total = class_counts(data, idx);
    let mut best: Option<BestSplit> = None;
    let mut order = idx.to_vec();
    for f in 0..data.n_features() {
        if mask.is_some_and(|m| !m[f]) {
            continue;
        }
        order.sort_by(|&a, &b| rows[a][f].total_cmp(&rows[b][f]));
        let mut left = (0usize, 0usize);
        for k in 0..order.len() - 1 {
            match labels[order[k]] {
                Label::Failure => left.0 += 1,
                Label::NoFailure => left.1 += 1,
            }
            let (lo, hi) = (rows[order[k]][f], rows[order[k + 1]][f]);
            if lo == hi {
                continue;
            }
            let score = SplitScore::new(left, (total.0 - left.0, total.1 - left.1));
            if best.as_ref().is_none_or(|b| score.better_than(&b.score)) {
                best = Some(BestSplit {
                    feature: f,
                    threshold: midpoint(lo, hi),
                    score,
                });
            }
        }
    }
    best
}

fn check_mask(data: &LabeledSet<'_>, mask: Option<&[bool]>) -> Result<()> {
    if let Some(m) = mask {
        if m.len() != data.n_features() {
            return Err(Error::Config(format!(
                "feature mask has {} entries for {} features",
                m.len(),
                data.n_features()
            )));
        }
    }
    Ok(())
}

/// Greedy Gini tree grown until every leaf is pure.
pub fn fit_tree(data: &LabeledSet<'_>, mask: Option<&[bool]>) -> Result<DecisionTree> {
    check_mask(data, mask)?;
    if data.has_conflicts(mask) {
        return Err(Error::Induction(
            "identical feature vectors carry different labels; no perfect fit exists".into(),
        ));
    }
    let mut nodes = Vec::new();
    grow(data, (0..data.len()).collect(), 0, mask, &mut nodes)?;
    Ok(DecisionTree { nodes })
}

fn grow(
    data: &LabeledSet<'_>,
    idx: Vec<usize>,
    depth: usize,
    mask: Option<&[bool]>,
    nodes: &mut Vec<Node>,
) -> Result<usize> {
    let (n_failure, n_no_failure) = class_counts(data, &idx);
    let me = nodes.len();
    let mut node = Node {
        kind: NodeKind::Leaf(Label::NoFailure),
        depth,
        n_failure,
        n_no_failure,
    };
    if n_failure == 0 || n_no_failure == 0 {
        node.kind = NodeKind::Leaf(node.majority());
        nodes.push(node);
        return Ok(me);
    }
    let split = best_split(data, &idx, mask)
        .ok_or_else(|| Error::Induction("impure node with no usable split".into()))?;
    nodes.push(node);
    let (l, r): (Vec<usize>, Vec<usize>) = idx
        .into_iter()
        .partition(|&i| data.rows()[i][split.feature] <= split.threshold);
    let left = grow(data, l, depth + 1, mask, nodes)?;
    let right = grow(data, r, depth + 1, mask, nodes)?;
    nodes[me].kind = NodeKind::Split {
        feature: split.feature,
        threshold: split.threshold,
        left,
        right,
    };
    Ok(me)
}

/// Threshold and failure side of a single-feature perfect separation, if any.
pub fn perfect_single_split(data: &LabeledSet<'_>, feature: usize) -> Option<(f64, Comparator)> {
    let (mut fail_lo, mut fail_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ok_lo, mut ok_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (row, label) in data.rows().iter().zip(data.labels()) {
        let v = row[feature];
        match label {
            Label::Failure => {
                fail_lo = fail_lo.min(v);
                fail_hi = fail_hi.max(v);
            }
            Label::NoFailure => {
                ok_lo = ok_lo.min(v);
                ok_hi = ok_hi.max(v);
            }
        }
    }
    if !fail_lo.is_finite() || !ok_lo.is_finite() {
        return None;
    }
    if ok_hi < fail_lo {
        Some((midpoint(ok_hi, fail_lo), Comparator::Gt))
    } else if fail_hi < ok_lo {
        Some((midpoint(fail_hi, ok_lo), Comparator::Le))
    } else {
        None
    }
}

fn stump(
    data: &LabeledSet<'_>,
    feature: usize,
    threshold: f64,
    fail_side: Comparator,
) -> DecisionTree {
    let (mut lf, mut ln, mut rf, mut rn) = (0, 0, 0, 0);
    for (row, label) in data.rows().iter().zip(data.labels()) {
        match (row[feature] > threshold, label) {
            (false, Label::Failure) => lf += 1,
            (false, Label::NoFailure) => ln += 1,
            (true, Label::Failure) => rf += 1,
            (true, Label::NoFailure) => rn += 1,
        }
    }
    let (left_label, right_label) = match fail_side {
        Comparator::Gt => (Label::NoFailure, Label::Failure),
        Comparator::Le => (Label::Failure, Label::NoFailure),
    };
    DecisionTree {
        nodes: vec![
            Node {
                kind: NodeKind::Split {
                    feature,
                    threshold,
                    left: 1,
                    right: 2,
                },
                depth: 0,
                n_failure: lf + rf,
                n_no_failure: ln + rn,
            },
            Node {
                kind: NodeKind::Leaf(left_label),
                depth: 1,
                n_failure: lf,
                n_no_failure: ln,
            },
            Node {
                kind: NodeKind::Leaf(right_label),
                depth: 1,
                n_failure: rf,
                n_no_failure: rn,
            },
        ],
    }
}

/// The greedy tree followed by every single-feature perfect split as a
/// depth-1 tree, deduplicated and capped at `k_max` trees.
pub fn candidate_trees(
    data: &LabeledSet<'_>,
    mask: Option<&[bool]>,
    k_max: usize,
) -> Result<Vec<DecisionTree>> {
    if k_max == 0 {
        return Err(Error::Config("k_max must be >= 1".into()));
    }
    let greedy = fit_tree(data, mask)?;
    let mut trees = vec![greedy];
    if data.n_failure() == 0 || data.n_no_failure() == 0 {
        return Ok(trees);
    }
    for f in 0..data.n_features() {
        if trees.len() >= k_max {
            break;
        }
        if mask.is_some_and(|m| !m[f]) {
            continue;
        }
        if let Some((thr, side)) = perfect_single_split(data, f) {
            let t = stump(data, f, thr, side);
            if !trees.iter().any(|u| u.same_structure(&t)) {
                trees.push(t);
            }
        }
    }
    Ok(trees)
}

/// True iff the tree labels every row correctly (vacuously true when empty).
pub fn rule_covers(tree: &DecisionTree, data: &LabeledSet<'_>) -> bool {
    data.rows()
        .iter()
        .zip(data.labels())
        .all(|(x, l)| tree.predict(x) == *l)
}

pub fn eval_rule(tree: &DecisionTree, features: &[f64]) -> Label {
    tree.predict(features)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub node: usize,
    pub depth: usize,
    /// The split tested at this node, as the `>` branch.
    pub predicate: Option<Predicate>,
    pub leaf: Option<Label>,
    pub n_failure: usize,
    pub n_no_failure: usize,
    /// Share of the parent's rows of this node's majority class that
    /// reached this node (1.0 for the root).
    pub fraction_of_parent: f64,
    /// A split whose smaller child holds at most the configured number of rows.
    pub near_singleton: bool,
}

/// Breadth-first purity report.
pub fn node_support(tree: &DecisionTree, near_singleton_max: usize) -> Vec<NodeReport> {
    let mut parent = vec![None; tree.nodes.len()];
    for (i, n) in tree.nodes.iter().enumerate() {
        if let NodeKind::Split { left, right, .. } = n.kind {
            parent[left] = Some(i);
            parent[right] = Some(i);
        }
    }
    let mut out = Vec::with_capacity(tree.nodes.len());
    let mut queue = VecDeque::from([0usize]);
    while let Some(i) = queue.pop_front() {
        let n = &tree.nodes[i];
        let fraction = match parent[i] {
            None => 1.0,
            Some(p) => {
                let p = &tree.nodes[p];
                let (mine, theirs) = match n.majority() {
                    Label::Failure => (n.n_failure, p.n_failure),
                    Label::NoFailure => (n.n_no_failure, p.n_no_failure),
                };
                if theirs == 0 {
                    0.0
                } else {
                    mine as f64 / theirs as f64
                }
            }
        };
        let (predicate, leaf, near_singleton) = match n.kind {
            NodeKind::Leaf(l) => (None, Some(l), false),
            NodeKind::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                queue.push_back(left);
                queue.push_back(right);
                let smaller = tree.nodes[left].total().min(tree.nodes[right].total());
                (
                    Some(Predicate {
                        feature,
                        comparator: Comparator::Gt,
                        threshold,
                    }),
                    None,
                    smaller <= near_singleton_max,
                )
            }
        };
        out.push(NodeReport {
            node: i,
            depth: n.depth,
            predicate,
            leaf,
            n_failure: n.n_failure,
            n_no_failure: n.n_no_failure,
            fraction_of_parent: fraction,
            near_singleton,
        });
    }
    out
}
