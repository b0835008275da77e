use std::io::Write;

use serde::{Deserialize, Serialize};

use super::dataset::LabeledSet;
use super::tree::{format_threshold, rule_covers, Comparator, DecisionTree};
use crate::error::Result;
use crate::windowing::{Aggregation, FeatureSpace};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Provenance {
    Failure { id: usize },
    Global,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Provenance::Failure { id } => write!(f, "failure-{id}"),
            Provenance::Global => f.write_str("global"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSet {
    pub provenance: Provenance,
    pub trees: Vec<DecisionTree>,
}

impl RuleSet {
    pub fn new(provenance: Provenance, trees: Vec<DecisionTree>) -> Self {
        Self { provenance, trees }
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }

    pub fn len(&self) -> usize {
        self.trees.len()
    }

    /// True iff every tree has zero error on `data`.
    pub fn covers(&self, data: &LabeledSet<'_>) -> bool {
        self.trees.iter().all(|t| rule_covers(t, data))
    }

    pub fn texts(&self, space: &FeatureSpace) -> Vec<String> {
        self.trees.iter().map(|t| t.rule_text(space)).collect()
    }

    /// One record per failure path of every tree.
    pub fn records(&self, space: &FeatureSpace) -> Vec<RuleRecord> {
        let mut out = Vec::new();
        for (i, tree) in self.trees.iter().enumerate() {
            let root = tree.root();
            for path in tree.failure_paths() {
                out.push(RuleRecord {
                    provenance: self.provenance.clone(),
                    tree: i,
                    text: tree_path_text(&path, space),
                    predicates: path
                        .iter()
                        .map(|p| PredicateRecord {
                            feature: space.name(p.feature),
                            channel: space.channel_of(p.feature).to_string(),
                            aggregation: space.aggregation_of(p.feature),
                            comparator: p.comparator,
                            threshold: p.threshold,
                        })
                        .collect(),
                    n_failure: root.n_failure,
                    n_no_failure: root.n_no_failure,
                });
            }
        }
        out
    }

    /// Plain-text rendering, one rule per line.
    pub fn write_text<W: Write>(&self, space: &FeatureSpace, mut w: W) -> Result<()> {
        writeln!(w, "# {}", self.provenance)?;
        for t in self.texts(space) {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }
}

fn tree_path_text(path: &[super::tree::Predicate], space: &FeatureSpace) -> String {
    let body = if path.is_empty() {
        "true".to_string()
    } else {
        path.iter()
            .map(|p| p.display(space).to_string())
            .collect::<Vec<_>>()
            .join(" ∧ ")
    };
    format!("{body} ⇒ Failure")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateRecord {
    pub feature: String,
    pub channel: String,
    pub aggregation: Aggregation,
    pub comparator: Comparator,
    pub threshold: f64,
}

impl PredicateRecord {
    pub fn text(&self) -> String {
        format!(
            "{} {} {}",
            self.feature,
            self.comparator.symbol(),
            format_threshold(self.threshold)
        )
    }
}

/// Flat export of one conjunctive rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleRecord {
    pub provenance: Provenance,
    pub tree: usize,
    pub text: String,
    pub predicates: Vec<PredicateRecord>,
    pub n_failure: usize,
    pub n_no_failure: usize,
}
