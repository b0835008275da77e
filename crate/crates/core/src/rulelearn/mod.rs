//! Online rule learning on aggregated windows.
//!
//! Windows seen while the failure probability is in warning and rising are
//! buffered; everything else enriches the history. Once a failure is
//! confirmed the buffer (failure) and history (no failure) form a labeled
//! set, and perfect-fit decision trees over it become the failure's rules.

pub mod dataset;
pub mod learner;
pub mod ruleset;
pub mod tree;

pub use dataset::{collect_examples, Label, LabeledSet};
pub use learner::{
    run_learner, HistoryEntry, LearnerConfig, LearnerEvent, RuleLearner, DEFAULT_K_MAX,
};
pub use ruleset::{PredicateRecord, Provenance, RuleRecord, RuleSet};
pub use tree::{
    candidate_trees, eval_rule, fit_tree, node_support, perfect_single_split, rule_covers,
    Comparator, DecisionTree, Node, NodeKind, NodeReport, Predicate,
};
