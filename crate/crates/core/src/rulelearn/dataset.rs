use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::windowing::AggregatedWindow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    NoFailure,
    Failure,
}

/// Feature rows with binary labels. Rows are borrowed so the learner can
/// relabel its buffer and history without copying them.
#[derive(Debug, Clone)]
pub struct LabeledSet<'a> {
    rows: Vec<&'a [f64]>,
    labels: Vec<Label>,
    n_features: usize,
}

impl<'a> LabeledSet<'a> {
    pub fn new(rows: Vec<&'a [f64]>, labels: Vec<Label>) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(shape_err!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            ));
        }
        let n_features = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n_features) {
            return Err(shape_err!("rows have differing feature counts"));
        }
        Ok(Self {
            rows,
            labels,
            n_features,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn rows(&self) -> &[&'a [f64]] {
        &self.rows
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn n_failure(&self) -> usize {
        self.labels.iter().filter(|l| **l == Label::Failure).count()
    }

    pub fn n_no_failure(&self) -> usize {
        self.len() - self.n_failure()
    }

    /// True when two rows agree on every unmasked feature but carry
    /// different labels, which rules out a perfect fit.
    pub fn has_conflicts(&self, mask: Option<&[bool]>) -> bool {
        let mut seen: HashMap<Vec<u64>, Label> = HashMap::with_capacity(self.len());
        for (row, &label) in self.rows.iter().zip(&self.labels) {
            let key: Vec<u64> = row
                .iter()
                .enumerate()
                .filter(|(f, _)| mask.is_none_or(|m| m[*f]))
                // Normalize -0.0 so equal values hash equally.
                .map(|(_, v)| (v + 0.0).to_bits())
                .collect();
            match seen.get(&key) {
                Some(&l) if l != label => return true,
                Some(_) => {}
                None => {
                    seen.insert(key, label);
                }
            }
        }
        false
    }
}

/// Buffer windows labeled failure, followed by history windows labeled
/// no-failure. Each row is the channel-major aggregate vector
/// (`var, min, max, mean` per channel).
pub fn collect_examples<'a>(
    buffer: impl IntoIterator<Item = &'a AggregatedWindow>,
    history: impl IntoIterator<Item = &'a AggregatedWindow>,
) -> Result<LabeledSet<'a>> {
    let mut rows: Vec<&[f64]> = Vec::new();
    let mut labels = Vec::new();
    for w in buffer {
        rows.push(w.features());
        labels.push(Label::Failure);
    }
    if rows.is_empty() {
        return Err(Error::Logic(
            "cannot collect examples from an empty buffer".into(),
        ));
    }
    for w in history {
        rows.push(w.features());
        labels.push(Label::NoFailure);
    }
    LabeledSet::new(rows, labels)
}
