//! Streaming rule learner driven by the smoothed failure probability.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::collect_examples;
use super::ruleset::{Provenance, RuleSet};
use super::tree::candidate_trees;
use crate::detector::{OperatingState, StateThresholds};
use crate::error::{Error, Result};
use crate::windowing::{AggregatedWindow, FeatureSpace};
use crate::Instant;

pub const DEFAULT_K_MAX: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub states: StateThresholds,
    pub k_max: usize,
    /// Channels whose features may not appear in any rule.
    pub excluded_channels: Vec<String>,
    /// Reservoir-sample the history down to this many windows.
    pub max_history: Option<usize>,
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            states: StateThresholds::default(),
            k_max: DEFAULT_K_MAX,
            excluded_channels: Vec::new(),
            max_history: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub window: AggregatedWindow,
    /// Set for windows that arrived while a failure episode was open.
    pub in_failure_episode: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "event")]
pub enum LearnerEvent {
    StateChanged {
        time: Instant,
        from: OperatingState,
        to: OperatingState,
    },
    RulesDropped {
        time: Instant,
        failure_id: usize,
        dropped: usize,
        remaining: usize,
    },
    RulesFitted {
        time: Instant,
        failure_id: usize,
        trees: usize,
        n_failure: usize,
        n_no_failure: usize,
    },
    InductionFailed {
        time: Instant,
        failure_id: usize,
        reason: String,
    },
    LocalRules {
        time: Instant,
        rules: RuleSet,
        /// The failure-labeled windows the rules were last validated on.
        failure_windows: Vec<AggregatedWindow>,
        /// Length of the history at that validation.
        history_len: usize,
    },
}

#[derive(Debug, Clone)]
struct Episode {
    id: usize,
    validated_buffer: Vec<AggregatedWindow>,
    validated_history_len: usize,
}

#[derive(Debug, Clone)]
pub struct RuleLearner {
    space: FeatureSpace,
    config: LearnerConfig,
    mask: Vec<bool>,
    history: Vec<HistoryEntry>,
    history_seen: u64,
    buffer: Vec<AggregatedWindow>,
    rules: RuleSet,
    global_buffer: Vec<AggregatedWindow>,
    z_prev: Option<f64>,
    state: OperatingState,
    last_start: Option<Instant>,
    episode: Option<Episode>,
    failures: usize,
    rng: ChaCha8Rng,
}

impl RuleLearner {
    pub fn new(space: FeatureSpace, config: LearnerConfig) -> Result<Self> {
        if config.k_max == 0 {
            return Err(Error::Config("k_max must be >= 1".into()));
        }
        if config.max_history == Some(0) {
            return Err(Error::Config("max_history must be >= 1".into()));
        }
        let mask = space.mask_excluding(&config.excluded_channels)?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            space,
            config,
            mask,
            history: Vec::new(),
            history_seen: 0,
            buffer: Vec::new(),
            rules: RuleSet::new(Provenance::Failure { id: 0 }, Vec::new()),
            global_buffer: Vec::new(),
            z_prev: None,
            state: OperatingState::Normal,
            last_start: None,
            episode: None,
            failures: 0,
        })
    }

    pub fn space(&self) -> &FeatureSpace {
        &self.space
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    pub fn buffer(&self) -> &[AggregatedWindow] {
        &self.buffer
    }

    pub fn rules(&self) -> &RuleSet {
        &self.rules
    }

    pub fn global_buffer(&self) -> &[AggregatedWindow] {
        &self.global_buffer
    }

    pub fn state(&self) -> OperatingState {
        self.state
    }

    pub fn in_episode(&self) -> bool {
        self.episode.is_some()
    }

    /// Process one window and its failure probability.
    pub fn step(&mut self, z: f64, agg: AggregatedWindow) -> Result<Vec<LearnerEvent>> {
        if !(0.0..=1.0).contains(&z) {
            return Err(Error::Range(format!(
                "failure probability {z} outside [0, 1]"
            )));
        }
        if agg.features().len() != self.space.len() {
            return Err(Error::Shape(format!(
                "window has {} features, expected {}",
                agg.features().len(),
                self.space.len()
            )));
        }
        if self.last_start.is_some_and(|t| agg.start_time <= t) {
            return Err(Error::Ordering(format!(
                "window starting {} arrived out of order",
                agg.start_time
            )));
        }
        self.last_start = Some(agg.start_time);
        let time = agg.end_time;
        let mut events = Vec::new();

        let state = self.config.states.state(z);
        if state != self.state {
            events.push(LearnerEvent::StateChanged {
                time,
                from: self.state,
                to: state,
            });
            self.state = state;
        }
        let increasing = z > self.z_prev.unwrap_or(0.0);
        self.z_prev = Some(z);

        if state != OperatingState::Normal && increasing {
            self.buffer.push(agg);
        } else {
            let cleared = std::mem::take(&mut self.buffer);
            let in_episode = self.episode.is_some();
            self.push_history(agg, in_episode);
            if let Some(ep) = self.episode.take() {
                events.push(self.close_episode(ep, time, cleared));
            }
        }

        if state == OperatingState::Failure && increasing {
            let ep = match self.episode.take() {
                Some(ep) => ep,
                None => {
                    self.failures += 1;
                    self.rules =
                        RuleSet::new(Provenance::Failure { id: self.failures }, Vec::new());
                    Episode {
                        id: self.failures,
                        validated_buffer: Vec::new(),
                        validated_history_len: 0,
                    }
                }
            };
            let ep = self.update_rules(ep, time, &mut events)?;
            self.episode = Some(ep);
        }
        Ok(events)
    }

    fn update_rules(
        &mut self,
        mut ep: Episode,
        time: Instant,
        events: &mut Vec<LearnerEvent>,
    ) -> Result<Episode> {
        let data = collect_examples(&self.buffer, self.history.iter().map(|h| &h.window))?;
        let before = self.rules.len();
        self.rules
            .trees
            .retain(|t| super::tree::rule_covers(t, &data));
        if self.rules.len() < before {
            events.push(LearnerEvent::RulesDropped {
                time,
                failure_id: ep.id,
                dropped: before - self.rules.len(),
                remaining: self.rules.len(),
            });
        }
        if self.rules.is_empty() {
            match candidate_trees(&data, Some(&self.mask), self.config.k_max) {
                Ok(trees) => {
                    events.push(LearnerEvent::RulesFitted {
                        time,
                        failure_id: ep.id,
                        trees: trees.len(),
                        n_failure: data.n_failure(),
                        n_no_failure: data.n_no_failure(),
                    });
                    self.rules.trees = trees;
                }
                Err(Error::Induction(reason)) => {
                    log::warn!("rule induction failed for failure {}: {reason}", ep.id);
                    events.push(LearnerEvent::InductionFailed {
                        time,
                        failure_id: ep.id,
                        reason,
                    });
                }
                Err(e) => return Err(e),
            }
        }
        if !self.rules.is_empty() {
            ep.validated_buffer = self.buffer.clone();
            ep.validated_history_len = self.history.len();
        }
        Ok(ep)
    }

    fn close_episode(
        &mut self,
        ep: Episode,
        time: Instant,
        cleared: Vec<AggregatedWindow>,
    ) -> LearnerEvent {
        self.global_buffer.extend(cleared);
        let rules = std::mem::replace(
            &mut self.rules,
            RuleSet::new(Provenance::Failure { id: 0 }, Vec::new()),
        );
        LearnerEvent::LocalRules {
            time,
            rules,
            failure_windows: ep.validated_buffer,
            history_len: ep.validated_history_len,
        }
    }

    fn push_history(&mut self, window: AggregatedWindow, in_failure_episode: bool) {
        let entry = HistoryEntry {
            window,
            in_failure_episode,
        };
        self.history_seen += 1;
        match self.config.max_history {
            Some(cap) if self.history.len() >= cap => {
                let j = self.rng.random_range(0..self.history_seen);
                if (j as usize) < cap {
                    self.history[j as usize] = entry;
                }
            }
            _ => self.history.push(entry),
        }
    }

    /// Close an episode left open at the end of the stream.
    pub fn finish(&mut self) -> Option<LearnerEvent> {
        let time = self.last_start?;
        let ep = self.episode.take()?;
        let cleared = std::mem::take(&mut self.buffer);
        Some(self.close_episode(ep, time, cleared))
    }

    /// Rules separating every buffered failure window from the history.
    pub fn finalize_global(&self) -> Result<RuleSet> {
        if self.global_buffer.is_empty() {
            return Ok(RuleSet::new(Provenance::Global, Vec::new()));
        }
        let data = collect_examples(&self.global_buffer, self.history.iter().map(|h| &h.window))?;
        let trees = candidate_trees(&data, Some(&self.mask), self.config.k_max)?;
        Ok(RuleSet::new(Provenance::Global, trees))
    }
}

/// Feed `(z, window)` pairs through a fresh learner, closing any trailing
/// episode. Returns every event and the learner for global rules.
pub fn run_learner<I>(
    space: FeatureSpace,
    config: LearnerConfig,
    stream: I,
) -> Result<(Vec<LearnerEvent>, RuleLearner)>
where
    I: IntoIterator<Item = (f64, AggregatedWindow)>,
{
    let mut learner = RuleLearner::new(space, config)?;
    let mut events = Vec::new();
    for (z, agg) in stream {
        events.extend(learner.step(z, agg)?);
    }
    events.extend(learner.finish());
    Ok((events, learner))
}
