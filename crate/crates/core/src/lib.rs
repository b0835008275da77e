//! Failure prediction for multichannel sensor streams.
//!
//! The pipeline has two halves. A 1D convolutional residual autoencoder is
//! trained on failure-free windows; at inference time its per-window
//! reconstruction error is thresholded, low-pass filtered into a failure
//! probability, and turned into onset/end events. That probability then
//! drives an online rule learner that keeps a history of normal windows and
//! a buffer of suspicious ones, fits perfect-fit decision trees over
//! per-window aggregates (variance, min, max, mean), and emits short,
//! human-readable rules such as `Flowmeter_max > 16.05 ⇒ Failure`.
//!
//! Module map:
//!
//! * [`ingest`]: CSV loading, gap handling, time split, normalization.
//! * [`windowing`]: overlapping windows and the four-way aggregation.
//! * [`autoencoder`]: tensors, layers, manual backprop, Adam, checkpoints.
//! * [`detector`]: threshold calibration, smoothing, states, events, F1.
//! * [`rulelearn`]: tree induction and the streaming rule-learning loop.
//! * [`synth`]: seeded synthetic streams with injected level-shift failures.

pub mod autoencoder;
pub mod detector;
mod error;
pub mod ingest;
pub mod rulelearn;
pub mod synth;
pub mod windowing;

pub use autoencoder::{AEConfig, Autoencoder, Tensor, TrainConfig, TrainOutcome};
pub use detector::{
    AnomalyThreshold, DetectionEvent, EvaluationReport, FailureSignal, OperatingState,
    StateThresholds,
};
pub use error::{Error, Result};
pub use ingest::{DatasetSplit, FailureAnnotation, GapPolicy, NormalizationStats, SensorFrame};
pub use rulelearn::{DecisionTree, Label, LabeledSet, Predicate, RuleLearner, RuleSet};
pub use windowing::{AggregatedWindow, Aggregation, FeatureSpace, Window, WindowSpec};

/// Timestamp type used throughout. Sensor logs carry local wall-clock time
/// without an offset.
pub type Instant = chrono::NaiveDateTime;
