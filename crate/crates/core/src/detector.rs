//! From reconstruction errors to anomaly flags, a smoothed failure
//! probability, operating states, onset/end events and an F1 report.

use std::io::{BufRead, Write};

use chrono::Duration;
use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::error::{shape_err, Error, Result};
use crate::ingest::{apply_normalization, FailureAnnotation, SensorFrame};
use crate::windowing::{make_windows, WindowSpec};
use crate::Instant;

/// `tau_anom = beta * q99` over validation reconstruction errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalyThreshold {
    pub q99: f64,
    pub beta: f64,
    pub tau_anom: f64,
}

pub const DEFAULT_BETA: f64 = 3.0;
pub const DEFAULT_ALPHA: f64 = 0.15;
pub const DEFAULT_TAU_WARN: f64 = 0.10;
pub const DEFAULT_TAU_FAIL: f64 = 0.5;
pub const DEFAULT_LEAD_MINUTES: i64 = 120;
pub const DEFAULT_GRACE_HOURS: i64 = 12;

/// Nearest-rank 99th percentile: the `ceil(0.99 n)`-th smallest value.
pub fn nearest_rank_q99(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Calibration(
            "no validation errors to calibrate on".into(),
        ));
    }
    if errors.iter().any(|e| e.is_nan()) {
        return Err(Error::Calibration("validation errors contain NaN".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = (99 * n).div_ceil(100);
    Ok(sorted[rank - 1])
}

pub fn calibrate_threshold(validation_errors: &[f64], beta: f64) -> Result<AnomalyThreshold> {
    if beta.is_nan() || beta <= 0.0 {
        return Err(Error::Config(format!("beta {beta} must be > 0")));
    }
    let q99 = nearest_rank_q99(validation_errors)?;
    Ok(AnomalyThreshold {
        q99,
        beta,
        tau_anom: beta * q99,
    })
}

/// 1 iff the error strictly exceeds the threshold.
pub fn classify_window(error: f64, th: &AnomalyThreshold) -> u8 {
    u8::from(error > th.tau_anom)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "smoothing factor {alpha} not in (0, 1]"
        )))
    }
}

/// Exponential low-pass filter `z_t = z_{t-1} + alpha (y_t - z_{t-1})`,
/// `z_0 = y_0`.
pub fn lowpass(y: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    if let Some(v) = y.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Data(format!("indicator value {v} outside [0, 1]")));
    }
    let mut z = Vec::with_capacity(y.len());
    for &yt in y {
        let next = match z.last() {
            None => yt,
            Some(&prev) => prev + alpha * (yt - prev),
        };
        z.push(next);
    }
    Ok(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OperatingState {
    Normal,
    Warning,
    Failure,
}

/// Warning/failure cut-offs on the failure probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateThresholds {
    warn: f64,
    fail: f64,
}

impl StateThresholds {
    pub fn new(warn: f64, fail: f64) -> Result<Self> {
        if !(warn > 0.0 && warn < fail && fail <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 < tau_warn ({warn}) < tau_fail ({fail}) <= 1"
            )));
        }
        Ok(Self { warn, fail })
    }

    pub fn warn(&self) -> f64 {
        self.warn
    }

    pub fn fail(&self) -> f64 {
        self.fail
    }

    pub fn state(&self, z: f64) -> OperatingState {
        if z > self.fail {
            OperatingState::Failure
        } else if z > self.warn {
            OperatingState::Warning
        } else {
            OperatingState::Normal
        }
    }
}

impl Default for StateThresholds {
    fn default() -> Self {
        Self {
            warn: DEFAULT_TAU_WARN,
            fail: DEFAULT_TAU_FAIL,
        }
    }
}

pub fn failure_state(z: f64, tau_warn: f64, tau_fail: f64) -> Result<OperatingState> {
    Ok(StateThresholds::new(tau_warn, tau_fail)?.state(z))
}

/// One scored window. `time` is the window's last sample, i.e. when the
/// decision becomes available in a live stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalRecord {
    pub time: Instant,
    pub window_start: Instant,
    pub error: f64,
    pub y: u8,
    pub z: f64,
    pub state: OperatingState,
}

pub type FailureSignal = Vec<SignalRecord>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    FailureOnset,
    FailureEnd,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub kind: EventKind,
    pub time: Instant,
}

/// Streaming fold from reconstruction errors to records and events.
///
/// An onset fires when no episode is active and `z` rises above `tau_fail`;
/// the episode ends at the first step where `z` does not strictly increase.
#[derive(Debug, Clone)]
pub struct StreamDetector {
    threshold: AnomalyThreshold,
    alpha: f64,
    states: StateThresholds,
    prev_z: Option<f64>,
    prev_time: Option<Instant>,
    in_episode: bool,
}

impl StreamDetector {
    pub fn new(threshold: AnomalyThreshold, alpha: f64, states: StateThresholds) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self {
            threshold,
            alpha,
            states,
            prev_z: None,
            prev_time: None,
            in_episode: false,
        })
    }

    pub fn push(
        &mut self,
        window_start: Instant,
        time: Instant,
        error: f64,
    ) -> Result<(SignalRecord, Option<DetectionEvent>)> {
        if let Some(prev) = self.prev_time {
            if time <= prev {
                return Err(Error::Ordering(format!(
                    "window at {time} does not follow {prev}"
                )));
            }
        }
        let y = classify_window(error, &self.threshold);
        let z = match self.prev_z {
            None => f64::from(y),
            Some(p) => p + self.alpha * (f64::from(y) - p),
        };
        // Before the first window the stream is taken to be quiet.
        let increasing = z > self.prev_z.unwrap_or(0.0);
        let state = self.states.state(z);
        let event = if !self.in_episode && state == OperatingState::Failure && increasing {
            self.in_episode = true;
            Some(DetectionEvent {
                kind: EventKind::FailureOnset,
                time,
            })
        } else if self.in_episode && !increasing {
            self.in_episode = false;
            Some(DetectionEvent {
                kind: EventKind::FailureEnd,
                time,
            })
        } else {
            None
        };
        self.prev_z = Some(z);
        self.prev_time = Some(time);
        Ok((
            SignalRecord {
                time,
                window_start,
                error,
                y,
                z,
                state,
            },
            event,
        ))
    }
}

/// Scores precomputed per-window errors, in order.
pub fn detect_errors(
    windows: &[(Instant, Instant, f64)],
    threshold: AnomalyThreshold,
    alpha: f64,
    states: StateThresholds,
) -> Result<(FailureSignal, Vec<DetectionEvent>)> {
    let mut det = StreamDetector::new(threshold, alpha, states)?;
    let mut records = Vec::with_capacity(windows.len());
    let mut events = Vec::new();
    for &(start, end, err) in windows {
        let (rec, ev) = det.push(start, end, err)?;
        records.push(rec);
        events.extend(ev);
    }
    Ok((records, events))
}

/// Normalizes `frame` with the model's stored statistics, windows it and
/// runs the eval-mode model over every window.
pub fn window_errors(
    frame: &SensorFrame,
    model: &Autoencoder,
    spec: WindowSpec,
    batch: usize,
) -> Result<Vec<(Instant, Instant, f64)>> {
    let stats = model
        .normalization()
        .ok_or_else(|| Error::Config("model carries no normalization statistics".into()))?;
    if stats.n_channels() != frame.n_channels() {
        return Err(shape_err!(
            "model was trained on {} channels, data has {}",
            stats.n_channels(),
            frame.n_channels()
        ));
    }
    if spec.length() != model.config().window_length {
        return Err(shape_err!(
            "model window length {} differs from requested {}",
            model.config().window_length,
            spec.length()
        ));
    }
    let normalized = apply_normalization(frame, stats)?;
    let windows = make_windows(&normalized, spec)?;
    let matrices: Vec<Vec<f64>> = windows.iter().map(|w| w.to_matrix()).collect();
    let errors = model.window_errors(&matrices, batch)?;
    Ok(windows
        .iter()
        .zip(errors)
        .map(|(w, e)| (w.start_time(), w.end_time(), e))
        .collect())
}

/// End-to-end scoring of a raw test frame.
pub fn detect(
    frame: &SensorFrame,
    model: &Autoencoder,
    spec: WindowSpec,
    threshold: AnomalyThreshold,
    alpha: f64,
    states: StateThresholds,
) -> Result<(FailureSignal, Vec<DetectionEvent>)> {
    let errs = window_errors(frame, model, spec, 64)?;
    detect_errors(&errs, threshold, alpha, states)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPolicy {
    /// Onsets must precede the alarm by at least this much.
    pub lead: Duration,
    /// Onsets up to this long before an annotated start still belong to it.
    pub grace: Duration,
}

impl Default for MatchPolicy {
    fn default() -> Self {
        Self {
            lead: Duration::minutes(DEFAULT_LEAD_MINUTES),
            grace: Duration::hours(DEFAULT_GRACE_HOURS),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationResult {
    pub label: String,
    pub detected: bool,
    /// Earliest onset attributed to this annotation, if any.
    pub detection_time: Option<Instant>,
    /// `lps_time - detection_time` in minutes.
    pub lead_minutes: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub annotations: Vec<AnnotationResult>,
    pub true_positives: usize,
    pub false_negatives: usize,
    pub false_positive_events: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when there was nothing to detect and nothing was detected.
    pub vacuous: bool,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Matches onset events to annotations. An onset belongs to an annotation
/// when it falls in `[start - grace, end]`; the annotation is a hit when one
/// of its onsets is at or before `lps_time - lead`. Onsets belonging to no
/// annotation are false positives.
pub fn evaluate(
    events: &[DetectionEvent],
    annotations: &[FailureAnnotation],
    policy: MatchPolicy,
) -> EvaluationReport {
    let onsets: Vec<Instant> = events
        .iter()
        .filter(|e| e.kind == EventKind::FailureOnset)
        .map(|e| e.time)
        .collect();
    let owns = |a: &FailureAnnotation, t: Instant| t >= a.start - policy.grace && t <= a.end;

    let results: Vec<AnnotationResult> = annotations
        .iter()
        .map(|a| {
            let mine: Vec<Instant> = onsets.iter().copied().filter(|&t| owns(a, t)).collect();
            let first = mine.iter().min().copied();
            AnnotationResult {
                label: a.label.clone(),
                detected: mine.iter().any(|&t| t <= a.lps_time - policy.lead),
                detection_time: first,
                lead_minutes: first.map(|t| (a.lps_time - t).num_milliseconds() as f64 / 60_000.0),
            }
        })
        .collect();

    let tp = results.iter().filter(|r| r.detected).count();
    let fn_ = results.len() - tp;
    let fp = onsets
        .iter()
        .filter(|&&t| !annotations.iter().any(|a| owns(a, t)))
        .count();
    let vacuous = tp + fn_ + fp == 0;
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if vacuous {
        1.0
    } else {
        ratio(2 * tp, 2 * tp + fp + fn_)
    };
    EvaluationReport {
        annotations: results,
        true_positives: tp,
        false_negatives: fn_,
        false_positive_events: fp,
        precision,
        recall,
        f1,
        vacuous,
    }
}

impl EvaluationReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for a in &self.annotations {
            let when = a.detection_time.map_or("-".to_string(), |t| t.to_string());
            let lead = a
                .lead_minutes
                .map_or("-".to_string(), |m| format!("{m:.1} min"));
            s.push_str(&format!(
                "{:<20} detected={:<5} onset={when} lead={lead}\n",
                a.label, a.detected
            ));
        }
        s.push_str(&format!(
            "TP={} FN={} FP={} precision={:.3} recall={:.3} F1={:.3}{}\n",
            self.true_positives,
            self.false_negatives,
            self.false_positive_events,
            self.precision,
            self.recall,
            self.f1,
            if self.vacuous { " (vacuous)" } else { "" }
        ));
        s
    }
}

/// Writes one JSON object per line.
pub fn write_ndjson<T: Serialize, W: Write>(items: &[T], mut w: W) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ndjson<T: for<'de> Deserialize<'de>, R: BufRead>(r: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
