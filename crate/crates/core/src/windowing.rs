//! Overlapping fixed-length windows and the per-window aggregation used as
//! the rule learner's feature space.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{format_instant, SensorFrame};
use crate::Instant;

/// Window length and stride, both in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    length: usize,
    stride: usize,
}

impl WindowSpec {
    pub fn new(length: usize, stride: usize) -> Result<Self> {
        if stride == 0 || stride > length {
            return Err(Error::Config(format!(
                "window stride {stride} must satisfy 1 <= stride <= length ({length})"
            )));
        }
        Ok(Self { length, stride })
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Number of complete windows over `t` samples.
    pub fn count(&self, t: usize) -> usize {
        if t < self.length {
            0
        } else {
            (t - self.length) / self.stride + 1
        }
    }
}

/// A C×L view into a frame.
#[derive(Debug, Clone, Copy)]
pub struct Window<'a> {
    frame: &'a SensorFrame,
    offset: usize,
    length: usize,
}

impl<'a> Window<'a> {
    /// 1-based index of the first sample in the source frame.
    pub fn start_index(&self) -> usize {
        self.offset + 1
    }

    pub fn start_time(&self) -> Instant {
        self.frame.timestamps()[self.offset]
    }

    /// Timestamp of the last sample; the earliest instant the window is
    /// complete in a live stream.
    pub fn end_time(&self) -> Instant {
        self.frame.timestamps()[self.offset + self.length - 1]
    }

    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub fn n_channels(&self) -> usize {
        self.frame.n_channels()
    }

    pub fn channel(&self, c: usize) -> &'a [f64] {
        &self.frame.channel(c)[self.offset..self.offset + self.length]
    }

    /// Channel-major copy of the values.
    pub fn to_matrix(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_channels() * self.length);
        for c in 0..self.n_channels() {
            out.extend_from_slice(self.channel(c));
        }
        out
    }
}

/// Window `i` (1-based) starts at sample `1 + (i - 1) * stride`. Trailing
/// samples that do not fill a window are dropped.
pub fn make_windows<'a>(frame: &'a SensorFrame, spec: WindowSpec) -> Result<Vec<Window<'a>>> {
    if frame.len() < spec.length {
        return Err(Error::Data(format!(
            "{} samples cannot fill a window of {}",
            frame.len(),
            spec.length
        )));
    }
    Ok((0..spec.count(frame.len()))
        .map(|i| Window {
            frame,
            offset: i * spec.stride,
            length: spec.length,
        })
        .collect())
}

/// The four per-channel aggregations, in feature-layout order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Variance,
    Min,
    Max,
    Mean,
}

impl Aggregation {
    pub const ALL: [Aggregation; 4] = [
        Aggregation::Variance,
        Aggregation::Min,
        Aggregation::Max,
        Aggregation::Mean,
    ];
    pub const COUNT: usize = 4;

    pub fn suffix(self) -> &'static str {
        match self {
            Aggregation::Variance => "var",
            Aggregation::Min => "min",
            Aggregation::Max => "max",
            Aggregation::Mean => "mean",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Per-channel (variance, min, max, mean) of one window, stored
/// channel-major: feature `c * 4 + agg.index()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedWindow {
    pub start_index: usize,
    pub start_time: Instant,
    pub end_time: Instant,
    values: Vec<f64>,
}

impl AggregatedWindow {
    pub fn from_features(
        start_index: usize,
        start_time: Instant,
        end_time: Instant,
        values: Vec<f64>,
    ) -> Result<Self> {
        if !values.len().is_multiple_of(Aggregation::COUNT) {
            return Err(Error::Shape(format!(
                "{} features is not a multiple of {}",
                values.len(),
                Aggregation::COUNT
            )));
        }
        Ok(Self {
            start_index,
            start_time,
            end_time,
            values,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.values.len() / Aggregation::COUNT
    }

    pub fn get(&self, channel: usize, agg: Aggregation) -> f64 {
        self.values[channel * Aggregation::COUNT + agg.index()]
    }

    pub fn features(&self) -> &[f64] {
        &self.values
    }
}

pub fn aggregate(window: &Window<'_>) -> AggregatedWindow {
    let n = window.len() as f64;
    let mut values = Vec::with_capacity(window.n_channels() * Aggregation::COUNT);
    for c in 0..window.n_channels() {
        let xs = window.channel(c);
        let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        for &x in xs {
            lo = lo.min(x);
            hi = hi.max(x);
            sum += x;
        }
        // Clamp guards against the rounded mean landing outside [min, max].
        let mean = (sum / n).clamp(lo, hi);
        let var = if lo == hi {
            0.0
        } else {
            xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
        };
        values.extend_from_slice(&[var, lo, hi, mean]);
    }
    AggregatedWindow {
        start_index: window.start_index(),
        start_time: window.start_time(),
        end_time: window.end_time(),
        values,
    }
}

/// Names for the aggregated feature vector, `<channel>_<agg>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpace {
    channels: Vec<String>,
}

impl FeatureSpace {
    pub fn new(channels: Vec<String>) -> Self {
        Self { channels }
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn len(&self) -> usize {
        self.channels.len() * Aggregation::COUNT
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn index(&self, channel: &str, agg: Aggregation) -> Option<usize> {
        self.channels
            .iter()
            .position(|c| c == channel)
            .map(|c| c * Aggregation::COUNT + agg.index())
    }

    pub fn channel_of(&self, feature: usize) -> &str {
        &self.channels[feature / Aggregation::COUNT]
    }

    pub fn aggregation_of(&self, feature: usize) -> Aggregation {
        Aggregation::ALL[feature % Aggregation::COUNT]
    }

    pub fn name(&self, feature: usize) -> String {
        format!(
            "{}_{}",
            self.channel_of(feature),
            self.aggregation_of(feature).suffix()
        )
    }

    pub fn names(&self) -> Vec<String> {
        (0..self.len()).map(|i| self.name(i)).collect()
    }

    /// Mask that is false for every feature of the excluded channels.
    pub fn mask_excluding<S: AsRef<str>>(&self, excluded: &[S]) -> Result<Vec<bool>> {
        for e in excluded {
            if !self.channels.iter().any(|c| c == e.as_ref()) {
                return Err(Error::Config(format!(
                    "cannot exclude unknown channel {}",
                    e.as_ref()
                )));
            }
        }
        Ok((0..self.len())
            .map(|f| !excluded.iter().any(|e| e.as_ref() == self.channel_of(f)))
            .collect())
    }
}

pub fn write_features_csv<W: Write>(
    windows: &[AggregatedWindow],
    space: &FeatureSpace,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["start_time".to_string()];
    header.extend(space.names());
    w.write_record(&header)?;
    for win in windows {
        let mut rec = vec![format_instant(&win.start_time)];
        rec.extend(win.features().iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
