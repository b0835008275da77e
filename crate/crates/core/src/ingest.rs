//! Loading, validating, splitting and normalizing raw sensor logs.
//!
//! CSV layout: a header row, one timestamp column (the column named
//! `timestamp` if present, otherwise the first column) and one column per
//! sensor channel. Extra columns are ignored; only the requested schema
//! channels are kept, in schema order.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::Instant;

/// Channels that are ingested for evaluation but never fed to a model or
/// the rule learner.
pub const EXCLUDED_FROM_FEATURES: &[&str] = &["LPS"];

/// Analogue channels of the Metro do Porto APU logs.
pub const METROPT2_ANALOG: &[&str] = &[
    "TP2",
    "TP3",
    "H1",
    "DV_pressure",
    "Reservoirs",
    "Oil_temperature",
    "Flowmeter",
    "Motor_current",
];

/// Digital channels that are always present in the APU logs and relevant here.
pub const METROPT2_DIGITAL: &[&str] = &["COMP", "LPS"];

const TIMESTAMP_FORMATS: &[&str] = &["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f"];

/// Parses the timestamp formats found in sensor exports.
pub fn parse_instant(s: &str) -> Result<Instant> {
    let s = s.trim();
    for fmt in TIMESTAMP_FORMATS {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(t);
        }
    }
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.naive_utc())
        .map_err(|_| Error::Data(format!("unparseable timestamp {s:?}")))
}

/// Formats an instant so that [`parse_instant`] reproduces it exactly.
pub fn format_instant(t: &Instant) -> String {
    t.format("%Y-%m-%d %H:%M:%S%.f").to_string()
}

/// How missing samples are handled while loading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GapPolicy {
    #[default]
    ForwardFill,
    Reject,
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub gap_policy: GapPolicy,
    /// Nominal sampling period. When set, timestamp steps longer than the
    /// period count as missing rows.
    pub sample_period: Option<Duration>,
}

/// A timestamped multichannel series stored channel-major (C×T).
#[derive(Debug, Clone, PartialEq)]
pub struct SensorFrame {
    timestamps: Vec<Instant>,
    channels: Vec<String>,
    values: Vec<Vec<f64>>,
}

impl SensorFrame {
    pub fn new(
        timestamps: Vec<Instant>,
        channels: Vec<String>,
        values: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if values.len() != channels.len() {
            return Err(shape_err!(
                "{} value rows for {} channels",
                values.len(),
                channels.len()
            ));
        }
        for (name, row) in channels.iter().zip(&values) {
            if row.len() != timestamps.len() {
                return Err(shape_err!(
                    "channel {name} has {} samples, expected {}",
                    row.len(),
                    timestamps.len()
                ));
            }
            if row.iter().any(|v| v.is_nan()) {
                return Err(Error::Data(format!("channel {name} contains NaN")));
            }
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Data(format!(
                "timestamps not strictly increasing at row {}",
                i + 1
            )));
        }
        Ok(Self {
            timestamps,
            channels,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn timestamps(&self) -> &[Instant] {
        &self.timestamps
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c]
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c == name)
    }

    pub fn channel_by_name(&self, name: &str) -> Option<&[f64]> {
        self.channel_index(name).map(|c| self.channel(c))
    }

    /// Channels usable as model or rule features (everything except
    /// [`EXCLUDED_FROM_FEATURES`]).
    pub fn feature_channels(&self) -> Vec<String> {
        self.channels
            .iter()
            .filter(|c| !EXCLUDED_FROM_FEATURES.contains(&c.as_str()))
            .cloned()
            .collect()
    }

    /// Subframe with the named channels, in the given order.
    pub fn select<S: AsRef<str>>(&self, names: &[S]) -> Result<SensorFrame> {
        let mut values = Vec::with_capacity(names.len());
        for name in names {
            let name = name.as_ref();
            let c = self
                .channel_index(name)
                .ok_or_else(|| Error::Schema(format!("missing channel {name}")))?;
            values.push(self.values[c].clone());
        }
        Ok(SensorFrame {
            timestamps: self.timestamps.clone(),
            channels: names.iter().map(|n| n.as_ref().to_string()).collect(),
            values,
        })
    }

    /// Rows `range` of the frame.
    pub fn slice(&self, range: std::ops::Range<usize>) -> SensorFrame {
        SensorFrame {
            timestamps: self.timestamps[range.clone()].to_vec(),
            channels: self.channels.clone(),
            values: self
                .values
                .iter()
                .map(|v| v[range.clone()].to_vec())
                .collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["timestamp".to_string()];
        header.extend(self.channels.iter().cloned());
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for t in 0..self.len() {
            record.clear();
            record.push(format_instant(&self.timestamps[t]));
            record.extend(self.values.iter().map(|v| v[t].to_string()));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(File::create(path)?)
    }
}

/// Channel names in a CSV header, without the timestamp column.
pub fn csv_channels(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let headers = rdr.headers()?;
    let ts_col = headers
        .iter()
        .position(|h| h.trim().eq_ignore_ascii_case("timestamp"))
        .unwrap_or(0);
    Ok(headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != ts_col)
        .map(|(_, h)| h.trim().to_string())
        .collect())
}

/// Loads the `schema` channels of a CSV file.
pub fn load_csv<S: AsRef<str>>(
    path: impl AsRef<Path>,
    schema: &[S],
    opts: &LoadOptions,
) -> Result<SensorFrame> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    read_csv(file, schema, opts)
}

pub fn read_csv<R: Read, S: AsRef<str>>(
    reader: R,
    schema: &[S],
    opts: &LoadOptions,
) -> Result<SensorFrame> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let ts_col = headers
        .iter()
        .position(|h| h.trim().eq_ignore_ascii_case("timestamp"))
        .unwrap_or(0);
    let mut cols = Vec::with_capacity(schema.len());
    for name in schema {
        let name = name.as_ref();
        let idx = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("missing column {name}")))?;
        cols.push(idx);
    }

    let mut timestamps: Vec<Instant> = Vec::new();
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); schema.len()];
    let mut filled_rows = 0usize;
    let mut filled_cells = 0usize;

    for (row_no, record) in rdr.records().enumerate() {
        let record = record?;
        let line = row_no + 2;
        let ts_field = record
            .get(ts_col)
            .ok_or_else(|| Error::Data(format!("line {line}: missing timestamp")))?;
        let t = parse_instant(ts_field)?;
        if let Some(&prev) = timestamps.last() {
            if t <= prev {
                return Err(Error::Data(format!(
                    "line {line}: timestamp {t} not after {prev}"
                )));
            }
            if let Some(period) = opts.sample_period {
                let mut next = prev + period;
                while next < t {
                    if opts.gap_policy == GapPolicy::Reject {
                        return Err(Error::Data(format!("missing sample at {next}")));
                    }
                    timestamps.push(next);
                    for v in values.iter_mut() {
                        let last = *v.last().expect("non-empty after first row");
                        v.push(last);
                    }
                    filled_rows += 1;
                    next += period;
                }
            }
        }
        timestamps.push(t);
        for (c, &col) in cols.iter().enumerate() {
            let raw = record.get(col).unwrap_or("").trim();
            let parsed = if raw.is_empty() {
                f64::NAN
            } else {
                raw.parse::<f64>().map_err(|_| {
                    Error::Data(format!(
                        "line {line}: bad value {raw:?} in {}",
                        schema[c].as_ref()
                    ))
                })?
            };
            let v = if parsed.is_nan() {
                if opts.gap_policy == GapPolicy::Reject {
                    return Err(Error::Data(format!(
                        "line {line}: missing value in {}",
                        schema[c].as_ref()
                    )));
                }
                filled_cells += 1;
                *values[c].last().ok_or_else(|| {
                    Error::Data(format!(
                        "line {line}: leading gap in {} cannot be forward-filled",
                        schema[c].as_ref()
                    ))
                })?
            } else {
                parsed
            };
            values[c].push(v);
        }
    }

    if filled_rows + filled_cells > 0 {
        log::warn!("forward-filled {filled_rows} missing rows and {filled_cells} missing cells");
    }
    SensorFrame::new(
        timestamps,
        schema.iter().map(|s| s.as_ref().to_string()).collect(),
        values,
    )
}

/// A known failure episode with the time the on-board low-pressure alarm fired.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureAnnotation {
    pub label: String,
    pub start: Instant,
    pub end: Instant,
    pub lps_time: Instant,
}

impl FailureAnnotation {
    pub fn new(
        label: impl Into<String>,
        start: Instant,
        end: Instant,
        lps_time: Instant,
    ) -> Result<Self> {
        let a = Self {
            label: label.into(),
            start,
            end,
            lps_time,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start < self.lps_time && self.lps_time <= self.end) {
            return Err(Error::Data(format!(
                "annotation {}: need start < lps_time <= end",
                self.label
            )));
        }
        Ok(())
    }
}

/// The two maintenance-report failures of the MetroPT2 logs.
pub fn metropt2_failures() -> Vec<FailureAnnotation> {
    let t = |s: &str| parse_instant(s).expect("static timestamp");
    vec![
        FailureAnnotation {
            label: "Air Leak".into(),
            start: t("2022-06-04 10:19:24"),
            end: t("2022-06-04 14:22:39"),
            lps_time: t("2022-06-04 11:26:01"),
        },
        FailureAnnotation {
            label: "Oil Leak".into(),
            start: t("2022-07-11 10:10:18"),
            end: t("2022-07-14 10:22:08"),
            lps_time: t("2022-07-13 19:43:52"),
        },
    ]
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<FailureAnnotation>> {
    let annotations: Vec<FailureAnnotation> = serde_json::from_reader(File::open(path)?)?;
    for a in &annotations {
        a.validate()?;
    }
    Ok(annotations)
}

pub fn save_annotations(annotations: &[FailureAnnotation], path: impl AsRef<Path>) -> Result<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, annotations)?;
    f.write_all(b"\n")?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: SensorFrame,
    pub test: SensorFrame,
    pub cutoff: Instant,
}

/// Splits into `t < cutoff` (train) and `t >= cutoff` (test).
pub fn split_by_timestamp(frame: &SensorFrame, cutoff: Instant) -> Result<DatasetSplit> {
    let (first, last) = match (frame.timestamps.first(), frame.timestamps.last()) {
        (Some(f), Some(l)) => (*f, *l),
        _ => return Err(Error::Range("cannot split an empty frame".into())),
    };
    if cutoff < first || cutoff > last {
        return Err(Error::Range(format!(
            "cutoff {cutoff} outside [{first}, {last}]"
        )));
    }
    let at = frame.timestamps.partition_point(|t| *t < cutoff);
    Ok(DatasetSplit {
        train: frame.slice(0..at),
        test: frame.slice(at..frame.len()),
        cutoff,
    })
}

/// Per-channel mean and population standard deviation of a training frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub channels: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Standard deviations at or below this are treated as constant channels.
const CONSTANT_STD: f64 = 1e-12;

impl NormalizationStats {
    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    /// Divisor used for channel `c`; constant channels divide by 1.
    pub fn scale(&self, c: usize) -> f64 {
        if self.std[c] <= CONSTANT_STD {
            1.0
        } else {
            self.std[c]
        }
    }

    pub fn is_constant(&self, c: usize) -> bool {
        self.std[c] <= CONSTANT_STD
    }
}

pub fn fit_normalization(train: &SensorFrame) -> Result<NormalizationStats> {
    if train.is_empty() {
        return Err(Error::Data(
            "cannot fit normalization on an empty frame".into(),
        ));
    }
    let n = train.len() as f64;
    let mut mean = Vec::with_capacity(train.n_channels());
    let mut std = Vec::with_capacity(train.n_channels());
    for v in &train.values {
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        mean.push(m);
        std.push(var.sqrt());
    }
    Ok(NormalizationStats {
        channels: train.channels.clone(),
        mean,
        std,
    })
}

/// Returns `(x - mean) / std` per channel. Channels are matched by name.
pub fn apply_normalization(frame: &SensorFrame, stats: &NormalizationStats) -> Result<SensorFrame> {
    if frame.n_channels() != stats.n_channels() {
        return Err(shape_err!(
            "frame has {} channels, normalization stats have {}",
            frame.n_channels(),
            stats.n_channels()
        ));
    }
    let mut values = Vec::with_capacity(stats.n_channels());
    for (c, name) in stats.channels.iter().enumerate() {
        let src = frame
            .channel_by_name(name)
            .ok_or_else(|| shape_err!("frame lacks normalized channel {name}"))?;
        let (m, s) = (stats.mean[c], stats.scale(c));
        values.push(
            src.iter()
                .map(|x| {
                    if stats.is_constant(c) {
                        0.0
                    } else {
                        (x - m) / s
                    }
                })
                .collect(),
        );
    }
    Ok(SensorFrame {
        timestamps: frame.timestamps.clone(),
        channels: stats.channels.clone(),
        values,
    })
}

/// Holds out the final `ceil(fraction * n)` items (temporal order kept).
pub fn holdout_split<T>(mut items: Vec<T>, fraction: f64) -> Result<(Vec<T>, Vec<T>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "holdout fraction {fraction} not in (0, 1)"
        )));
    }
    let n = items.len();
    if n == 0 {
        return Err(Error::Data("no windows to split".into()));
    }
    // Slack absorbs products like 0.3 * 10 = 3.0000000000000004.
    let n_val = ((fraction * n as f64) - 1e-9).ceil().max(1.0) as usize;
    if n_val >= n {
        return Err(Error::Data(format!(
            "{n} windows leave nothing to fit after holding out {n_val}"
        )));
    }
    let validation = items.split_off(n - n_val);
    Ok((items, validation))
}
