//! Seeded synthetic sensor streams with injected level-shift failures.
//!
//! Every channel is a baseline process plus Gaussian noise truncated at
//! three standard deviations. During a failure the affected channels are
//! raised by a constant elevation. Truncation keeps the bounds below exact
//! for every seed:
//!
//! * inside a failure, an affected sample is at least
//!   `baseline(t) + elevation - 3σ`;
//! * outside every failure, a sample is at most `baseline(t) + 3σ`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{parse_instant, save_annotations, FailureAnnotation, SensorFrame};
use crate::Instant;

const TRUNCATION: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Baseline {
    Constant {
        level: f64,
    },
    Sine {
        level: f64,
        amplitude: f64,
        period: f64,
    },
    /// Random walk with step size `sigma`, reflected into `level ± bound`.
    RandomWalk {
        level: f64,
        sigma: f64,
        bound: f64,
    },
}

impl Baseline {
    /// Largest value the process can take.
    pub fn max(&self) -> f64 {
        match *self {
            Baseline::Constant { level } => level,
            Baseline::Sine {
                level, amplitude, ..
            } => level + amplitude.abs(),
            Baseline::RandomWalk { level, bound, .. } => level + bound,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let ok = match *self {
            Baseline::Constant { level } => level.is_finite(),
            Baseline::Sine {
                level,
                amplitude,
                period,
            } => level.is_finite() && amplitude.is_finite() && period > 0.0,
            Baseline::RandomWalk {
                level,
                sigma,
                bound,
            } => level.is_finite() && sigma >= 0.0 && bound >= 0.0 && bound.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "channel {name}: invalid baseline {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub name: String,
    pub baseline: Baseline,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureEffect {
    pub channel: String,
    pub elevation: f64,
}

/// Failure over samples `start..end` (end exclusive).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureSpec {
    pub label: String,
    pub start: usize,
    pub end: usize,
    pub effects: Vec<FailureEffect>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub duration_samples: usize,
    pub start_time: Instant,
    pub period_secs: u32,
    pub channels: Vec<ChannelSpec>,
    pub failures: Vec<FailureSpec>,
    /// Where the low-pressure alarm fires, as a fraction of each failure.
    #[serde(default = "default_lps_offset")]
    pub lps_offset_fraction: f64,
}

fn default_lps_offset() -> f64 {
    0.3
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.duration_samples == 0 {
            return Err(Error::Config("duration_samples must be >= 1".into()));
        }
        if self.period_secs == 0 {
            return Err(Error::Config("period_secs must be >= 1".into()));
        }
        if self.channels.is_empty() {
            return Err(Error::Config("at least one channel is required".into()));
        }
        if !(self.lps_offset_fraction > 0.0 && self.lps_offset_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "lps_offset_fraction {} outside (0, 1]",
                self.lps_offset_fraction
            )));
        }
        for (i, c) in self.channels.iter().enumerate() {
            if self.channels[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::Config(format!("duplicate channel {}", c.name)));
            }
            if !(c.noise_sigma >= 0.0 && c.noise_sigma.is_finite()) {
                return Err(Error::Config(format!(
                    "channel {}: noise_sigma must be >= 0",
                    c.name
                )));
            }
            c.baseline.validate(&c.name)?;
        }
        let mut spans: Vec<&FailureSpec> = self.failures.iter().collect();
        spans.sort_by_key(|f| f.start);
        for f in &spans {
            if f.end > self.duration_samples || f.end < f.start + 2 {
                return Err(Error::Config(format!(
                    "failure {} spans {}..{}, must hold at least two samples within 0..{}",
                    f.label, f.start, f.end, self.duration_samples
                )));
            }
            for e in &f.effects {
                if !(e.elevation > 0.0 && e.elevation.is_finite()) {
                    return Err(Error::Config(format!(
                        "failure {}: elevation must be > 0",
                        f.label
                    )));
                }
                if !self.channels.iter().any(|c| c.name == e.channel) {
                    return Err(Error::Config(format!(
                        "failure {}: unknown channel {}",
                        f.label, e.channel
                    )));
                }
            }
        }
        if let Some(w) = spans.windows(2).find(|w| w[1].start < w[0].end) {
            return Err(Error::Config(format!(
                "failures {} and {} overlap",
                w[0].label, w[1].label
            )));
        }
        Ok(())
    }

    pub fn timestamp(&self, i: usize) -> Instant {
        self.start_time + chrono::Duration::seconds(i as i64 * self.period_secs as i64)
    }

    /// Index of the sample at which failure `f` raises its alarm.
    pub fn lps_index(&self, f: &FailureSpec) -> usize {
        let off = (self.lps_offset_fraction * (f.end - f.start) as f64).round() as usize;
        f.start + off.clamp(1, f.end - f.start - 1)
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    loop {
        let u: f64 = StandardNormal.sample(rng);
        if u.abs() <= TRUNCATION {
            return sigma * u;
        }
    }
}

/// The baseline path of one channel, without noise or failures.
fn baseline_path(b: &Baseline, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match *b {
        Baseline::Constant { level } => vec![level; n],
        Baseline::Sine {
            level,
            amplitude,
            period,
        } => (0..n)
            .map(|t| level + amplitude * (std::f64::consts::TAU * t as f64 / period).sin())
            .collect(),
        Baseline::RandomWalk {
            level,
            sigma,
            bound,
        } => {
            let mut x = 0.0f64;
            (0..n)
                .map(|_| {
                    x += truncated_normal(rng, sigma);
                    // Reflect back into [-bound, bound].
                    while bound > 0.0 && x.abs() > bound {
                        x = x.signum() * 2.0 * bound - x;
                    }
                    if bound == 0.0 {
                        x = 0.0;
                    }
                    level + x
                })
                .collect()
        }
    }
}

/// Baseline paths and the generated frame, kept together for checks.
#[derive(Debug, Clone)]
pub struct Generated {
    pub frame: SensorFrame,
    pub annotations: Vec<FailureAnnotation>,
    pub baselines: Vec<Vec<f64>>,
}

pub fn generate(config: &SynthConfig) -> Result<(SensorFrame, Vec<FailureAnnotation>)> {
    let g = generate_detailed(config)?;
    Ok((g.frame, g.annotations))
}

pub fn generate_detailed(config: &SynthConfig) -> Result<Generated> {
    config.validate()?;
    let n = config.duration_samples;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut baselines = Vec::with_capacity(config.channels.len());
    let mut values = Vec::with_capacity(config.channels.len());
    for c in &config.channels {
        let base = baseline_path(&c.baseline, n, &mut rng);
        let mut v: Vec<f64> = base
            .iter()
            .map(|b| b + truncated_normal(&mut rng, c.noise_sigma))
            .collect();
        for f in &config.failures {
            for e in f.effects.iter().filter(|e| e.channel == c.name) {
                for x in &mut v[f.start..f.end] {
                    *x += e.elevation;
                }
            }
        }
        baselines.push(base);
        values.push(v);
    }
    let timestamps: Vec<Instant> = (0..n).map(|i| config.timestamp(i)).collect();
    let names = config.channels.iter().map(|c| c.name.clone()).collect();
    let frame = SensorFrame::new(timestamps, names, values)?;
    let annotations = config
        .failures
        .iter()
        .map(|f| {
            FailureAnnotation::new(
                f.label.clone(),
                config.timestamp(f.start),
                config.timestamp(f.end - 1),
                config.timestamp(config.lps_index(f)),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Generated {
        frame,
        annotations,
        baselines,
    })
}

/// `data.csv` -> `data.annotations.json`
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("annotations.json")
}

/// Write the frame as CSV and its annotations next to it.
pub fn write_synth(
    frame: &SensorFrame,
    annotations: &[FailureAnnotation],
    csv: &Path,
) -> Result<PathBuf> {
    frame.save_csv(csv)?;
    let side = sidecar_path(csv);
    save_annotations(annotations, &side)?;
    Ok(side)
}

fn start() -> Instant {
    parse_instant("2022-01-01 00:00:00").expect("static timestamp")
}

fn quiet_channels() -> Vec<ChannelSpec> {
    vec![
        ChannelSpec {
            name: "Flowmeter".into(),
            baseline: Baseline::Constant { level: 5.0 },
            noise_sigma: 0.1,
        },
        ChannelSpec {
            name: "Oil_temperature".into(),
            baseline: Baseline::Sine {
                level: 60.0,
                amplitude: 3.0,
                period: 720.0,
            },
            noise_sigma: 0.3,
        },
        ChannelSpec {
            name: "Motor_current".into(),
            baseline: Baseline::Sine {
                level: 4.0,
                amplitude: 0.5,
                period: 240.0,
            },
            noise_sigma: 0.05,
        },
        ChannelSpec {
            name: "TP2".into(),
            baseline: Baseline::Constant { level: 8.0 },
            noise_sigma: 0.2,
        },
    ]
}

/// Four channels at one sample per minute; two failures raise the
/// flowmeter from about 5 to about 16. The first 2,000 samples are quiet.
pub fn two_failure_scenario(seed: u64) -> SynthConfig {
    let failure = |label: &str, start: usize| FailureSpec {
        label: label.into(),
        start,
        end: start + 600,
        effects: vec![FailureEffect {
            channel: "Flowmeter".into(),
            elevation: 11.0,
        }],
    };
    SynthConfig {
        seed,
        duration_samples: 6000,
        start_time: start(),
        period_secs: 60,
        channels: quiet_channels(),
        failures: vec![failure("failure-1", 2600), failure("failure-2", 4400)],
        lps_offset_fraction: default_lps_offset(),
    }
}

/// As [`two_failure_scenario`], with the oil temperature rising alongside
/// the flowmeter.
pub fn correlated_scenario(seed: u64) -> SynthConfig {
    let mut cfg = two_failure_scenario(seed);
    for f in &mut cfg.failures {
        f.effects.push(FailureEffect {
            channel: "Oil_temperature".into(),
            elevation: 12.0,
        });
    }
    cfg
}

/// No failures at all.
pub fn quiet_scenario(seed: u64, duration_samples: usize) -> SynthConfig {
    SynthConfig {
        seed,
        duration_samples,
        start_time: start(),
        period_secs: 60,
        channels: quiet_channels(),
        failures: Vec::new(),
        lps_offset_fraction: default_lps_offset(),
    }
}

/// A small random single-failure configuration.
pub fn random_config(rng: &mut impl Rng) -> SynthConfig {
    let n = rng.random_range(50..400);
    let fstart = rng.random_range(0..n - 10);
    let fend = rng.random_range(fstart + 2..=n.min(fstart + 60));
    SynthConfig {
        seed: rng.random(),
        duration_samples: n,
        start_time: start(),
        period_secs: 60,
        channels: vec![
            ChannelSpec {
                name: "a".into(),
                baseline: Baseline::Constant {
                    level: rng.random_range(-5.0..5.0),
                },
                noise_sigma: rng.random_range(0.0..1.0),
            },
            ChannelSpec {
                name: "b".into(),
                baseline: Baseline::RandomWalk {
                    level: 0.0,
                    sigma: 0.2,
                    bound: 2.0,
                },
                noise_sigma: rng.random_range(0.0..0.5),
            },
        ],
        failures: vec![FailureSpec {
            label: "f".into(),
            start: fstart,
            end: fend,
            effects: vec![FailureEffect {
                channel: "a".into(),
                elevation: rng.random_range(0.5..20.0),
            }],
        }],
        lps_offset_fraction: default_lps_offset(),
    }
}
