use std::path::{Path, PathBuf};

use failrules_core::autoencoder::AEConfig;
use failrules_core::detector::{
    MatchPolicy, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_GRACE_HOURS, DEFAULT_LEAD_MINUTES,
    DEFAULT_TAU_FAIL, DEFAULT_TAU_WARN,
};
use failrules_core::ingest::LoadOptions;
use failrules_core::rulelearn::{LearnerConfig, DEFAULT_K_MAX};
use failrules_core::{Error, GapPolicy, Instant, Result, StateThresholds, TrainConfig, WindowSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub length: usize,
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        // 30-minute windows every 5 minutes at 1 Hz.
        Self {
            length: 1800,
            stride: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub blocks: usize,
    pub hidden_channels: usize,
    pub latent_channels: usize,
    pub kernel_size: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 10,
            hidden_channels: 30,
            latent_channels: 32,
            kernel_size: 3,
            dropout: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau_warn: f64,
    pub tau_fail: f64,
    pub lead_minutes: i64,
    pub grace_hours: i64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            tau_warn: DEFAULT_TAU_WARN,
            tau_fail: DEFAULT_TAU_FAIL,
            lead_minutes: DEFAULT_LEAD_MINUTES,
            grace_hours: DEFAULT_GRACE_HOURS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RulesConfig {
    pub excluded_channels: Vec<String>,
    pub max_history: Option<usize>,
    pub k_max: usize,
    pub near_singleton_max: usize,
}

impl Default for RulesConfig {
    fn default() -> Self {
        Self {
            excluded_channels: Vec::new(),
            max_history: None,
            k_max: DEFAULT_K_MAX,
            near_singleton_max: 2,
        }
    }
}

/// Everything a run needs. Written next to the artifacts so any run can be
/// repeated from its output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    /// Defaults to `<data>.annotations.json` when absent.
    pub annotations: Option<PathBuf>,
    /// Channels to load; empty means every column of the CSV.
    pub schema: Vec<String>,
    /// First instant of the test period.
    #[serde(with = "opt_instant", skip_serializing_if = "Option::is_none")]
    pub cutoff: Option<Instant>,
    pub gap_policy: GapPolicy,
    pub sample_period_secs: Option<u64>,
    pub window: WindowConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub detector: DetectorConfig,
    pub rules: RulesConfig,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            annotations: None,
            schema: Vec::new(),
            cutoff: None,
            gap_policy: GapPolicy::ForwardFill,
            sample_period_secs: None,
            window: WindowConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            detector: DetectorConfig::default(),
            rules: RulesConfig::default(),
            out_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

/// Instants as `YYYY-MM-DD HH:MM:SS` strings; any format accepted by
/// `parse_instant` is read back.
mod opt_instant {
    use failrules_core::ingest::{format_instant, parse_instant};
    use failrules_core::Instant;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        t: &Option<Instant>,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        match t {
            Some(t) => s.serialize_some(&format_instant(t)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Option<Instant>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|s| parse_instant(&s).map_err(serde::de::Error::custom))
            .transpose()
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.window_spec()?;
        self.train.validate()?;
        self.states()?;
        self.ae_config(1).validate()?;
        if !(self.detector.alpha > 0.0 && self.detector.alpha <= 1.0) {
            return Err(Error::Config(format!(
                "alpha {} not in (0, 1]",
                self.detector.alpha
            )));
        }
        if self.detector.beta.is_nan() || self.detector.beta <= 0.0 {
            return Err(Error::Config(format!(
                "beta {} must be > 0",
                self.detector.beta
            )));
        }
        if self.detector.lead_minutes < 0 || self.detector.grace_hours < 0 {
            return Err(Error::Config(
                "lead_minutes and grace_hours must be >= 0".into(),
            ));
        }
        if self.rules.k_max == 0 {
            return Err(Error::Config("k_max must be >= 1".into()));
        }
        if self.sample_period_secs == Some(0) {
            return Err(Error::Config("sample_period_secs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn window_spec(&self) -> Result<WindowSpec> {
        WindowSpec::new(self.window.length, self.window.stride)
    }

    pub fn states(&self) -> Result<StateThresholds> {
        StateThresholds::new(self.detector.tau_warn, self.detector.tau_fail)
    }

    pub fn match_policy(&self) -> MatchPolicy {
        MatchPolicy {
            lead: chrono::Duration::minutes(self.detector.lead_minutes),
            grace: chrono::Duration::hours(self.detector.grace_hours),
        }
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            gap_policy: self.gap_policy,
            sample_period: self
                .sample_period_secs
                .map(|s| chrono::Duration::seconds(s as i64)),
        }
    }

    pub fn ae_config(&self, input_channels: usize) -> AEConfig {
        let mut ae =
            AEConfig::new(input_channels, self.window.length).with_blocks(self.model.blocks);
        ae.hidden_channels = self.model.hidden_channels;
        ae.latent_channels = self.model.latent_channels;
        ae.kernel_size = self.model.kernel_size;
        ae.dropout_p = self.model.dropout;
        ae.seed = self.seed;
        ae
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn learner_config(&self) -> Result<LearnerConfig> {
        Ok(LearnerConfig {
            states: self.states()?,
            k_max: self.rules.k_max,
            excluded_channels: self.rules.excluded_channels.clone(),
            max_history: self.rules.max_history,
            seed: self.seed,
        })
    }

    pub fn data_path(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::Config("no data path configured".into()))
    }

    pub fn annotations_path(&self) -> Result<PathBuf> {
        match &self.annotations {
            Some(p) => Ok(p.clone()),
            None => Ok(failrules_core::synth::sidecar_path(self.data_path()?)),
        }
    }
}

#[cfg(test)]
#[allow(clippy::field_reassign_with_default)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.cutoff = Some(failrules_core::ingest::parse_instant("2022-06-01 00:00:00").unwrap());
        cfg.rules.max_history = Some(100);
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn full_size_defaults() {
        let cfg = RunConfig::default();
        assert_eq!((cfg.window.length, cfg.window.stride), (1800, 300));
        let ae = cfg.ae_config(8);
        assert_eq!(ae.blocks, 10);
        assert_eq!(ae.hidden_channels, 30);
        assert_eq!(ae.latent_channels, 32);
        assert_eq!(ae.dilations, vec![2, 4, 8, 16, 32, 64, 128, 256, 512, 1024]);
        assert_eq!(cfg.train.learning_rate, 1e-4);
        assert_eq!(cfg.train.epochs, 200);
        assert_eq!(cfg.detector.alpha, 0.15);
        assert_eq!(cfg.detector.beta, 3.0);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml("seed = 4\n[window]\nlength = 30\nstride = 5\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.window.length, 30);
        assert_eq!(cfg.model.blocks, 10);
    }

    #[test]
    fn cutoff_accepts_plain_and_iso_forms() {
        let a = RunConfig::from_toml("cutoff = \"2022-06-01 00:00:00\"").unwrap();
        let b = RunConfig::from_toml("cutoff = \"2022-06-01T00:00:00\"").unwrap();
        assert_eq!(a.cutoff, b.cutoff);
        assert!(a
            .to_toml()
            .unwrap()
            .contains("cutoff = \"2022-06-01 00:00:00\""));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            RunConfig::from_toml("sed = 4"),
            Err(Error::Config(_))
        ));
    }
}
