use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use failrules_core::autoencoder::checkpoint::{load_model, save_model};
use failrules_core::autoencoder::train::{train, write_curve_csv};
use failrules_core::detector::{
    calibrate_threshold, detect, evaluate, read_ndjson, write_ndjson, DetectionEvent, SignalRecord,
};
use failrules_core::ingest::{
    apply_normalization, csv_channels, fit_normalization, load_annotations, load_csv,
    split_by_timestamp, FailureAnnotation,
};
use failrules_core::rulelearn::{
    node_support, run_learner, LearnerEvent, Provenance, RuleLearner, RuleSet,
};
use failrules_core::synth::{self, SynthConfig};
use failrules_core::windowing::{aggregate, make_windows};
use failrules_core::{
    AnomalyThreshold, Autoencoder, DatasetSplit, Error, EvaluationReport, FeatureSpace, Result,
    SensorFrame,
};
use serde::Serialize;

use crate::config::RunConfig;

pub const MODEL_FILE: &str = "model.bin";
pub const CURVE_FILE: &str = "training_curve.csv";
pub const VALIDATION_FILE: &str = "validation_errors.json";
pub const THRESHOLD_FILE: &str = "threshold.json";
pub const CONFIG_FILE: &str = "run_config.toml";
pub const SIGNAL_FILE: &str = "signal.ndjson";
pub const EVENTS_FILE: &str = "events.ndjson";
pub const RULES_DIR: &str = "rules";
pub const REPORT_TEXT_FILE: &str = "evaluation.txt";
pub const REPORT_JSON_FILE: &str = "evaluation.json";
pub const PLOT_CSV_FILE: &str = "signal.csv";
pub const PLOT_SVG_FILE: &str = "signal.svg";

fn out_file(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir)?;
    Ok(cfg.out_dir.join(name))
}

fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

fn write_ndjson_file<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    write_ndjson(items, BufWriter::new(File::create(path)?))
}

pub fn read_ndjson_file<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    read_ndjson(BufReader::new(f))
}

/// The configured channels of the data file, minus those never used as
/// features.
pub fn load_frame(cfg: &RunConfig) -> Result<SensorFrame> {
    let path = cfg.data_path()?;
    let schema = if cfg.schema.is_empty() {
        csv_channels(path)?
    } else {
        cfg.schema.clone()
    };
    let frame = load_csv(path, &schema, &cfg.load_options())?;
    frame.select(&frame.feature_channels())
}

pub fn load_split(cfg: &RunConfig) -> Result<DatasetSplit> {
    let cutoff = cfg
        .cutoff
        .ok_or_else(|| Error::Config("no cutoff configured".into()))?;
    split_by_timestamp(&load_frame(cfg)?, cutoff)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub model: PathBuf,
    pub curve: PathBuf,
    pub windows: usize,
    pub epochs: usize,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
}

/// Fits the autoencoder on the pre-cutoff data and writes the checkpoint,
/// the training curve, the validation errors and the run config.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let split = load_split(cfg)?;
    if split.train.is_empty() {
        return Err(Error::Data("no training data before the cutoff".into()));
    }
    let stats = fit_normalization(&split.train)?;
    let normalized = apply_normalization(&split.train, &stats)?;
    let windows: Vec<Vec<f64>> = make_windows(&normalized, cfg.window_spec()?)?
        .iter()
        .map(|w| w.to_matrix())
        .collect();
    let ae = cfg.ae_config(normalized.n_channels());
    log::info!(
        "training on {} windows, {} parameters",
        windows.len(),
        Autoencoder::init(ae.clone())?.n_parameters()
    );
    let mut outcome = train(&windows, &ae, &cfg.train_config())?;
    outcome.model.set_normalization(stats)?;

    let model = out_file(cfg, MODEL_FILE)?;
    save_model(&outcome.model, &model)?;
    let curve = out_file(cfg, CURVE_FILE)?;
    write_curve_csv(&outcome.curve, BufWriter::new(File::create(&curve)?))?;
    write_json(&outcome.validation_errors, &out_file(cfg, VALIDATION_FILE)?)?;
    cfg.save(&out_file(cfg, CONFIG_FILE)?)?;
    let last = outcome.curve.last().expect("at least one epoch");
    Ok(TrainReport {
        model,
        curve,
        windows: windows.len(),
        epochs: outcome.curve.len(),
        final_train_loss: last.train_loss,
        final_val_loss: last.val_loss,
    })
}

/// Anomaly threshold from the stored validation errors.
pub fn cmd_calibrate(cfg: &RunConfig) -> Result<AnomalyThreshold> {
    let errors: Vec<f64> = read_json(&cfg.out_dir.join(VALIDATION_FILE))?;
    let th = calibrate_threshold(&errors, cfg.detector.beta)?;
    write_json(&th, &out_file(cfg, THRESHOLD_FILE)?)?;
    Ok(th)
}

fn load_threshold(cfg: &RunConfig) -> Result<AnomalyThreshold> {
    let path = cfg.out_dir.join(THRESHOLD_FILE);
    if !path.exists() {
        return Err(Error::Config(format!(
            "{} not found; run calibrate first",
            path.display()
        )));
    }
    let mut th: AnomalyThreshold = read_json(&path)?;
    if th.beta != cfg.detector.beta {
        th = AnomalyThreshold {
            q99: th.q99,
            beta: cfg.detector.beta,
            tau_anom: cfg.detector.beta * th.q99,
        };
    }
    Ok(th)
}

#[derive(Debug, Clone)]
pub struct Detection {
    pub records: Vec<SignalRecord>,
    pub events: Vec<DetectionEvent>,
}

fn run_detection(cfg: &RunConfig, model: &Autoencoder, test: &SensorFrame) -> Result<Detection> {
    let th = load_threshold(cfg)?;
    let (records, events) = detect(
        test,
        model,
        cfg.window_spec()?,
        th,
        cfg.detector.alpha,
        cfg.states()?,
    )?;
    Ok(Detection { records, events })
}

/// Scores the post-cutoff data and writes per-window records and events.
pub fn cmd_detect(cfg: &RunConfig, checkpoint: &Path) -> Result<Detection> {
    cfg.validate()?;
    let model = load_model(checkpoint)?;
    let split = load_split(cfg)?;
    let det = run_detection(cfg, &model, &split.test)?;
    write_ndjson_file(&det.records, &out_file(cfg, SIGNAL_FILE)?)?;
    write_ndjson_file(&det.events, &out_file(cfg, EVENTS_FILE)?)?;
    log::info!(
        "{} windows scored, {} events",
        det.records.len(),
        det.events.len()
    );
    Ok(det)
}

#[derive(Debug, Clone, Serialize)]
pub struct NodeSupportEntry {
    pub provenance: Provenance,
    pub tree: usize,
    pub node: usize,
    pub depth: usize,
    pub split: Option<String>,
    pub leaf: Option<failrules_core::Label>,
    pub n_failure: usize,
    pub n_no_failure: usize,
    pub fraction_of_parent: f64,
    pub near_singleton: bool,
}

#[derive(Debug, Clone)]
pub struct Explanation {
    pub space: FeatureSpace,
    pub local: Vec<RuleSet>,
    pub global: RuleSet,
    pub events: Vec<LearnerEvent>,
    pub support: Vec<NodeSupportEntry>,
    pub detection: Detection,
    /// Final learner state, holding the history and global buffer.
    pub learner: RuleLearner,
}

fn support_entries(rules: &RuleSet, space: &FeatureSpace, near: usize) -> Vec<NodeSupportEntry> {
    let mut out = Vec::new();
    for (i, tree) in rules.trees.iter().enumerate() {
        for r in node_support(tree, near) {
            out.push(NodeSupportEntry {
                provenance: rules.provenance.clone(),
                tree: i,
                node: r.node,
                depth: r.depth,
                split: r.predicate.map(|p| p.display(space).to_string()),
                leaf: r.leaf,
                n_failure: r.n_failure,
                n_no_failure: r.n_no_failure,
                fraction_of_parent: r.fraction_of_parent,
                near_singleton: r.near_singleton,
            });
        }
    }
    out
}

fn write_rules(rules: &RuleSet, space: &FeatureSpace, dir: &Path, stem: &str) -> Result<()> {
    let mut text = BufWriter::new(File::create(dir.join(format!("{stem}.txt")))?);
    rules.write_text(space, &mut text)?;
    text.flush()?;
    write_json(&rules.records(space), &dir.join(format!("{stem}.json")))
}

/// Runs detection on the post-cutoff data (writing the same files as
/// `cmd_detect`), feeds the failure probability and the raw window
/// aggregates through the rule learner, and writes local rules per failure,
/// the global rules and a node-support report.
pub fn cmd_explain(cfg: &RunConfig, checkpoint: &Path) -> Result<Explanation> {
    cfg.validate()?;
    let model = load_model(checkpoint)?;
    let split = load_split(cfg)?;
    let detection = run_detection(cfg, &model, &split.test)?;
    write_ndjson_file(&detection.records, &out_file(cfg, SIGNAL_FILE)?)?;
    write_ndjson_file(&detection.events, &out_file(cfg, EVENTS_FILE)?)?;
    let windows = make_windows(&split.test, cfg.window_spec()?)?;
    if windows.len() != detection.records.len() {
        return Err(Error::Logic("window and record counts differ".into()));
    }
    let space = FeatureSpace::new(split.test.channels().to_vec());
    let stream = detection
        .records
        .iter()
        .zip(&windows)
        .map(|(r, w)| (r.z, aggregate(w)));
    let (events, learner) = run_learner(space.clone(), cfg.learner_config()?, stream)?;
    let local: Vec<RuleSet> = events
        .iter()
        .filter_map(|e| match e {
            LearnerEvent::LocalRules { rules, .. } => Some(rules.clone()),
            _ => None,
        })
        .collect();
    let global = learner.finalize_global()?;

    let dir = out_file(cfg, RULES_DIR)?;
    fs::create_dir_all(&dir)?;
    let near = cfg.rules.near_singleton_max;
    let mut support = Vec::new();
    for rules in &local {
        write_rules(rules, &space, &dir, &format!("local-{}", rules.provenance))?;
        support.extend(support_entries(rules, &space, near));
    }
    write_rules(&global, &space, &dir, "global")?;
    support.extend(support_entries(&global, &space, near));
    write_json(&support, &dir.join("node_support.json"))?;
    write_ndjson_file(&events, &dir.join("learner_events.ndjson"))?;
    for rules in local.iter().chain(std::iter::once(&global)) {
        for t in rules.texts(&space) {
            log::info!("{}: {t}", rules.provenance);
        }
    }
    Ok(Explanation {
        space,
        local,
        global,
        events,
        support,
        detection,
        learner,
    })
}

/// Scores onset events against annotations.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    events: &Path,
    annotations: &Path,
) -> Result<EvaluationReport> {
    let events: Vec<DetectionEvent> = read_ndjson_file(events)?;
    let annotations = load_annotations(annotations)?;
    let report = evaluate(&events, &annotations, cfg.match_policy());
    fs::write(out_file(cfg, REPORT_TEXT_FILE)?, report.to_text())?;
    write_json(&report, &out_file(cfg, REPORT_JSON_FILE)?)?;
    Ok(report)
}

pub fn synth_preset(name: &str, seed: u64) -> Result<SynthConfig> {
    match name {
        "two-failure" => Ok(synth::two_failure_scenario(seed)),
        "correlated" => Ok(synth::correlated_scenario(seed)),
        "quiet" => Ok(synth::quiet_scenario(seed, 6000)),
        other => Err(Error::Config(format!(
            "unknown preset {other:?} (expected two-failure, correlated or quiet)"
        ))),
    }
}

pub fn load_synth_config(path: &Path) -> Result<SynthConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("invalid synth config: {e}")))
}

/// Generates a stream and writes the CSV and annotation sidecar.
pub fn cmd_synth(config: &SynthConfig, csv: &Path) -> Result<(PathBuf, Vec<FailureAnnotation>)> {
    if let Some(dir) = csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let (frame, annotations) = synth::generate(config)?;
    let side = synth::write_synth(&frame, &annotations, csv)?;
    Ok((side, annotations))
}

/// Writes the `{time, error, y, z}` series and the SVG chart.
pub fn cmd_plot(
    cfg: &RunConfig,
    records: &[SignalRecord],
    annotations: &[FailureAnnotation],
) -> Result<(PathBuf, PathBuf)> {
    if records.is_empty() {
        return Err(Error::Config("no signal records to plot".into()));
    }
    let csv_path = out_file(cfg, PLOT_CSV_FILE)?;
    crate::plot::write_series_csv(records, BufWriter::new(File::create(&csv_path)?))?;
    let svg_path = out_file(cfg, PLOT_SVG_FILE)?;
    fs::write(
        &svg_path,
        crate::plot::render_svg(records, annotations, cfg.detector.tau_fail),
    )?;
    Ok((csv_path, svg_path))
}
