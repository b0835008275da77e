use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_failrules"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small model, 30-sample windows, cutoff after 2000 one-minute samples.
fn write_config(dir: &Path, data: &Path, out: &Path) -> PathBuf {
    let cfg = format!(
        r#"data = "{}"
cutoff = "2022-01-02 09:20:00"
sample_period_secs = 60
out_dir = "{}"
seed = 3

[window]
length = 30
stride = 5

[model]
blocks = 2
hidden_channels = 6
latent_channels = 4

[train]
learning_rate = 0.001
epochs = 5
batch_size = 32
"#,
        p(data),
        p(out)
    );
    let path = dir.join("run.toml");
    fs::write(&path, cfg).unwrap();
    path
}

struct Setup {
    _dir: TempDir,
    root: PathBuf,
    data: PathBuf,
    config: PathBuf,
    out: PathBuf,
}

fn setup(preset: &str) -> Setup {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("stream.csv");
    ok(&[
        "synth",
        "--preset",
        preset,
        "--seed",
        "7",
        "--output",
        p(&data),
    ]);
    let out = root.join("out");
    let config = write_config(&root, &data, &out);
    Setup {
        _dir: dir,
        root,
        data,
        config,
        out,
    }
}

#[test]
fn zero_epochs_is_a_usage_error() {
    let out = run(&["--epochs", "0", "train"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_cutoff_is_a_config_error() {
    let s = setup("quiet");
    let cfg = fs::read_to_string(&s.config)
        .unwrap()
        .replace("cutoff = \"2022-01-02 09:20:00\"\n", "");
    fs::write(&s.config, cfg).unwrap();
    let out = run(&["--config", p(&s.config), "train"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_writes_stream_and_sidecar() {
    let s = setup("two-failure");
    let header = fs::read_to_string(&s.data)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    assert!(header.contains("Flowmeter"), "{header}");
    let side = fs::read_to_string(s.root.join("stream.annotations.json")).unwrap();
    let ann: serde_json::Value = serde_json::from_str(&side).unwrap();
    assert_eq!(ann.as_array().unwrap().len(), 2);
}

#[test]
fn train_writes_checkpoint_and_validation_curve() {
    let s = setup("two-failure");
    ok(&["--config", p(&s.config), "train"]);
    assert!(s.out.join("model.bin").exists());
    let curve = fs::read_to_string(s.out.join("training_curve.csv")).unwrap();
    let mut lines = curve.lines();
    assert_eq!(lines.next(), Some("epoch,train_loss,val_loss"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 5);
    for r in rows {
        let val: f64 = r.split(',').nth(2).unwrap().parse().unwrap();
        assert!(val.is_finite() && val > 0.0, "{r}");
    }
    assert!(s.out.join("run_config.toml").exists());
}

#[test]
fn same_seed_same_checkpoint() {
    let s = setup("two-failure");
    let other = s.root.join("other");
    ok(&["--config", p(&s.config), "train"]);
    ok(&["--config", p(&s.config), "--out-dir", p(&other), "train"]);
    assert_eq!(
        fs::read(s.out.join("model.bin")).unwrap(),
        fs::read(other.join("model.bin")).unwrap()
    );
}

#[test]
fn rerun_from_saved_config() {
    let s = setup("two-failure");
    ok(&["--config", p(&s.config), "train"]);
    let first = fs::read(s.out.join("model.bin")).unwrap();
    ok(&["--config", p(&s.out.join("run_config.toml")), "train"]);
    assert_eq!(fs::read(s.out.join("model.bin")).unwrap(), first);
}

#[test]
fn quiet_stream_has_no_events_and_empty_rules() {
    let s = setup("quiet");
    ok(&["--config", p(&s.config), "train"]);
    ok(&["--config", p(&s.config), "calibrate"]);
    ok(&["--config", p(&s.config), "detect"]);
    assert_eq!(
        fs::read_to_string(s.out.join("events.ndjson"))
            .unwrap()
            .trim(),
        ""
    );
    ok(&["--config", p(&s.config), "explain"]);
    let global = fs::read_to_string(s.out.join("rules/global.txt")).unwrap();
    assert_eq!(global.lines().filter(|l| !l.starts_with('#')).count(), 0);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(s.out.join("rules/global.json")).unwrap())
            .unwrap();
    assert_eq!(json.as_array().unwrap().len(), 0);
}

#[test]
fn detect_with_mismatched_channels_fails() {
    let s = setup("two-failure");
    ok(&["--config", p(&s.config), "train"]);
    ok(&["--config", p(&s.config), "calibrate"]);
    // Drop the last column.
    let narrow = s.root.join("narrow.csv");
    let text: String = fs::read_to_string(&s.data)
        .unwrap()
        .lines()
        .map(|l| format!("{}\n", &l[..l.rfind(',').unwrap()]))
        .collect();
    fs::write(&narrow, text).unwrap();
    let out = run(&["--config", p(&s.config), "--data", p(&narrow), "detect"]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn plot_without_records_is_a_config_error() {
    let s = setup("quiet");
    let empty = s.root.join("empty.ndjson");
    fs::write(&empty, "").unwrap();
    let out = run(&["--config", p(&s.config), "plot", "--records", p(&empty)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn full_pipeline_plot_and_evaluation() {
    let s = setup("two-failure");
    let c = p(&s.config);
    ok(&["--config", c, "train"]);
    ok(&["--config", c, "calibrate"]);
    ok(&["--config", c, "detect"]);
    let text = ok(&["--config", c, "evaluate"]);
    assert!(text.contains("F1"), "{text}");
    assert!(s.out.join("evaluation.json").exists());
    ok(&["--config", c, "plot"]);
    let svg = fs::read_to_string(s.out.join("signal.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches(r#"class="failure""#).count(), 2);
    assert_eq!(svg.matches(r#"class="threshold""#).count(), 1);
    assert_eq!(svg.matches("<polyline").count(), 1);
    let csv = fs::read_to_string(s.out.join("signal.csv")).unwrap();
    assert!(csv.starts_with("time,error,y,z\n"));
}
