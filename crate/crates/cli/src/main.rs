use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use failrules_cli::commands::{self, read_ndjson_file, EVENTS_FILE, MODEL_FILE, SIGNAL_FILE};
use failrules_cli::{exit_code, RunConfig};
use failrules_core::ingest::{load_annotations, parse_instant};
use failrules_core::{Error, Instant, Result};

#[derive(Parser, Debug)]
#[command(
    name = "failrules",
    version,
    about = "Autoencoder failure detection with online rule extraction"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Sensor CSV.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// First timestamp of the test period.
    #[arg(long, global = true, value_parser = parse_cutoff)]
    cutoff: Option<Instant>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    tau_warn: Option<f64>,
    #[arg(long, global = true)]
    tau_fail: Option<f64>,
    #[arg(long, global = true)]
    lead_minutes: Option<i64>,
    /// Keep this channel out of every rule (repeatable).
    #[arg(long = "exclude-channel", global = true)]
    exclude_channel: Vec<String>,
    #[arg(long, global = true)]
    max_history: Option<usize>,
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the autoencoder on data before the cutoff.
    Train,
    /// Derive the anomaly threshold from validation errors.
    Calibrate,
    /// Score data after the cutoff and emit failure events.
    Detect {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Learn local and global failure rules.
    Explain {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare detected onsets with annotated failures.
    Evaluate {
        #[arg(long)]
        events: Option<PathBuf>,
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Generate a synthetic stream with annotated failures.
    Synth {
        /// Built-in scenario: two-failure, correlated or quiet.
        #[arg(long, conflicts_with = "spec")]
        preset: Option<String>,
        /// TOML generator configuration.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Render the failure probability as CSV and SVG.
    Plot {
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
}

fn parse_cutoff(s: &str) -> std::result::Result<Instant, String> {
    parse_instant(s).map_err(|e| e.to_string())
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    if let Some(v) = &cli.out_dir {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = &cli.data {
        cfg.data = Some(v.clone());
    }
    if let Some(v) = cli.cutoff {
        cfg.cutoff = Some(v);
    }
    if let Some(v) = cli.alpha {
        cfg.detector.alpha = v;
    }
    if let Some(v) = cli.beta {
        cfg.detector.beta = v;
    }
    if let Some(v) = cli.tau_warn {
        cfg.detector.tau_warn = v;
    }
    if let Some(v) = cli.tau_fail {
        cfg.detector.tau_fail = v;
    }
    if let Some(v) = cli.lead_minutes {
        cfg.detector.lead_minutes = v;
    }
    if !cli.exclude_channel.is_empty() {
        cfg.rules.excluded_channels = cli.exclude_channel.clone();
    }
    if let Some(v) = cli.max_history {
        cfg.rules.max_history = Some(v);
    }
    if let Some(v) = cli.epochs {
        cfg.train.epochs = v as usize;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = run_config(&cli)?;
    let checkpoint =
        |c: &Option<PathBuf>| c.clone().unwrap_or_else(|| cfg.out_dir.join(MODEL_FILE));
    match &cli.command {
        Command::Train => {
            let r = commands::cmd_train(&cfg)?;
            println!(
                "trained {} epochs on {} windows: train loss {:.6}, validation loss {:.6}",
                r.epochs, r.windows, r.final_train_loss, r.final_val_loss
            );
            println!("checkpoint {}", r.model.display());
        }
        Command::Calibrate => {
            let th = commands::cmd_calibrate(&cfg)?;
            println!(
                "q99 = {}  beta = {}  tau_anom = {}",
                th.q99, th.beta, th.tau_anom
            );
        }
        Command::Detect { checkpoint: c } => {
            let det = commands::cmd_detect(&cfg, &checkpoint(c))?;
            for e in &det.events {
                println!("{:?} {}", e.kind, e.time);
            }
            println!("{} windows, {} events", det.records.len(), det.events.len());
        }
        Command::Explain { checkpoint: c } => {
            let ex = commands::cmd_explain(&cfg, &checkpoint(c))?;
            for rules in ex.local.iter().chain(std::iter::once(&ex.global)) {
                println!("[{}]", rules.provenance);
                for t in rules.texts(&ex.space) {
                    println!("  {t}");
                }
            }
        }
        Command::Evaluate {
            events,
            annotations,
        } => {
            let events = events
                .clone()
                .unwrap_or_else(|| cfg.out_dir.join(EVENTS_FILE));
            let annotations = match annotations {
                Some(a) => a.clone(),
                None => cfg.annotations_path()?,
            };
            print!(
                "{}",
                commands::cmd_evaluate(&cfg, &events, &annotations)?.to_text()
            );
        }
        Command::Synth {
            preset,
            spec,
            output,
        } => {
            let synth = match (preset, spec) {
                (_, Some(path)) => commands::load_synth_config(path)?,
                (Some(name), None) => commands::synth_preset(name, cfg.seed)?,
                (None, None) => return Err(Error::Config("synth needs --preset or --spec".into())),
            };
            let (side, ann) = commands::cmd_synth(&synth, output)?;
            println!(
                "wrote {} and {} ({} failures)",
                output.display(),
                side.display(),
                ann.len()
            );
        }
        Command::Plot {
            records,
            annotations,
        } => {
            let records = records
                .clone()
                .unwrap_or_else(|| cfg.out_dir.join(SIGNAL_FILE));
            let records = read_ndjson_file(&records)?;
            let annotations = match annotations {
                Some(a) => load_annotations(a)?,
                None => match cfg.annotations_path() {
                    Ok(p) if p.exists() => load_annotations(p)?,
                    _ => Vec::new(),
                },
            };
            let (csv, svg) = commands::cmd_plot(&cfg, &records, &annotations)?;
            println!("wrote {} and {}", csv.display(), svg.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
