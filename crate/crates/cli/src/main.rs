use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use hcsp_core::dataio::{load_manifest, read_csv_trial, read_f32_trial, write_dataset, TrialFormat, MANIFEST_FILE};
use hcsp_core::eval::{confusion_block_stats, grid_search, loocv, train};
use hcsp_core::synthgen::synthesize;
use hcsp_core::{Dataset, HcspError, HcspModel, RunConfig};

const MODEL_FILE: &str = "model.json";
const GROUND_TRUTH_FILE: &str = "ground_truth.json";

#[derive(Parser)]
#[command(name = "hcsp", version, about = "Hierarchical CSP motor-imagery classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its ground truth.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model on every trial of a dataset.
    Train {
        /// Dataset directory (containing manifest.json).
        dataset: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decide one epoch for a trial file; prints the decision as JSON.
    Classify {
        /// `.f32` or `.csv` imagery recording starting at sample 0.
        trial: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Leave-one-out evaluation.
    Eval {
        dataset: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Leave-one-out accuracy over feature counts × window lengths.
    Grid {
        dataset: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure classes and their exit codes.
#[derive(Debug)]
enum Failure {
    Config(String),
    Io(String),
    Data(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Io(_) => 3,
            Failure::Data(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Io(m) | Failure::Data(m) => m,
        }
    }
}

impl From<HcspError> for Failure {
    fn from(e: HcspError) -> Self {
        match e {
            HcspError::Load { .. } | HcspError::Write { .. } | HcspError::Schema(_) => Failure::Io(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

/// Errors that are the configuration's fault map to exit code 2.
fn config_err(e: HcspError) -> Failure {
    match e {
        HcspError::Parameter { .. } => Failure::Config(e.to_string()),
        other => other.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::from_json(&text).map_err(config_err)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    // The top-level seed drives synthesis.
    cfg.synth.seed = cfg.seed;
    cfg.validate().map_err(config_err)?;
    Ok(cfg)
}

fn load_dataset(dir: &Path, cfg: &RunConfig) -> CliResult<Dataset> {
    if !dir.is_dir() {
        return Err(Failure::Io(format!("dataset directory {} does not exist", dir.display())));
    }
    let ds = load_manifest(&dir.join(MANIFEST_FILE))?;
    if ds.is_empty() {
        return Err(Failure::Data(format!("dataset {} has no trials", dir.display())));
    }
    cfg.validate_for(ds.sample_rate_hz, ds.channels()).map_err(config_err)?;
    Ok(ds)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| Failure::Io(format!("cannot write {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_file(path, text)
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    cfg.synth.validate().map_err(config_err)?;
    let (model, ds) = synthesize(&cfg.synth).map_err(config_err)?;
    create_dir(out)?;
    write_dataset(&ds, out, cfg.trial_format)?;
    let mut truth = model.ground_truth_json(&cfg.synth);
    truth["run_config"] = serde_json::to_value(cfg).expect("config serializes");
    write_json(&out.join(GROUND_TRUTH_FILE), &truth)?;
    eprintln!("wrote {} trials to {}", ds.len(), out.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, dataset: &Path, out: &Path) -> CliResult<()> {
    let ds = load_dataset(dataset, cfg)?;
    let model = train(&ds, cfg)?;
    create_dir(out)?;
    let path = out.join(MODEL_FILE);
    write_file(&path, model.to_json() + "\n")?;
    eprintln!("wrote {} classifiers to {}", model.classifiers.len(), path.display());
    Ok(())
}

fn cmd_classify(cfg: &RunConfig, model_path: &Path, trial: &Path) -> CliResult<()> {
    let text = fs::read_to_string(model_path)
        .map_err(|e| Failure::Io(format!("cannot read model {}: {e}", model_path.display())))?;
    let model = HcspModel::from_json(&text)?;
    let recording = match TrialFormat::from_path(trial)? {
        TrialFormat::F32 => read_f32_trial(trial, model.channels, model.sample_rate_hz)?,
        TrialFormat::Csv => read_csv_trial(trial, None, model.sample_rate_hz)?,
    };
    let prior = cfg.priors.resolve().map_err(config_err)?;
    let decision = model.classify(&recording, &prior, cfg.policy())?;
    let out = json!({
        "epoch": 0,
        "gesture": decision.gesture,
        "label": decision.gesture.to_string(),
        "leaf_index": decision.gesture.leaf_index(),
        "pmf": decision.pmf,
        "intervals_used": decision.intervals_used,
        "threshold_met": decision.threshold_met,
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("decision serializes"));
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, dataset: &Path, out: &Path) -> CliResult<()> {
    let ds = load_dataset(dataset, cfg)?;
    let (report, confusion) = loocv(&ds, cfg)?;
    create_dir(out)?;
    write_json(
        &out.join("report.json"),
        &json!({
            "subject_id": ds.subject_id,
            "config": cfg,
            "report": report,
            "confusion": confusion,
            "level_confusion": confusion_block_stats(&confusion),
        }),
    )?;
    write_file(&out.join("confusion.csv"), confusion.to_csv())?;
    eprintln!("accuracy {:.4} over {} trials", report.accuracy, report.n_trials);
    Ok(())
}

fn cmd_grid(cfg: &RunConfig, dataset: &Path, out: &Path) -> CliResult<()> {
    let ds = load_dataset(dataset, cfg)?;
    let features = cfg.grid.feature_counts_for(ds.channels());
    let windows = cfg.grid.window_lengths();
    let surface = grid_search(&ds, cfg, &features, &windows)?;
    create_dir(out)?;
    let best = surface.best().map(|c| {
        json!({
            "feature_count": c.feature_count,
            "window_s": c.window_s,
            "accuracy": c.report.as_ref().map(|r| r.accuracy),
        })
    });
    write_json(
        &out.join("surface.json"),
        &json!({
            "subject_id": ds.subject_id,
            "config": cfg,
            "best": best,
            "surface": surface,
        }),
    )?;
    write_file(&out.join("surface.csv"), surface.to_csv())?;
    if let Some(b) = surface.best() {
        eprintln!(
            "best accuracy {:.4} at 2k={} t={}",
            b.report.as_ref().unwrap().accuracy,
            b.feature_count,
            b.window_s
        );
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let common = match &cli.command {
        Command::Synth { common, .. }
        | Command::Train { common, .. }
        | Command::Classify { common, .. }
        | Command::Eval { common, .. }
        | Command::Grid { common, .. } => common,
    };
    let cfg = load_config(common)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = common.workers {
        if n == 0 {
            return Err(Failure::Config("--workers must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Failure::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Synth { out, .. } => cmd_synth(&cfg, out),
        Command::Train { dataset, out, .. } => cmd_train(&cfg, dataset, out),
        Command::Classify { trial, model, .. } => cmd_classify(&cfg, model, trial),
        Command::Eval { dataset, out, .. } => cmd_eval(&cfg, dataset, out),
        Command::Grid { dataset, out, .. } => cmd_grid(&cfg, dataset, out),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
