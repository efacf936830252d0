//! Command-line harness: `phantom`, `pretrain`, `adapt`, `evaluate`,
//! `report`. Every command writes a self-describing output directory
//! (resolved config, tool version, input digests) and leaves an
//! `.incomplete` marker behind if it aborts partway.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::dataio::{self, Dataset};
use crate::evalrun::WhichModel;
use crate::report::NamedReport;
use crate::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "echoseg", version, about = "Contrast-invariant multi-echo segmentation training harness")]
pub struct Cli {
    /// TOML run configuration; defaults are used when absent.
    /// Any key can also be overridden via ECHOSEG_SECTION__KEY env vars.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override the master seed from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory for the command's artifacts.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    /// Record that the run is expected to be bitwise reproducible (the
    /// pipeline is single-threaded and seeded either way).
    #[arg(long, global = true)]
    pub deterministic: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic multi-echo dataset with known masks.
    Phantom,
    /// Stage-1 masked-autoencoder pretraining.
    Pretrain(DataArg),
    /// Stage-2 masked pseudo-label adaptation (or a source-only baseline).
    Adapt(AdaptArgs),
    /// Evaluate adaptation checkpoints on the held-out test split.
    Evaluate(EvaluateArgs),
    /// Tables and figures from evaluation CSVs and loss logs.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct DataArg {
    /// Dataset directory produced by `phantom`.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Args, Debug)]
pub struct AdaptArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Pretraining checkpoint to initialize from.
    #[arg(long)]
    pub mae: PathBuf,
    /// Train on labeled source data only (the comparison baseline).
    #[arg(long)]
    pub source_only: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Adaptation checkpoint (student and teacher are both evaluated).
    #[arg(long)]
    pub mpl: PathBuf,
    /// Optional source-only baseline checkpoint.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Echo indices to evaluate (defaults to the configured target echo).
    #[arg(long, value_delimiter = ',')]
    pub echoes: Vec<usize>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Evaluation CSVs as name=path pairs.
    #[arg(long = "eval", value_parser = parse_named_path, required = true)]
    pub evals: Vec<(String, PathBuf)>,
    /// Loss logs as name=path pairs (rendered as curves).
    #[arg(long = "loss-log", value_parser = parse_named_path)]
    pub loss_logs: Vec<(String, PathBuf)>,
    /// Dataset directory; enables prediction overlays.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Prediction-mask directories as name=path pairs (written by
    /// `evaluate`); used with --data for overlays.
    #[arg(long = "pred", value_parser = parse_named_path)]
    pub preds: Vec<(String, PathBuf)>,
}

fn parse_named_path(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (name, path) = s
        .split_once('=')
        .ok_or_else(|| format!("expected name=path, got {s:?}"))?;
    if name.is_empty() {
        return Err("name must be nonempty".into());
    }
    Ok((name.to_string(), PathBuf::from(path)))
}

pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::resolved_default()?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    Ok(cfg)
}

/// Marker-file guard: created on entry, removed on successful completion.
struct IncompleteMarker {
    path: PathBuf,
    armed: bool,
}

impl IncompleteMarker {
    fn arm(dir: &Path) -> Result<IncompleteMarker> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".incomplete");
        std::fs::write(&path, b"run in progress or aborted\n").map_err(|e| Error::io(&path, e))?;
        Ok(IncompleteMarker { path, armed: true })
    }

    fn disarm(mut self) -> Result<()> {
        self.armed = false;
        std::fs::remove_file(&self.path).map_err(|e| Error::io(&self.path, e))
    }
}

impl Drop for IncompleteMarker {
    fn drop(&mut self) {
        // Left in place on abort by design.
        let _ = self.armed;
    }
}

/// Resolved config + tool version + input digests, written into every
/// output directory.
fn write_run_info(
    out_dir: &Path,
    cfg: &RunConfig,
    command: &str,
    inputs: &[(&str, &Path)],
) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    std::fs::write(out_dir.join("config_resolved.toml"), cfg.to_toml_string())
        .map_err(|e| Error::io(out_dir, e))?;
    let mut digests = BTreeMap::new();
    for (name, path) in inputs {
        let d = if path.is_file() {
            dataio::sha256_file(path)?
        } else if path.join(dataio::MANIFEST_NAME).is_file() {
            dataio::sha256_file(&path.join(dataio::MANIFEST_NAME))?
        } else {
            "absent".to_string()
        };
        digests.insert(name.to_string(), d);
    }
    #[derive(serde::Serialize)]
    struct RunInfo<'a> {
        tool_version: &'a str,
        command: &'a str,
        config_sha256: String,
        input_digests: BTreeMap<String, String>,
        deterministic: bool,
    }
    let info = RunInfo {
        tool_version: env!("CARGO_PKG_VERSION"),
        command,
        config_sha256: cfg.sha256(),
        input_digests: digests,
        deterministic: cfg.deterministic,
    };
    let path = out_dir.join("run_info.json");
    std::fs::write(&path, serde_json::to_string_pretty(&info).unwrap())
        .map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Phantom => {
            let marker = IncompleteMarker::arm(&cli.out)?;
            write_run_info(&cli.out, &cfg, "phantom", &[])?;
            crate::phantom::make_dataset(&cfg.phantom, cfg.seed, &cli.out)?;
            marker.disarm()
        }
        Command::Pretrain(args) => {
            let marker = IncompleteMarker::arm(&cli.out)?;
            write_run_info(&cli.out, &cfg, "pretrain", &[("data", args.data.as_path())])?;
            let out = crate::mae::pretrain(&cfg, &args.data, &cli.out)?;
            log::info!(
                "pretraining done: {} steps, total loss {:.4} -> {:.4}",
                out.steps_run,
                out.initial_total,
                out.final_total
            );
            marker.disarm()
        }
        Command::Adapt(args) => {
            let marker = IncompleteMarker::arm(&cli.out)?;
            let mut cfg = cfg;
            if args.source_only {
                cfg.mpl.source_only = true;
            }
            write_run_info(
                &cli.out,
                &cfg,
                "adapt",
                &[("data", args.data.as_path()), ("mae", args.mae.as_path())],
            )?;
            let out = crate::mpl::adapt(&cfg, &args.data, &args.mae, &cli.out)?;
            log::info!(
                "adaptation done: best val dice {:.4} at epoch {} ({} epochs run{})",
                out.best_val_dice,
                out.best_epoch,
                out.epochs_run,
                if out.stopped_early { ", stopped early" } else { "" }
            );
            marker.disarm()
        }
        Command::Evaluate(args) => {
            let marker = IncompleteMarker::arm(&cli.out)?;
            write_run_info(
                &cli.out,
                &cfg,
                "evaluate",
                &[("data", args.data.as_path()), ("mpl", args.mpl.as_path())],
            )?;
            let ds = Dataset::open(&args.data)?;
            let echoes = if args.echoes.is_empty() {
                if cfg.eval.echoes.is_empty() {
                    vec![cfg.mpl.target_echo]
                } else {
                    cfg.eval.echoes.clone()
                }
            } else {
                args.echoes.clone()
            };
            let ck = crate::checkpoint::Checkpoint::load(&args.mpl)?;
            crate::evalrun::evaluate_checkpoint_to_dir(&ck, &cfg, &ds, WhichModel::Student, &echoes, &cli.out, "student")?;
            crate::evalrun::evaluate_checkpoint_to_dir(&ck, &cfg, &ds, WhichModel::Teacher, &echoes, &cli.out, "teacher")?;
            if let Some(baseline) = &args.baseline {
                let bk = crate::checkpoint::Checkpoint::load(baseline)?;
                crate::evalrun::evaluate_checkpoint_to_dir(&bk, &cfg, &ds, WhichModel::Student, &echoes, &cli.out, "baseline")?;
            }
            marker.disarm()
        }
        Command::Report(args) => {
            let marker = IncompleteMarker::arm(&cli.out)?;
            write_run_info(&cli.out, &cfg, "report", &[])?;
            let mut reports = Vec::new();
            for (name, path) in &args.evals {
                if !path.is_file() {
                    return Err(Error::InvalidArgument(format!(
                        "evaluation CSV {} does not exist",
                        path.display()
                    )));
                }
                reports.push(NamedReport {
                    name: name.clone(),
                    report: crate::metrics::MetricReport::read_csv(path)?,
                });
            }
            let ds = match &args.data {
                Some(d) => Some(Dataset::open(d)?),
                None => None,
            };
            crate::report::write_report(&cli.out, &reports, &args.loss_logs, ds.as_ref(), &args.preds)?;
            marker.disarm()
        }
    }
}

/// Exit code mapping: 0 success, 1 usage, 2 runtime failure.
pub fn main_entry() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap prints help/version through the error path with success
            // status; real usage errors exit 1.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
