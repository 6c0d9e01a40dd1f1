use anyhow::{bail, Context, Result};
use atag_cli::checkpoint::{peek_dtype, Checkpoint};
use atag_cli::config::{Mode, Precision, RunConfig, Suppress};
use atag_cli::io::{
    load_annotations, read_proposals, write_ar_curve, write_proposals, write_report,
};
use atag_cli::run;
use atag_core::scalar::Dtype;
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "atag", about = "Temporal action proposal generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Mode preset: anet, thumos or synthetic.
    #[arg(long)]
    mode: Option<String>,
    /// Numeric precision: f32 or f64.
    #[arg(long)]
    precision: Option<String>,
    /// Suppression: nms, soft-nms or none.
    #[arg(long)]
    suppress: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (feature payloads + annotations).
    Synth {
        #[command(flatten)]
        common: CommonOpts,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model, checkpointing every epoch.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// Directory of feature payloads with an annotations.json.
        #[arg(long)]
        data: PathBuf,
        /// Annotations file (defaults to <data>/annotations.json).
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Output directory for checkpoints.
        #[arg(long)]
        out: PathBuf,
    },
    /// Produce proposals from a checkpoint.
    Infer {
        #[command(flatten)]
        common: CommonOpts,
        /// Checkpoint file.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of feature payloads.
        #[arg(long)]
        data: PathBuf,
        /// Output JSONL file.
        #[arg(long)]
        out: PathBuf,
        /// Report times in seconds (snippet index times frame interval).
        #[arg(long)]
        seconds: bool,
    },
    /// Score a proposal file against annotations.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        /// Proposal JSONL file.
        #[arg(long)]
        proposals: PathBuf,
        /// Annotations JSON file.
        #[arg(long)]
        annotations: PathBuf,
        /// Output directory for report.json and ar_curve.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every fusion x local-variant combination and summarize.
    Ablate {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check analytic gradients against finite differences (f64).
    Gradcheck {
        #[command(flatten)]
        common: CommonOpts,
        /// Relative-error tolerance.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn resolve_config(common: &CommonOpts) -> Result<RunConfig> {
    let default_mode = match &common.mode {
        Some(m) => Mode::parse(m)?,
        None => Mode::Synthetic,
    };
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path, default_mode)?,
        None => RunConfig::preset(default_mode),
    };
    // Flags beat the file.
    if let Some(m) = &common.mode {
        let mode = Mode::parse(m)?;
        if common.config.is_none() {
            cfg = RunConfig::preset(mode);
        }
        cfg.mode = mode;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(p) = &common.precision {
        cfg.precision = Precision::parse(p)?;
    }
    if let Some(s) = &common.suppress {
        cfg.suppress = Suppress::parse(s)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Feature payloads in a directory: *.csv and *.f32, sorted by name.
fn feature_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in
        std::fs::read_dir(dir).with_context(|| format!("cannot read {}", dir.display()))?
    {
        let path = entry?.path();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_lowercase())
            .unwrap_or_default();
        if ext == "csv" || ext == "f32" {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        bail!("no feature payloads (*.csv, *.f32) in {}", dir.display());
    }
    Ok(out)
}

fn annotations_path(data: &Path, explicit: &Option<PathBuf>) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| data.join("annotations.json"))
}

fn train_cmd(cfg: &RunConfig, data: &Path, ann: &Path, out: &Path) -> Result<()> {
    let paths = feature_paths(data)?;
    let outcome = match cfg.precision {
        Precision::F32 => {
            let videos = run::load_train_set::<f32>(cfg, &paths, ann)?;
            run::train(cfg, &videos, out, false)?
        }
        Precision::F64 => {
            let videos = run::load_train_set::<f64>(cfg, &paths, ann)?;
            run::train(cfg, &videos, out, false)?
        }
    };
    match outcome.halted_at {
        Some(epoch) => println!(
            "halted at epoch {epoch} on a non-finite loss; checkpoint {} holds the last finite state",
            outcome.checkpoint_path.display()
        ),
        None => println!(
            "trained {} epochs in {:.1} s; checkpoint at {}",
            outcome.loss_curve.len(),
            outcome.wall_seconds,
            outcome.checkpoint_path.display()
        ),
    }
    Ok(())
}

fn infer_run(
    common: &CommonOpts,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    seconds: bool,
) -> Result<()> {
    let paths = feature_paths(data)?;
    let records = match peek_dtype(checkpoint)? {
        Dtype::F32 => {
            let mut ck: Checkpoint<f32> = Checkpoint::load(checkpoint)?;
            apply_infer_overrides(&mut ck.config, common)?;
            run::infer_cmd(&ck, &paths, seconds)?
        }
        Dtype::F64 => {
            let mut ck: Checkpoint<f64> = Checkpoint::load(checkpoint)?;
            apply_infer_overrides(&mut ck.config, common)?;
            run::infer_cmd(&ck, &paths, seconds)?
        }
    };
    write_proposals(out, &records)?;
    println!("wrote {} proposals to {}", records.len(), out.display());
    Ok(())
}

fn apply_infer_overrides(cfg: &mut RunConfig, common: &CommonOpts) -> Result<()> {
    if let Some(s) = &common.suppress {
        cfg.suppress = Suppress::parse(s)?;
    }
    if let Some(m) = &common.mode {
        cfg.mode = Mode::parse(m)?;
    }
    Ok(())
}

fn eval_run(cfg: &RunConfig, proposals: &Path, annotations: &Path, out: &Path) -> Result<()> {
    let records = read_proposals(proposals)?;
    let anns: Vec<_> = load_annotations(annotations)?
        .into_iter()
        .map(|a| (a.gt, a.t))
        .collect();
    let (report, curve, warnings) = run::evaluate(&records, &anns, &cfg.eval_config())?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    std::fs::create_dir_all(out)?;
    write_report(&out.join("report.json"), &report)?;
    write_ar_curve(&out.join("ar_curve.csv"), &curve)?;
    println!(
        "AR@100 {:.2}  AUC {:.2}  (report in {})",
        report.ar_100,
        report.auc,
        out.display()
    );
    Ok(())
}

fn ablate_cmd(cfg: &RunConfig, data: &Path, ann: &Path, out: &Path) -> Result<()> {
    let paths = feature_paths(data)?;
    std::fs::create_dir_all(out)?;
    match cfg.precision {
        Precision::F32 => {
            let videos = run::load_train_set::<f32>(cfg, &paths, ann)?;
            run::ablate(cfg, &videos, out, false)?;
        }
        Precision::F64 => {
            let videos = run::load_train_set::<f64>(cfg, &paths, ann)?;
            run::ablate(cfg, &videos, out, false)?;
        }
    }
    println!("ablation summary in {}", out.join("ablation.json").display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Synth { common, out } => {
            let cfg = resolve_config(common)?;
            let paths = run::synth_cmd(&cfg, out)?;
            println!("wrote {} files to {}", paths.len(), out.display());
        }
        Command::Train {
            common,
            data,
            annotations,
            out,
        } => {
            let cfg = resolve_config(common)?;
            train_cmd(&cfg, data, &annotations_path(data, annotations), out)?;
        }
        Command::Infer {
            common,
            checkpoint,
            data,
            out,
            seconds,
        } => {
            infer_run(common, checkpoint, data, out, *seconds)?;
        }
        Command::Eval {
            common,
            proposals,
            annotations,
            out,
        } => {
            let cfg = resolve_config(common)?;
            eval_run(&cfg, proposals, annotations, out)?;
        }
        Command::Ablate {
            common,
            data,
            annotations,
            out,
        } => {
            let cfg = resolve_config(common)?;
            ablate_cmd(&cfg, data, &annotations_path(data, annotations), out)?;
        }
        Command::Gradcheck { common, tol } => {
            let cfg = resolve_config(common)?;
            let outcome = run::gradcheck_cmd(&cfg, *tol)?;
            let status = if outcome.max_rel_err < *tol { "PASS" } else { "FAIL" };
            println!(
                "{status}: max relative error {:.3e} over {} parameters in {:.1} s (worst {:?})",
                outcome.max_rel_err, outcome.params_checked, outcome.seconds, outcome.worst
            );
            if outcome.max_rel_err >= *tol {
                std::process::exit(1);
            }
        }
    }
    Ok(())
}
