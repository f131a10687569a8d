//! Command-line driver: dataset generation, training, evaluation, gradient
//! checking, and the five-way fusion comparison.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use mmfuse_core::config::{parse_synthetic_spec, FusionKind, RunConfig};
use mmfuse_core::data::{generate_synthetic, read_dataset, write_dataset, Dataset};
use mmfuse_core::gradcheck::run_suite;
use mmfuse_core::model::{Modality, Model, ModelSpec};
use mmfuse_core::train::{evaluate, train, TrainConfig, TrainOutcome};

#[derive(Parser)]
#[command(
    name = "mmfuse",
    about = "Multi-modal fusion for video classification: synthetic data, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a spec file.
    Gen {
        /// Spec file (`key = value`; see README for keys).
        #[arg(long)]
        spec: PathBuf,
        /// Output dataset path (`.mmfv`).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write a checkpoint plus a training log.
    Train {
        /// Run configuration file (`key = value`).
        #[arg(long)]
        config: PathBuf,
        /// Training dataset.
        #[arg(long)]
        data: PathBuf,
        /// Validation dataset (evaluated every `train.eval_every` steps).
        #[arg(long)]
        val: PathBuf,
        /// Checkpoint output path (`.mmck`).
        #[arg(long)]
        out: PathBuf,
        /// Training log path; defaults to `<out>.log`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset; prints `gap=<g> loss=<l>`.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Frames sampled per video before aggregation.
        #[arg(long, default_value_t = 300)]
        frames: usize,
    },
    /// Run the finite-difference gradient suite over every operator.
    Gradcheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Seeds checked per operator.
        #[arg(long, default_value_t = 5)]
        rounds: u64,
        /// Deliberately corrupt one operator's analytic gradient (testing hook).
        #[arg(long, hide = true)]
        perturb: Option<String>,
    },
    /// Train the five fusion variants under identical budgets and print a
    /// GAP table (audio-only, video-only, concat, fc_concat, mfb).
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: PathBuf,
        /// Directory for per-variant training logs.
        #[arg(long, default_value = ".")]
        log_dir: PathBuf,
    },
}

fn main() {
    if let Err(err) = run() {
        // Single-line, machine-parseable error contract.
        let msg = format!("{err:#}").replace('\n', " ");
        eprintln!("error: {msg}");
        std::process::exit(1);
    }
}

fn run() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Gen { spec, out } => cmd_gen(&spec, &out),
        Command::Train {
            config,
            data,
            val,
            out,
            log,
        } => cmd_train(&config, &data, &val, &out, log.as_deref()),
        Command::Eval { ckpt, data, frames } => cmd_eval(&ckpt, &data, frames),
        Command::Gradcheck {
            seed,
            rounds,
            perturb,
        } => cmd_gradcheck(seed, rounds, perturb.as_deref()),
        Command::Compare {
            config,
            data,
            val,
            log_dir,
        } => cmd_compare(&config, &data, &val, &log_dir),
    }
}

fn cmd_gen(spec_path: &Path, out: &Path) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(spec_path)
        .with_context(|| format!("cannot read spec file {}", spec_path.display()))?;
    let spec = parse_synthetic_spec(&text)?;
    let dataset = generate_synthetic(&spec)?;
    write_dataset(out, &dataset)
        .with_context(|| format!("cannot write dataset {}", out.display()))?;
    Ok(())
}

fn load_pair(data: &Path, val: &Path) -> anyhow::Result<(Dataset, Dataset)> {
    let train_set =
        read_dataset(data).with_context(|| format!("cannot read {}", data.display()))?;
    let val_set = read_dataset(val).with_context(|| format!("cannot read {}", val.display()))?;
    if train_set.visual_dim != val_set.visual_dim
        || train_set.audio_dim != val_set.audio_dim
        || train_set.num_classes != val_set.num_classes
    {
        bail!(
            "train/validation datasets disagree on dimensions: {}x{}x{} vs {}x{}x{}",
            train_set.visual_dim,
            train_set.audio_dim,
            train_set.num_classes,
            val_set.visual_dim,
            val_set.audio_dim,
            val_set.num_classes
        );
    }
    Ok((train_set, val_set))
}

fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        batch_size: cfg.batch_size,
        max_steps: cfg.max_steps,
        eval_every: cfg.eval_every,
        seed: cfg.seed,
        learning_rate: cfg.learning_rate,
        frames_per_video: cfg.agg_frames,
    }
}

fn write_log(path: &Path, outcome: &TrainOutcome) -> anyhow::Result<()> {
    let mut text = String::new();
    for row in &outcome.log {
        text.push_str(&row.to_line());
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("cannot write log {}", path.display()))?;
    Ok(())
}

fn cmd_train(
    config: &Path,
    data: &Path,
    val: &Path,
    out: &Path,
    log: Option<&Path>,
) -> anyhow::Result<()> {
    let cfg = RunConfig::from_file(config)?;
    let (train_set, val_set) = load_pair(data, val)?;
    let spec = ModelSpec::from_config(
        &cfg,
        Modality::Both,
        train_set.visual_dim,
        train_set.audio_dim,
        train_set.num_classes,
    );
    let mut model = Model::init(spec, cfg.seed);
    let outcome = train(&mut model, &train_set, &val_set, &train_config(&cfg))?;
    model.save(out)?;
    let log_path = log
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.with_extension("mmck.log"));
    write_log(&log_path, &outcome)?;
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: &Path, frames: usize) -> anyhow::Result<()> {
    let model = Model::load(ckpt)?;
    let ds = read_dataset(data).with_context(|| format!("cannot read {}", data.display()))?;
    if ds.visual_dim != model.spec.visual_dim
        || ds.audio_dim != model.spec.audio_dim
        || ds.num_classes != model.spec.classes
    {
        bail!(
            "checkpoint expects {}x{}x{} (visual x audio x classes), dataset has {}x{}x{}",
            model.spec.visual_dim,
            model.spec.audio_dim,
            model.spec.classes,
            ds.visual_dim,
            ds.audio_dim,
            ds.num_classes
        );
    }
    let (gap, loss) = evaluate(&model, &ds, frames)?;
    println!("gap={gap} loss={loss}");
    Ok(())
}

fn cmd_gradcheck(seed: u64, rounds: u64, perturb: Option<&str>) -> anyhow::Result<()> {
    let reports = run_suite(seed, rounds, perturb)?;
    let mut failures = Vec::new();
    for r in &reports {
        println!(
            "{:<20} max_rel_err={:.3e}  tol={:.0e}  {}",
            r.name,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        if !r.passed() {
            failures.push(r.name);
        }
    }
    if failures.is_empty() {
        println!("gradcheck: PASS ({} operators)", reports.len());
        Ok(())
    } else {
        bail!("gradcheck failed for: {}", failures.join(", "));
    }
}

/// The five comparison variants, in presentation order.
fn variants(base_fusion: FusionKind) -> Vec<(&'static str, Modality, FusionKind)> {
    vec![
        ("audio_only", Modality::AudioOnly, base_fusion),
        ("video_only", Modality::VideoOnly, base_fusion),
        ("concat", Modality::Both, FusionKind::Concat),
        ("fc_concat", Modality::Both, FusionKind::FcConcat),
        ("mfb", Modality::Both, FusionKind::Mfb),
    ]
}

fn cmd_compare(config: &Path, data: &Path, val: &Path, log_dir: &Path) -> anyhow::Result<()> {
    let mut cfg = RunConfig::from_file(config)?;
    let (train_set, val_set) = load_pair(data, val)?;
    std::fs::create_dir_all(log_dir)
        .with_context(|| format!("cannot create {}", log_dir.display()))?;

    for (name, modality, fusion) in variants(cfg.fusion_kind) {
        cfg.fusion_kind = fusion;
        let spec = ModelSpec::from_config(
            &cfg,
            modality,
            train_set.visual_dim,
            train_set.audio_dim,
            train_set.num_classes,
        );
        let mut model = Model::init(spec, cfg.seed);
        let outcome = train(&mut model, &train_set, &val_set, &train_config(&cfg))?;
        write_log(&log_dir.join(format!("{name}.log")), &outcome)?;
        let (gap, _) = evaluate(&model, &val_set, cfg.agg_frames)?;
        println!("{name}\t{gap}");
    }
    Ok(())
}
