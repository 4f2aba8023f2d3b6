//! Command-line interface: synthetic dataset generation, training,
//! evaluation, pairwise inference, and accuracy-curve plotting.

mod config;
mod io;
mod svg;

use std::fs;
use std::io::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use shapecorr_core::metrics::{
    accuracy_curve, augment_test_set, evaluate_model, infer_correspondence, DEFAULT_TOLERANCES,
};
use shapecorr_core::model::Model;
use shapecorr_core::synth::{generate_dataset, DatasetConfig};
use shapecorr_core::training::{
    init_trainer, load_checkpoint, run_training_until, save_checkpoint, StepMetrics, TrainerState,
};

#[derive(Parser)]
#[command(name = "shapecorr", version, about = "Unsupervised point-cloud shape correspondence")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic deformable-pair dataset with exact ground truth.
    Synth(SynthArgs),
    /// Train a model from a TOML config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset manifest.
    Eval(EvalArgs),
    /// Predict a correspondence map for one source/target pair.
    Infer(InferArgs),
    /// Render an accuracy-versus-tolerance curve from an eval report.
    PlotAcc(PlotArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of pairs to generate.
    #[arg(long)]
    pairs: usize,
    /// Points per cloud.
    #[arg(long, default_value_t = 1024)]
    points: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Rotate sources by bin-uniform angles and store the labels.
    #[arg(long)]
    rotation_labels: bool,
    /// Use the same deformed instance on both sides (orientation training).
    #[arg(long)]
    same_shape: bool,
    /// Keep target point order aligned with the source (skip shuffling).
    #[arg(long)]
    no_shuffle: bool,
    /// Distinct template bodies to cycle through.
    #[arg(long, default_value_t = 8)]
    templates: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config file (see README for the schema).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for checkpoints and metrics.
    #[arg(long)]
    out: PathBuf,
    /// Resume from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Add Gaussian noise to both clouds of every test pair.
    #[arg(long)]
    noise: bool,
    /// Apply a random z-rotation to every test source.
    #[arg(long)]
    rotate: bool,
    /// Noise std used with --noise.
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    /// Augmentation seed.
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// Evaluate the student parameters instead of the teacher.
    #[arg(long)]
    student: bool,
    /// Write per-pair and aggregate records (JSON lines) here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated accuracy tolerances.
    #[arg(long, value_delimiter = ',')]
    tolerances: Vec<f64>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Output mapping file: one 0-based target index per source point.
    #[arg(long)]
    out: PathBuf,
    /// Use the student parameters instead of the teacher.
    #[arg(long)]
    student: bool,
}

#[derive(Args)]
struct PlotArgs {
    /// Eval report (JSON lines) produced by `eval --out`.
    #[arg(long)]
    report: PathBuf,
    /// Output SVG path.
    #[arg(long)]
    out: PathBuf,
}

/// Per-pair record in the eval report.
#[derive(Serialize, Deserialize)]
struct PairRecord {
    pair: usize,
    err_cm: f64,
    acc: Vec<(f64, f64)>,
}

/// Final aggregate record in the eval report.
#[derive(Serialize, Deserialize)]
struct AggregateRecord {
    aggregate: bool,
    n_pairs: usize,
    err_cm: f64,
    acc: Vec<(f64, f64)>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Infer(args) => cmd_infer(args),
        Command::PlotAcc(args) => cmd_plot(args),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let cfg = DatasetConfig {
        pairs: args.pairs,
        points: args.points,
        templates: args.templates,
        same_shape: args.same_shape,
        rotation_labels: args.rotation_labels,
        shuffle_target: !args.no_shuffle,
        seed: args.seed,
        ..Default::default()
    };
    let pairs = generate_dataset(&cfg)?;
    let manifest = io::write_dataset(&pairs, &args.out)?;
    println!(
        "wrote {} pairs ({} points each) to {}",
        pairs.len(),
        args.points,
        manifest.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let resolved = config::load_train_config(&args.config)?;
    let cfg = resolved.train.clone();
    let pairs = io::read_dataset(&resolved.manifest)?;
    if pairs.is_empty() {
        bail!("manifest {} lists no pairs", resolved.manifest.display());
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let mut state: TrainerState = match &args.resume {
        Some(path) => {
            let (state, ckpt_cfg) = load_checkpoint(path)?;
            // Extending the step horizon is the point of resuming; any other
            // config difference would silently change the model or data
            // schedule, so refuse it.
            let horizon_only = shapecorr_core::training::TrainConfig {
                steps: cfg.steps,
                ..ckpt_cfg.clone()
            };
            if horizon_only != cfg {
                bail!(
                    "checkpoint {} was written with a different config (only `steps` may change on resume)",
                    path.display()
                );
            }
            println!("resuming from step {}", state.step);
            state
        }
        None => init_trainer(&cfg)?,
    };

    let metrics_path = args.out.join("metrics.jsonl");
    let mut metrics_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .with_context(|| format!("opening {}", metrics_path.display()))?;

    let started = Instant::now();
    while state.step < cfg.steps {
        let until = if resolved.checkpoint_every > 0 {
            (state.step + resolved.checkpoint_every).min(cfg.steps)
        } else {
            cfg.steps
        };
        run_training_until(&mut state, &pairs, &cfg, until, |m: &StepMetrics| {
            let line = serde_json::to_string(m).expect("metrics serialize");
            let _ = writeln!(metrics_file, "{line}");
            if m.step % 100 == 0 || m.step + 1 == cfg.steps {
                println!(
                    "step {:>6}/{}: total {:.5} (cons {:.5} ccs {:.5} css {:.5} angle {:.5} domain {:.5} norm {:.5})",
                    m.step + 1,
                    cfg.steps,
                    m.total,
                    m.l_cons,
                    m.l_ccs,
                    m.l_css,
                    m.l_angle,
                    m.l_domain,
                    m.l_norm
                );
            }
        })?;
        if resolved.checkpoint_every > 0 && state.step < cfg.steps {
            let path = args.out.join(format!("checkpoint_{:06}.seor", state.step));
            save_checkpoint(&state, &cfg, &path)?;
        }
    }

    let final_path = args.out.join("checkpoint_final.seor");
    save_checkpoint(&state, &cfg, &final_path)?;
    println!(
        "trained to step {} in {:.1}s; checkpoint at {}",
        state.step,
        started.elapsed().as_secs_f64(),
        final_path.display()
    );
    Ok(())
}

fn model_from_checkpoint(path: &PathBuf, student: bool) -> Result<Model> {
    let (state, _) = load_checkpoint(path)?;
    Ok(if student {
        state.ts.student
    } else {
        state.ts.teacher
    })
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = model_from_checkpoint(&args.checkpoint, args.student)?;
    let mut pairs = io::read_dataset(&args.manifest)?;
    if args.noise || args.rotate {
        pairs = augment_test_set(&pairs, args.noise, args.rotate, args.sigma, args.seed)?;
    }
    let tolerances: Vec<f64> = if args.tolerances.is_empty() {
        DEFAULT_TOLERANCES.to_vec()
    } else {
        args.tolerances.clone()
    };
    let (evals, report) = evaluate_model(&model, &pairs, &tolerances)?;

    let mut lines = Vec::with_capacity(evals.len() + 1);
    for (i, e) in evals.iter().enumerate() {
        let sub = accuracy_curve(core::slice::from_ref(e), &tolerances)?;
        lines.push(serde_json::to_string(&PairRecord {
            pair: i,
            err_cm: sub.err_cm,
            acc: sub.acc,
        })?);
    }
    lines.push(serde_json::to_string(&AggregateRecord {
        aggregate: true,
        n_pairs: report.n_pairs,
        err_cm: report.err_cm,
        acc: report.acc.clone(),
    })?);
    if let Some(out) = &args.out {
        fs::write(out, lines.join("\n") + "\n")
            .with_context(|| format!("writing {}", out.display()))?;
    }

    println!("pairs: {}", report.n_pairs);
    println!("err:   {:.4} cm", report.err_cm);
    for (tol, acc) in &report.acc {
        println!("acc({tol:.2}): {acc:.4}");
    }
    Ok(())
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    let model = model_from_checkpoint(&args.checkpoint, args.student)?;
    let source = io::read_cloud(&args.source)?;
    let target = io::read_cloud(&args.target)?;
    let out = model.infer_pair(&source, &target)?;
    let result = infer_correspondence(&out.similarity);
    if let Some(angle) = &out.angle {
        let bin = angle.argmax_bin();
        let center = shapecorr_core::orientation::bin_to_angle(bin, angle.m()).unwrap_or(0.0);
        println!(
            "estimated rotation bin: {bin} (center {:.1} deg)",
            center.to_degrees()
        );
    }
    io::write_mapping(&args.out, &result.mapping)?;
    println!(
        "wrote {} correspondences to {}",
        result.mapping.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_plot(args: PlotArgs) -> Result<()> {
    let text = fs::read_to_string(&args.report)
        .with_context(|| format!("reading {}", args.report.display()))?;
    let mut aggregate: Option<AggregateRecord> = None;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        if let Ok(rec) = serde_json::from_str::<AggregateRecord>(line) {
            if rec.aggregate {
                aggregate = Some(rec);
            }
        }
    }
    let agg = aggregate
        .with_context(|| format!("{}: no aggregate record found", args.report.display()))?;
    let svg = svg::accuracy_curve_svg(&[("mean accuracy".into(), agg.acc.clone())]);
    fs::write(&args.out, svg).with_context(|| format!("writing {}", args.out.display()))?;
    println!("wrote {}", args.out.display());
    Ok(())
}
