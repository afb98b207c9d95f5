use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mostat_core::config::RunConfig;
use mostat_core::dataset::{generate, split_counts, write_dataset, DatasetManifest, GenConfig, Split};
use mostat_core::fewshot::{self, BranchMask, EvalConfig, LogRegConfig};
use mostat_core::model::{checkpoint_id, Checkpoint};
use mostat_core::pretrain::{TrainLog, Trainer};
use mostat_core::{gradcheck, theory};

/// Overrides the run config's `output_dir`.
const OUTPUT_DIR_ENV: &str = "MOSTAT_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "mostat", version, about = "Multi-order statistics ensembles for few-shot classification")]
struct Cli {
    /// Caps the number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesizes a dataset whose classes differ in first, second and third order statistics.
    GenData(GenDataArgs),
    /// Pre-trains a backbone from a run config.
    Pretrain(PretrainArgs),
    /// Evaluates a checkpoint on few-shot episodes; prints an EvalSummary.
    Eval(EvalArgs),
    /// Checks the ensemble error bound on random discrete instances.
    Theory(TheoryArgs),
    /// Compares every backward rule with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    /// C,H,W
    #[arg(long, default_value = "3,32,32", value_parser = parse_shape)]
    image_shape: [usize; 3],
    #[arg(long, default_value_t = 1.0)]
    skew: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "synthetic-three-order")]
    name: String,
}

#[derive(Args)]
struct PretrainArgs {
    config: PathBuf,
    /// Continues from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "novel", value_parser = parse_split)]
    split: Split,
    #[arg(long, default_value_t = fewshot::DEFAULT_WAY)]
    way: usize,
    #[arg(long, default_value_t = 1)]
    shot: usize,
    #[arg(long, default_value_t = fewshot::DEFAULT_QUERY)]
    query: usize,
    #[arg(long, default_value_t = fewshot::DEFAULT_EPISODES)]
    episodes: usize,
    /// Comma-separated branch orders, e.g. 1,2,3.
    #[arg(long, default_value = "1,2,3")]
    branches: BranchMask,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip per-branch L2 normalization.
    #[arg(long)]
    no_normalize: bool,
    /// Per-episode accuracies as JSON lines.
    #[arg(long)]
    episodes_out: Option<PathBuf>,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    /// Largest domain size.
    #[arg(long, default_value_t = 32)]
    m: usize,
    /// Largest ensemble size.
    #[arg(long = "hypotheses", short = 'O', default_value_t = 5)]
    hypotheses: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random inputs per op.
    #[arg(long, default_value_t = 3)]
    trials: usize,
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|v| v.trim().parse().map_err(|e| format!("{v:?}: {e}")))
        .collect::<Result<_, _>>()?;
    dims.try_into().map_err(|d: Vec<usize>| format!("expected C,H,W, got {} values", d.len()))
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "base" => Ok(Split::Base),
        "val" => Ok(Split::Val),
        "novel" => Ok(Split::Novel),
        _ => Err(format!("unknown split {s:?}; expected base, val or novel")),
    }
}

/// Compact JSON with object keys in sorted order.
fn sorted_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_value(value)?.to_string())
}

fn gen_data_cmd(args: GenDataArgs) -> Result<ExitCode> {
    let cfg = GenConfig {
        classes: args.classes,
        per_class: args.per_class,
        image_shape: args.image_shape,
        skew: args.skew,
        seed: args.seed,
    };
    let data = generate(&cfg)?;
    write_dataset(&data, &args.out, &args.name).with_context(|| format!("writing {}", args.out.display()))?;
    let (base, val, novel) = split_counts(cfg.classes);
    let summary = serde_json::json!({
        "classes": {"base": base, "novel": novel, "val": val},
        "dir": args.out,
        "images": cfg.classes * cfg.per_class,
    });
    println!("{summary}");
    Ok(ExitCode::SUCCESS)
}

/// Appends when resuming so the log covers every epoch.
fn write_log(log: &TrainLog, path: &Path, append: bool) -> Result<()> {
    let file = if append { File::options().create(true).append(true).open(path)? } else { File::create(path)? };
    let mut w = BufWriter::new(file);
    log.write_jsonl(&mut w)?;
    w.flush()?;
    Ok(())
}

fn pretrain_cmd(args: PretrainArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(&args.config).with_context(|| format!("config {}", args.config.display()))?;
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
        cfg.output_dir = PathBuf::from(dir);
    }
    let manifest = DatasetManifest::load(&cfg.dataset)?;
    let base = manifest.load_split(&cfg.dataset, Split::Base)?.relabeled();
    let mut trainer = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("checkpoint {}", path.display()))?;
            if ckpt.seed != cfg.seed {
                eprintln!("note: resuming with the checkpoint's seed {} (config has {})", ckpt.seed, cfg.seed);
            }
            Trainer::resume(ckpt, cfg.train.clone())?
        }
        None => Trainer::new(cfg.model.model_config(base.num_classes()), cfg.train.clone())?,
    };
    if trainer.model.config.num_base_classes != base.num_classes() {
        bail!(
            "model has {} base classes, dataset has {}",
            trainer.model.config.num_base_classes,
            base.num_classes()
        );
    }
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    fs::write(cfg.output_dir.join("config.json"), sorted_json(&cfg)?)?;
    eprintln!(
        "pretraining on {} images, {} classes, epochs {}..{}",
        base.len(),
        base.num_classes(),
        trainer.epoch,
        cfg.train.epochs
    );
    let out = cfg.output_dir.clone();
    let log = trainer.run(
        &base,
        |r| eprintln!("epoch {:>4}  loss {:.5}  lr {:.4}  {:.1}s", r.epoch, r.overall, r.lr, r.wall_time_s),
        |ckpt| {
            let path = out.join(format!("checkpoint_epoch{:04}.bin", ckpt.epoch));
            ckpt.save(&path)
        },
    )?;
    write_log(&log, &cfg.output_dir.join("train_log.jsonl"), args.resume.is_some())?;
    let final_ckpt = trainer.checkpoint()?;
    let path = cfg.output_dir.join("checkpoint_final.bin");
    final_ckpt.save(&path)?;
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": path,
            "checkpoint_id": checkpoint_id(&final_ckpt.to_bytes()),
            "epoch": final_ckpt.epoch,
        })
    );
    Ok(ExitCode::SUCCESS)
}

fn eval_cmd(args: EvalArgs) -> Result<ExitCode> {
    let bytes = fs::read(&args.checkpoint).with_context(|| format!("checkpoint {}", args.checkpoint.display()))?;
    let ckpt = Checkpoint::read_from(&bytes[..])?;
    let manifest = DatasetManifest::load(&args.dataset)?;
    let set = manifest.load_split(&args.dataset, args.split)?;
    let cfg = EvalConfig {
        way: args.way,
        shot: args.shot,
        query: args.query,
        episodes: args.episodes,
        branches: args.branches,
        normalize: !args.no_normalize,
        logreg: LogRegConfig::default(),
        seed: args.seed,
    };
    let report = fewshot::evaluate(&ckpt.model, &set, &cfg, &checkpoint_id(&bytes))?;
    if let Some(path) = &args.episodes_out {
        let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        report.write_episodes_jsonl(&mut w)?;
        w.flush()?;
    }
    println!("{}", sorted_json(&report.summary)?);
    Ok(ExitCode::SUCCESS)
}

fn theory_cmd(args: TheoryArgs) -> Result<ExitCode> {
    if args.trials == 0 {
        eprintln!("warning: trials=0, nothing to check");
    }
    let trials = theory::run_suite(args.trials, args.m, args.hypotheses, args.seed)?;
    let stdout = io::stdout();
    let mut w = BufWriter::new(stdout.lock());
    theory::write_jsonl(&trials, &mut w)?;
    w.flush()?;
    let summary = theory::summarize(&trials);
    eprintln!("{}", sorted_json(&summary)?);
    if summary.violations > 0 {
        eprintln!("{} of {} instances violate the bound", summary.violations, summary.trials);
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck_cmd(args: GradcheckArgs) -> Result<ExitCode> {
    let report = gradcheck::run_all(args.seed, args.trials)?;
    for case in &report.cases {
        eprintln!(
            "{:<4} {:<32} {:.3e}",
            if case.passed { "ok" } else { "FAIL" },
            case.op,
            case.max_rel_error
        );
    }
    println!("{}", sorted_json(&report)?);
    Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be >= 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::GenData(a) => gen_data_cmd(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Theory(a) => theory_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
