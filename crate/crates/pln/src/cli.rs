//! Command-line verbs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use pln_core::autodiff::gradcheck::{op_suite, MODEL_TOLERANCE, OP_TOLERANCE};
use pln_core::branch::HeadKind;
use pln_core::training::{generate_dataset, model_grad_check};

use crate::checkpoint::CheckpointError;
use crate::config::{parse_stages, RunConfig};
use crate::dataset;
use crate::pipeline::{self, load_data, load_model, train_run, write_eval};
use crate::records::write_json;
use crate::report::{eval_table, AblationRow, AblationTable};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_CHECK: u8 = 3;

/// A configuration or usage problem (exit code 1).
#[derive(Debug, thiserror::Error)]
#[error("{0:#}")]
pub struct UsageError(pub anyhow::Error);

/// A failed self-check (exit code 3).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct CheckFailed(pub String);

fn usage<T>(r: Result<T>) -> Result<T> {
    r.map_err(|e| UsageError(e).into())
}

#[derive(Parser, Debug)]
#[command(name = "pln", version, about = "Progressive coarse-to-fine moment localization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(clap::Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named preset the configuration is merged over.
    #[arg(long)]
    pub preset: Option<String>,
    /// Run seed; required when no config file is given.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(clap::Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// Clip counts per stage, coarse to fine, e.g. `8,32`.
    #[arg(long)]
    pub stages: Option<String>,
    /// Disable conditional feature modulation.
    #[arg(long)]
    pub no_cfm: bool,
    /// Disable the upsampling connection.
    #[arg(long)]
    pub no_uc: bool,
    #[arg(long, value_enum)]
    pub head: Option<HeadArg>,
}

#[derive(clap::Args, Debug, Clone, Default)]
pub struct EvalArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub strategy: Option<u8>,
    /// Stage ranked by strategy 1.
    #[arg(long)]
    pub t: Option<usize>,
    /// NMS threshold.
    #[arg(long)]
    pub nms: Option<f64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum HeadArg {
    Convnet,
    Dot,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Scope {
    Ops,
    Model,
    All,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic planted-moment dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset file; the header goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and evaluate it on the held-out split.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        epochs: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        eval: EvalArgs,
        /// Defaults to the checkpoint in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate every record of this file instead of the held-out split.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        scope: Scope,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and compare the configured variant grid.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        let mut table: toml::Table = text.parse().context("parsing config")?;
        if let Some(seed) = self.seed {
            table.insert("seed".into(), toml::Value::Integer(seed as i64));
        } else if !table.contains_key("seed") {
            anyhow::bail!("a seed is required: set `seed` in the config or pass --seed");
        }
        let mut cfg = RunConfig::from_toml(&toml::to_string(&table)?, self.preset.as_deref())?;
        if let Some(p) = &self.config {
            if let (Some(data), Some(dir)) = (cfg.data.path.as_mut(), p.parent()) {
                if data.is_relative() {
                    *data = dir.join(&*data);
                }
            }
        }
        Ok(cfg)
    }
}

impl ModelArgs {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(s) = &self.stages {
            cfg.model.stages = parse_stages(s)?;
        }
        if self.no_cfm {
            cfg.model.cfm = false;
        }
        if self.no_uc {
            cfg.model.uc = false;
        }
        if let Some(h) = self.head {
            cfg.model.head = match h {
                HeadArg::Convnet => HeadKind::Convnet,
                HeadArg::Dot => HeadKind::Dot,
            };
        }
        Ok(())
    }
}

impl EvalArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.strategy {
            cfg.eval.strategy = s;
        }
        if self.t.is_some() {
            cfg.eval.t = self.t;
        }
        if let Some(n) = self.nms {
            cfg.eval.nms_threshold = n;
        }
    }
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<CheckFailed>().is_some() {
        return EXIT_CHECK;
    }
    if e.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    if let Some(CheckpointError::HashMismatch { .. }) = e.downcast_ref::<CheckpointError>() {
        return EXIT_USAGE;
    }
    if let Some(pln_core::Error::Config(_)) = e.downcast_ref::<pln_core::Error>() {
        return EXIT_USAGE;
    }
    EXIT_RUNTIME
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { cfg, out } => gen_data(&cfg, &out),
        Command::Train {
            cfg,
            model,
            eval,
            epochs,
            out,
            resume,
        } => {
            let mut rc = usage(cfg.load())?;
            usage(model.apply(&mut rc))?;
            eval.apply(&mut rc);
            if let Some(e) = epochs {
                rc.train.epochs = e;
            }
            if let Some(o) = out {
                rc.output_dir = o;
            }
            usage(rc.validate())?;
            train(&rc, resume.as_deref())
        }
        Command::Eval {
            cfg,
            model,
            eval,
            checkpoint,
            dataset,
            out,
        } => {
            let mut rc = usage(cfg.load())?;
            usage(model.apply(&mut rc))?;
            eval.apply(&mut rc);
            if let Some(o) = out {
                rc.output_dir = o;
            }
            usage(rc.validate())?;
            let ck = checkpoint.unwrap_or_else(|| rc.output_dir.join(pipeline::CHECKPOINT));
            evaluate(&rc, &ck, dataset.as_deref())
        }
        Command::Gradcheck { scope, seed } => gradcheck(scope, seed),
        Command::Ablate { cfg, epochs, out } => {
            let mut rc = usage(cfg.load())?;
            if let Some(e) = epochs {
                rc.train.epochs = e;
            }
            if let Some(o) = out {
                rc.output_dir = o;
            }
            usage(rc.validate())?;
            ablate(&rc).map(|_| ())
        }
    }
}

pub fn gen_data(args: &ConfigArgs, out: &Path) -> Result<()> {
    let rc = usage(args.load())?;
    let generator = rc.generator();
    usage(generator.validate().map_err(Into::into))?;
    let samples = generate_dataset(&generator)?;
    dataset::write(out, &samples, &generator)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    println!("target length fraction histogram:");
    let hist = dataset::length_histogram(&samples, 10);
    for (b, count) in hist.iter().enumerate() {
        println!("  ({:.1}, {:.1}]  {count}", b as f64 / 10.0, (b + 1) as f64 / 10.0);
    }
    Ok(())
}

pub fn train(rc: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let data = load_data(rc)?;
    println!(
        "training on {} samples, holding out {}; output {}",
        data.train.len(),
        data.heldout.len(),
        rc.output_dir.display()
    );
    let outcome = train_run(rc, &rc.model, &data, &rc.output_dir, resume, |rec| {
        let losses: Vec<String> = rec.stage_losses.iter().map(|l| format!("{l:.5}")).collect();
        println!(
            "epoch {:>3}  stage losses [{}]  val mIoU {}",
            rec.epoch,
            losses.join(", "),
            rec.val_miou.map_or("-".into(), |m| format!("{:.2}", 100.0 * m))
        );
        for t in &rec.empty_mask_stages {
            eprintln!("warning: stage {t} had an empty label mask for some samples; its loss counted as 0");
        }
    })?;
    print!("{}", eval_table(&outcome.evaluation.report));
    println!(
        "random-score baseline: R@1,IoU=0.5 {:.2}  mIoU {:.2}",
        outcome.baseline.rank_at(1, 0.5).unwrap_or(0.0),
        outcome.baseline.miou
    );
    Ok(())
}

pub fn evaluate(rc: &RunConfig, checkpoint: &Path, dataset_path: Option<&Path>) -> Result<()> {
    let expected = rc.model_config()?;
    let model = load_model(checkpoint, &expected)?;
    let samples = match dataset_path {
        Some(p) => dataset::read(p)?.1,
        None => load_data(rc)?.heldout,
    };
    let eval_cfg = usage(rc.eval_config(model.num_stages()))?;
    let (evaluation, _) = pipeline::evaluate_with_baseline(&model, &samples, &eval_cfg, rc.seed ^ rc.eval.baseline_seed)?;
    write_eval(&rc.output_dir, &evaluation)?;
    print!("{}", eval_table(&evaluation.report));
    Ok(())
}

pub fn gradcheck(scope: Scope, seed: u64) -> Result<()> {
    let mut failed = Vec::new();
    println!("{:<16} {:>14} {:>10}  result", "check", "max rel err", "tolerance");
    if matches!(scope, Scope::Ops | Scope::All) {
        for r in op_suite(seed..seed + 5) {
            println!(
                "{:<16} {:>14.3e} {:>10.0e}  {}",
                r.name,
                r.max_rel_err,
                OP_TOLERANCE,
                if r.passed { "pass" } else { "FAIL" }
            );
            if !r.passed {
                failed.push(r.name.to_string());
            }
        }
    }
    if matches!(scope, Scope::Model | Scope::All) {
        let (err, ok) = match model_grad_check(seed) {
            Ok(e) => (e, e <= MODEL_TOLERANCE),
            Err(_) => (f64::INFINITY, false),
        };
        println!(
            "{:<16} {:>14.3e} {:>10.0e}  {}",
            "model",
            err,
            MODEL_TOLERANCE,
            if ok { "pass" } else { "FAIL" }
        );
        if !ok {
            failed.push("model".into());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CheckFailed(format!("gradient checks failed: {}", failed.join(", "))).into())
    }
}

pub fn ablate(rc: &RunConfig) -> Result<AblationTable> {
    let data = load_data(rc)?;
    let mut rows = Vec::new();
    for v in &rc.ablate.variants {
        let section = v.apply(&rc.model);
        let dir = rc.output_dir.join(&v.name);
        println!("variant {}: stages {:?} cfm {} uc {}", v.name, section.stages, section.cfm, section.uc);
        let result = train_run(rc, &section, &data, &dir, None, |rec| {
            println!("  epoch {:>3}  joint loss {:.5}", rec.epoch, rec.joint_loss);
        });
        let (report, error) = match result {
            Ok(o) => (Some(o.evaluation.report), None),
            Err(e) => {
                eprintln!("variant {} failed: {e:#}", v.name);
                (None, Some(format!("{e:#}")))
            }
        };
        rows.push(AblationRow {
            name: v.name.clone(),
            stages: section.stages.clone(),
            cfm: section.cfm,
            uc: section.uc,
            report,
            error,
        });
    }
    let table = AblationTable { seed: rc.seed, rows };
    std::fs::create_dir_all(&rc.output_dir)?;
    write_json(&rc.output_dir.join("ablation.json"), &table)?;
    let text = table.render();
    std::fs::write(rc.output_dir.join("ablation.txt"), &text)?;
    print!("{text}");
    Ok(table)
}
