//! Data loading, training runs and their on-disk artifacts.

use std::borrow::Cow;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pln_core::autodiff::AdamState;
use pln_core::branch::{ModelConfig, Pln};
use pln_core::eval::{evaluate_samples, model_score_maps, random_score_maps, EvalConfig, EvalReport, Evaluation};
use pln_core::training::{generate_dataset, EpochRecord, SyntheticSample, Trainer};

use crate::checkpoint::Checkpoint;
use crate::config::{ModelSection, RunConfig};
use crate::dataset;
use crate::records::{write_json, write_predictions, TrainLog};
use crate::report::eval_table;

pub const CHECKPOINT: &str = "checkpoint.bin";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const EVAL_JSON: &str = "eval_report.json";
pub const EVAL_TEXT: &str = "eval_report.txt";
pub const BASELINE_JSON: &str = "baseline_report.json";
pub const PREDICTIONS: &str = "predictions.jsonl";

/// Predictions kept per query in the predictions file.
pub const PREDICTIONS_PER_QUERY: usize = 10;

/// Training and held-out samples.
#[derive(Clone, Debug)]
pub struct Data {
    pub train: Vec<SyntheticSample>,
    pub heldout: Vec<SyntheticSample>,
}

pub fn load_samples(cfg: &RunConfig) -> Result<Vec<SyntheticSample>> {
    match &cfg.data.path {
        Some(p) => Ok(dataset::read(p)?.1),
        None => Ok(generate_dataset(&cfg.generator())?),
    }
}

pub fn load_data(cfg: &RunConfig) -> Result<Data> {
    let mut all = load_samples(cfg)?;
    if cfg.data.n_val >= all.len() {
        bail!("n_val = {} leaves no training data out of {}", cfg.data.n_val, all.len());
    }
    let heldout = all.split_off(all.len() - cfg.data.n_val);
    Ok(Data { train: all, heldout })
}

/// Pads every sample to a whole number of finest-stage clips; borrows when
/// nothing needs padding.
pub fn fit_to_grid(samples: &[SyntheticSample], finest: usize) -> Result<Cow<'_, [SyntheticSample]>> {
    if samples.iter().all(|s| s.units.shape()[0] % finest == 0) {
        return Ok(Cow::Borrowed(samples));
    }
    let padded = samples
        .iter()
        .map(|s| s.padded_to_multiple(finest))
        .collect::<pln_core::Result<Vec<_>>>()?;
    Ok(Cow::Owned(padded))
}

/// Everything a finished training run produced.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: Pln,
    pub records: Vec<EpochRecord>,
    pub evaluation: Evaluation,
    pub baseline: EvalReport,
    pub dir: PathBuf,
}

/// Trains `section` on `data`, writing artifacts under `dir`.
///
/// With `resume`, training continues from that checkpoint and the log keeps
/// its rows up to the checkpoint's epoch.
pub fn train_run<F>(
    cfg: &RunConfig,
    section: &ModelSection,
    data: &Data,
    dir: &Path,
    resume: Option<&Path>,
    mut progress: F,
) -> Result<RunOutcome>
where
    F: FnMut(&EpochRecord),
{
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let shape = cfg.data_shape()?;
    let model_cfg = cfg.model_for(section, shape);
    let train_cfg = cfg.train_config();
    let train = fit_to_grid(&data.train, model_cfg.finest())?;
    let heldout = fit_to_grid(&data.heldout, model_cfg.finest())?;
    let resolved = RunConfig {
        model: section.clone(),
        output_dir: dir.to_path_buf(),
        ..cfg.clone()
    };
    fs::write(dir.join(RESOLVED_CONFIG), resolved.to_toml())?;

    let (mut trainer, mut log) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            ck.check_config(&model_cfg)?;
            let (model, adam, epochs) = ck.into_model()?;
            let log = TrainLog::resume(&dir.join(TRAIN_LOG), model.num_stages(), epochs)?;
            (Trainer::resume(model, train_cfg, adam, epochs)?, log)
        }
        None => {
            let model = Pln::new(model_cfg.clone())?;
            let log = TrainLog::create(&dir.join(TRAIN_LOG), model.num_stages())?;
            (Trainer::new(model, train_cfg)?, log)
        }
    };
    save_checkpoint(dir, trainer.model(), trainer.adam_state(), trainer.epochs_done())?;

    let val_n = cfg
        .train
        .val_queries
        .map_or(heldout.len(), |n| n.min(heldout.len()));
    let val = &heldout[..val_n];
    let records = trainer.train(&train, val, |t, rec| {
        log.push(rec)
            .and_then(|_| save_checkpoint(dir, t.model(), t.adam_state(), t.epochs_done()))
            .map_err(|e| pln_core::Error::Input(format!("writing artifacts: {e:#}")))?;
        progress(rec);
        Ok(())
    })?;

    let model = trainer.into_model();
    let eval_cfg = cfg.eval_config(model.num_stages())?;
    let (evaluation, baseline) = evaluate_with_baseline(&model, &heldout, &eval_cfg, cfg.seed ^ cfg.eval.baseline_seed)?;
    write_eval(dir, &evaluation)?;
    write_json(&dir.join(BASELINE_JSON), &baseline)?;
    Ok(RunOutcome {
        model,
        records,
        evaluation,
        baseline,
        dir: dir.to_path_buf(),
    })
}

pub fn save_checkpoint(dir: &Path, model: &Pln, adam: &AdamState, epochs: usize) -> Result<()> {
    Checkpoint::new(model, adam, epochs).save(&dir.join(CHECKPOINT))?;
    Ok(())
}

/// Model evaluation plus the same harness fed seeded uniform noise maps.
pub fn evaluate_with_baseline(
    model: &Pln,
    samples: &[SyntheticSample],
    cfg: &EvalConfig,
    baseline_seed: u64,
) -> Result<(Evaluation, EvalReport)> {
    let samples = fit_to_grid(samples, model.config().finest())?;
    let maps = model_score_maps(model, &samples)?;
    let evaluation = evaluate_samples(&maps, &samples, cfg)?;
    let noise = random_score_maps(&maps, baseline_seed);
    let baseline = evaluate_samples(&noise, &samples, cfg)?.report;
    Ok((evaluation, baseline))
}

pub fn write_eval(dir: &Path, evaluation: &Evaluation) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join(EVAL_JSON), &evaluation.report)?;
    fs::write(dir.join(EVAL_TEXT), eval_table(&evaluation.report))?;
    write_predictions(&dir.join(PREDICTIONS), &evaluation.predictions, PREDICTIONS_PER_QUERY)
}

/// Loads a checkpoint after checking it against the configured model.
pub fn load_model(path: &Path, expected: &ModelConfig) -> Result<Pln> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    ck.check_config(expected)?;
    Ok(ck.into_model()?.0)
}
