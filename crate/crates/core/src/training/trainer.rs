use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_sample_shape, joint_loss, soft_labels, stage_loss, LabelMap, SyntheticSample};
use crate::autodiff::{adam_step, AdamConfig, AdamState, ParamGrads};
use crate::branch::Pln;
use crate::error::{config_err, input_err, Error, Result};
use crate::eval::{mean_iou, top1};

/// Per-stage loss weights for `t` stages.
pub fn default_lambdas(t: usize) -> Vec<f64> {
    match t {
        1 => vec![1.0],
        2 => vec![1.0, 1.5],
        3 => vec![1.0, 1.3, 1.5],
        4 => vec![1.0, 1.2, 1.5, 2.0],
        _ => vec![1.0; t],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Per-stage loss weights; `None` uses [`default_lambdas`].
    pub lambdas: Option<Vec<f64>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub tau: f64,
    pub seed: u64,
    pub nms_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lambdas: None,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            batch_size: 32,
            epochs: 50,
            tau: 0.5,
            seed: 0,
            nms_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_stages: usize) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(config_err!("lr must be finite and non-negative, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(config_err!("tau must lie in [0, 1), got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.nms_threshold) {
            return Err(config_err!("nms_threshold must lie in [0, 1]"));
        }
        if self.lambdas(n_stages).len() != n_stages {
            return Err(config_err!(
                "{} loss weights for {} stages",
                self.lambdas(n_stages).len(),
                n_stages
            ));
        }
        Ok(())
    }

    pub fn lambdas(&self, n_stages: usize) -> Vec<f64> {
        self.lambdas.clone().unwrap_or_else(|| default_lambdas(n_stages))
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Summary of one training epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-sample loss of each stage.
    pub stage_losses: Vec<f64>,
    pub joint_loss: f64,
    /// Top-1 mean IoU on the validation split, as a fraction.
    pub val_miou: Option<f64>,
    /// Stages whose label mask was empty for some sample.
    pub empty_mask_stages: Vec<usize>,
}

/// Mini-batch Adam over the joint loss.
pub struct Trainer {
    model: Pln,
    cfg: TrainConfig,
    lambdas: Vec<f64>,
    adam: AdamState,
    epochs_done: usize,
}

impl Trainer {
    pub fn new(model: Pln, cfg: TrainConfig) -> Result<Self> {
        let adam = AdamState::new(model.params());
        Self::resume(model, cfg, adam, 0)
    }

    /// Continues after `epochs_done` completed epochs.
    pub fn resume(model: Pln, cfg: TrainConfig, adam: AdamState, epochs_done: usize) -> Result<Self> {
        cfg.validate(model.num_stages())?;
        model.config().stage_configs(&cfg.lambdas(model.num_stages()))?;
        if adam.m.len() != model.params().len() || adam.v.len() != model.params().len() {
            return Err(config_err!("optimizer state does not match the model"));
        }
        let lambdas = cfg.lambdas(model.num_stages());
        Ok(Self {
            model,
            cfg,
            lambdas,
            adam,
            epochs_done,
        })
    }

    pub fn model(&self) -> &Pln {
        &self.model
    }

    pub fn into_model(self) -> Pln {
        self.model
    }

    pub fn adam_state(&self) -> &AdamState {
        &self.adam
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Sample order of a given 1-based epoch.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    fn labels_for(&self, sample: &SyntheticSample) -> Result<Vec<LabelMap>> {
        self.model
            .masks()
            .iter()
            .map(|m| soft_labels(sample.gt(), sample.duration_seconds, self.cfg.tau, m))
            .collect()
    }

    /// Adds one sample's joint-loss gradient times `scale` into `grads`.
    ///
    /// Returns the per-stage losses and whether each stage's mask was empty.
    pub fn accumulate_sample(
        &self,
        sample: &SyntheticSample,
        grads: &mut ParamGrads,
        scale: f64,
    ) -> Result<(Vec<f64>, Vec<bool>)> {
        let labels = self.labels_for(sample)?;
        let mut tape = self.model.tape();
        let trace = self.model.forward(&mut tape, &sample.units, &sample.tokens)?;
        let mut losses = Vec::with_capacity(labels.len());
        let mut values = Vec::with_capacity(labels.len());
        let mut empty = Vec::with_capacity(labels.len());
        for (state, lm) in trace.stages.iter().zip(&labels) {
            let l = stage_loss(&mut tape, state.scores, lm)?;
            values.push(tape.data(l.value)[0]);
            empty.push(l.empty_mask);
            losses.push(l.value);
        }
        let joint = joint_loss(&mut tape, &losses, &self.lambdas)?;
        if values.iter().all(|v| v.is_finite()) {
            let g = tape.backward(joint);
            g.accumulate_params(&tape, grads, scale);
        }
        Ok((values, empty))
    }

    /// One pass over `train` in the seeded order for the next epoch.
    pub fn run_epoch(&mut self, train: &[SyntheticSample], val: &[SyntheticSample]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(input_err!("empty training set"));
        }
        let mc = self.model.config();
        for s in train.iter().chain(val) {
            check_sample_shape(s, mc.d_raw, mc.finest())?;
        }
        let epoch = self.epochs_done + 1;
        let order = self.epoch_order(epoch, train.len());
        let t = self.model.num_stages();
        let mut sums = vec![0.0; t];
        let mut empty_stages = vec![false; t];
        let mut grads = ParamGrads::zeros_like(self.model.params());
        let adam_cfg = self.cfg.adam();
        for (b, batch) in order.chunks(self.cfg.batch_size).enumerate() {
            grads.fill_zero();
            let scale = 1.0 / batch.len() as f64;
            for &idx in batch {
                let (losses, empty) = self.accumulate_sample(&train[idx], &mut grads, scale)?;
                if losses.iter().any(|l| !l.is_finite()) {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: b,
                        samples: batch.to_vec(),
                    });
                }
                for k in 0..t {
                    sums[k] += losses[k];
                    empty_stages[k] |= empty[k];
                }
            }
            if !grads.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    samples: batch.to_vec(),
                });
            }
            adam_step(self.model.params_mut(), &grads, &mut self.adam, &adam_cfg)?;
        }
        self.epochs_done = epoch;
        let stage_losses: Vec<f64> = sums.iter().map(|s| s / train.len() as f64).collect();
        let joint_loss = stage_losses.iter().zip(&self.lambdas).map(|(l, w)| l * w).sum();
        let val_miou = if val.is_empty() {
            None
        } else {
            Some(self.validate(val)?)
        };
        Ok(EpochRecord {
            epoch,
            stage_losses,
            joint_loss,
            val_miou,
            empty_mask_stages: (1..=t).filter(|&k| empty_stages[k - 1]).collect(),
        })
    }

    /// Top-1 mean IoU of the last stage's map.
    pub fn validate(&self, val: &[SyntheticSample]) -> Result<f64> {
        let t = self.model.num_stages();
        let mut tops = Vec::with_capacity(val.len());
        let mut gts = Vec::with_capacity(val.len());
        for s in val {
            let maps = self.model.score_maps(&s.units, &s.tokens, s.duration_seconds)?;
            tops.push(top1(&maps[t - 1]));
            gts.push(s.gt());
        }
        Ok(mean_iou(&tops, &gts))
    }

    /// Runs the remaining epochs up to `cfg.epochs`, calling `on_epoch` after each.
    pub fn train<F>(&mut self, train: &[SyntheticSample], val: &[SyntheticSample], mut on_epoch: F) -> Result<Vec<EpochRecord>>
    where
        F: FnMut(&Trainer, &EpochRecord) -> Result<()>,
    {
        let mut records = Vec::new();
        while self.epochs_done < self.cfg.epochs {
            let rec = self.run_epoch(train, val)?;
            on_epoch(self, &rec)?;
            records.push(rec);
        }
        Ok(records)
    }
}
