//! Supervision, losses, the synthetic planted-moment generator and the
//! training loop.

mod data;
mod trainer;

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{grad_check_params, DEFAULT_STEP};
use crate::autodiff::{MaskedLoss, Tape, Var};
use crate::branch::{ModelConfig, Pln};
use crate::tensor::Tensor;
use crate::error::{config_err, input_err, shape_err, Result};
use crate::temporal_map::{moment_to_seconds, TemporalMask};

pub use data::{
    generate_dataset, signatures, GeneratorConfig, LengthDistribution, SyntheticSample, BOS, EOS,
    FILLER,
};
pub use trainer::{default_lambdas, EpochRecord, TrainConfig, Trainer};

/// Intersection over union of two time intervals.
///
/// A zero-length or reversed interval contributes no overlap.
pub fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let la = (a.1 - a.0).max(0.0);
    let lb = (b.1 - b.0).max(0.0);
    let union = la + lb - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// `0` when `iou <= tau`, otherwise `(iou - tau) / (1 - tau)`.
pub fn soft_label(iou: f64, tau: f64) -> f64 {
    if iou <= tau {
        0.0
    } else {
        (iou - tau) / (1.0 - tau)
    }
}

/// Soft IoU targets for one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub n: usize,
    /// Row-major `n x n`.
    pub y: Vec<f64>,
    /// Sampled and valid cells.
    pub mask: Vec<bool>,
    pub tau: f64,
}

pub fn soft_labels(gt: (f64, f64), duration: f64, tau: f64, mask: &TemporalMask) -> Result<LabelMap> {
    if !(0.0..1.0).contains(&tau) {
        return Err(config_err!("tau must lie in [0, 1), got {}", tau));
    }
    let n = mask.n;
    let mut y = alloc::vec![0.0; n * n];
    let cells: Vec<bool> = mask.sample.iter().zip(&mask.valid).map(|(&s, &v)| s && v).collect();
    for i in 0..n {
        for j in i..n {
            let k = i * n + j;
            if cells[k] {
                let span = moment_to_seconds(i, j, n, duration)?;
                y[k] = soft_label(temporal_iou(span, gt), tau);
            }
        }
    }
    Ok(LabelMap {
        n,
        y,
        mask: cells,
        tau,
    })
}

/// Masked binary cross-entropy of a `[1, n, n]` score node against `labels`,
/// averaged over the label mask.
pub fn stage_loss(tape: &mut Tape<'_>, scores: Var, labels: &LabelMap) -> Result<MaskedLoss> {
    if tape.value(scores).len() != labels.n * labels.n {
        return Err(shape_err!(
            "score map {:?} vs {}x{} labels",
            tape.shape(scores),
            labels.n,
            labels.n
        ));
    }
    tape.bce(scores, &labels.y, &labels.mask)
}

/// `sum_t lambda_t * L_t` on the tape.
pub fn joint_loss(tape: &mut Tape<'_>, losses: &[Var], lambdas: &[f64]) -> Result<Var> {
    if losses.len() != lambdas.len() || losses.is_empty() {
        return Err(config_err!(
            "{} stage losses for {} weights",
            losses.len(),
            lambdas.len()
        ));
    }
    let mut total = tape.scale(losses[0], lambdas[0]);
    for (&l, &w) in losses.iter().zip(lambdas).skip(1) {
        let term = tape.scale(l, w);
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// Scalar form of [`joint_loss`].
pub fn joint_loss_value(losses: &[f64], lambdas: &[f64]) -> Result<f64> {
    if losses.len() != lambdas.len() {
        return Err(config_err!(
            "{} stage losses for {} weights",
            losses.len(),
            lambdas.len()
        ));
    }
    Ok(losses.iter().zip(lambdas).map(|(l, w)| l * w).sum())
}

/// Configuration of the small network used for end-to-end gradient checks.
pub fn micro_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d_raw: 6,
        d: 4,
        vocab_size: 7,
        stages: alloc::vec![4, 8],
        seed,
        ..ModelConfig::default()
    }
}

/// Finite-difference check of the joint loss of the micro model on one
/// random sample with respect to every parameter.
pub fn model_grad_check(seed: u64) -> Result<f64> {
    let model = Pln::new(micro_model_config(seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let units = Tensor::uniform(&[8, 6], 1.0, &mut rng);
    let tokens = [BOS, 3 + (seed as usize % 4), EOS];
    let gt = (2.0, 5.0);
    let labels: Vec<LabelMap> = model
        .masks()
        .iter()
        .map(|m| soft_labels(gt, 8.0, 0.3, m))
        .collect::<Result<_>>()?;
    let lambdas = default_lambdas(model.num_stages());
    grad_check_params(
        model.params(),
        |tape| {
            let trace = model.forward(tape, &units, &tokens)?;
            let mut losses = Vec::new();
            for (s, lm) in trace.stages.iter().zip(&labels) {
                losses.push(stage_loss(tape, s.scores, lm)?.value);
            }
            joint_loss(tape, &losses, &lambdas)
        },
        DEFAULT_STEP,
    )
}

pub(crate) fn check_sample_shape(sample: &SyntheticSample, d_raw: usize, finest: usize) -> Result<()> {
    let s = sample.units.shape();
    if s.len() != 2 || s[1] != d_raw {
        return Err(shape_err!("units {:?}, model expects width {}", s, d_raw));
    }
    if s[0] % finest != 0 {
        return Err(input_err!(
            "{} units are not divisible into {} clips",
            s[0],
            finest
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        assert_eq!(temporal_iou((1.0, 3.0), (1.0, 3.0)), 1.0);
        assert_eq!(temporal_iou((0.0, 1.0), (2.0, 3.0)), 0.0);
        assert!((temporal_iou((2.0, 6.0), (4.0, 8.0)) - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(temporal_iou((2.0, 2.0), (2.0, 2.0)), 0.0);
    }

    #[test]
    fn label_spot_values() {
        assert_eq!(soft_label(0.5, 0.5), 0.0);
        assert_eq!(soft_label(0.75, 0.5), 0.5);
        assert_eq!(soft_label(1.0, 0.5), 1.0);
    }

    #[test]
    fn labels_zero_outside_mask() {
        let mask = TemporalMask::new(8, 2);
        let lm = soft_labels((3.0, 9.0), 16.0, 0.3, &mask).unwrap();
        for k in 0..64 {
            if !lm.mask[k] {
                assert_eq!(lm.y[k], 0.0);
            }
            assert!((0.0..=1.0).contains(&lm.y[k]));
        }
        assert!(soft_labels((0.0, 1.0), 1.0, 1.0, &mask).is_err());
    }

    #[test]
    fn half_probability_gives_ln2() {
        let mask = TemporalMask::new(4, 4);
        let labels = soft_labels((0.0, 2.0), 4.0, 0.5, &mask).unwrap();
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::full(&[1, 4, 4], 0.5));
        let l = stage_loss(&mut tape, p, &labels).unwrap();
        assert!((tape.data(l.value)[0] - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn micro_model_gradients() {
        for seed in 0..2 {
            let e = model_grad_check(seed).unwrap();
            assert!(e <= crate::autodiff::gradcheck::MODEL_TOLERANCE, "seed {seed}: {e}");
        }
    }

    #[test]
    fn joint_weights() {
        let v = joint_loss_value(&[0.4, 0.2], &[1.0, 1.5]).unwrap();
        assert!((v - 0.7).abs() < 1e-12);
        assert!(joint_loss_value(&[0.4], &[1.0, 1.5]).is_err());
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(0.4));
        let b = tape.leaf(Tensor::scalar(0.2));
        let j = joint_loss(&mut tape, &[a, b], &[1.0, 1.5]).unwrap();
        assert!((tape.data(j)[0] - 0.7).abs() < 1e-12);
        let g = tape.backward(j);
        assert_eq!(g.get(b).unwrap(), &[1.5]);
    }
}
