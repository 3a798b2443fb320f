//! Central finite-difference verification of tape gradients.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ElementwiseMode, LstmWeights, ParamGrads, ParamStore, PoolMode, Tape, UnaryMode, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Acceptance bound for a single primitive.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Acceptance bound for a composed network.
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// Denominator floor of [`relative_error`]. Central differences of an O(1)
/// loss carry about 1e-11 of roundoff at the default step, so gradients far
/// below this are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;

/// `|ad - fd| / max(GRAD_FLOOR, |ad| + |fd|)`.
pub fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / (ad.abs() + fd.abs()).max(GRAD_FLOOR)
}

fn scalar_of(tape: &Tape<'_>, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar output, got shape {:?}",
            v.shape()
        )));
    }
    let s = v.item();
    if !s.is_finite() {
        return Err(Error::Contract(format!("non-finite output {s}")));
    }
    Ok(s)
}

/// Checks the gradient of a scalar function of every parameter in `params`.
///
/// Returns the maximum relative error over all parameter elements.
pub fn grad_check_params<F>(params: &ParamStore, f: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::with_params(params);
    let out = f(&mut tape)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out);
    let mut analytic = ParamGrads::zeros_like(params);
    grads.accumulate_params(&tape, &mut analytic, 1.0);
    drop(tape);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::with_params(store);
        let out = f(&mut t)?;
        scalar_of(&t, out)
    };
    let mut work = params.clone();
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for e in 0..params.get(id).len() {
            let orig = params.get(id).data()[e];
            work.get_mut(id).data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[e] = orig;
            let fd = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic.get(id)[e], fd));
        }
    }
    Ok(worst)
}

/// Checks the gradient of `f` with respect to each tensor in `inputs`.
///
/// `f` receives one differentiable variable per input, in order.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(k, t)| store.add(&format!("input{k}"), t.clone()))
        .collect();
    grad_check_params(
        &store,
        |tape| {
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id)).collect();
            f(tape, &vars)
        },
        h,
    )
}

/// Names of every primitive covered by [`check_op`], in report order.
pub const OP_NAMES: &[&str] = &[
    "affine",
    "conv2d",
    "pool2d_max",
    "pool2d_mean",
    "upsample2x",
    "elementwise_mul",
    "elementwise_add",
    "elementwise_max",
    "sigmoid",
    "relu",
    "tanh",
    "lstm_cell_bptt4",
    "bce",
    "sum",
    "scale",
    "segment_mean",
    "moment_map",
    "scale_channels",
    "scale_features",
    "mask",
    "reshape",
    "gather",
    "select_row",
    "slice",
];

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// `sum(r * y)` with fixed pseudo-random weights `r`, so every output element
/// carries a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape<'_>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_a11);
    let r = Tensor::uniform(tape.shape(y), 1.0, &mut rng);
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

/// Gradient check of one named primitive on random inputs drawn from `seed`.
pub fn check_op(name: &str, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = DEFAULT_STEP;
    match name {
        "affine" => {
            let ins = [
                rand_tensor(&mut rng, &[3, 4]),
                rand_tensor(&mut rng, &[4, 5]),
                rand_tensor(&mut rng, &[5]),
            ];
            grad_check(
                |t, v| {
                    let y = t.affine(v[0], v[1], Some(v[2]))?;
                    weighted_sum(t, y, seed)
                },
                &ins,
                h,
            )
        }
        "conv2d" => {
            let ins = [
                rand_tensor(&mut rng, &[2, 5, 5]),
                rand_tensor(&mut rng, &[3, 2, 3, 3]),
                rand_tensor(&mut rng, &[3]),
            ];
            grad_check(
                |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), 1)?;
                    weighted_sum(t, y, seed)
                },
                &ins,
                h,
            )
        }
        "pool2d_max" | "pool2d_mean" => {
            let mode = if name == "pool2d_max" {
                PoolMode::Max
            } else {
                PoolMode::Mean
            };
            let ins = [rand_tensor(&mut rng, &[2, 5, 5])];
            grad_check(
                |t, v| {
                    let a = t.pool2d(v[0], mode, 2, 2)?;
                    let b = t.pool2d(v[0], mode, 3, 1)?;
                    let sa = weighted_sum(t, a, seed)?;
                    let sb = weighted_sum(t, b, seed + 1)?;
                    t.add(sa, sb)
                },
                &ins,
                h,
            )
        }
        "upsample2x" => {
            let ins = [rand_tensor(&mut rng, &[2, 3, 3])];
            grad_check(
                |t, v| {
                    let y = t.upsample2x(v[0])?;
                    weighted_sum(t, y, seed)
                },
                &ins,
                h,
            )
        }
        "elementwise_mul" | "elementwise_add" | "elementwise_max" => {
            let mode = match name {
                "elementwise_mul" => ElementwiseMode::Mul,
                "elementwise_add" => ElementwiseMode::Add,
                _ => ElementwiseMode::Max,
            };
            let ins = [rand_tensor(&mut rng, &[6]), rand_tensor(&mut rng, &[6])];
            grad_check(
                |t, v| {
                    let y = t.elementwise(v[0], v[1], mode)?;
                    weighted_sum(t, y, seed)
                },
                &ins,
                h,
            )
        }
        "sigmoid" | "relu" | "tanh" => {
            let mode = match name {
                "sigmoid" => UnaryMode::Sigmoid,
                "relu" => UnaryMode::Relu,
                _ => UnaryMode::Tanh,
            };
            let ins = [Tensor::uniform(&[8], 3.0, &mut rng)];
            grad_check(
                |t, v| {
                    let y = t.activation(v[0], mode);
                    weighted_sum(t, y, seed)
                },
                &ins,
                h,
            )
        }
        "lstm_cell_bptt4" => {
            let (din, dh, steps) = (3, 2, 4);
            let mut ins: Vec<Tensor> = (0..steps).map(|_| rand_tensor(&mut rng, &[din])).collect();
            ins.push(rand_tensor(&mut rng, &[din, 4 * dh]));
            ins.push(rand_tensor(&mut rng, &[dh, 4 * dh]));
            ins.push(rand_tensor(&mut rng, &[4 * dh]));
            grad_check(
                |t, v| {
                    let w = LstmWeights {
                        w_x: v[steps],
                        w_h: v[steps + 1],
                        bias: v[steps + 2],
                    };
                    let mut hs = t.constant(Tensor::zeros(&[dh]));
                    let mut cs = t.constant(Tensor::zeros(&[dh]));
                    for x in &v[..steps] {
                        let (hn, cn) = t.lstm_cell(*x, hs, cs, w)?;
                        hs = hn;
                        cs = cn;
                    }
                    weighted_sum(t, hs, seed)
                },
                &ins,
                h,
            )
        }
        "bce" => {
            let n = 10;
            let p: Vec<f64> = (0..n).map(|_| 0.1 + 0.8 * rng.random::<f64>()).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let mut mask: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.7).collect();
            mask[0] = true;
            grad_check(
                |t, v| Ok(t.bce(v[0], &y, &mask)?.value),
                &[Tensor::from_vec(p)],
                h,
            )
        }
        "sum" => {
            let ins = [rand_tensor(&mut rng, &[5])];
            grad_check(
                |t, v| {
                    let sq = t.mul(v[0], v[0])?;
                    Ok(t.sum(sq))
                },
                &ins,
                h,
            )
        }
        "scale" => {
            let ins = [rand_tensor(&mut rng, &[5])];
            grad_check(
                |t, v| {
                    let y = t.scale(v[0], -1.7);
                    weighted_sum(t, y, seed)
                },
                &ins,
                h,
            )
        }
        "segment_mean" => {
            let ins = [rand_tensor(&mut rng, &[6, 3])];
            grad_check(
                |t, v| {
                    let y = t.segment_mean(v[0], 3)?;
                    weighted_sum(t, y, seed)
                },
                &ins,
                h,
            )
        }
        "moment_map" => {
            let ins = [rand_tensor(&mut rng, &[5, 3])];
            grad_check(
                |t, v| {
                    let y = t.moment_map(v[0])?;
                    weighted_sum(t, y, seed)
                },
                &ins,
                h,
            )
        }
        "scale_channels" => {
            let ins = [rand_tensor(&mut rng, &[3, 2, 2]), rand_tensor(&mut rng, &[3])];
            grad_check(
                |t, v| {
                    let y = t.scale_channels(v[0], v[1])?;
                    weighted_sum(t, y, seed)
                },
                &ins,
                h,
            )
        }
        "scale_features" => {
            let ins = [rand_tensor(&mut rng, &[4, 3]), rand_tensor(&mut rng, &[3])];
            grad_check(
                |t, v| {
                    let y = t.scale_features(v[0], v[1])?;
                    weighted_sum(t, y, seed)
                },
                &ins,
                h,
            )
        }
        "mask" => {
            let mask: Vec<bool> = (0..9).map(|_| rng.random::<f64>() < 0.5).collect();
            let ins = [rand_tensor(&mut rng, &[2, 3, 3])];
            grad_check(
                |t, v| {
                    let y = t.mask(v[0], &mask)?;
                    weighted_sum(t, y, seed)
                },
                &ins,
                h,
            )
        }
        "reshape" => {
            let ins = [rand_tensor(&mut rng, &[2, 3])];
            grad_check(
                |t, v| {
                    let y = t.reshape(v[0], &[3, 2])?;
                    weighted_sum(t, y, seed)
                },
                &ins,
                h,
            )
        }
        "gather" => {
            let ins = [rand_tensor(&mut rng, &[5, 3])];
            grad_check(
                |t, v| {
                    let y = t.gather(v[0], &[1, 3, 1])?;
                    weighted_sum(t, y, seed)
                },
                &ins,
                h,
            )
        }
        "select_row" => {
            let ins = [rand_tensor(&mut rng, &[3, 4])];
            grad_check(
                |t, v| {
                    let y = t.select_row(v[0], 1)?;
                    weighted_sum(t, y, seed)
                },
                &ins,
                h,
            )
        }
        "slice" => {
            let ins = [rand_tensor(&mut rng, &[8])];
            grad_check(
                |t, v| {
                    let y = t.slice(v[0], 2, 3)?;
                    weighted_sum(t, y, seed)
                },
                &ins,
                h,
            )
        }
        other => Err(Error::Input(format!("unknown op {other}"))),
    }
}

/// Result of checking one primitive over several seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Runs every registered primitive over `seeds`.
pub fn op_suite(seeds: core::ops::Range<u64>) -> Vec<OpCheck> {
    OP_NAMES
        .iter()
        .map(|&name| {
            let mut worst: f64 = 0.0;
            let mut ok = true;
            for seed in seeds.clone() {
                match check_op(name, seed) {
                    Ok(e) => worst = worst.max(e),
                    Err(_) => {
                        ok = false;
                        worst = f64::INFINITY;
                    }
                }
            }
            OpCheck {
                name,
                max_rel_err: worst,
                passed: ok && worst <= OP_TOLERANCE,
            }
        })
        .collect()
}
