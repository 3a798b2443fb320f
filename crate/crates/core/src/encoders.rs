//! Video and query encoders.
//!
//! Every encoder exists in two forms: an `*_on` function that records onto a
//! caller's tape (used by the model so gradients flow end to end) and a plain
//! function over concrete values built on top of it.

use alloc::vec::Vec;

use crate::autodiff::{LstmWeights, ParamId, ParamStore, PoolMode, Tape, Var};
use crate::error::{config_err, input_err, Error, Result};
use crate::tensor::Tensor;

/// Fully connected layer; `weight` is `[in, out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn apply(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.affine(x, w, Some(b))
    }
}

/// One stacked LSTM layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmLayer {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
}

impl LstmLayer {
    fn on_tape(&self, tape: &mut Tape<'_>) -> LstmWeights {
        LstmWeights {
            w_x: tape.param(self.w_x),
            w_h: tape.param(self.w_h),
            bias: tape.param(self.bias),
        }
    }
}

/// Per-unit features of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitFeatureSequence {
    /// `[l_v, dim]`
    pub units: Tensor,
    pub duration_seconds: f64,
}

/// Clip features of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSet {
    pub stage: usize,
    /// `[n_clips, d]`
    pub clips: Tensor,
    pub modulated: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryTokens {
    pub ids: Vec<usize>,
    pub vocab_size: usize,
}

impl QueryTokens {
    pub fn validate(&self) -> Result<()> {
        if self.ids.is_empty() {
            return Err(input_err!("empty query"));
        }
        if let Some(bad) = self.ids.iter().find(|&&t| t >= self.vocab_size) {
            return Err(input_err!(
                "token id {} outside vocabulary of {}",
                bad,
                self.vocab_size
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryVector {
    pub f_s: Tensor,
}

/// Repeats the last unit until the sequence length is a multiple of `n`.
pub fn pad_units_to_multiple(units: &Tensor, n: usize) -> Result<Tensor> {
    let s = units.shape();
    if s.len() != 2 || n == 0 {
        return Err(crate::error::shape_err!("expected [l_v, d] units, got {:?}", s));
    }
    let (l, d) = (s[0], s[1]);
    let target = l.div_ceil(n) * n;
    let mut data = units.data().to_vec();
    let last = units.data()[(l - 1) * d..].to_vec();
    for _ in l..target {
        data.extend_from_slice(&last);
    }
    Tensor::new(&[target, d], data)
}

pub fn encode_units_on(tape: &mut Tape<'_>, units: Var, proj: &Linear) -> Result<Var> {
    let z = proj.apply(tape, units)?;
    Ok(tape.relu(z))
}

/// Projects raw unit features with a ReLU-activated FC layer.
pub fn encode_units(
    raw: &UnitFeatureSequence,
    params: &ParamStore,
    proj: &Linear,
) -> Result<UnitFeatureSequence> {
    let mut tape = Tape::with_params(params);
    let x = tape.constant(raw.units.clone());
    let y = encode_units_on(&mut tape, x, proj)?;
    Ok(UnitFeatureSequence {
        units: tape.value(y).clone(),
        duration_seconds: raw.duration_seconds,
    })
}

pub fn make_clips_on(tape: &mut Tape<'_>, units: Var, n_clips: usize) -> Result<Var> {
    let l = tape.shape(units)[0];
    if n_clips == 0 || l % n_clips != 0 {
        return Err(input_err!(
            "{} clips do not divide {} units; pad the units first",
            n_clips,
            l
        ));
    }
    tape.segment_mean(units, n_clips)
}

/// Mean-pools consecutive equal runs of units into `n_clips` clips.
pub fn make_clips(units: &UnitFeatureSequence, n_clips: usize, stage: usize) -> Result<ClipSet> {
    let mut tape = Tape::new();
    let x = tape.constant(units.units.clone());
    let c = make_clips_on(&mut tape, x, n_clips)?;
    Ok(ClipSet {
        stage,
        clips: tape.value(c).clone(),
        modulated: false,
    })
}

/// Sinusoidal table `[n, d]`: `sin(i / 10000^(2k/d))` at column `2k` and the
/// matching cosine at `2k + 1`.
pub fn positional_encoding(n: usize, d: usize) -> Result<Tensor> {
    if d % 2 != 0 {
        return Err(config_err!("positional encoding needs an even width, got {}", d));
    }
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        for k in 0..d / 2 {
            let rate = libm::pow(10000.0, (2 * k) as f64 / d as f64);
            let a = i as f64 / rate;
            data.push(libm::sin(a));
            data.push(libm::cos(a));
        }
    }
    Tensor::new(&[n, d], data)
}

pub fn positional_encode_on(tape: &mut Tape<'_>, clips: Var) -> Result<Var> {
    let s = tape.shape(clips);
    let pe = positional_encoding(s[0], s[1])?;
    let pe = tape.constant(pe);
    tape.add(clips, pe)
}

/// Adds the sinusoidal table to every clip when `enabled`.
pub fn positional_encode(clips: &ClipSet, enabled: bool) -> Result<ClipSet> {
    if !enabled {
        return Ok(clips.clone());
    }
    let mut tape = Tape::new();
    let x = tape.constant(clips.clips.clone());
    let y = positional_encode_on(&mut tape, x)?;
    Ok(ClipSet {
        clips: tape.value(y).clone(),
        ..clips.clone()
    })
}

/// Embeds the tokens and runs the stacked LSTM left to right; the top
/// layer's final hidden state is the query vector.
pub fn encode_query_on(
    tape: &mut Tape<'_>,
    tokens: &[usize],
    embed: ParamId,
    layers: &[LstmLayer],
) -> Result<Var> {
    if layers.is_empty() {
        return Err(config_err!("query encoder needs at least one LSTM layer"));
    }
    let table = tape.param(embed);
    let vocab = tape.shape(table)[0];
    if tokens.is_empty() {
        return Err(input_err!("empty query"));
    }
    if let Some(bad) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(input_err!("token id {} outside vocabulary of {}", bad, vocab));
    }
    let emb = tape.gather(table, tokens)?;
    let weights: Vec<LstmWeights> = layers.iter().map(|l| l.on_tape(tape)).collect();
    let mut state = Vec::with_capacity(layers.len());
    for w in &weights {
        let dh = tape.shape(w.w_h)[0];
        let h = tape.constant(Tensor::zeros(&[dh]));
        let c = tape.constant(Tensor::zeros(&[dh]));
        state.push((h, c));
    }
    for t in 0..tokens.len() {
        let mut x = tape.select_row(emb, t)?;
        for (w, st) in weights.iter().zip(state.iter_mut()) {
            let (h, c) = tape.lstm_cell(x, st.0, st.1, *w)?;
            *st = (h, c);
            x = h;
        }
    }
    Ok(state.last().expect("non-empty").0)
}

pub fn encode_query(
    query: &QueryTokens,
    params: &ParamStore,
    embed: ParamId,
    layers: &[LstmLayer],
) -> Result<QueryVector> {
    query.validate()?;
    let mut tape = Tape::with_params(params);
    let f = encode_query_on(&mut tape, &query.ids, embed, layers)?;
    Ok(QueryVector {
        f_s: tape.value(f).clone(),
    })
}

/// Rescales clips `[n, d]` by `sigmoid(W (h ⊙ c_i) + b)` where `h` is the
/// global max of the previous stage's map `[d, m, m]`.
pub fn cfm_modulate_on(tape: &mut Tape<'_>, clips: Var, h_prev: Var, cfm: &Linear) -> Result<Var> {
    let hs = tape.shape(h_prev).to_vec();
    let cs = tape.shape(clips);
    if hs.len() != 3 || cs.len() != 2 || hs[0] != cs[1] || hs[1] != hs[2] {
        return Err(crate::error::shape_err!(
            "cfm: previous map {:?} does not match clips {:?}",
            hs,
            cs
        ));
    }
    let pooled = tape.pool2d(h_prev, PoolMode::Max, hs[1], hs[1])?;
    let h = tape.reshape(pooled, &[hs[0]])?;
    let hc = tape.scale_features(clips, h)?;
    let z = cfm.apply(tape, hc)?;
    let a = tape.sigmoid(z);
    tape.mul(clips, a)
}

pub fn cfm_modulate(
    clips: &ClipSet,
    h_prev: &Tensor,
    params: &ParamStore,
    cfm: &Linear,
) -> Result<ClipSet> {
    if clips.stage <= 1 {
        return Err(Error::Contract(alloc::format!(
            "feature modulation needs a previous stage, got stage {}",
            clips.stage
        )));
    }
    let mut tape = Tape::with_params(params);
    let c = tape.constant(clips.clips.clone());
    let h = tape.constant(h_prev.clone());
    let y = cfm_modulate_on(&mut tape, c, h, cfm)?;
    Ok(ClipSet {
        stage: clips.stage,
        clips: tape.value(y).clone(),
        modulated: true,
    })
}
