//! Localization branches and the progressive multi-stage model.
//!
//! Stage `t` sees the video at `n_t` clips. Every stage after the first
//! rescales its clips from the previous stage's feature map and injects an
//! upsampled copy of that map into its fused moment features before the
//! shared convolution stack.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{fan_in_uniform, ElementwiseMode, ParamId, ParamStore, Tape, Var};
use crate::encoders::{
    cfm_modulate_on, encode_query_on, encode_units_on, make_clips_on, positional_encode_on, Linear,
    LstmLayer,
};
use crate::error::{config_err, shape_err, Error, Result};
use crate::temporal_map::{default_dense_len, TemporalMask};
use crate::tensor::Tensor;

/// Relevance head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// 1x1 convolution over the stage feature map.
    Convnet,
    /// Inner product of each cell with a projection of the query.
    Dot,
}

impl core::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "convnet" | "convnet_fc" => Ok(HeadKind::Convnet),
            "dot" | "dot_product" => Ok(HeadKind::Dot),
            other => Err(config_err!("unknown head {:?}", other)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of the raw unit features.
    pub d_raw: usize,
    /// Shared hidden width.
    pub d: usize,
    pub vocab_size: usize,
    pub lstm_layers: usize,
    /// Clip count per stage, coarse to fine.
    pub stages: Vec<usize>,
    pub head: HeadKind,
    pub positional_encoding: bool,
    pub cfm: bool,
    pub uc: bool,
    /// One modulation layer for every later stage instead of one per stage.
    pub share_cfm: bool,
    /// One pair of fusion projections for every stage.
    pub share_fuse: bool,
    /// Dense sampling length; `None` picks `max(2, n / 8)` per stage.
    pub dense_len: Option<usize>,
    /// Initialisation seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_raw: 16,
            d: 32,
            vocab_size: 11,
            lstm_layers: 1,
            stages: alloc::vec![8, 32],
            head: HeadKind::Convnet,
            positional_encoding: false,
            cfm: true,
            uc: true,
            share_cfm: false,
            share_fuse: false,
            dense_len: None,
            seed: 0,
        }
    }
}

/// Per-stage view derived from a [`ModelConfig`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageConfig {
    pub n_clips: usize,
    pub is_first: bool,
    pub lambda: f64,
    /// Number of x2 upsampling blocks from the previous stage.
    pub uc_blocks: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_raw == 0 || self.vocab_size == 0 {
            return Err(config_err!("widths and vocabulary must be positive"));
        }
        if self.lstm_layers == 0 {
            return Err(config_err!("at least one LSTM layer is required"));
        }
        if self.stages.is_empty() || self.stages.contains(&0) {
            return Err(config_err!("stage clip counts must be positive: {:?}", self.stages));
        }
        if self.positional_encoding && self.d % 2 != 0 {
            return Err(config_err!("positional encoding needs an even width, got {}", self.d));
        }
        if self.dense_len == Some(0) {
            return Err(config_err!("dense_len must be at least 1"));
        }
        for w in self.stages.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b < a || b % a != 0 || !(b / a).is_power_of_two() {
                return Err(config_err!(
                    "stage clip counts must grow by powers of two: {:?}",
                    self.stages
                ));
            }
        }
        Ok(())
    }

    pub fn stage_configs(&self, lambdas: &[f64]) -> Result<Vec<StageConfig>> {
        self.validate()?;
        if lambdas.len() != self.stages.len() {
            return Err(config_err!(
                "{} loss weights for {} stages",
                lambdas.len(),
                self.stages.len()
            ));
        }
        Ok(self
            .stages
            .iter()
            .enumerate()
            .map(|(t, &n)| StageConfig {
                n_clips: n,
                is_first: t == 0,
                lambda: lambdas[t],
                uc_blocks: if t == 0 {
                    0
                } else {
                    (n / self.stages[t - 1]).trailing_zeros() as usize
                },
            })
            .collect())
    }

    pub fn dense_len_for(&self, n: usize) -> usize {
        self.dense_len.unwrap_or_else(|| default_dense_len(n))
    }

    /// Units per video must be a multiple of this.
    pub fn finest(&self) -> usize {
        self.stages.iter().copied().max().unwrap_or(1)
    }

    /// Stable 64-bit digest of every field.
    pub fn hash(&self) -> u64 {
        let text = format!("{self:?}");
        let digest = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// Convolution weights: `kernel` is `[c_out, c_in, k, k]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl Conv {
    fn apply(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let k = tape.param(self.kernel);
        let b = tape.param(self.bias);
        let pad = tape.shape(k)[2] / 2;
        tape.conv2d(x, k, Some(b), pad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Convnet(Conv),
    Dot(Linear),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageParams {
    pub fuse_v: Conv,
    pub fuse_s: Linear,
    pub head: Head,
    pub cfm: Option<Linear>,
    /// Two 3x3 convolutions per upsampling block.
    pub uc: Vec<[Conv; 2]>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub unit_proj: Linear,
    pub embed: ParamId,
    pub lstm: Vec<LstmLayer>,
    pub conv_stack: [Conv; 2],
    pub stages: Vec<StageParams>,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    seed: u64,
}

impl Builder<'_> {
    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        let digest = Sha256::digest(name.as_bytes());
        let h = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        ChaCha8Rng::seed_from_u64(self.seed ^ h)
    }

    fn tensor(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        if let Some(id) = self.store.find(name) {
            return id;
        }
        let mut rng = self.rng_for(name);
        let t = fan_in_uniform(shape, fan_in, &mut rng);
        self.store.add(name, t)
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        Linear {
            weight: self.tensor(&format!("{name}.weight"), &[din, dout], din),
            bias: self.tensor(&format!("{name}.bias"), &[dout], din),
        }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let fan_in = cin * k * k;
        Conv {
            kernel: self.tensor(&format!("{name}.kernel"), &[cout, cin, k, k], fan_in),
            bias: self.tensor(&format!("{name}.bias"), &[cout], fan_in),
        }
    }
}

fn build_layout(config: &ModelConfig, store: &mut ParamStore) -> Layout {
    let d = config.d;
    let mut b = Builder {
        store,
        seed: config.seed,
    };
    let unit_proj = b.linear("unit_proj", config.d_raw, d);
    let embed = b.tensor("embed", &[config.vocab_size, d], 1);
    let lstm = (0..config.lstm_layers)
        .map(|l| LstmLayer {
            w_x: b.tensor(&format!("lstm{l}.w_x"), &[d, 4 * d], d),
            w_h: b.tensor(&format!("lstm{l}.w_h"), &[d, 4 * d], d),
            bias: b.tensor(&format!("lstm{l}.bias"), &[4 * d], d),
        })
        .collect();
    let conv_stack = [b.conv("conv_stack.0", d, d, 5), b.conv("conv_stack.1", d, d, 5)];
    let mut stages = Vec::with_capacity(config.stages.len());
    for (t, &n) in config.stages.iter().enumerate() {
        let label = t + 1;
        let fuse_prefix = if config.share_fuse {
            String::from("fuse")
        } else {
            format!("stage{label}.fuse")
        };
        let fuse_v = b.conv(&format!("{fuse_prefix}.v"), d, d, 1);
        let fuse_s = b.linear(&format!("{fuse_prefix}.s"), d, d);
        let head = match config.head {
            HeadKind::Convnet => Head::Convnet(b.conv(&format!("stage{label}.head"), d, 1, 1)),
            HeadKind::Dot => Head::Dot(b.linear(&format!("stage{label}.head"), d, d)),
        };
        let (cfm, uc) = if t == 0 {
            (None, Vec::new())
        } else {
            let cfm = config.cfm.then(|| {
                if config.share_cfm {
                    b.linear("cfm", d, d)
                } else {
                    b.linear(&format!("stage{label}.cfm"), d, d)
                }
            });
            let blocks = if config.uc {
                (n / config.stages[t - 1]).trailing_zeros() as usize
            } else {
                0
            };
            let uc = (0..blocks)
                .map(|k| {
                    [
                        b.conv(&format!("stage{label}.uc.{k}.0"), d, d, 3),
                        b.conv(&format!("stage{label}.uc.{k}.1"), d, d, 3),
                    ]
                })
                .collect();
            (cfm, uc)
        };
        stages.push(StageParams {
            fuse_v,
            fuse_s,
            head,
            cfm,
            uc,
        });
    }
    Layout {
        unit_proj,
        embed,
        lstm,
        conv_stack,
        stages,
    }
}

/// Tape handles of one stage's intermediate maps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BranchState {
    pub stage: usize,
    pub n: usize,
    /// Fused map `[d, n, n]`.
    pub fused: Var,
    /// Fused map after injection of the previous stage.
    pub injected: Var,
    /// Convolution stack output `[d, n, n]`.
    pub features: Var,
    /// Relevance probabilities `[1, n, n]`.
    pub scores: Var,
    pub cfm_applied: bool,
    pub uc_applied: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub query: Var,
    pub stages: Vec<BranchState>,
}

/// Relevance scores of one stage in row-major `n x n` order.
///
/// Cells outside the sampling mask hold `f64::NEG_INFINITY`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub stage: usize,
    pub n: usize,
    pub duration: f64,
    pub scores: Vec<f64>,
    pub mask: TemporalMask,
}

impl ScoreMap {
    pub fn from_probs(stage: usize, duration: f64, probs: &[f64], mask: &TemporalMask) -> Self {
        let scores = probs
            .iter()
            .zip(&mask.sample)
            .map(|(&p, &s)| if s { p } else { f64::NEG_INFINITY })
            .collect();
        Self {
            stage,
            n: mask.n,
            duration,
            scores,
            mask: mask.clone(),
        }
    }

    pub fn score(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.n + j]
    }
}

/// Multiplies each cell's projected moment feature by the projected query;
/// cells outside `sample` are zeroed.
pub fn fuse(
    tape: &mut Tape<'_>,
    map: Var,
    query: Var,
    params: &StageParams,
    sample: &[bool],
) -> Result<Var> {
    let fv = params.fuse_v.apply(tape, map)?;
    let fs = params.fuse_s.apply(tape, query)?;
    let f = tape.scale_channels(fv, fs)?;
    tape.mask(f, sample)
}

/// `blocks` rounds of (x2 upsample, 3x3 conv + ReLU, 3x3 conv + ReLU).
pub fn upsampling_connection(tape: &mut Tape<'_>, h_prev: Var, blocks: &[[Conv; 2]]) -> Result<Var> {
    let mut x = h_prev;
    for block in blocks {
        x = tape.upsample2x(x)?;
        for conv in block {
            let y = conv.apply(tape, x)?;
            x = tape.relu(y);
        }
    }
    Ok(x)
}

/// Elementwise max of the fused map and the lifted previous map.
pub fn inject_previous(tape: &mut Tape<'_>, fused: Var, lifted: Option<Var>) -> Result<Var> {
    match lifted {
        None => Ok(fused),
        Some(up) => {
            if tape.shape(up) != tape.shape(fused) {
                return Err(config_err!(
                    "lifted map {:?} does not match fused map {:?}",
                    tape.shape(up),
                    tape.shape(fused)
                ));
            }
            tape.elementwise(fused, up, ElementwiseMode::Max)
        }
    }
}

/// Two same-padded 5x5 convolutions, each followed by ReLU.
pub fn conv_stack(tape: &mut Tape<'_>, g: Var, convs: &[Conv; 2]) -> Result<Var> {
    let mut x = g;
    for conv in convs {
        let y = conv.apply(tape, x)?;
        x = tape.relu(y);
    }
    Ok(x)
}

/// Relevance probabilities `[1, n, n]`.
pub fn predict_scores(tape: &mut Tape<'_>, features: Var, head: &Head, query: Var) -> Result<Var> {
    let logits = match head {
        Head::Convnet(conv) => conv.apply(tape, features)?,
        Head::Dot(proj) => {
            let d = tape.shape(features)[0];
            let q = proj.apply(tape, query)?;
            if tape.shape(q) != [d] {
                return Err(shape_err!(
                    "dot head: query projection {:?} vs {} channels",
                    tape.shape(q),
                    d
                ));
            }
            let k = tape.reshape(q, &[1, d, 1, 1])?;
            tape.conv2d(features, k, None, 0)?
        }
    };
    Ok(tape.sigmoid(logits))
}

/// The progressive localization network.
#[derive(Clone, Debug, PartialEq)]
pub struct Pln {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
    masks: Vec<TemporalMask>,
}

impl Pln {
    /// A freshly initialised model.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = build_layout(&config, &mut params);
        let masks = config
            .stages
            .iter()
            .map(|&n| TemporalMask::new(n, config.dense_len_for(n)))
            .collect();
        Ok(Self {
            config,
            params,
            layout,
            masks,
        })
    }

    /// Rebuilds a model around stored parameters; names and shapes must match
    /// the layout `config` implies.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(config)?;
        if fresh.params.len() != params.len() {
            return Err(config_err!(
                "expected {} parameter tensors, found {}",
                fresh.params.len(),
                params.len()
            ));
        }
        for (_, name, t) in fresh.params.iter() {
            let other = params
                .find(name)
                .ok_or_else(|| config_err!("missing parameter {}", name))?;
            if params.get(other).shape() != t.shape() {
                return Err(shape_err!(
                    "parameter {} has shape {:?}, expected {:?}",
                    name,
                    params.get(other).shape(),
                    t.shape()
                ));
            }
        }
        // Re-register in layout order so ids line up.
        let mut ordered = ParamStore::new();
        for (_, name, _) in fresh.params.iter() {
            let src = params.find(name).expect("checked");
            ordered.add(name, params.get(src).clone());
        }
        Ok(Self {
            params: ordered,
            ..fresh
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn masks(&self) -> &[TemporalMask] {
        &self.masks
    }

    pub fn num_stages(&self) -> usize {
        self.config.stages.len()
    }

    pub fn tape(&self) -> Tape<'_> {
        Tape::with_params(&self.params)
    }

    /// Records the full multi-stage forward pass.
    ///
    /// `units` is `[l_v, d_raw]` with `l_v` a multiple of every stage's clip
    /// count.
    pub fn forward(&self, tape: &mut Tape<'_>, units: &Tensor, tokens: &[usize]) -> Result<ForwardTrace> {
        let us = units.shape();
        if us.len() != 2 || us[1] != self.config.d_raw {
            return Err(shape_err!(
                "units {:?}, expected [l_v, {}]",
                us,
                self.config.d_raw
            ));
        }
        let raw = tape.constant(units.clone());
        let projected = encode_units_on(tape, raw, &self.layout.unit_proj)?;
        let query = encode_query_on(tape, tokens, self.layout.embed, &self.layout.lstm)?;

        let mut states: Vec<BranchState> = Vec::with_capacity(self.num_stages());
        for (t, (&n, sp)) in self.config.stages.iter().zip(&self.layout.stages).enumerate() {
            let mut clips = make_clips_on(tape, projected, n)?;
            if self.config.positional_encoding {
                clips = positional_encode_on(tape, clips)?;
            }
            let prev = states.last().map(|s| s.features);
            let mut cfm_applied = false;
            if let (Some(h_prev), Some(cfm)) = (prev, sp.cfm.as_ref()) {
                clips = cfm_modulate_on(tape, clips, h_prev, cfm)?;
                cfm_applied = true;
            }
            let map = tape.moment_map(clips)?;
            let fused = fuse(tape, map, query, sp, &self.masks[t].sample)?;
            let lifted = match prev {
                Some(h_prev) if self.config.uc => {
                    Some(upsampling_connection(tape, h_prev, &sp.uc)?)
                }
                _ => None,
            };
            let uc_applied = lifted.is_some();
            let injected = inject_previous(tape, fused, lifted)?;
            let features = conv_stack(tape, injected, &self.layout.conv_stack)?;
            let scores = predict_scores(tape, features, &sp.head, query)?;
            states.push(BranchState {
                stage: t + 1,
                n,
                fused,
                injected,
                features,
                scores,
                cfm_applied,
                uc_applied,
            });
        }
        Ok(ForwardTrace {
            query,
            stages: states,
        })
    }

    /// Score maps of every stage for one video and query.
    pub fn score_maps(&self, units: &Tensor, tokens: &[usize], duration: f64) -> Result<Vec<ScoreMap>> {
        let mut tape = self.tape();
        let trace = self.forward(&mut tape, units, tokens)?;
        Ok(self.extract_scores(&tape, &trace, duration))
    }

    pub fn extract_scores(&self, tape: &Tape<'_>, trace: &ForwardTrace, duration: f64) -> Vec<ScoreMap> {
        trace
            .stages
            .iter()
            .zip(&self.masks)
            .map(|(s, m)| ScoreMap::from_probs(s.stage, duration, tape.data(s.scores), m))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;

    fn micro(stages: Vec<usize>) -> ModelConfig {
        ModelConfig {
            d_raw: 6,
            d: 4,
            vocab_size: 7,
            stages,
            ..ModelConfig::default()
        }
    }

    fn sample(l: usize, d_raw: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[l, d_raw], 1.0, &mut rng)
    }

    #[test]
    fn validation() {
        assert!(micro(vec![8, 32]).validate().is_ok());
        assert!(micro(vec![8, 8]).validate().is_ok());
        assert!(micro(vec![8, 4]).validate().is_err());
        assert!(micro(vec![8, 24]).validate().is_err());
        assert!(micro(vec![]).validate().is_err());
        let odd_pe = ModelConfig {
            d: 5,
            positional_encoding: true,
            ..micro(vec![4])
        };
        assert!(odd_pe.validate().is_err());
        let sc = micro(vec![8, 32]).stage_configs(&[1.0, 1.5]).unwrap();
        assert_eq!(sc[1].uc_blocks, 2);
        assert!(sc[0].is_first && !sc[1].is_first);
        assert!(micro(vec![8, 32]).stage_configs(&[1.0]).is_err());
    }

    #[test]
    fn head_names_parse() {
        assert_eq!("dot".parse::<HeadKind>().unwrap(), HeadKind::Dot);
        assert_eq!("convnet".parse::<HeadKind>().unwrap(), HeadKind::Convnet);
        assert!("mlp".parse::<HeadKind>().is_err());
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = micro(vec![8, 32]);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.uc = false;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn two_stage_shapes_and_instrumentation() {
        let model = Pln::new(micro(vec![8, 32])).unwrap();
        let mut tape = model.tape();
        let trace = model.forward(&mut tape, &sample(32, 6, 0), &[1, 2, 3]).unwrap();
        assert_eq!(trace.stages.len(), 2);
        assert_eq!(tape.shape(trace.stages[0].scores), &[1, 8, 8]);
        assert_eq!(tape.shape(trace.stages[1].scores), &[1, 32, 32]);
        assert!(!trace.stages[0].cfm_applied && !trace.stages[0].uc_applied);
        assert!(trace.stages[1].cfm_applied && trace.stages[1].uc_applied);
        for s in &trace.stages {
            assert!(tape.data(s.scores).iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn upsampling_connection_shape() {
        let model = Pln::new(ModelConfig {
            d: 2,
            ..micro(vec![32, 128])
        })
        .unwrap();
        let mut tape = model.tape();
        let h = tape.constant(Tensor::full(&[2, 32, 32], 0.5));
        let up = upsampling_connection(&mut tape, h, &model.layout().stages[1].uc).unwrap();
        assert_eq!(tape.shape(up), &[2, 128, 128]);
    }

    #[test]
    fn zero_head_gives_half() {
        let mut model = Pln::new(micro(vec![4])).unwrap();
        let Head::Convnet(conv) = model.layout().stages[0].head else {
            unreachable!()
        };
        model.params_mut().get_mut(conv.kernel).data_mut().fill(0.0);
        model.params_mut().get_mut(conv.bias).data_mut().fill(0.0);
        let maps = model.score_maps(&sample(8, 6, 1), &[0, 1], 8.0).unwrap();
        for (k, &s) in maps[0].scores.iter().enumerate() {
            if maps[0].mask.sample[k] {
                assert_eq!(s, 0.5);
            } else {
                assert_eq!(s, f64::NEG_INFINITY);
            }
        }
    }

    #[test]
    fn from_params_rejects_mismatch() {
        let model = Pln::new(micro(vec![4, 8])).unwrap();
        let again = Pln::from_params(model.config().clone(), model.params().clone()).unwrap();
        assert_eq!(again, model);
        assert!(Pln::from_params(micro(vec![4]), model.params().clone()).is_err());
    }
}
