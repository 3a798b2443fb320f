//! TOML run configuration with named presets.
//!
//! A file is merged over its preset (or the `synthetic` preset when none is
//! named), then over the built-in defaults. The run-level `seed` is
//! mandatory and seeds data generation, initialisation and shuffling.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use pln_core::branch::{HeadKind, ModelConfig};
use pln_core::eval::{EvalConfig, Strategy};
use pln_core::training::{GeneratorConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::dataset;

pub const PRESETS: &[(&str, &str)] = &[
    (
        "synthetic",
        r#"
[model]
stages = [8, 32]
[train]
lr = 1e-3
batch_size = 8
epochs = 4
val_queries = 100
[data]
n_val = 500
[data.generator]
n_samples = 2500
l_v = 64
[eval]
nms_threshold = 0.5
"#,
    ),
    (
        "tacos-like",
        r#"
[model]
stages = [32, 128]
[train]
lr = 1e-4
batch_size = 32
epochs = 50
tau = 0.5
[data.generator]
l_v = 256
[eval]
nms_threshold = 0.4
"#,
    ),
    (
        "activitynet-like",
        r#"
[model]
stages = [16, 64]
positional_encoding = true
[train]
lr = 1e-4
batch_size = 32
epochs = 50
tau = 0.5
[data.generator]
l_v = 128
[eval]
nms_threshold = 0.5
"#,
    ),
    (
        "charades-like",
        r#"
[model]
stages = [16, 64]
[train]
lr = 1e-4
batch_size = 32
epochs = 50
tau = 0.5
[data.generator]
l_v = 64
length_distribution = { kind = "uniform", min_units = 6.0, max_frac = 0.5 }
[eval]
nms_threshold = 0.45
"#,
    ),
];

/// Model options; widths of the inputs come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub stages: Vec<usize>,
    pub d: usize,
    pub head: HeadKind,
    pub positional_encoding: bool,
    pub cfm: bool,
    pub uc: bool,
    pub lstm_layers: usize,
    pub share_cfm: bool,
    pub share_fuse: bool,
    pub dense_len: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            stages: m.stages,
            d: m.d,
            head: m.head,
            positional_encoding: m.positional_encoding,
            cfm: m.cfm,
            uc: m.uc,
            lstm_layers: m.lstm_layers,
            share_cfm: m.share_cfm,
            share_fuse: m.share_fuse,
            dense_len: m.dense_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lambdas: Option<Vec<f64>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub tau: f64,
    /// Held-out queries scored after each epoch; `None` uses the whole split.
    pub val_queries: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lambdas: t.lambdas,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            batch_size: t.batch_size,
            epochs: t.epochs,
            tau: t.tau,
            val_queries: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Existing dataset file; when absent the generator runs in memory.
    pub path: Option<PathBuf>,
    /// The last `n_val` samples are held out for validation and evaluation.
    pub n_val: usize,
    pub generator: GeneratorConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            n_val: 500,
            generator: GeneratorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// 1 ranks one stage's map, 2 fuses all stages.
    pub strategy: u8,
    /// Stage ranked by strategy 1; defaults to the last.
    pub t: Option<usize>,
    pub nms_threshold: f64,
    pub n_buckets: usize,
    pub topk: usize,
    /// Seed offset of the random-scoring baseline.
    pub baseline_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            strategy: 1,
            t: None,
            nms_threshold: e.nms_threshold,
            n_buckets: e.n_buckets,
            topk: e.topk,
            baseline_seed: 1,
        }
    }
}

/// One row of an ablation grid; unset fields keep the base model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub stages: Option<Vec<usize>>,
    #[serde(default)]
    pub cfm: Option<bool>,
    #[serde(default)]
    pub uc: Option<bool>,
    #[serde(default)]
    pub head: Option<HeadKind>,
}

impl Variant {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.into(),
            stages: None,
            cfm: None,
            uc: None,
            head: None,
        }
    }

    pub fn apply(&self, base: &ModelSection) -> ModelSection {
        let mut m = base.clone();
        if let Some(s) = &self.stages {
            m.stages = s.clone();
        }
        if let Some(c) = self.cfm {
            m.cfm = c;
        }
        if let Some(u) = self.uc {
            m.uc = u;
        }
        if let Some(h) = self.head {
            m.head = h;
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub variants: Vec<Variant>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            variants: vec![
                Variant::named("full"),
                Variant {
                    cfm: Some(false),
                    ..Variant::named("no-cfm")
                },
                Variant {
                    uc: Some(false),
                    ..Variant::named("no-uc")
                },
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub ablate: AblateSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

/// Data facts the model shape depends on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataShape {
    pub l_v: usize,
    pub d_raw: usize,
    pub vocab_size: usize,
}

pub fn preset_table(name: &str) -> Result<Table> {
    let (_, text) = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            anyhow!("unknown preset {name:?}; known presets: {}", names.join(", "))
        })?;
    Ok(text.parse::<Table>().expect("built-in presets parse"))
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

const DERIVED_KEYS: &[(&str, &str)] = &[
    ("model", "seed"),
    ("model", "d_raw"),
    ("model", "vocab_size"),
    ("train", "seed"),
];

impl RunConfig {
    /// Parses TOML text; `preset` overrides the file's own `preset` key.
    pub fn from_toml(text: &str, preset: Option<&str>) -> Result<Self> {
        let user: Table = text.parse().context("parsing config")?;
        // A resolved config repeats the run seed here; anything else conflicts.
        if let Some(g) = user
            .get("data")
            .and_then(|d| d.get("generator"))
            .and_then(|g| g.get("seed"))
        {
            if user.get("seed") != Some(g) {
                bail!("data.generator.seed = {g} is not allowed; set the run-level `seed`");
            }
        }
        for (section, key) in DERIVED_KEYS {
            if user.get(*section).and_then(|s| s.get(*key)).is_some() {
                bail!("{section}.{key} is derived and may not be set; use the run-level `seed` or the data");
            }
        }
        let name = preset
            .map(str::to_string)
            .or_else(|| user.get("preset").and_then(|p| p.as_str()).map(str::to_string))
            .unwrap_or_else(|| "synthetic".to_string());
        let mut table = preset_table(&name)?;
        merge(&mut table, user);
        table.insert("preset".into(), Value::String(name));
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| anyhow!("invalid config: {}", e.message()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset: Option<&str>) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text, preset).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        let mut resolved = self.clone();
        resolved.data.generator.seed = self.seed;
        toml::to_string(&resolved).expect("config serializes")
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            seed: self.seed,
            ..self.data.generator.clone()
        }
    }

    pub fn data_shape(&self) -> Result<DataShape> {
        match &self.data.path {
            Some(p) => {
                let h = dataset::read_header(p)?;
                Ok(DataShape {
                    l_v: h.l_v,
                    d_raw: h.d_raw,
                    vocab_size: h.vocab_size,
                })
            }
            None => {
                let g = &self.data.generator;
                Ok(DataShape {
                    l_v: g.l_v,
                    d_raw: g.d_raw,
                    vocab_size: g.vocab_size(),
                })
            }
        }
    }

    pub fn model_for(&self, section: &ModelSection, shape: DataShape) -> ModelConfig {
        ModelConfig {
            d_raw: shape.d_raw,
            d: section.d,
            vocab_size: shape.vocab_size,
            lstm_layers: section.lstm_layers,
            stages: section.stages.clone(),
            head: section.head,
            positional_encoding: section.positional_encoding,
            cfm: section.cfm,
            uc: section.uc,
            share_cfm: section.share_cfm,
            share_fuse: section.share_fuse,
            dense_len: section.dense_len,
            seed: self.seed,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(self.model_for(&self.model, self.data_shape()?))
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lambdas: t.lambdas.clone(),
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            batch_size: t.batch_size,
            epochs: t.epochs,
            tau: t.tau,
            seed: self.seed,
            nms_threshold: self.eval.nms_threshold,
        }
    }

    pub fn eval_config(&self, n_stages: usize) -> Result<EvalConfig> {
        let strategy = match self.eval.strategy {
            1 => Strategy::Select(self.eval.t.unwrap_or(n_stages)),
            2 => Strategy::Fused,
            s => bail!("eval.strategy must be 1 or 2, got {s}"),
        };
        let cfg = EvalConfig {
            strategy,
            nms_threshold: self.eval.nms_threshold,
            n_buckets: self.eval.n_buckets,
            topk: self.eval.topk,
        };
        cfg.validate(n_stages)?;
        Ok(cfg)
    }

    /// Checks everything that could otherwise fail at runtime on shapes.
    pub fn validate(&self) -> Result<()> {
        if let Some(p) = &self.data.path {
            if !p.exists() {
                bail!("dataset {} does not exist", p.display());
            }
        } else {
            self.generator().validate()?;
        }
        let shape = self.data_shape()?;
        let n_samples = match &self.data.path {
            Some(p) => dataset::read_header(p)?.n_samples,
            None => self.data.generator.n_samples,
        };
        if self.data.n_val >= n_samples {
            bail!("n_val = {} leaves no training data out of {n_samples}", self.data.n_val);
        }
        let mut sections = vec![self.model.clone()];
        sections.extend(self.ablate.variants.iter().map(|v| v.apply(&self.model)));
        for section in &sections {
            let mc = self.model_for(section, shape);
            mc.validate()?;
            self.train_config().validate(mc.stages.len())?;
        }
        self.eval_config(self.model.stages.len())?;
        let mut names: Vec<&str> = self.ablate.variants.iter().map(|v| v.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            bail!("ablation variant names must be unique");
        }
        Ok(())
    }
}

/// Parses `8,32` into clip counts.
pub fn parse_stages(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<usize>()
                .map_err(|e| anyhow!("bad stage list {s:?}: {e}"))
        })
        .collect()
}
