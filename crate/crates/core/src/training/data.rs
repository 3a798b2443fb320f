//! Seeded planted-moment corpus.
//!
//! Every activity owns a fixed Gaussian signature. A video is a sequence of
//! activity segments; the query names one activity and the target span is
//! the only segment showing it.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoders::pad_units_to_multiple;
use crate::error::{config_err, Result};
use crate::tensor::Tensor;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const FILLER: usize = 2;
const FIRST_ACTIVITY_TOKEN: usize = 3;

/// Distribution of the target length as a fraction of the video.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthDistribution {
    /// Log-uniform over `[min_units / l_v, max_frac]`.
    LogUniform { min_units: f64, max_frac: f64 },
    Uniform { min_units: f64, max_frac: f64 },
}

impl Default for LengthDistribution {
    fn default() -> Self {
        LengthDistribution::LogUniform {
            min_units: 2.0,
            max_frac: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_samples: usize,
    /// Units per video; one unit spans one second.
    pub l_v: usize,
    pub d_raw: usize,
    pub n_activities: usize,
    /// Tokens per query, including BOS and EOS.
    pub query_len: usize,
    pub length_distribution: LengthDistribution,
    pub noise_sigma: f64,
    /// Distractor segment lengths are drawn uniformly from this range.
    pub distractor_min: usize,
    pub distractor_max: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_samples: 2500,
            l_v: 64,
            d_raw: 16,
            n_activities: 8,
            query_len: 3,
            length_distribution: LengthDistribution::default(),
            noise_sigma: 0.5,
            distractor_min: 2,
            distractor_max: 12,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn vocab_size(&self) -> usize {
        self.n_activities + FIRST_ACTIVITY_TOKEN
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(config_err!("n_samples must be positive"));
        }
        if self.n_activities < 2 {
            return Err(config_err!("need at least two activities"));
        }
        if self.l_v < 8 {
            return Err(config_err!("l_v must be at least 8, got {}", self.l_v));
        }
        if self.query_len < 3 {
            return Err(config_err!("query_len must be at least 3"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(config_err!("noise_sigma must be finite and non-negative"));
        }
        if self.distractor_min == 0 || self.distractor_max < self.distractor_min {
            return Err(config_err!("invalid distractor length range"));
        }
        let (min_units, max_frac) = match self.length_distribution {
            LengthDistribution::LogUniform { min_units, max_frac }
            | LengthDistribution::Uniform { min_units, max_frac } => (min_units, max_frac),
        };
        if !(min_units > 0.0 && max_frac > 0.0 && max_frac <= 1.0 && min_units <= max_frac * self.l_v as f64)
        {
            return Err(config_err!("invalid length distribution {:?}", self.length_distribution));
        }
        Ok(())
    }

    fn draw_fraction<R: Rng>(&self, rng: &mut R) -> f64 {
        let lv = self.l_v as f64;
        match self.length_distribution {
            LengthDistribution::LogUniform { min_units, max_frac } => {
                let (lo, hi) = (libm::log(min_units / lv), libm::log(max_frac));
                libm::exp(lo + (hi - lo) * rng.random::<f64>())
            }
            LengthDistribution::Uniform { min_units, max_frac } => {
                let lo = min_units / lv;
                lo + (max_frac - lo) * rng.random::<f64>()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `[l_v, d_raw]`
    pub units: Tensor,
    pub tokens: Vec<usize>,
    pub gt_start_sec: f64,
    pub gt_end_sec: f64,
    pub duration_seconds: f64,
    pub activity_id: usize,
}

impl SyntheticSample {
    pub fn gt(&self) -> (f64, f64) {
        (self.gt_start_sec, self.gt_end_sec)
    }

    pub fn length_fraction(&self) -> f64 {
        (self.gt_end_sec - self.gt_start_sec) / self.duration_seconds
    }

    /// Repeats the last unit up to a multiple of `n` units. The duration
    /// grows with the units so each unit keeps its length in seconds.
    pub fn padded_to_multiple(&self, n: usize) -> Result<Self> {
        let l = self.units.shape()[0];
        let units = pad_units_to_multiple(&self.units, n)?;
        let duration_seconds = self.duration_seconds * units.shape()[0] as f64 / l as f64;
        Ok(Self {
            units,
            tokens: self.tokens.clone(),
            duration_seconds,
            ..*self
        })
    }
}

pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Vec<SyntheticSample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let signatures = draw_signatures(cfg, &mut rng);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| config_err!("noise: {}", e))?;
    let lv = cfg.l_v;
    let max_len = ((0.8 * lv as f64) as usize).max(1);
    let mut out = Vec::with_capacity(cfg.n_samples);
    for _ in 0..cfg.n_samples {
        let activity = rng.random_range(0..cfg.n_activities);
        let frac = cfg.draw_fraction(&mut rng);
        let len = (libm::round(frac * lv as f64) as usize).clamp(1, max_len);
        let start = rng.random_range(0..=lv - len);

        let mut labels = vec![activity; lv];
        let mut pos = 0;
        while pos < lv {
            if pos == start {
                pos += len;
                continue;
            }
            let limit = if pos < start { start } else { lv };
            let seg = rng
                .random_range(cfg.distractor_min..=cfg.distractor_max)
                .min(limit - pos);
            let mut other = rng.random_range(0..cfg.n_activities - 1);
            if other >= activity {
                other += 1;
            }
            labels[pos..pos + seg].fill(other);
            pos += seg;
        }

        let mut data = Vec::with_capacity(lv * cfg.d_raw);
        for &a in &labels {
            for &s in &signatures[a] {
                let e = if cfg.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                data.push(s + e);
            }
        }
        let mut tokens = vec![FILLER; cfg.query_len];
        tokens[0] = BOS;
        tokens[1] = FIRST_ACTIVITY_TOKEN + activity;
        tokens[cfg.query_len - 1] = EOS;
        out.push(SyntheticSample {
            units: Tensor::new(&[lv, cfg.d_raw], data)?,
            tokens,
            gt_start_sec: start as f64,
            gt_end_sec: (start + len) as f64,
            duration_seconds: lv as f64,
            activity_id: activity,
        });
    }
    Ok(out)
}

/// Activity signatures, regenerated from the seed.
pub fn signatures(cfg: &GeneratorConfig) -> Vec<Vec<f64>> {
    draw_signatures(cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

fn draw_signatures<R: Rng>(cfg: &GeneratorConfig, rng: &mut R) -> Vec<Vec<f64>> {
    (0..cfg.n_activities)
        .map(|_| (0..cfg.d_raw).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> GeneratorConfig {
        GeneratorConfig {
            n_samples: n,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate_dataset(&small(20)).unwrap(), generate_dataset(&small(20)).unwrap());
    }

    #[test]
    fn noiseless_span_equals_signature() {
        let cfg = GeneratorConfig {
            noise_sigma: 0.0,
            ..small(30)
        };
        let sig = signatures(&cfg);
        for s in generate_dataset(&cfg).unwrap() {
            let d = cfg.d_raw;
            let (a, b) = (s.gt_start_sec as usize, s.gt_end_sec as usize);
            for u in 0..cfg.l_v {
                let row = &s.units.data()[u * d..(u + 1) * d];
                let inside = (a..b).contains(&u);
                assert_eq!(row == sig[s.activity_id].as_slice(), inside, "unit {u}");
            }
        }
    }

    #[test]
    fn samples_are_well_formed() {
        let cfg = small(200);
        for s in generate_dataset(&cfg).unwrap() {
            assert!(0.0 <= s.gt_start_sec && s.gt_start_sec < s.gt_end_sec);
            assert!(s.gt_end_sec <= s.duration_seconds);
            assert!(s.length_fraction() <= 0.8 + 1e-12);
            assert_eq!(s.tokens, vec![BOS, 3 + s.activity_id, EOS]);
        }
    }

    #[test]
    fn padding_keeps_seconds_per_unit() {
        let s = generate_dataset(&GeneratorConfig { l_v: 30, ..small(1) }).unwrap().remove(0);
        let p = s.padded_to_multiple(8).unwrap();
        assert_eq!(p.units.shape(), &[32, s.units.shape()[1]]);
        assert_eq!(p.duration_seconds, 32.0);
        assert_eq!(p.gt(), s.gt());
        assert_eq!(&p.units.data()[31 * 16..], &s.units.data()[29 * 16..]);
        assert_eq!(s.padded_to_multiple(10).unwrap(), s);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(generate_dataset(&small(0)).is_err());
        assert!(generate_dataset(&GeneratorConfig {
            n_activities: 1,
            ..small(5)
        })
        .is_err());
        assert!(generate_dataset(&GeneratorConfig { l_v: 4, ..small(5) }).is_err());
    }
}
