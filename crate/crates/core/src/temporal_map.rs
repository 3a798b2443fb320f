//! 2D temporal maps of candidate moments and moment/time conversions.
//!
//! Cell `(i, j)` of an `n x n` map is the moment that starts at clip `i` and
//! ends at clip `j` inclusive. Cells with `i > j` are invalid. All masks are
//! stored row-major with index `i * n + j`.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::Tape;
use crate::encoders::ClipSet;
use crate::error::{config_err, input_err, Result};

/// Default length (in clips) below which every moment is kept.
pub fn default_dense_len(n: usize) -> usize {
    (n / 8).max(2)
}

/// `valid[i * n + j] <=> i <= j`.
pub fn valid_mask(n: usize) -> Vec<bool> {
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in i..n {
            m[i * n + j] = true;
        }
    }
    m
}

/// Sparse subset of valid moments.
///
/// A moment of length `l <= dense_len` is always kept. A longer one uses
/// stride `s = 2^o` with `o` the smallest integer such that
/// `dense_len * 2^o >= l`, and is kept iff `i % s == 0` and `(j + 1) % s == 0`.
pub fn sparse_sample_mask(n: usize, dense_len: usize) -> Vec<bool> {
    let dense_len = dense_len.max(1);
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in i..n {
            let len = j - i + 1;
            m[i * n + j] = if len <= dense_len {
                true
            } else {
                let mut stride = 1;
                while dense_len * stride < len {
                    stride *= 2;
                }
                i % stride == 0 && (j + 1) % stride == 0
            };
        }
    }
    m
}

/// Validity and sampling masks for one map size.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalMask {
    pub n: usize,
    pub valid: Vec<bool>,
    pub sample: Vec<bool>,
}

impl TemporalMask {
    pub fn new(n: usize, dense_len: usize) -> Self {
        Self {
            n,
            valid: valid_mask(n),
            sample: sparse_sample_mask(n, dense_len),
        }
    }

    pub fn sampled_count(&self) -> usize {
        self.sample.iter().filter(|&&s| s).count()
    }

    /// Sampled cells in row-major order.
    pub fn sampled_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.n;
        self.sample
            .iter()
            .enumerate()
            .filter(|(_, &s)| s)
            .map(move |(k, _)| (k / n, k % n))
    }
}

/// Moment feature map of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalMap2D {
    pub n: usize,
    pub d: usize,
    /// `[d, n, n]`, channel-major.
    pub features: Vec<f64>,
    pub mask: TemporalMask,
}

impl TemporalMap2D {
    pub fn feature(&self, i: usize, j: usize, channel: usize) -> f64 {
        self.features[(channel * self.n + i) * self.n + j]
    }
}

/// Max-pools clip features over every clip range.
pub fn build_moment_map(clips: &ClipSet, dense_len: usize) -> Result<TemporalMap2D> {
    let shape = clips.clips.shape();
    let (n, d) = (shape[0], shape[1]);
    let mut tape = Tape::new();
    let x = tape.constant(clips.clips.clone());
    let m = tape.moment_map(x)?;
    Ok(TemporalMap2D {
        n,
        d,
        features: tape.data(m).to_vec(),
        mask: TemporalMask::new(n, dense_len),
    })
}

/// A candidate moment on one stage's clip grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moment {
    pub start_clip: usize,
    /// Inclusive.
    pub end_clip: usize,
    pub start_sec: f64,
    pub end_sec: f64,
    pub stage: usize,
}

impl Moment {
    pub fn new(i: usize, j: usize, n: usize, duration: f64, stage: usize) -> Result<Self> {
        let (start_sec, end_sec) = moment_to_seconds(i, j, n, duration)?;
        Ok(Self {
            start_clip: i,
            end_clip: j,
            start_sec,
            end_sec,
            stage,
        })
    }

    /// The cell at another stage covering exactly the same span, if any.
    pub fn align_to(
        &self,
        n_from: usize,
        n_to: usize,
        to_stage: usize,
        duration: f64,
    ) -> Result<Option<Moment>> {
        match cross_stage_align(self.start_clip, self.end_clip, n_from, n_to)? {
            Some((i, j)) => Ok(Some(Moment::new(i, j, n_to, duration, to_stage)?)),
            None => Ok(None),
        }
    }
}

/// `(i * duration / n, (j + 1) * duration / n)`.
pub fn moment_to_seconds(i: usize, j: usize, n: usize, duration: f64) -> Result<(f64, f64)> {
    if i > j || j >= n {
        return Err(input_err!("moment ({}, {}) outside a grid of {}", i, j, n));
    }
    if !(duration > 0.0) {
        return Err(input_err!("duration must be positive, got {}", duration));
    }
    let unit = duration / n as f64;
    Ok((i as f64 * unit, (j + 1) as f64 * unit))
}

/// Snaps a span in seconds outward onto the clip grid.
pub fn seconds_to_moment(start: f64, end: f64, n: usize, duration: f64) -> (usize, usize) {
    let scale = n as f64 / duration;
    let i = libm::floor(start * scale).max(0.0) as usize;
    let j_excl = libm::ceil(end * scale) as usize;
    let i = i.min(n - 1);
    let j = j_excl.clamp(i + 1, n) - 1;
    (i, j)
}

/// Maps cell `(i, j)` of an `n_from` grid to the cell of an `n_to` grid that
/// spans exactly the same interval.
///
/// Refining (`n_to = r * n_from`) always succeeds; coarsening only when both
/// boundaries fall on the coarse grid.
pub fn cross_stage_align(
    i: usize,
    j: usize,
    n_from: usize,
    n_to: usize,
) -> Result<Option<(usize, usize)>> {
    if n_from == 0 || n_to == 0 {
        return Err(config_err!("clip counts must be positive"));
    }
    if i > j || j >= n_from {
        return Err(input_err!("moment ({}, {}) outside a grid of {}", i, j, n_from));
    }
    if n_to % n_from == 0 {
        let r = n_to / n_from;
        Ok(Some((i * r, (j + 1) * r - 1)))
    } else if n_from % n_to == 0 {
        let r = n_from / n_to;
        if i % r == 0 && (j + 1) % r == 0 {
            Ok(Some((i / r, (j + 1) / r - 1)))
        } else {
            Ok(None)
        }
    } else {
        Err(config_err!(
            "clip counts {} and {} are not multiples of each other",
            n_from,
            n_to
        ))
    }
}
