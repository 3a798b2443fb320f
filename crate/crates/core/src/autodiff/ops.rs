//! Differentiable primitives recorded on the tape, with their backward rules.

use alloc::vec;
use alloc::vec::Vec;

use super::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::linalg::{gemm, MatRef};
use crate::tensor::Tensor;

/// Lower clamp applied to probabilities inside [`Tape::bce`].
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseMode {
    Mul,
    Add,
    /// Ties route the gradient to the left operand.
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryMode {
    Sigmoid,
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    /// Ties route the gradient to the first index in row-major window order.
    Max,
    Mean,
}

pub(super) enum Op {
    Leaf,
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: usize,
        cols: Vec<f64>,
    },
    Pool2d {
        x: Var,
        mode: PoolMode,
        window: usize,
        stride: usize,
        argmax: Vec<usize>,
    },
    Upsample2x {
        x: Var,
    },
    Elementwise {
        a: Var,
        b: Var,
        mode: ElementwiseMode,
    },
    Unary {
        x: Var,
        mode: UnaryMode,
    },
    Bce {
        p: Var,
        target: Vec<f64>,
        mask: Vec<bool>,
        count: usize,
    },
    Sum {
        x: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    SegmentMean {
        x: Var,
        segments: usize,
    },
    MomentMap {
        x: Var,
        argmax: Vec<u32>,
    },
    ScaleChannels {
        x: Var,
        v: Var,
    },
    ScaleFeatures {
        x: Var,
        v: Var,
    },
    Mask {
        x: Var,
        mask: Vec<bool>,
    },
    Reshape {
        x: Var,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRow {
        x: Var,
        row: usize,
    },
    Slice {
        x: Var,
        start: usize,
    },
}

impl Op {
    pub(super) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Affine { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Conv2d {
                x, kernel, bias, ..
            } => {
                let mut v = vec![*x, *kernel];
                v.extend(bias);
                v
            }
            Op::Elementwise { a, b, .. } => vec![*a, *b],
            Op::ScaleChannels { x, v } | Op::ScaleFeatures { x, v } => vec![*x, *v],
            Op::Pool2d { x, .. }
            | Op::Upsample2x { x }
            | Op::Unary { x, .. }
            | Op::Sum { x }
            | Op::Scale { x, .. }
            | Op::SegmentMean { x, .. }
            | Op::MomentMap { x, .. }
            | Op::Mask { x, .. }
            | Op::Reshape { x }
            | Op::SelectRow { x, .. }
            | Op::Slice { x, .. } => vec![*x],
            Op::Bce { p, .. } => vec![*p],
            Op::Gather { table, .. } => vec![*table],
        }
    }
}

/// Output of [`Tape::bce`].
#[derive(Clone, Copy, Debug)]
pub struct MaskedLoss {
    pub value: Var,
    /// Set when no cell was selected; the loss is then defined as zero.
    pub empty_mask: bool,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn unary_forward(mode: UnaryMode, x: f64) -> f64 {
    match mode {
        UnaryMode::Sigmoid => sigmoid(x),
        UnaryMode::Relu => {
            if x > 0.0 {
                x
            } else {
                0.0
            }
        }
        UnaryMode::Tanh => libm::tanh(x),
    }
}

fn unary_derivative(mode: UnaryMode, y: f64) -> f64 {
    match mode {
        UnaryMode::Sigmoid => y * (1.0 - y),
        UnaryMode::Relu => {
            if y > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryMode::Tanh => 1.0 - y * y,
    }
}

/// Unfolds `x: [c, h, w]` into `[c*k*k, ho*wo]` patches (zero padded).
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize) -> Vec<f64> {
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    let mut cols = vec![0.0; c * k * k * ho * wo];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                // valid output columns: 0 <= ox + kx - pad < w
                let ox_lo = pad.saturating_sub(kx);
                let ox_hi = (w + pad).saturating_sub(kx).min(wo);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..ho {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let src = &plane[(iy - pad) * w..(iy - pad + 1) * w];
                    let ix_lo = ox_lo + kx - pad;
                    let n = ox_hi - ox_lo;
                    dst[oy * wo + ox_lo..oy * wo + ox_hi].copy_from_slice(&src[ix_lo..ix_lo + n]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto `dx`.
fn col2im(cols: &[f64], dx: &mut [f64], c: usize, h: usize, w: usize, k: usize, pad: usize) {
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                let ox_lo = pad.saturating_sub(kx);
                let ox_hi = (w + pad).saturating_sub(kx).min(wo);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..ho {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let ix_lo = ox_lo + kx - pad;
                    let n = ox_hi - ox_lo;
                    let dst = &mut plane[(iy - pad) * w + ix_lo..(iy - pad) * w + ix_lo + n];
                    for (d, s) in dst.iter_mut().zip(&src[oy * wo + ox_lo..oy * wo + ox_hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

impl<'p> Tape<'p> {
    /// `x @ w + b`, broadcast over every leading dimension of `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[0] {
            return Err(shape_err!("affine: x {:?} with w {:?}", xs, ws));
        }
        let (din, dout) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(shape_err!("affine: bias {:?}, expected [{}]", self.shape(b), dout));
            }
        }
        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().unwrap() = dout;
        let rows = self.value(x).len() / din;
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let bd = self.data(b);
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(bd);
            }
        }
        gemm(
            MatRef::new(self.data(x), rows, din),
            MatRef::new(self.data(w), din, dout),
            &mut out,
            1.0,
        );
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Affine { x, w, b }))
    }

    /// Stride-1 cross-correlation of `x: [c_in, h, w]` with
    /// `kernel: [c_out, c_in, k, k]` and zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(x);
        let ks = self.shape(kernel);
        if xs.len() != 3 || ks.len() != 4 || ks[1] != xs[0] || ks[2] != ks[3] {
            return Err(shape_err!("conv2d: x {:?} with kernel {:?}", xs, ks));
        }
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ks[0], ks[2]);
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(shape_err!("conv2d: kernel {} larger than padded input {:?}", k, xs));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(shape_err!("conv2d: bias {:?}, expected [{}]", self.shape(b), cout));
            }
        }
        let ho = h + 2 * padding + 1 - k;
        let wo = w + 2 * padding + 1 - k;
        let cols = im2col(self.data(x), cin, h, w, k, padding);
        let mut out = vec![0.0; cout * ho * wo];
        if let Some(b) = bias {
            for (plane, &bv) in out.chunks_exact_mut(ho * wo).zip(self.data(b)) {
                plane.fill(bv);
            }
        }
        gemm(
            MatRef::new(self.data(kernel), cout, cin * k * k),
            MatRef::new(&cols, cin * k * k, ho * wo),
            &mut out,
            1.0,
        );
        let value = Tensor::new(&[cout, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                kernel,
                bias,
                padding,
                cols,
            },
        ))
    }

    /// Windowed max or mean pooling over the two spatial axes of `[c, h, w]`.
    pub fn pool2d(&mut self, x: Var, mode: PoolMode, window: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 || window == 0 || stride == 0 || window > xs[1] || window > xs[2] {
            return Err(shape_err!(
                "pool2d: window {} stride {} on {:?}",
                window,
                stride,
                xs
            ));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let ho = (h - window) / stride + 1;
        let wo = (w - window) / stride + 1;
        let xd = self.data(x);
        let mut out = vec![0.0; c * ho * wo];
        let mut argmax = Vec::new();
        if mode == PoolMode::Max {
            argmax.resize(out.len(), 0);
        }
        let norm = 1.0 / (window * window) as f64;
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = (ch * ho + oy) * wo + ox;
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    let mut acc = 0.0;
                    for ky in 0..window {
                        for kx in 0..window {
                            let i = (ch * h + oy * stride + ky) * w + ox * stride + kx;
                            let v = xd[i];
                            if best_idx == usize::MAX || v > best {
                                best = v;
                                best_idx = i;
                            }
                            acc += v;
                        }
                    }
                    match mode {
                        PoolMode::Max => {
                            out[o] = best;
                            argmax[o] = best_idx;
                        }
                        PoolMode::Mean => out[o] = acc * norm,
                    }
                }
            }
        }
        let value = Tensor::new(&[c, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Pool2d {
                x,
                mode,
                window,
                stride,
                argmax,
            },
        ))
    }

    /// Nearest-neighbour ×2 upsampling of `[c, h, w]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 {
            return Err(shape_err!("upsample2x: expected [c, h, w], got {:?}", xs));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let xd = self.data(x);
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = xd[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(&[c, 2 * h, 2 * w], out)?;
        Ok(self.push(value, Op::Upsample2x { x }))
    }

    pub fn elementwise(&mut self, a: Var, b: Var, mode: ElementwiseMode) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "elementwise {:?}: {:?} vs {:?}",
                mode,
                self.shape(a),
                self.shape(b)
            ));
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| match mode {
                ElementwiseMode::Mul => x * y,
                ElementwiseMode::Add => x + y,
                ElementwiseMode::Max => {
                    if x >= y {
                        x
                    } else {
                        y
                    }
                }
            })
            .collect();
        let value = Tensor::new(self.shape(a), out)?;
        Ok(self.push(value, Op::Elementwise { a, b, mode }))
    }

    pub fn activation(&mut self, x: Var, mode: UnaryMode) -> Var {
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .map(|&v| unary_forward(mode, v))
            .collect();
        let value = Tensor::new(self.shape(x), out).expect("same shape");
        self.push(value, Op::Unary { x, mode })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, UnaryMode::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, UnaryMode::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, UnaryMode::Tanh)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, ElementwiseMode::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, ElementwiseMode::Mul)
    }

    /// Masked binary cross-entropy averaged over the selected cells.
    ///
    /// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]`; the gradient is
    /// taken at the clamped value.
    pub fn bce(&mut self, p: Var, target: &[f64], mask: &[bool]) -> Result<MaskedLoss> {
        let n = self.value(p).len();
        if target.len() != n || mask.len() != n {
            return Err(shape_err!(
                "bce: {} predictions, {} targets, {} mask cells",
                n,
                target.len(),
                mask.len()
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        let mut total = 0.0;
        for ((&pv, &y), &m) in self.data(p).iter().zip(target).zip(mask) {
            if m {
                let pc = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
                total += y * libm::log(pc) + (1.0 - y) * libm::log(1.0 - pc);
            }
        }
        let loss = if count == 0 { 0.0 } else { -total / count as f64 };
        let value = self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                target: target.to_vec(),
                mask: mask.to_vec(),
                count,
            },
        );
        Ok(MaskedLoss {
            value,
            empty_mask: count == 0,
        })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.data(x).iter().map(|v| v * factor).collect();
        let value = Tensor::new(self.shape(x), out).expect("same shape");
        self.push(value, Op::Scale { x, factor })
    }

    /// Splits the rows of `x: [l, d]` into `segments` equal runs and averages each.
    pub fn segment_mean(&mut self, x: Var, segments: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || segments == 0 || xs[0] % segments != 0 {
            return Err(shape_err!("segment_mean: {} segments over {:?}", segments, xs));
        }
        let (l, d) = (xs[0], xs[1]);
        let run = l / segments;
        let xd = self.data(x);
        let mut out = vec![0.0; segments * d];
        for (s, orow) in out.chunks_exact_mut(d).enumerate() {
            for r in s * run..(s + 1) * run {
                for (o, v) in orow.iter_mut().zip(&xd[r * d..(r + 1) * d]) {
                    *o += v;
                }
            }
            orow.iter_mut().for_each(|o| *o /= run as f64);
        }
        let value = Tensor::new(&[segments, d], out)?;
        Ok(self.push(value, Op::SegmentMean { x, segments }))
    }

    /// Builds `[d, n, n]` with cell `(i, j)` the elementwise max of rows `i..=j`
    /// of `x: [n, d]` when `i <= j`, and exactly zero below the diagonal.
    pub fn moment_map(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(shape_err!("moment_map: expected [n, d], got {:?}", xs));
        }
        let (n, d) = (xs[0], xs[1]);
        let xd = self.data(x);
        let mut out = vec![0.0; d * n * n];
        let mut argmax = vec![0u32; d * n * n];
        let mut best = vec![0.0; d];
        let mut best_at = vec![0u32; d];
        for i in 0..n {
            best.copy_from_slice(&xd[i * d..(i + 1) * d]);
            best_at.fill(i as u32);
            for j in i..n {
                if j > i {
                    for c in 0..d {
                        let v = xd[j * d + c];
                        if v > best[c] {
                            best[c] = v;
                            best_at[c] = j as u32;
                        }
                    }
                }
                for c in 0..d {
                    out[(c * n + i) * n + j] = best[c];
                    argmax[(c * n + i) * n + j] = best_at[c];
                }
            }
        }
        let value = Tensor::new(&[d, n, n], out)?;
        Ok(self.push(value, Op::MomentMap { x, argmax }))
    }

    /// `x[c, ..] * v[c]` for `x` with leading channel axis.
    pub fn scale_channels(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.shape(x);
        let vs = self.shape(v);
        if xs.is_empty() || vs != [xs[0]] {
            return Err(shape_err!("scale_channels: x {:?} with v {:?}", xs, vs));
        }
        let plane = self.value(x).len() / xs[0];
        let out: Vec<f64> = self
            .data(x)
            .chunks_exact(plane)
            .zip(self.data(v))
            .flat_map(|(p, &s)| p.iter().map(move |a| a * s))
            .collect();
        let value = Tensor::new(xs, out)?;
        Ok(self.push(value, Op::ScaleChannels { x, v }))
    }

    /// `x[.., k] * v[k]` for `x` with trailing feature axis.
    pub fn scale_features(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.shape(x);
        let vs = self.shape(v);
        if xs.is_empty() || vs != [xs[xs.len() - 1]] {
            return Err(shape_err!("scale_features: x {:?} with v {:?}", xs, vs));
        }
        let vd = self.data(v);
        let out: Vec<f64> = self
            .data(x)
            .chunks_exact(vd.len())
            .flat_map(|row| row.iter().zip(vd).map(|(a, b)| a * b))
            .collect();
        let value = Tensor::new(xs, out)?;
        Ok(self.push(value, Op::ScaleFeatures { x, v }))
    }

    /// Zeroes elements whose mask cell is false. The mask covers the trailing
    /// block of `x` and repeats over the leading elements.
    pub fn mask(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let n = self.value(x).len();
        if mask.is_empty() || n % mask.len() != 0 {
            return Err(shape_err!("mask of {} cells over {} elements", mask.len(), n));
        }
        let out: Vec<f64> = self
            .data(x)
            .chunks_exact(mask.len())
            .flat_map(|blk| blk.iter().zip(mask).map(|(&v, &m)| if m { v } else { 0.0 }))
            .collect();
        let value = Tensor::new(self.shape(x), out)?;
        Ok(self.push(
            value,
            Op::Mask {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Rows of `table: [v, d]` selected by `ids`, giving `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 || ids.is_empty() || ids.iter().any(|&i| i >= ts[0]) {
            return Err(shape_err!("gather: ids {:?} from table {:?}", ids, ts));
        }
        let d = ts[1];
        let td = self.data(table);
        let out: Vec<f64> = ids
            .iter()
            .flat_map(|&i| td[i * d..(i + 1) * d].iter().copied())
            .collect();
        let value = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Row `row` of `x`, dropping the leading axis.
    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() < 2 || row >= xs[0] {
            return Err(shape_err!("select_row: row {} of {:?}", row, xs));
        }
        let inner = &xs[1..];
        let len: usize = inner.iter().product();
        let data = self.data(x)[row * len..(row + 1) * len].to_vec();
        let value = Tensor::new(inner, data)?;
        Ok(self.push(value, Op::SelectRow { x, row }))
    }

    /// Contiguous range of a vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 1 || len == 0 || start + len > xs[0] {
            return Err(shape_err!("slice: [{}, {}) of {:?}", start, start + len, xs));
        }
        let data = self.data(x)[start..start + len].to_vec();
        Ok(self.push(Tensor::from_vec(data), Op::Slice { x, start }))
    }

    /// Gradient slot for `v`, allocated on first use; `None` when `v` does not
    /// need a gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    pub(super) fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.nodes[idx].value_tensor(self);
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let ws = self.shape(*w);
                let (din, dout) = (ws[0], ws[1]);
                let rows = g.len() / dout;
                if let Some(dx) = self.slot(grads, *x) {
                    gemm(
                        MatRef::new(g, rows, dout),
                        MatRef::new(self.data(*w), din, dout).t(),
                        dx,
                        1.0,
                    );
                }
                if let Some(dw) = self.slot(grads, *w) {
                    gemm(
                        MatRef::new(self.data(*x), rows, din).t(),
                        MatRef::new(g, rows, dout),
                        dw,
                        1.0,
                    );
                }
                if let Some(b) = b {
                    if let Some(db) = self.slot(grads, *b) {
                        for row in g.chunks_exact(dout) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                padding,
                cols,
            } => {
                let xs = self.shape(*x);
                let (cin, h, w) = (xs[0], xs[1], xs[2]);
                let ks = self.shape(*kernel);
                let (cout, k) = (ks[0], ks[2]);
                let hw = g.len() / cout;
                if let Some(dk) = self.slot(grads, *kernel) {
                    gemm(
                        MatRef::new(g, cout, hw),
                        MatRef::new(cols, cin * k * k, hw).t(),
                        dk,
                        1.0,
                    );
                }
                if let Some(b) = bias {
                    if let Some(db) = self.slot(grads, *b) {
                        for (d, plane) in db.iter_mut().zip(g.chunks_exact(hw)) {
                            *d += plane.iter().sum::<f64>();
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let mut dcols = vec![0.0; cin * k * k * hw];
                    gemm(
                        MatRef::new(self.data(*kernel), cout, cin * k * k).t(),
                        MatRef::new(g, cout, hw),
                        &mut dcols,
                        0.0,
                    );
                    let dx = self.slot(grads, *x).unwrap();
                    col2im(&dcols, dx, cin, h, w, k, *padding);
                }
            }
            Op::Pool2d {
                x,
                mode,
                window,
                stride,
                argmax,
            } => {
                let xs = self.shape(*x);
                let (h, w) = (xs[1], xs[2]);
                let os = out.shape();
                let (ho, wo) = (os[1], os[2]);
                if let Some(dx) = self.slot(grads, *x) {
                    match mode {
                        PoolMode::Max => {
                            for (&src, &gv) in argmax.iter().zip(g) {
                                dx[src] += gv;
                            }
                        }
                        PoolMode::Mean => {
                            let norm = 1.0 / (window * window) as f64;
                            for (o, &gv) in g.iter().enumerate() {
                                let ch = o / (ho * wo);
                                let oy = (o / wo) % ho;
                                let ox = o % wo;
                                for ky in 0..*window {
                                    for kx in 0..*window {
                                        dx[(ch * h + oy * stride + ky) * w + ox * stride + kx] +=
                                            gv * norm;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Upsample2x { x } => {
                let xs = self.shape(*x);
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                if let Some(dx) = self.slot(grads, *x) {
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dx[(ch * h + y / 2) * w + xx / 2] += g[(ch * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                }
            }
            Op::Elementwise { a, b, mode } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                match mode {
                    ElementwiseMode::Add => {
                        for v in [*a, *b] {
                            if let Some(d) = self.slot(grads, v) {
                                d.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                            }
                        }
                    }
                    ElementwiseMode::Mul => {
                        if let Some(da) = self.slot(grads, *a) {
                            for ((d, gv), y) in da.iter_mut().zip(g).zip(bd) {
                                *d += gv * y;
                            }
                        }
                        if let Some(db) = self.slot(grads, *b) {
                            for ((d, gv), x) in db.iter_mut().zip(g).zip(ad) {
                                *d += gv * x;
                            }
                        }
                    }
                    ElementwiseMode::Max => {
                        if let Some(da) = self.slot(grads, *a) {
                            for (i, d) in da.iter_mut().enumerate() {
                                if ad[i] >= bd[i] {
                                    *d += g[i];
                                }
                            }
                        }
                        if let Some(db) = self.slot(grads, *b) {
                            for (i, d) in db.iter_mut().enumerate() {
                                if ad[i] < bd[i] {
                                    *d += g[i];
                                }
                            }
                        }
                    }
                }
            }
            Op::Unary { x, mode } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, gv), &y) in dx.iter_mut().zip(g).zip(out.data()) {
                        *d += gv * unary_derivative(*mode, y);
                    }
                }
            }
            Op::Bce {
                p,
                target,
                mask,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let pd = self.data(*p);
                let scale = -g[0] / *count as f64;
                if let Some(dp) = self.slot(grads, *p) {
                    for i in 0..dp.len() {
                        if mask[i] {
                            let pc = pd[i].clamp(BCE_EPS, 1.0 - BCE_EPS);
                            let y = target[i];
                            dp[i] += scale * (y / pc - (1.0 - y) / (1.0 - pc));
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Scale { x, factor } => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * factor);
                }
            }
            Op::SegmentMean { x, segments } => {
                let xs = self.shape(*x);
                let (l, d) = (xs[0], xs[1]);
                let run = l / segments;
                if let Some(dx) = self.slot(grads, *x) {
                    for r in 0..l {
                        let s = r / run;
                        for c in 0..d {
                            dx[r * d + c] += g[s * d + c] / run as f64;
                        }
                    }
                }
            }
            Op::MomentMap { x, argmax } => {
                let xs = self.shape(*x);
                let (n, d) = (xs[0], xs[1]);
                if let Some(dx) = self.slot(grads, *x) {
                    for c in 0..d {
                        for i in 0..n {
                            for j in i..n {
                                let o = (c * n + i) * n + j;
                                dx[argmax[o] as usize * d + c] += g[o];
                            }
                        }
                    }
                }
            }
            Op::ScaleChannels { x, v } => {
                let c = self.shape(*v)[0];
                let plane = g.len() / c;
                if let Some(dx) = self.slot(grads, *x) {
                    let vd = self.data(*v);
                    for (i, d) in dx.iter_mut().enumerate() {
                        *d += g[i] * vd[i / plane];
                    }
                }
                if let Some(dv) = self.slot(grads, *v) {
                    let xd = self.data(*x);
                    for (ch, d) in dv.iter_mut().enumerate() {
                        let r = ch * plane..(ch + 1) * plane;
                        *d += g[r.clone()].iter().zip(&xd[r]).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::ScaleFeatures { x, v } => {
                let k = self.shape(*v)[0];
                if let Some(dx) = self.slot(grads, *x) {
                    let vd = self.data(*v);
                    for (i, d) in dx.iter_mut().enumerate() {
                        *d += g[i] * vd[i % k];
                    }
                }
                if let Some(dv) = self.slot(grads, *v) {
                    let xd = self.data(*x);
                    for (i, (gv, xv)) in g.iter().zip(xd).enumerate() {
                        dv[i % k] += gv * xv;
                    }
                }
            }
            Op::Mask { x, mask } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let m = mask.len();
                    for (i, d) in dx.iter_mut().enumerate() {
                        if mask[i % m] {
                            *d += g[i];
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
            }
            Op::Gather { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(dt) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            dt[id * d + c] += g[r * d + c];
                        }
                    }
                }
            }
            Op::SelectRow { x, row } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let len = g.len();
                    dx[row * len..(row + 1) * len]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, gv)| *d += gv);
                }
            }
            Op::Slice { x, start } => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx[*start..*start + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, gv)| *d += gv);
                }
            }
        }
    }
}

impl super::Node {
    fn value_tensor<'a>(&'a self, tape: &'a Tape<'_>) -> &'a Tensor {
        match &self.value {
            super::Value::Owned(t) => t,
            super::Value::Param(id) => tape.params.expect("store").get(*id),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn affine_identity_and_hand_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.affine(x, w, Some(b)).unwrap();
        assert_eq!(tape.data(y), &[1.0, 2.0]);

        let x = tape.constant(t(&[1, 2], &[1.0, 1.0]));
        let w = tape.constant(t(&[2, 2], &[2.0, 3.0, 4.0, 5.0]));
        let b = tape.constant(t(&[2], &[1.0, 1.0]));
        let y = tape.affine(x, w, Some(b)).unwrap();
        assert_eq!(tape.data(y), &[7.0, 9.0]);
    }

    #[test]
    fn affine_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[1.0; 3]));
        let w = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.affine(x, w, None), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn conv_scaling_and_center_sum() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 3, 3], 1.0));
        let k = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, k, Some(b), 0).unwrap();
        assert_eq!(tape.data(y), &[2.0; 9]);

        let x = tape.constant(t(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, k, None, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 3]);
        assert_eq!(tape.data(y)[4], 45.0);
        // corner sees 1+2+4+5
        assert_eq!(tape.data(y)[0], 12.0);
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 3]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 1, 1]));
        assert!(tape.conv2d(x, k, None, 0).is_err());
    }

    #[test]
    fn pooling_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2], &[1., 2., 3., 4.]));
        let mx = tape.pool2d(x, PoolMode::Max, 2, 2).unwrap();
        let mn = tape.pool2d(x, PoolMode::Mean, 2, 2).unwrap();
        assert_eq!(tape.data(mx), &[4.0]);
        assert_eq!(tape.data(mn), &[2.5]);
        let c = tape.constant(Tensor::full(&[2, 4, 4], 3.0));
        let p = tape.pool2d(c, PoolMode::Max, 3, 1).unwrap();
        assert!(tape.data(p).iter().all(|&v| v == 3.0));
        assert!(tape.pool2d(x, PoolMode::Max, 3, 1).is_err());
    }

    #[test]
    fn max_pool_ties_route_to_first() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 2, 2], 1.0));
        let p = tape.pool2d(x, PoolMode::Max, 2, 2).unwrap();
        let g = tape.backward(p);
        assert_eq!(g.get(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_replicates_and_sums_back() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2, 2], &[1., 2., 3., 4.]));
        let y = tape.upsample2x(x).unwrap();
        assert_eq!(
            tape.data(y),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        let g = tape.backward(y);
        assert_eq!(g.get(x).unwrap(), &[4.0; 4]);
        let one = tape.constant(t(&[1, 1, 1], &[1.0]));
        let y1 = tape.upsample2x(one).unwrap();
        assert_eq!(tape.data(y1), &[1.0; 4]);
    }

    #[test]
    fn elementwise_cases() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 5.0]));
        let b = tape.leaf(t(&[2], &[3.0, 2.0]));
        let m = tape.elementwise(a, b, ElementwiseMode::Max).unwrap();
        assert_eq!(tape.data(m), &[3.0, 5.0]);
        let ones = tape.constant(Tensor::full(&[2], 1.0));
        let p = tape.mul(a, ones).unwrap();
        assert_eq!(tape.data(p), tape.data(a));
        let c = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn activations() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[0.0]));
        let s = tape.sigmoid(x);
        assert_eq!(tape.data(s), &[0.5]);
        let g = tape.backward(s);
        assert_eq!(g.get(x).unwrap(), &[0.25]);
        let r = tape.constant(t(&[2], &[-1.0, 2.0]));
        let r = tape.relu(r);
        assert_eq!(tape.data(r), &[0.0, 2.0]);
    }

    #[test]
    fn bce_closed_forms() {
        let mut tape = Tape::new();
        let p = tape.leaf(t(&[1], &[0.5]));
        let l = tape.bce(p, &[1.0], &[true]).unwrap();
        assert!((tape.data(l.value)[0] - core::f64::consts::LN_2).abs() < 1e-12);
        assert!(!l.empty_mask);

        let p = tape.leaf(t(&[3], &[1.0, 0.0, 1.0]));
        let l = tape.bce(p, &[1.0, 0.0, 1.0], &[true, true, false]).unwrap();
        assert!(tape.data(l.value)[0] <= -libm::log(1.0 - BCE_EPS) + 1e-15);

        let l = tape.bce(p, &[1.0, 0.0, 1.0], &[false; 3]).unwrap();
        assert!(l.empty_mask);
        assert_eq!(tape.data(l.value)[0], 0.0);
    }

    #[test]
    fn moment_map_scalar_fixture() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3, 1], &[1.0, 3.0, 2.0]));
        let m = tape.moment_map(x).unwrap();
        let d = tape.data(m);
        let at = |i: usize, j: usize| d[i * 3 + j];
        assert_eq!(at(0, 2), 3.0);
        assert_eq!(at(1, 2), 3.0);
        assert_eq!(at(0, 1), 3.0);
        assert_eq!(at(2, 2), 2.0);
        assert_eq!(at(2, 0), 0.0);
    }

    #[test]
    fn max_routes_conserve_mass() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[4], &[1.0, 2.0, 2.0, -1.0]));
        let b = tape.leaf(t(&[4], &[0.0, 2.0, 3.0, 0.0]));
        let m = tape.elementwise(a, b, ElementwiseMode::Max).unwrap();
        let g = tape.backward_with(m, vec![1.0, 2.0, 3.0, 4.0]);
        let ga = g.get(a).unwrap();
        let gb = g.get(b).unwrap();
        assert_eq!(ga, &[1.0, 2.0, 0.0, 0.0]);
        assert_eq!(gb, &[0.0, 0.0, 3.0, 4.0]);
    }
}
