use super::{Tape, Var};
use crate::error::{shape_err, Result};

/// Weights of one LSTM layer. Gate blocks are laid out as
/// `[input, forget, cell, output]` along the `4 * hidden` axis.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    /// `[d_in, 4 * d_h]`
    pub w_x: Var,
    /// `[d_h, 4 * d_h]`
    pub w_h: Var,
    /// `[4 * d_h]`
    pub bias: Var,
}

impl<'p> Tape<'p> {
    /// One LSTM step; returns `(h, c)`.
    pub fn lstm_cell(
        &mut self,
        x_t: Var,
        h_prev: Var,
        c_prev: Var,
        weights: LstmWeights,
    ) -> Result<(Var, Var)> {
        let hs = self.shape(h_prev).to_vec();
        if hs.len() != 1 || self.shape(c_prev) != hs.as_slice() {
            return Err(shape_err!(
                "lstm_cell: h {:?} and c {:?} must be equal vectors",
                hs,
                self.shape(c_prev)
            ));
        }
        let dh = hs[0];
        if self.shape(weights.w_h) != [dh, 4 * dh] {
            return Err(shape_err!(
                "lstm_cell: w_h {:?}, expected [{}, {}]",
                self.shape(weights.w_h),
                dh,
                4 * dh
            ));
        }
        let zx = self.affine(x_t, weights.w_x, Some(weights.bias))?;
        let zh = self.affine(h_prev, weights.w_h, None)?;
        self.lstm_gates(zx, zh, c_prev)
    }

    /// Gate nonlinearities given the two pre-activation halves.
    pub(crate) fn lstm_gates(&mut self, zx: Var, zh: Var, c_prev: Var) -> Result<(Var, Var)> {
        let dh = self.shape(c_prev)[0];
        let z = self.add(zx, zh)?;
        let zi = self.slice(z, 0, dh)?;
        let zf = self.slice(z, dh, dh)?;
        let zg = self.slice(z, 2 * dh, dh)?;
        let zo = self.slice(z, 3 * dh, dh)?;
        let i = self.sigmoid(zi);
        let f = self.sigmoid(zf);
        let g = self.tanh(zg);
        let o = self.sigmoid(zo);
        let keep = self.mul(f, c_prev)?;
        let write = self.mul(i, g)?;
        let c = self.add(keep, write)?;
        let tc = self.tanh(c);
        let h = self.mul(o, tc)?;
        Ok((h, c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ops::sigmoid;
    use crate::tensor::Tensor;
    use alloc::vec::Vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_fixed_point() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let h = tape.constant(Tensor::zeros(&[2]));
        let c = tape.constant(Tensor::zeros(&[2]));
        let w = LstmWeights {
            w_x: tape.constant(Tensor::zeros(&[3, 8])),
            w_h: tape.constant(Tensor::zeros(&[2, 8])),
            bias: tape.constant(Tensor::zeros(&[8])),
        };
        let (h1, c1) = tape.lstm_cell(x, h, c, w).unwrap();
        assert_eq!(tape.data(h1), &[0.0, 0.0]);
        assert_eq!(tape.data(c1), &[0.0, 0.0]);
    }

    #[test]
    fn matches_scalar_gate_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (din, dh) = (3, 2);
        let xv = Tensor::uniform(&[din], 1.0, &mut rng);
        let hv = Tensor::uniform(&[dh], 1.0, &mut rng);
        let cv = Tensor::uniform(&[dh], 1.0, &mut rng);
        let wx = Tensor::uniform(&[din, 4 * dh], 1.0, &mut rng);
        let wh = Tensor::uniform(&[dh, 4 * dh], 1.0, &mut rng);
        let b = Tensor::uniform(&[4 * dh], 1.0, &mut rng);

        // Scalar reference: z_k = sum_p x_p wx[p][k] + sum_q h_q wh[q][k] + b_k
        let z: Vec<f64> = (0..4 * dh)
            .map(|k| {
                let mut s = b.data()[k];
                for p in 0..din {
                    s += xv.data()[p] * wx.data()[p * 4 * dh + k];
                }
                for q in 0..dh {
                    s += hv.data()[q] * wh.data()[q * 4 * dh + k];
                }
                s
            })
            .collect();
        let mut h_ref = Vec::new();
        let mut c_ref = Vec::new();
        for u in 0..dh {
            let i = sigmoid(z[u]);
            let f = sigmoid(z[dh + u]);
            let g = libm::tanh(z[2 * dh + u]);
            let o = sigmoid(z[3 * dh + u]);
            let c = f * cv.data()[u] + i * g;
            c_ref.push(c);
            h_ref.push(o * libm::tanh(c));
        }

        let mut tape = Tape::new();
        let x = tape.constant(xv);
        let h = tape.constant(hv);
        let c = tape.constant(cv);
        let w = LstmWeights {
            w_x: tape.constant(wx),
            w_h: tape.constant(wh),
            bias: tape.constant(b),
        };
        let (h1, c1) = tape.lstm_cell(x, h, c, w).unwrap();
        for (a, e) in tape.data(h1).iter().zip(&h_ref) {
            assert!((a - e).abs() < 1e-12);
        }
        for (a, e) in tape.data(c1).iter().zip(&c_ref) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}
