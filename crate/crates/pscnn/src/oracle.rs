//! Brute-force reference implementation of binary 1-D CNN inference.
//!
//! This is the ground truth the simulator is checked against: plain nested
//! loops over a dense activation matrix, no packing, no cycle model.
//! Clarity over speed.
//!
//! Activations enter the dot product as numeric `{1, 0}` — an inactive
//! input contributes nothing, exactly like a deactivated wordline leaves
//! its cell currents off the bitline. The binarization is the closed
//! inequality `sum >= 0 -> 1`.

use crate::bits::words_per_position;
use crate::model::{ExecStep, LayerWeights, ModelWeights, ValidatedModel};

/// A positions-by-channels matrix of activation bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefTensor {
    pub len: usize,
    pub channels: usize,
    data: Vec<u8>,
}

impl RefTensor {
    pub fn zeros(len: usize, channels: usize) -> Self {
        RefTensor {
            len,
            channels,
            data: vec![0; len * channels],
        }
    }

    pub fn random(len: usize, channels: usize, rng: &mut impl rand::Rng) -> Self {
        let mut t = RefTensor::zeros(len, channels);
        for v in t.data.iter_mut() {
            *v = rng.gen::<bool>() as u8;
        }
        t
    }

    #[inline]
    pub fn get(&self, pos: usize, ch: usize) -> u8 {
        self.data[pos * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, pos: usize, ch: usize, v: u8) {
        debug_assert!(v <= 1);
        self.data[pos * self.channels + ch] = v;
    }

    /// Packs into the feature-memory word layout: position-major, each
    /// position occupying `ceil(channels/128)` words, channel `c` at bit
    /// `c % 128` of word `c / 128`, padding zero.
    pub fn to_words(&self) -> Vec<u128> {
        let wpp = words_per_position(self.channels);
        let mut out = vec![0u128; self.len * wpp];
        for p in 0..self.len {
            for c in 0..self.channels {
                if self.get(p, c) != 0 {
                    out[p * wpp + c / 128] |= 1 << (c % 128);
                }
            }
        }
        out
    }

    /// Inverse of `to_words`. Padding bits must be zero.
    pub fn from_words(words: &[u128], len: usize, channels: usize) -> Self {
        let wpp = words_per_position(channels);
        assert_eq!(words.len(), len * wpp);
        let mut t = RefTensor::zeros(len, channels);
        for p in 0..len {
            for c in 0..channels {
                let bit = words[p * wpp + c / 128] >> (c % 128) & 1;
                t.set(p, c, bit as u8);
            }
        }
        t
    }
}

/// Binary convolution: `out[t][q] = 1` iff
/// `sum_{k,c} x[t*stride + k][c] * w[q][k][c] + bias_q >= 0`.
pub fn ref_conv1d(
    x: &RefTensor,
    w: &LayerWeights,
    stride: usize,
    bias: Option<&[i32]>,
) -> RefTensor {
    assert_eq!(x.channels, w.c_in, "input channel mismatch");
    assert!(x.len >= w.k, "input shorter than kernel");
    let n_out = (x.len - w.k) / stride + 1;
    let mut out = RefTensor::zeros(n_out, w.c_out);
    for t in 0..n_out {
        for q in 0..w.c_out {
            let mut sum: i64 = bias.map_or(0, |b| b[q] as i64);
            for k in 0..w.k {
                for c in 0..w.c_in {
                    if x.get(t * stride + k, c) != 0 {
                        sum += w.get(q, k, c) as i64;
                    }
                }
            }
            out.set(t, q, (sum >= 0) as u8);
        }
    }
    out
}

/// Element-wise max over non-overlapping windows; a ragged tail pools the
/// remaining fewer-than-window positions.
pub fn ref_pool(x: &RefTensor, window: u32) -> RefTensor {
    let window = window as usize;
    let out_len = x.len.div_ceil(window);
    let mut out = RefTensor::zeros(out_len, x.channels);
    for t in 0..out_len {
        for c in 0..x.channels {
            let hi = ((t + 1) * window).min(x.len);
            let v = (t * window..hi).map(|p| x.get(p, c)).max().unwrap();
            out.set(t, c, v);
        }
    }
    out
}

/// Runs the whole model, returning the output of every execution step (for
/// a convolution with fused pooling, the pooled tensor — what gets written
/// back).
pub fn ref_infer(
    model: &ValidatedModel,
    weights: &ModelWeights,
    input: &RefTensor,
) -> Vec<RefTensor> {
    assert_eq!(input.len, model.input_len);
    assert_eq!(input.channels, model.input_channels);
    let mut outputs = Vec::with_capacity(model.steps.len());
    let mut cur = input.clone();
    let mut conv_idx = 0;
    for step in &model.steps {
        cur = match step {
            ExecStep::Conv(c) => {
                let w = &weights.layers[conv_idx];
                conv_idx += 1;
                let conv = ref_conv1d(&cur, w, c.stride, c.bias.as_deref());
                if c.pool_window > 1 {
                    ref_pool(&conv, c.pool_window)
                } else {
                    conv
                }
            }
            ExecStep::Pool(p) => ref_pool(&cur, p.window),
        };
        outputs.push(cur.clone());
    }
    outputs
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tensor(rows: &[&[u8]]) -> RefTensor {
        let mut t = RefTensor::zeros(rows.len(), rows[0].len());
        for (p, row) in rows.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                t.set(p, c, v);
            }
        }
        t
    }

    #[test]
    fn single_weight_cases() {
        // K=1, C_in=1, w=+1, x=1, b=0 -> 1.
        let x = tensor(&[&[1]]);
        let w = LayerWeights::new(1, 1, 1, vec![1]);
        assert_eq!(ref_conv1d(&x, &w, 1, None).get(0, 0), 1);

        // Exact zero sum binarizes to 1 (closed inequality).
        let x = tensor(&[&[0]]);
        assert_eq!(ref_conv1d(&x, &w, 1, None).get(0, 0), 1);

        // w=-1, x=1: sum -1 -> 0.
        let w = LayerWeights::new(1, 1, 1, vec![-1]);
        let x = tensor(&[&[1]]);
        assert_eq!(ref_conv1d(&x, &w, 1, None).get(0, 0), 0);
    }

    #[test]
    fn bias_shifts_the_threshold() {
        // Two +1 weights, both inputs on: sum 2; bias -2 keeps it at 1,
        // bias -3 flips it.
        let x = tensor(&[&[1, 1]]);
        let w = LayerWeights::new(1, 1, 2, vec![1, 1]);
        assert_eq!(ref_conv1d(&x, &w, 1, Some(&[-2])).get(0, 0), 1);
        assert_eq!(ref_conv1d(&x, &w, 1, Some(&[-3])).get(0, 0), 0);
    }

    #[test]
    fn matches_independent_loop_order() {
        // Second implementation with the loop nest inverted, as a
        // cross-check on the reference itself.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            use rand::Rng;
            let (c_in, c_out, k, stride) = (
                rng.gen_range(1..6),
                rng.gen_range(1..6),
                rng.gen_range(1..4),
                *[1usize, 2].get(rng.gen_range(0..2)).unwrap(),
            );
            let len = rng.gen_range(k..k + 9);
            let x = RefTensor::random(len, c_in, &mut rng);
            let w = LayerWeights::new(
                c_out,
                k,
                c_in,
                (0..c_out * k * c_in)
                    .map(|_| if rng.gen::<bool>() { 1 } else { -1 })
                    .collect(),
            );
            let a = ref_conv1d(&x, &w, stride, None);

            let n_out = (len - k) / stride + 1;
            let mut sums = vec![0i64; n_out * c_out];
            for c in 0..c_in {
                for kk in 0..k {
                    for q in 0..c_out {
                        for t in 0..n_out {
                            sums[t * c_out + q] +=
                                x.get(t * stride + kk, c) as i64 * w.get(q, kk, c) as i64;
                        }
                    }
                }
            }
            for t in 0..n_out {
                for q in 0..c_out {
                    assert_eq!(a.get(t, q), (sums[t * c_out + q] >= 0) as u8);
                }
            }
        }
    }

    #[test]
    fn pool_examples() {
        let x = tensor(&[&[1], &[0], &[0], &[0]]);
        let p = ref_pool(&x, 2);
        assert_eq!((p.len, p.get(0, 0), p.get(1, 0)), (2, 1, 0));

        // Window equal to the length collapses to a single all-OR position.
        let p = ref_pool(&x, 4);
        assert_eq!((p.len, p.get(0, 0)), (1, 1));

        // Ragged tail pools the remainder.
        let x = tensor(&[&[0], &[0], &[1]]);
        let p = ref_pool(&x, 2);
        assert_eq!((p.len, p.get(0, 0), p.get(1, 0)), (2, 0, 1));
    }

    #[test]
    fn identity_weights_reproduce_input() {
        // K=1, one +1 weight per matching channel... but a pure identity
        // needs +1 on the diagonal and -1 elsewhere to still binarize to
        // the input bit; with C_in = 1 the diagonal alone suffices only
        // for x=1, since sum 0 binarizes to 1. Use bias -1 to pin x=0.
        let m = crate::model::validate(&crate::model::ModelSpec {
            input_len: 6,
            weights: None,
            layers: vec![crate::model::LayerSpec::Conv1d {
                c_in: 1,
                c_out: 1,
                k: 1,
                stride: 1,
                fused_pool_window: None,
                bias: Some(vec![-1]),
            }],
        })
        .unwrap();
        let w = ModelWeights {
            layers: vec![LayerWeights::new(1, 1, 1, vec![1])],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = RefTensor::random(6, 1, &mut rng);
        let out = &ref_infer(&m, &w, &x)[0];
        assert_eq!(out, &x);
    }

    #[test]
    fn word_packing_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for channels in [1usize, 12, 128, 129, 280, 512] {
            let t = RefTensor::random(5, channels, &mut rng);
            let words = t.to_words();
            assert_eq!(words.len(), 5 * words_per_position(channels));
            assert_eq!(RefTensor::from_words(&words, 5, channels), t);
        }
    }
}
