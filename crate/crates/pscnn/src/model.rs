//! Model descriptions: the user-facing layer list, its validated execution
//! form, and layer weights.
//!
//! A model file is TOML with a top-level `input_len`, an optional
//! `[weights]` table, and one `[[layer]]` table per layer:
//!
//! ```toml
//! input_len = 32
//!
//! [weights]
//! source = "random"   # or "sidecar" with `path = "model.weights"`
//! seed = 7
//!
//! [[layer]]
//! type = "conv1d"
//! c_in = 8
//! c_out = 16
//! k = 3
//! stride = 1
//! fused_pool_window = 2   # optional
//!
//! [[layer]]
//! type = "pool"
//! window = 2
//!
//! [[layer]]
//! type = "dense"
//! in_features = 16
//! out_features = 12
//! ```
//!
//! Weights are binary (`+1`/`-1`), activations binary (`1`/`0`). A weight
//! sidecar is packed sign bits — 1 means `-1` — most-significant bit first
//! within each byte, layer-major; within a layer the order is output
//! channel, then kernel position, then input channel. A dense layer
//! consumes the entire remaining sequence (it is lowered to a convolution
//! whose kernel is the current feature length), so its weight count is
//! `out_features * len * in_features`.

use serde::Deserialize;
use thiserror::Error;

use crate::bits::words_per_position;

/// Hard geometry limits shared with the compiler.
pub const MAX_COLUMN_ROWS: usize = 1024;
pub const MAX_CHANNELS: usize = 512;
pub const MAX_POSITIONS: usize = 1024;
/// A feature map may span at most two 512-word banks.
pub const MAX_FEATURE_WORDS: usize = 1024;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model has no layers")]
    Empty,
    #[error("layer {layer}: expects {expected} input channels, previous layer produces {got}")]
    ChannelMismatch {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error(
        "layer {layer}: {rows} weight rows per output channel exceed the {max}-row column budget"
    )]
    ColumnOverflow {
        layer: usize,
        rows: usize,
        max: usize,
    },
    #[error("layer {layer}: {c_out} output channels exceed the {max} bitline pairs")]
    TooManyChannels {
        layer: usize,
        c_out: usize,
        max: usize,
    },
    #[error("layer {layer}: field `{field}` must be one of 1/2/4/8, got {value}")]
    BadPow2 {
        layer: usize,
        field: &'static str,
        value: usize,
    },
    #[error("layer {layer}: zero-sized field `{field}`")]
    ZeroField { layer: usize, field: &'static str },
    #[error("layer {layer}: produces no output positions (input length {in_len}, kernel {k})")]
    ZeroOutput {
        layer: usize,
        in_len: usize,
        k: usize,
    },
    #[error("layer {layer}: {n_out} output positions exceed {max}")]
    TooManyPositions {
        layer: usize,
        n_out: usize,
        max: usize,
    },
    #[error("layer {layer}: bias has {got} entries, expected one per output channel ({expected})")]
    BiasLen {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error(
        "layer {layer}: feature map needs {words} words, more than the {max}-word bank-pair budget"
    )]
    FeatureTooLarge {
        layer: usize,
        words: usize,
        max: usize,
    },
    #[error("standalone pool layer {layer}: window must be 2, 4 or 8 (window 1 is a no-op)")]
    PoolWindowOne { layer: usize },
    #[error("the first layer cannot be a pool layer (nothing defines its channel count)")]
    LeadingPool,
    #[error("model file: {0}")]
    Parse(String),
    #[error("weight sidecar holds {got} bits, model needs {expected}")]
    WeightCount { expected: usize, got: usize },
    #[error("no weight source: the model file has no [weights] table and no sidecar was supplied")]
    MissingWeights,
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv1d {
        c_in: usize,
        c_out: usize,
        k: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        fused_pool_window: Option<u32>,
        #[serde(default)]
        bias: Option<Vec<i32>>,
    },
    Pool {
        window: u32,
    },
    Dense {
        in_features: usize,
        out_features: usize,
    },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_len: usize,
    #[serde(default)]
    pub weights: Option<WeightSource>,
    #[serde(rename = "layer")]
    pub layers: Vec<LayerSpec>,
}

/// Where a model's weights come from.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightSource {
    /// Packed sign-bit sidecar file.
    Sidecar { path: String },
    /// Deterministic pseudo-random weights; handy for sizing studies and
    /// reference models where exact values are immaterial.
    Random { seed: u64 },
}

impl ModelSpec {
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        toml::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))
    }
}

/// One executable step after validation. Fused pooling is folded into its
/// convolution; dense layers have been lowered to full-length convolutions.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum ExecStep {
    Conv(ConvStep),
    Pool(PoolStep),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConvStep {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    /// 1 when nothing is fused.
    pub pool_window: u32,
    pub bias: Option<Vec<i32>>,
    pub in_len: usize,
    /// Convolution output positions, pre-pooling.
    pub n_out: usize,
    /// Positions actually written back (post-pooling).
    pub out_len: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PoolStep {
    pub channels: usize,
    pub window: u32,
    pub in_len: usize,
    pub out_len: usize,
}

impl ConvStep {
    /// Extra rows appended below the weights to realize integer biases as
    /// constant-driven cells: channel `q` uses `|bias_q|` cells of
    /// `sign(bias_q)`.
    pub fn bias_rows(&self) -> usize {
        self.bias
            .as_ref()
            .map(|b| {
                b.iter()
                    .map(|v| v.unsigned_abs() as usize)
                    .max()
                    .unwrap_or(0)
            })
            .unwrap_or(0)
    }

    /// Macro rows the layer occupies: one weight per (position, channel)
    /// plus the bias tail.
    pub fn rows(&self) -> usize {
        self.k * self.c_in + self.bias_rows()
    }

    pub fn weight_count(&self) -> usize {
        self.c_out * self.k * self.c_in
    }
}

impl ExecStep {
    pub fn out_len(&self) -> usize {
        match self {
            ExecStep::Conv(c) => c.out_len,
            ExecStep::Pool(p) => p.out_len,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            ExecStep::Conv(c) => c.c_out,
            ExecStep::Pool(p) => p.channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ValidatedModel {
    pub input_len: usize,
    pub input_channels: usize,
    pub steps: Vec<ExecStep>,
}

impl ValidatedModel {
    pub fn conv_steps(&self) -> impl Iterator<Item = &ConvStep> {
        self.steps.iter().filter_map(|s| match s {
            ExecStep::Conv(c) => Some(c),
            ExecStep::Pool(_) => None,
        })
    }

    /// Total sign bits a weight sidecar must supply.
    pub fn weight_bits(&self) -> usize {
        self.conv_steps().map(|c| c.weight_count()).sum()
    }

    /// Multiply-accumulates per inference: `n_out * c_out * k * c_in`
    /// summed over convolution steps.
    pub fn mac_count(&self) -> u64 {
        self.conv_steps()
            .map(|c| (c.n_out * c.c_out * c.k * c.c_in) as u64)
            .sum()
    }
}

fn check_pow2(layer: usize, field: &'static str, value: usize) -> Result<(), ModelError> {
    match value {
        1 | 2 | 4 | 8 => Ok(()),
        _ => Err(ModelError::BadPow2 {
            layer,
            field,
            value,
        }),
    }
}

fn check_feature(layer: usize, len: usize, channels: usize) -> Result<(), ModelError> {
    let words = len * words_per_position(channels);
    if words > MAX_FEATURE_WORDS {
        return Err(ModelError::FeatureTooLarge {
            layer,
            words,
            max: MAX_FEATURE_WORDS,
        });
    }
    Ok(())
}

/// Checks every structural constraint and computes per-layer feature sizes.
/// Dense layers are rewritten as convolutions covering the whole remaining
/// sequence.
pub fn validate(spec: &ModelSpec) -> Result<ValidatedModel, ModelError> {
    if spec.layers.is_empty() {
        return Err(ModelError::Empty);
    }
    if spec.input_len == 0 {
        return Err(ModelError::ZeroField {
            layer: 0,
            field: "input_len",
        });
    }
    let input_channels = match &spec.layers[0] {
        LayerSpec::Conv1d { c_in, .. } => *c_in,
        LayerSpec::Dense { in_features, .. } => *in_features,
        LayerSpec::Pool { .. } => return Err(ModelError::LeadingPool),
    };

    let mut steps = Vec::with_capacity(spec.layers.len());
    let (mut len, mut channels) = (spec.input_len, input_channels);
    check_feature(0, len, channels)?;

    for (idx, layer) in spec.layers.iter().enumerate() {
        let step = match layer.clone() {
            LayerSpec::Conv1d {
                c_in,
                c_out,
                k,
                stride,
                fused_pool_window,
                bias,
            } => build_conv(
                idx,
                len,
                channels,
                c_in,
                c_out,
                k,
                stride,
                fused_pool_window,
                bias,
            )?,
            LayerSpec::Dense {
                in_features,
                out_features,
            } => build_conv(
                idx,
                len,
                channels,
                in_features,
                out_features,
                len,
                1,
                None,
                None,
            )?,
            LayerSpec::Pool { window } => {
                if window == 1 {
                    return Err(ModelError::PoolWindowOne { layer: idx });
                }
                check_pow2(idx, "window", window as usize)?;
                let out_len = len.div_ceil(window as usize);
                ExecStep::Pool(PoolStep {
                    channels,
                    window,
                    in_len: len,
                    out_len,
                })
            }
        };
        len = step.out_len();
        channels = step.out_channels();
        check_feature(idx, len, channels)?;
        steps.push(step);
    }

    Ok(ValidatedModel {
        input_len: spec.input_len,
        input_channels,
        steps,
    })
}

#[allow(clippy::too_many_arguments)]
fn build_conv(
    idx: usize,
    len: usize,
    channels: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    fused_pool_window: Option<u32>,
    bias: Option<Vec<i32>>,
) -> Result<ExecStep, ModelError> {
    for (field, value) in [("c_in", c_in), ("c_out", c_out), ("k", k)] {
        if value == 0 {
            return Err(ModelError::ZeroField { layer: idx, field });
        }
    }
    if c_in != channels {
        return Err(ModelError::ChannelMismatch {
            layer: idx,
            expected: c_in,
            got: channels,
        });
    }
    if c_out > MAX_CHANNELS {
        return Err(ModelError::TooManyChannels {
            layer: idx,
            c_out,
            max: MAX_CHANNELS,
        });
    }
    check_pow2(idx, "stride", stride)?;
    let pool_window = fused_pool_window.unwrap_or(1);
    check_pow2(idx, "fused_pool_window", pool_window as usize)?;
    if let Some(b) = &bias {
        if b.len() != c_out {
            return Err(ModelError::BiasLen {
                layer: idx,
                expected: c_out,
                got: b.len(),
            });
        }
    }
    if len < k {
        return Err(ModelError::ZeroOutput {
            layer: idx,
            in_len: len,
            k,
        });
    }
    let n_out = (len - k) / stride + 1;
    if n_out > MAX_POSITIONS {
        return Err(ModelError::TooManyPositions {
            layer: idx,
            n_out,
            max: MAX_POSITIONS,
        });
    }
    let step = ConvStep {
        c_in,
        c_out,
        k,
        stride,
        pool_window,
        bias,
        in_len: len,
        n_out,
        out_len: n_out.div_ceil(pool_window as usize),
    };
    if step.rows() > MAX_COLUMN_ROWS {
        return Err(ModelError::ColumnOverflow {
            layer: idx,
            rows: step.rows(),
            max: MAX_COLUMN_ROWS,
        });
    }
    Ok(ExecStep::Conv(step))
}

/// Weights of one convolution step, `+1`/`-1` per entry, indexed
/// `[output channel][kernel position][input channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub c_out: usize,
    pub k: usize,
    pub c_in: usize,
    w: Vec<i8>,
}

impl LayerWeights {
    pub fn new(c_out: usize, k: usize, c_in: usize, w: Vec<i8>) -> Self {
        assert_eq!(w.len(), c_out * k * c_in);
        debug_assert!(w.iter().all(|&v| v == 1 || v == -1));
        LayerWeights { c_out, k, c_in, w }
    }

    #[inline]
    pub fn get(&self, q: usize, k: usize, c: usize) -> i8 {
        self.w[(q * self.k + k) * self.c_in + c]
    }

    pub fn raw(&self) -> &[i8] {
        &self.w
    }
}

/// All weighted layers of a model, in execution order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub layers: Vec<LayerWeights>,
}

impl ModelWeights {
    /// Deterministic pseudo-random weights for every conv step.
    pub fn random(model: &ValidatedModel, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let layers = model
            .conv_steps()
            .map(|c| {
                let w = (0..c.weight_count())
                    .map(|_| if rng.gen::<bool>() { 1i8 } else { -1 })
                    .collect();
                LayerWeights::new(c.c_out, c.k, c.c_in, w)
            })
            .collect();
        ModelWeights { layers }
    }

    /// Decodes a packed sign-bit sidecar (1 = `-1`), MSB first.
    pub fn from_sidecar(model: &ValidatedModel, bytes: &[u8]) -> Result<Self, ModelError> {
        let expected = model.weight_bits();
        if bytes.len() != expected.div_ceil(8) {
            return Err(ModelError::WeightCount {
                expected,
                got: bytes.len() * 8,
            });
        }
        let bit = |i: usize| bytes[i / 8] & (0x80 >> (i % 8)) != 0;
        let mut offset = 0;
        let layers = model
            .conv_steps()
            .map(|c| {
                let n = c.weight_count();
                let w = (offset..offset + n)
                    .map(|i| if bit(i) { -1i8 } else { 1 })
                    .collect();
                offset += n;
                LayerWeights::new(c.c_out, c.k, c.c_in, w)
            })
            .collect();
        Ok(ModelWeights { layers })
    }

    /// Packs weights back into the sidecar layout.
    pub fn to_sidecar(&self) -> Vec<u8> {
        let total: usize = self.layers.iter().map(|l| l.w.len()).sum();
        let mut out = vec![0u8; total.div_ceil(8)];
        let mut i = 0;
        for layer in &self.layers {
            for &v in &layer.w {
                if v == -1 {
                    out[i / 8] |= 0x80 >> (i % 8);
                }
                i += 1;
            }
        }
        out
    }
}

/// Reads and validates a model file, resolving its weight source. A
/// sidecar path is taken relative to the model file's directory; an
/// explicit `sidecar_override` wins over whatever the file declares.
pub fn load_model_file(
    path: &std::path::Path,
    sidecar_override: Option<&std::path::Path>,
) -> Result<(ValidatedModel, ModelWeights), ModelError> {
    let read = |p: &std::path::Path| {
        std::fs::read(p).map_err(|source| ModelError::Io {
            path: p.display().to_string(),
            source,
        })
    };
    let text = String::from_utf8_lossy(&read(path)?).into_owned();
    let spec = ModelSpec::parse(&text)?;
    let model = validate(&spec)?;
    let weights = if let Some(sidecar) = sidecar_override {
        ModelWeights::from_sidecar(&model, &read(sidecar)?)?
    } else {
        match &spec.weights {
            Some(WeightSource::Random { seed }) => ModelWeights::random(&model, *seed),
            Some(WeightSource::Sidecar { path: rel }) => {
                let base = path.parent().unwrap_or(std::path::Path::new("."));
                ModelWeights::from_sidecar(&model, &read(&base.join(rel))?)?
            }
            None => return Err(ModelError::MissingWeights),
        }
    };
    Ok((model, weights))
}
