//! Runs the simulator against the brute-force reference and pinpoints the
//! first divergence.

use thiserror::Error;

use crate::bits::words_per_position;
use crate::cim::VariationParams;
use crate::compiler::{unpack_model_weights, CompileError, MacKind, MappedModel};
use crate::controller::{SimError, SimStats, System};
use crate::model::{ExecStep, ModelWeights};
use crate::oracle::{ref_conv1d, ref_pool, RefTensor};

#[derive(Debug, Error)]
pub enum CompareError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error("MAC #{mac_index}: simulator and reference diverge at position {position}, channel {channel} (simulator {got}, reference {expected})")]
    Mismatch {
        mac_index: usize,
        position: usize,
        channel: usize,
        expected: u8,
        got: u8,
    },
    #[error("MAC #{mac_index}: simulator wrote {got} words, reference expects {expected}")]
    LengthMismatch {
        mac_index: usize,
        expected: usize,
        got: usize,
    },
    #[error("simulator executed {got} MACs, reference expects {expected}")]
    MacCount { expected: usize, got: usize },
}

/// Reference word streams, one per MAC instruction of the chosen variant.
/// In the unfused variant a convolution with a pooling window contributes
/// two streams: its full-rate output and the separate pooling pass.
pub fn expected_mac_outputs(
    mapped: &MappedModel,
    weights: &ModelWeights,
    input: &RefTensor,
    unfused: bool,
) -> Vec<Vec<u128>> {
    let mut out = Vec::new();
    let mut cur = input.clone();
    let mut conv_idx = 0;
    for step in &mapped.model.steps {
        match step {
            ExecStep::Conv(c) => {
                let conv = ref_conv1d(&cur, &weights.layers[conv_idx], c.stride, c.bias.as_deref());
                conv_idx += 1;
                cur = if c.pool_window > 1 {
                    if unfused {
                        out.push(conv.to_words());
                        let pooled = ref_pool(&conv, c.pool_window);
                        out.push(pooled.to_words());
                        pooled
                    } else {
                        let pooled = ref_pool(&conv, c.pool_window);
                        out.push(pooled.to_words());
                        pooled
                    }
                } else {
                    out.push(conv.to_words());
                    conv
                };
            }
            ExecStep::Pool(p) => {
                cur = ref_pool(&cur, p.window);
                out.push(cur.to_words());
            }
        }
    }
    out
}

/// Executes the compiled model and checks every MAC's written words
/// bit-for-bit against the reference. Weights are rebuilt from the preload
/// images, so a loaded container needs nothing else.
pub fn run_and_compare(
    mapped: &MappedModel,
    unfused: bool,
    input: &RefTensor,
    var: VariationParams,
) -> Result<SimStats, CompareError> {
    let weights = unpack_model_weights(mapped)?;
    let expected = expected_mac_outputs(mapped, &weights, input, unfused);

    let mut sys = System::from_mapped(mapped, unfused)?;
    sys.set_variation(var);
    sys.set_capture(true);
    sys.load_input(&input.to_words())?;
    let stats = sys.run()?;

    let variant = if unfused {
        mapped.unfused.as_ref().unwrap()
    } else {
        &mapped.fused
    };
    let got = sys.captured_outputs();
    if got.len() != expected.len() {
        return Err(CompareError::MacCount {
            expected: expected.len(),
            got: got.len(),
        });
    }
    for (mac_index, (exp, act)) in expected.iter().zip(got).enumerate() {
        if exp.len() != act.len() {
            return Err(CompareError::LengthMismatch {
                mac_index,
                expected: exp.len(),
                got: act.len(),
            });
        }
        let entry = &variant.layer_table[mac_index];
        let wpp = words_per_position(match entry.kind {
            MacKind::Conv => entry.c_out,
            MacKind::Bypass => entry.c_in,
        });
        for (wi, (&e, &a)) in exp.iter().zip(act.iter()).enumerate() {
            if e != a {
                let bit = (e ^ a).trailing_zeros() as usize;
                return Err(CompareError::Mismatch {
                    mac_index,
                    position: wi / wpp,
                    channel: (wi % wpp) * 128 + bit,
                    expected: (e >> bit & 1) as u8,
                    got: (a >> bit & 1) as u8,
                });
            }
        }
    }
    Ok(stats)
}
