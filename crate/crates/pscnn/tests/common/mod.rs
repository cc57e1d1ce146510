//! Shared test utilities: a seeded random-model generator that always
//! yields a compilable model with a plannable unfused variant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pscnn::compiler::{map_model, MappedModel};
use pscnn::model::{validate, LayerSpec, ModelSpec, ModelWeights, ValidatedModel};
use pscnn::oracle::RefTensor;

/// Keeps single-run oracle work small enough for hundreds of models.
pub const MAC_BUDGET: u64 = 2_500_000;

pub struct GeneratedModel {
    pub model: ValidatedModel,
    #[allow(dead_code)]
    pub weights: ModelWeights,
    pub mapped: MappedModel,
}

fn channel_count(rng: &mut ChaCha8Rng) -> usize {
    // Mostly small, occasionally wide, covering the full 1..=512 range.
    match rng.gen_range(0..100) {
        0..=49 => rng.gen_range(1..=8),
        50..=79 => rng.gen_range(9..=64),
        80..=94 => rng.gen_range(65..=256),
        _ => rng.gen_range(257..=512),
    }
}

/// Builds a random model (1..=6 layers, channels up to 512, kernels up to
/// 8, strides 1/2, optional fused pooling, occasional standalone pooling,
/// bias and dense layers), retrying derived seeds until everything
/// validates, compiles, and plans in both variants.
pub fn random_model(seed: u64) -> GeneratedModel {
    for attempt in 0..10_000u64 {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(attempt));
        let n_layers = rng.gen_range(1..=6);
        let input_len = rng.gen_range(8..=40);
        let input_channels = channel_count(&mut rng);

        let mut layers = Vec::new();
        let mut len = input_len;
        let mut channels = input_channels;
        for li in 0..n_layers {
            if li > 0 && len >= 2 && rng.gen_bool(0.15) {
                let window = *[2u32, 4, 8]
                    .iter()
                    .rfind(|&&w| (w as usize) <= len)
                    .unwrap();
                let window = if rng.gen_bool(0.5) { 2 } else { window };
                layers.push(LayerSpec::Pool { window });
                len = len.div_ceil(window as usize);
                continue;
            }
            if li + 1 == n_layers && rng.gen_bool(0.25) {
                let out_features = rng.gen_range(1..=16);
                layers.push(LayerSpec::Dense {
                    in_features: channels,
                    out_features,
                });
                len = 1;
                channels = out_features;
                continue;
            }
            let k_max = (1024 / channels).clamp(1, 8.min(len));
            let k = rng.gen_range(1..=k_max);
            let stride = if rng.gen_bool(0.3) { 2 } else { 1 };
            let c_out = channel_count(&mut rng);
            let n_out = (len - k) / stride + 1;
            let fused_pool_window = if n_out >= 2 && rng.gen_bool(0.45) {
                Some(*[2u32, 2, 4, 8].get(rng.gen_range(0..4)).unwrap())
            } else {
                None
            };
            let bias = if rng.gen_bool(0.2) {
                Some((0..c_out).map(|_| rng.gen_range(-3..=3)).collect())
            } else {
                None
            };
            layers.push(LayerSpec::Conv1d {
                c_in: channels,
                c_out,
                k,
                stride,
                fused_pool_window,
                bias,
            });
            len = n_out.div_ceil(fused_pool_window.unwrap_or(1) as usize);
            channels = c_out;
        }

        let spec = ModelSpec {
            input_len,
            weights: None,
            layers,
        };
        let Ok(model) = validate(&spec) else { continue };
        if model.mac_count() > MAC_BUDGET {
            continue;
        }
        let weights = ModelWeights::random(&model, seed ^ 0x5EED_5EED);
        let Ok(mapped) = map_model(&model, &weights) else {
            continue;
        };
        if mapped.unfused.is_none() {
            continue;
        }
        return GeneratedModel {
            model,
            weights,
            mapped,
        };
    }
    panic!("no viable model for seed {seed}");
}

pub fn random_input(model: &ValidatedModel, seed: u64) -> RefTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RefTensor::random(model.input_len, model.input_channels, &mut rng)
}
