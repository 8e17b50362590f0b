#![allow(dead_code)]

use maskvit_core::attention::AttentionMaskVector;
use maskvit_core::hvit::{ModelConfig, SlideSample};
use maskvit_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Tissue vector with roughly `bg_rate` zero entries, always at least one
/// positive entry.
pub fn random_tissue(rng: &mut ChaCha8Rng, len: usize, bg_rate: f64) -> AttentionMaskVector {
    let mut v: Vec<f64> = (0..len)
        .map(|_| if rng.gen_bool(bg_rate) { 0.0 } else { rng.gen_range(0.01..=1.0) })
        .collect();
    if v.iter().all(|&x| x == 0.0) {
        let j = rng.gen_range(0..len);
        v[j] = 0.5;
    }
    AttentionMaskVector::new(v).unwrap()
}

pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        region_size: 4,
        patch_size: 2,
        input_dim: 3,
        embed_dim: 8,
        region_depth: 2,
        slide_depth: 1,
        num_heads: 2,
        mlp_ratio: 2,
        seed,
    }
}

pub fn random_sample(
    rng: &mut ChaCha8Rng,
    cfg: &ModelConfig,
    regions: usize,
    bg_rate: f64,
    label: u8,
) -> SlideSample {
    let t = cfg.tokens_per_region();
    let feats = random_tensor(rng, &[regions, t, cfg.input_dim]);
    let tissue = (0..regions).map(|_| random_tissue(rng, t, bg_rate)).collect();
    let coords = (0..regions).map(|i| ((i * cfg.region_size) as u32, 0)).collect();
    SlideSample::new("s".into(), coords, feats, tissue, label).unwrap()
}

/// Replaces the features of every zero-tissue patch with fresh noise.
pub fn resample_background(rng: &mut ChaCha8Rng, sample: &SlideSample) -> SlideSample {
    let mut out = sample.clone();
    let s = out.patch_features.shape().to_vec();
    let (t, f) = (s[1], s[2]);
    let data = out.patch_features.data_mut();
    for (m, tissue) in sample.tissue.iter().enumerate() {
        for j in 0..t {
            if tissue.is_background(j) {
                for k in 0..f {
                    data[(m * t + j) * f + k] = rng.gen_range(-50.0..50.0);
                }
            }
        }
    }
    out
}
