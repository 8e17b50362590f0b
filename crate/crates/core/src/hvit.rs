//! Three-scale hierarchical vision transformer.
//!
//! Patch features `(M, T, F_in)` are embedded to `(M, T, D)`, a region
//! transformer (masked or plain) pools each region's `T` patch tokens into a
//! class token `(M, D)`, a slide transformer pools region tokens into a
//! slide embedding `(D)`, and a linear head regresses the ISUP score.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{key_keep_flags, AttentionMaskVector, TransformerBlockParams};
use crate::error::{Error, Result};
use crate::nn::{normal_like, LayerNorm, Linear};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub const MAX_ISUP: u8 = 5;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Whether the region transformer masks background keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Masking {
    On,
    Off,
}

impl Masking {
    pub fn is_on(self) -> bool {
        self == Masking::On
    }

    pub fn label(self) -> &'static str {
        match self {
            Masking::On => "masked",
            Masking::Off => "plain",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ModelConfig {
    /// Region side length in pixels.
    pub region_size: usize,
    /// Patch side length in pixels.
    pub patch_size: usize,
    /// Raw per-patch feature width fed to the patch embedder.
    pub input_dim: usize,
    pub embed_dim: usize,
    pub region_depth: usize,
    pub slide_depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            region_size: 1024,
            patch_size: 256,
            input_dim: crate::pipeline::FEATURE_DIM,
            embed_dim: 64,
            region_depth: 2,
            slide_depth: 2,
            num_heads: 4,
            mlp_ratio: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Patch tokens per region, `(R / P)^2`.
    pub fn tokens_per_region(&self) -> usize {
        let side = self.region_size / self.patch_size;
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.patch_size == 0 || self.region_size == 0 || !self.region_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "region size {} must be a positive multiple of patch size {}",
                self.region_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed dim {} must be divisible by {} heads",
                self.embed_dim, self.num_heads
            ));
        }
        if self.input_dim == 0 || self.mlp_ratio == 0 {
            return bad("input_dim and mlp_ratio must be positive".into());
        }
        if self.region_depth == 0 || self.slide_depth == 0 {
            return bad("transformer depths must be positive".into());
        }
        Ok(())
    }
}

/// One slide after preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideSample {
    pub slide_id: String,
    /// Top-left pixel coordinates of each retained region.
    pub region_coords: Vec<(u32, u32)>,
    /// `(M, T, F_in)` raw patch features.
    pub patch_features: Tensor,
    pub tissue: Vec<AttentionMaskVector>,
    /// ISUP grade group, 0 to 5.
    pub label: u8,
}

impl SlideSample {
    pub fn new(
        slide_id: String,
        region_coords: Vec<(u32, u32)>,
        patch_features: Tensor,
        tissue: Vec<AttentionMaskVector>,
        label: u8,
    ) -> Result<Self> {
        let s = patch_features.shape();
        let m = region_coords.len();
        if m == 0 {
            return Err(Error::Empty("slide has no regions"));
        }
        if s.len() != 3 || s[0] != m || tissue.len() != m || tissue.iter().any(|t| t.len() != s[1]) {
            return Err(Error::ShapeMismatch {
                op: "slide sample",
                lhs: s.to_vec(),
                rhs: vec![m, tissue.len()],
            });
        }
        if label > MAX_ISUP {
            return Err(Error::LabelOutOfRange(label as i64));
        }
        Ok(Self {
            slide_id,
            region_coords,
            patch_features,
            tissue,
            label,
        })
    }

    pub fn num_regions(&self) -> usize {
        self.region_coords.len()
    }

    /// True if some patch of some region carries zero tissue.
    pub fn has_background(&self) -> bool {
        self.tissue
            .iter()
            .any(|t| (0..t.len()).any(|j| t.is_background(j)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalVit {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub patch_embed: Linear,
    pub region_cls: ParamId,
    pub region_pos: ParamId,
    pub region_blocks: Vec<TransformerBlockParams>,
    pub region_norm: LayerNorm,
    pub slide_cls: ParamId,
    pub slide_blocks: Vec<TransformerBlockParams>,
    pub slide_norm: LayerNorm,
    pub head: Linear,
}

impl HierarchicalVit {
    /// Builds a freshly initialised model; identical configs give
    /// bit-identical parameters.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.embed_dim;
        let t = config.tokens_per_region();
        let patch_embed = Linear::new(&mut store, "patch_embed", config.input_dim, d, &mut rng)?;
        let region_cls = store.add("region.cls_token", normal_like(&mut rng, &[d], 0.02))?;
        let region_pos = store.add("region.pos_embed", normal_like(&mut rng, &[t + 1, d], 0.02))?;
        let region_blocks = (0..config.region_depth)
            .map(|i| {
                TransformerBlockParams::new(
                    &mut store,
                    &format!("region.block{i}"),
                    d,
                    config.num_heads,
                    config.mlp_ratio,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let region_norm = LayerNorm::new(&mut store, "region.norm", d)?;
        let slide_cls = store.add("slide.cls_token", normal_like(&mut rng, &[d], 0.02))?;
        let slide_blocks = (0..config.slide_depth)
            .map(|i| {
                TransformerBlockParams::new(
                    &mut store,
                    &format!("slide.block{i}"),
                    d,
                    config.num_heads,
                    config.mlp_ratio,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let slide_norm = LayerNorm::new(&mut store, "slide.norm", d)?;
        let head = Linear::new(&mut store, "head", d, 1, &mut rng)?;
        Ok(Self {
            config,
            store,
            patch_embed,
            region_cls,
            region_pos,
            region_blocks,
            region_norm,
            slide_cls,
            slide_blocks,
            slide_norm,
            head,
        })
    }

    /// Rebuilds a model from a checkpoint, matching parameters by name.
    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        let mut model = Self::new(ckpt.config.clone())?;
        if model.store.len() != ckpt.params.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint holds {} parameters, model expects {}",
                ckpt.params.len(),
                model.store.len()
            )));
        }
        for p in ckpt.params.iter() {
            let id = model.store.find(&p.name).ok_or_else(|| {
                Error::InvalidArgument(format!("unknown parameter {} in checkpoint", p.name))
            })?;
            let dst = &mut model.store.get_mut(id).tensor;
            if dst.shape() != p.tensor.shape() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint parameter",
                    lhs: dst.shape().to_vec(),
                    rhs: p.tensor.shape().to_vec(),
                });
            }
            dst.data_mut().copy_from_slice(p.tensor.data());
        }
        Ok(model)
    }

    /// Learned linear projection `(M, T, F_in) -> (M, T, D)`.
    pub fn embed_patches(&self, tape: &mut Tape, raw: Var) -> Result<Var> {
        let s = tape.shape(raw);
        if s.len() != 3 || s[1] != self.config.tokens_per_region() || s[2] != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                op: "embed_patches",
                lhs: s.to_vec(),
                rhs: vec![self.config.tokens_per_region(), self.config.input_dim],
            });
        }
        self.patch_embed.forward(tape, &self.store, raw)
    }

    fn region_encode(
        &self,
        tape: &mut Tape,
        features: Var,
        tissue: &[AttentionMaskVector],
        masking: Masking,
        capture: Option<usize>,
    ) -> Result<(Var, Option<Var>)> {
        let s = tape.shape(features).to_vec();
        let (t, d) = (self.config.tokens_per_region(), self.config.embed_dim);
        if s.len() != 3 || s[1] != t || s[2] != d || tissue.len() != s[0] {
            return Err(Error::ShapeMismatch {
                op: "region_forward",
                lhs: s,
                rhs: vec![tissue.len(), t, d],
            });
        }
        if let Some(layer) = capture {
            if layer >= self.region_blocks.len() {
                return Err(Error::LayerOutOfRange {
                    index: layer,
                    depth: self.region_blocks.len(),
                });
            }
        }
        let keep = match masking {
            Masking::On => Some(key_keep_flags(tissue, t)?),
            Masking::Off => {
                if let Some(bad) = tissue.iter().find(|v| v.len() != t) {
                    return Err(Error::ShapeMismatch {
                        op: "tissue vector",
                        lhs: vec![t],
                        rhs: vec![bad.len()],
                    });
                }
                None
            }
        };
        let cls = tape.param(&self.store, self.region_cls);
        let pos = tape.param(&self.store, self.region_pos);
        let mut h = tape.prepend_token(features, cls)?;
        h = tape.add(h, pos)?;
        let mut captured = None;
        for (i, block) in self.region_blocks.iter().enumerate() {
            let (next, attn) = block.forward_keep(tape, &self.store, h, keep.as_deref())?;
            if capture == Some(i) {
                captured = Some(attn);
            }
            h = next;
        }
        h = self.region_norm.forward(tape, &self.store, h)?;
        let cls_out = tape.narrow(h, 1, 0, 1)?;
        Ok((tape.reshape(cls_out, &[s[0], d])?, captured))
    }

    /// Region transformer over embedded patches; returns one class-token
    /// row per region, `(M, D)`.
    pub fn region_forward(
        &self,
        tape: &mut Tape,
        features: Var,
        tissue: &[AttentionMaskVector],
        masking: Masking,
    ) -> Result<Var> {
        Ok(self.region_encode(tape, features, tissue, masking, None)?.0)
    }

    /// Slide transformer over region tokens `(M, D)`, no positional
    /// embeddings; returns the slide embedding `(D)`.
    pub fn slide_forward(&self, tape: &mut Tape, region_tokens: Var) -> Result<Var> {
        let s = tape.shape(region_tokens).to_vec();
        let d = self.config.embed_dim;
        if s.len() != 2 || s[1] != d {
            return Err(Error::ShapeMismatch {
                op: "slide_forward",
                lhs: s,
                rhs: vec![d],
            });
        }
        let h = tape.reshape(region_tokens, &[1, s[0], d])?;
        let cls = tape.param(&self.store, self.slide_cls);
        let mut h = tape.prepend_token(h, cls)?;
        for block in &self.slide_blocks {
            h = block.forward_keep(tape, &self.store, h, None)?.0;
        }
        h = self.slide_norm.forward(tape, &self.store, h)?;
        let cls_out = tape.narrow(h, 1, 0, 1)?;
        tape.reshape(cls_out, &[d])
    }

    /// Linear regression head, returns a one-element logit.
    pub fn head_forward(&self, tape: &mut Tape, slide_embedding: Var) -> Result<Var> {
        let d = self.config.embed_dim;
        let h = tape.reshape(slide_embedding, &[1, d])?;
        let y = self.head.forward(tape, &self.store, h)?;
        tape.reshape(y, &[1])
    }

    /// Full hierarchy for one slide, returning the logit node.
    pub fn forward(&self, tape: &mut Tape, sample: &SlideSample, masking: Masking) -> Result<Var> {
        let raw = tape.constant(sample.patch_features.clone());
        let feats = self.embed_patches(tape, raw)?;
        let regions = self.region_forward(tape, feats, &sample.tissue, masking)?;
        let slide = self.slide_forward(tape, regions)?;
        self.head_forward(tape, slide)
    }

    pub fn logit(&self, sample: &SlideSample, masking: Masking) -> Result<f64> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, sample, masking)?;
        Ok(tape.scalar(out))
    }

    /// Post-softmax attention of region block `layer` for every region of
    /// the slide, `(M, heads, T+1, T+1)`.
    pub fn region_attention(
        &self,
        sample: &SlideSample,
        masking: Masking,
        layer: usize,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let raw = tape.constant(sample.patch_features.clone());
        let feats = self.embed_patches(&mut tape, raw)?;
        let (_, attn) = self.region_encode(&mut tape, feats, &sample.tissue, masking, Some(layer))?;
        let attn = attn.expect("capture layer validated");
        Ok(tape.value(attn).clone())
    }
}

/// Decodes a regression logit into an ISUP score: round half away from
/// zero, then clamp to `0..=5`. Non-finite logits clamp as well (NaN maps
/// to 0).
pub fn predict_isup(logit: f64) -> u8 {
    let r = libm::round(logit);
    if r.is_nan() || r <= 0.0 {
        0
    } else if r >= MAX_ISUP as f64 {
        MAX_ISUP
    } else {
        r as u8
    }
}

/// `(logit - label)^2` as a differentiable scalar.
pub fn mse_loss(tape: &mut Tape, logit: Var, label: i64) -> Result<Var> {
    if !(0..=MAX_ISUP as i64).contains(&label) {
        return Err(Error::LabelOutOfRange(label));
    }
    let target = tape.constant(Tensor::scalar(label as f64));
    let diff = tape.sub(logit, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.sum_all(sq))
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub masking: Masking,
    pub step: u64,
    pub params: ParamStore,
    pub optimizer: AdamState,
}

impl ModelCheckpoint {
    /// Snapshot with gradient slots cleared.
    pub fn capture(model: &HierarchicalVit, masking: Masking, optimizer: &AdamState) -> Self {
        let mut params = model.store.clone();
        params.zero_grad();
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: model.config.clone(),
            masking,
            step: optimizer.step,
            params,
            optimizer: optimizer.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub masking: Masking,
    pub adam: AdamConfig,
}

/// Runs `opts.epochs` epochs of one-slide-per-step Adam on `dataset`,
/// continuing from `model` and `state`. Slide order is reshuffled each
/// epoch from the model seed and the optimizer step counter.
pub fn train_epochs(
    model: &mut HierarchicalVit,
    state: &mut AdamState,
    dataset: &[SlideSample],
    opts: &TrainOptions,
) -> Result<Vec<EpochMetrics>> {
    if dataset.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut metrics = Vec::with_capacity(opts.epochs);
    let first_epoch = (state.step / dataset.len() as u64) as usize;
    for e in 0..opts.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(
            model.config.seed ^ state.step.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let sample = &dataset[i];
            model.store.zero_grad();
            let mut tape = Tape::new();
            let logit = model.forward(&mut tape, sample, opts.masking)?;
            let loss = mse_loss(&mut tape, logit, sample.label as i64)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch: first_epoch + e,
                    step: state.step,
                    loss: value,
                });
            }
            tape.backward(loss, &mut model.store)?;
            adam_step(&mut model.store, &opts.adam, state)?;
            total += value;
        }
        metrics.push(EpochMetrics {
            epoch: first_epoch + e,
            mean_loss: total / dataset.len() as f64,
        });
    }
    Ok(metrics)
}

/// Trains a fresh model from `config` and returns its checkpoint and the
/// per-epoch training loss.
pub fn train(
    dataset: &[SlideSample],
    config: &ModelConfig,
    masking: Masking,
    epochs: usize,
    lr: f64,
) -> Result<(ModelCheckpoint, Vec<EpochMetrics>)> {
    let mut model = HierarchicalVit::new(config.clone())?;
    let mut state = AdamState::for_store(&model.store);
    let opts = TrainOptions {
        epochs,
        masking,
        adam: AdamConfig::with_lr(lr),
    };
    let metrics = train_epochs(&mut model, &mut state, dataset, &opts)?;
    Ok((ModelCheckpoint::capture(&model, masking, &state), metrics))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predict_examples() {
        assert_eq!(predict_isup(2.4), 2);
        assert_eq!(predict_isup(-0.7), 0);
        assert_eq!(predict_isup(7.2), 5);
        assert_eq!(predict_isup(2.5), 3);
        assert_eq!(predict_isup(f64::NAN), 0);
        assert_eq!(predict_isup(f64::INFINITY), 5);
        assert_eq!(predict_isup(f64::NEG_INFINITY), 0);
    }

    #[test]
    fn mse_examples() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::scalar(3.0));
        let loss = mse_loss(&mut tape, l, 3).unwrap();
        assert_eq!(tape.scalar(loss), 0.0);
        let l = tape.constant(Tensor::scalar(1.0));
        let loss = mse_loss(&mut tape, l, 3).unwrap();
        assert_eq!(tape.scalar(loss), 4.0);
        assert!(matches!(
            mse_loss(&mut tape, l, 6),
            Err(Error::LabelOutOfRange(6))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert_eq!(ModelConfig::default().tokens_per_region(), 16);
        let bad = ModelConfig {
            region_size: 1000,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            embed_dim: 30,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn parameter_names_are_unique_and_hierarchical() {
        let m = HierarchicalVit::new(ModelConfig::default()).unwrap();
        assert!(m.store.find("region.block0.attn.qkv.weight").is_some());
        assert!(m.store.find("slide.block1.mlp.fc2.bias").is_some());
        assert!(m.store.find("head.weight").is_some());
    }
}
