//! Multi-head self-attention with tissue-percentage key masking.
//!
//! Sequences carry a class token at index 0 followed by `T` patch tokens.
//! Each sequence has an [`AttentionMaskVector`] of length `T` holding the
//! tissue fraction of every patch. A patch whose fraction is exactly `0.0`
//! is a background patch: its key column receives a logit of negative
//! infinity for every query and head, so after softmax it carries weight
//! exactly `0.0`. The class-token column is never masked, so no row is ever
//! fully masked.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Per-patch tissue fractions of one sequence, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttentionMaskVector(Vec<f64>);

impl AttentionMaskVector {
    pub fn new(fractions: Vec<f64>) -> Result<Self> {
        if fractions.is_empty() {
            return Err(Error::Empty("tissue vector"));
        }
        if let Some(bad) = fractions.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "tissue fraction {bad} outside [0, 1]"
            )));
        }
        Ok(Self(fractions))
    }

    /// A vector with every patch fully tissue.
    pub fn full(len: usize) -> Self {
        Self(alloc::vec![1.0; len])
    }

    pub fn fractions(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_background(&self, patch: usize) -> bool {
        self.0[patch] == 0.0
    }

    pub fn has_tissue(&self) -> bool {
        self.0.iter().any(|&v| v > 0.0)
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }
}

/// Key-keep flags for a batch of sequences with a leading class token:
/// `flags[b * (T + 1) + j]` is false iff `j > 0` and patch `j - 1` of
/// sequence `b` has zero tissue.
pub fn key_keep_flags(tissue: &[AttentionMaskVector], tokens: usize) -> Result<Vec<bool>> {
    let mut flags = Vec::with_capacity(tissue.len() * (tokens + 1));
    for (b, pct) in tissue.iter().enumerate() {
        if pct.len() != tokens {
            return Err(Error::ShapeMismatch {
                op: "tissue vector",
                lhs: alloc::vec![tokens],
                rhs: alloc::vec![pct.len()],
            });
        }
        if !pct.has_tissue() {
            return Err(Error::AllBackground { sequence: b });
        }
        flags.push(true);
        flags.extend(pct.fractions().iter().map(|&f| f != 0.0));
    }
    Ok(flags)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MhsaParams {
    pub qkv: Linear,
    pub proj: Linear,
    pub dim: usize,
    pub num_heads: usize,
}

impl MhsaParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        num_heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if num_heads == 0 || !dim.is_multiple_of(num_heads) {
            return Err(Error::InvalidArgument(format!(
                "embedding dim {dim} not divisible by {num_heads} heads"
            )));
        }
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, rng)?,
            dim,
            num_heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }

    /// `1 / sqrt(head_dim)`.
    pub fn scale(&self) -> f64 {
        1.0 / libm::sqrt(self.head_dim() as f64)
    }
}

fn check_sequence(tape: &Tape, x: Var, dim: usize) -> Result<(usize, usize)> {
    let s = tape.shape(x);
    if s.len() != 3 || s[2] != dim {
        return Err(Error::ShapeMismatch {
            op: "attention input",
            lhs: s.to_vec(),
            rhs: alloc::vec![dim],
        });
    }
    Ok((s[0], s[1]))
}

/// Shared multi-head attention path. Returns the projected output and the
/// post-softmax attention `(B, heads, T', T')`.
pub(crate) fn mhsa_with_keep(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    keep: Option<&[bool]>,
    p: &MhsaParams,
) -> Result<(Var, Var)> {
    let (b, t) = check_sequence(tape, x, p.dim)?;
    let (h, dh) = (p.num_heads, p.head_dim());
    let qkv = p.qkv.forward(tape, store, x)?;
    let qkv = tape.reshape(qkv, &[b, t, 3, h, dh])?;
    let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
    let mut parts = [qkv; 3];
    for (i, part) in parts.iter_mut().enumerate() {
        let s = tape.narrow(qkv, 0, i, 1)?;
        *part = tape.reshape(s, &[b, h, t, dh])?;
    }
    let [q, k, v] = parts;
    let kt = tape.permute(k, &[0, 1, 3, 2])?;
    let raw = tape.matmul(q, kt)?;
    let raw = tape.scale(raw, p.scale());
    let logits = match keep {
        Some(flags) => tape.mask_keys(raw, flags)?,
        None => raw,
    };
    let attn = tape.softmax_lastdim(logits)?;
    let out = tape.matmul(attn, v)?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    let out = tape.reshape(out, &[b, t, p.dim])?;
    Ok((p.proj.forward(tape, store, out)?, attn))
}

/// Attention over `x` of shape `(M, T+1, D)` where key columns of
/// zero-tissue patches are filled with negative infinity before softmax.
pub fn masked_mhsa(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    tissue: &[AttentionMaskVector],
    p: &MhsaParams,
) -> Result<Var> {
    let (b, t) = check_sequence(tape, x, p.dim)?;
    if tissue.len() != b || t == 0 {
        return Err(Error::ShapeMismatch {
            op: "masked_mhsa",
            lhs: tape.shape(x).to_vec(),
            rhs: alloc::vec![tissue.len()],
        });
    }
    let keep = key_keep_flags(tissue, t - 1)?;
    Ok(mhsa_with_keep(tape, store, x, Some(&keep), p)?.0)
}

/// Standard scaled dot-product multi-head self-attention.
pub fn plain_mhsa(tape: &mut Tape, store: &ParamStore, x: Var, p: &MhsaParams) -> Result<Var> {
    Ok(mhsa_with_keep(tape, store, x, None, p)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformerBlockParams {
    pub norm1: LayerNorm,
    pub attn: MhsaParams,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlockParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        num_heads: usize,
        mlp_ratio: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let hidden = dim * mlp_ratio;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            attn: MhsaParams::new(store, &format!("{name}.attn"), dim, num_heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), dim, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, dim, rng)?,
        })
    }

    pub(crate) fn forward_keep(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        keep: Option<&[bool]>,
    ) -> Result<(Var, Var)> {
        let h = self.norm1.forward(tape, store, x)?;
        let (a, attn) = mhsa_with_keep(tape, store, h, keep, &self.attn)?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, store, x)?;
        let h = self.fc1.forward(tape, store, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, store, h)?;
        Ok((tape.add(x, h)?, attn))
    }
}

/// Pre-norm residual block: `x + MHSA(LN(x))` then `x + MLP(LN(x))`.
/// Passing tissue vectors switches the attention to its masked form.
pub fn transformer_block(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    tissue: Option<&[AttentionMaskVector]>,
    params: &TransformerBlockParams,
) -> Result<Var> {
    let keep = keep_for(tape, x, tissue)?;
    Ok(params.forward_keep(tape, store, x, keep.as_deref())?.0)
}

fn keep_for(
    tape: &Tape,
    x: Var,
    tissue: Option<&[AttentionMaskVector]>,
) -> Result<Option<Vec<bool>>> {
    let Some(tissue) = tissue else { return Ok(None) };
    let s = tape.shape(x);
    if s.len() != 3 || tissue.len() != s[0] {
        return Err(Error::ShapeMismatch {
            op: "tissue vectors",
            lhs: s.to_vec(),
            rhs: alloc::vec![tissue.len()],
        });
    }
    key_keep_flags(tissue, s[1] - 1).map(Some)
}

/// Runs `x` through `blocks` and returns the post-softmax attention of
/// block `layer`, shape `(M, heads, T', T')`.
pub fn attention_weights(
    store: &ParamStore,
    x: &Tensor,
    tissue: Option<&[AttentionMaskVector]>,
    blocks: &[TransformerBlockParams],
    layer: usize,
) -> Result<Tensor> {
    if layer >= blocks.len() {
        return Err(Error::LayerOutOfRange {
            index: layer,
            depth: blocks.len(),
        });
    }
    let mut tape = Tape::new();
    let mut h = tape.constant(x.clone());
    let keep = keep_for(&tape, h, tissue)?;
    for block in &blocks[..=layer] {
        let (next, attn) = block.forward_keep(&mut tape, store, h, keep.as_deref())?;
        if core::ptr::eq(block, &blocks[layer]) {
            return Ok(tape.value(attn).clone());
        }
        h = next;
    }
    unreachable!("layer index checked above")
}
