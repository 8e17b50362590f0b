//! Region attention heatmaps, slide-level stitching and the colormap.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::AttentionMaskVector;
use crate::error::{Error, Result};
use crate::hvit::Masking;
use crate::tensor::Tensor;

/// Lowest normalized value an attended patch can take. Keeps exact zero
/// reserved for patches excluded from attention.
pub const NORMALIZED_FLOOR: f64 = 1.0 / 255.0;

pub const HEAD_REDUCTION: &str = "mean-over-heads";
pub const NORMALIZATION: &str = "min-max over attended patches, floor 1/255, constant rows -> 1";

/// Where a heatmap's values came from.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HeatmapProvenance {
    pub layer: usize,
    pub masking: Masking,
    pub reduction: String,
    pub normalization: String,
    /// Pixels of the source image per heatmap pixel.
    pub downsample: usize,
}

/// Row-major values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapRaster {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub provenance: HeatmapProvenance,
}

impl HeatmapRaster {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Attention of the class-token query to each patch key of one region,
/// averaged over heads. `weights` is `(heads, T+1, T+1)`.
pub fn class_token_scores(weights: &Tensor) -> Result<Vec<f64>> {
    let s = weights.shape();
    if s.len() != 3 || s[1] != s[2] || s[1] < 2 {
        return Err(Error::Geometry(format!("attention weights of shape {s:?}")));
    }
    let (heads, tp) = (s[0], s[1]);
    let data = weights.data();
    Ok((1..tp)
        .map(|j| (0..heads).map(|h| data[h * tp * tp + j]).sum::<f64>() / heads as f64)
        .collect())
}

/// Selects region `m` from a `(M, heads, T', T')` attention tensor.
pub fn region_slice(attention: &Tensor, m: usize) -> Result<Tensor> {
    let s = attention.shape();
    if s.len() != 4 || m >= s[0] {
        return Err(Error::Geometry(format!(
            "region {m} of attention shape {s:?}"
        )));
    }
    let per = s[1] * s[2] * s[3];
    Tensor::new(s[1..].to_vec(), attention.data()[m * per..(m + 1) * per].to_vec())
}

/// Paints a `region_size` square heatmap from one region's attention.
///
/// Scores come from the class-token row, averaged over heads. With masking
/// on, zero-tissue patches are painted exactly 0 and left out of the
/// normalization; remaining patches are min-max scaled into
/// `[NORMALIZED_FLOOR, 1]`, and a constant set normalizes to 1.
pub fn region_heatmap(
    weights: &Tensor,
    tissue: &AttentionMaskVector,
    region_size: usize,
    patch_size: usize,
    masking: Masking,
    layer: usize,
) -> Result<HeatmapRaster> {
    if patch_size == 0 || !region_size.is_multiple_of(patch_size) {
        return Err(Error::Geometry(format!(
            "region {region_size} not a multiple of patch {patch_size}"
        )));
    }
    let side = region_size / patch_size;
    let scores = class_token_scores(weights)?;
    if scores.len() != side * side || tissue.len() != scores.len() {
        return Err(Error::Geometry(format!(
            "{} attention columns and {} tissue entries for a {side}x{side} patch grid",
            scores.len(),
            tissue.len()
        )));
    }
    let attended: Vec<bool> = (0..scores.len())
        .map(|j| !(masking.is_on() && tissue.is_background(j)))
        .collect();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (s, _) in scores.iter().zip(&attended).filter(|(_, a)| **a) {
        lo = lo.min(*s);
        hi = hi.max(*s);
    }
    let normalized: Vec<f64> = scores
        .iter()
        .zip(&attended)
        .map(|(&s, &a)| {
            if !a {
                0.0
            } else if hi > lo {
                NORMALIZED_FLOOR + (1.0 - NORMALIZED_FLOOR) * (s - lo) / (hi - lo)
            } else {
                1.0
            }
        })
        .collect();

    let mut values = vec![0.0; region_size * region_size];
    for (j, v) in normalized.iter().enumerate() {
        let (px, py) = (j % side, j / side);
        for y in py * patch_size..(py + 1) * patch_size {
            let row = &mut values[y * region_size + px * patch_size..y * region_size + (px + 1) * patch_size];
            row.iter_mut().for_each(|p| *p = *v);
        }
    }
    Ok(HeatmapRaster {
        width: region_size,
        height: region_size,
        values,
        provenance: HeatmapProvenance {
            layer,
            masking,
            reduction: HEAD_REDUCTION.into(),
            normalization: NORMALIZATION.into(),
            downsample: 1,
        },
    })
}

/// A heatmap placed at a pixel offset on the slide canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedHeatmap {
    pub x: usize,
    pub y: usize,
    pub heatmap: HeatmapRaster,
}

/// Stitches region heatmaps onto a `slide_width x slide_height` canvas
/// downsampled by `s`. Output is `ceil(W/s) x ceil(H/s)`; each output pixel
/// is the sum of the in-canvas source pixels of its `s x s` block divided by
/// `s^2`, and uncovered pixels are 0. Region offsets and sizes must be
/// multiples of `s` so that no output pixel straddles two regions.
pub fn stitch_heatmaps(
    regions: &[PlacedHeatmap],
    slide_width: usize,
    slide_height: usize,
    s: usize,
) -> Result<HeatmapRaster> {
    if s == 0 || slide_width == 0 || slide_height == 0 {
        return Err(Error::InvalidArgument(
            "downsample factor and slide dims must be positive".into(),
        ));
    }
    for (i, r) in regions.iter().enumerate() {
        let h = &r.heatmap;
        if r.x >= slide_width || r.y >= slide_height {
            return Err(Error::Geometry(format!(
                "region {i} at ({}, {}) lies outside the {slide_width}x{slide_height} slide",
                r.x, r.y
            )));
        }
        if r.x % s != 0 || r.y % s != 0 || h.width % s != 0 || h.height % s != 0 {
            return Err(Error::Geometry(format!(
                "region {i} at ({}, {}) of size {}x{} is not aligned to downsample {s}",
                r.x, r.y, h.width, h.height
            )));
        }
        for (j, o) in regions.iter().enumerate().skip(i + 1) {
            let overlap = r.x < o.x + o.heatmap.width
                && o.x < r.x + h.width
                && r.y < o.y + o.heatmap.height
                && o.y < r.y + h.height;
            if overlap {
                return Err(Error::Geometry(format!("regions {i} and {j} overlap")));
            }
        }
    }
    let out_w = slide_width.div_ceil(s);
    let out_h = slide_height.div_ceil(s);
    let mut values = vec![0.0; out_w * out_h];
    let area = (s * s) as f64;
    for r in regions {
        let h = &r.heatmap;
        for cy in r.y / s..((r.y + h.height) / s).min(out_h) {
            for cx in r.x / s..((r.x + h.width) / s).min(out_w) {
                let mut sum = 0.0;
                for gy in cy * s..((cy + 1) * s).min(slide_height) {
                    for gx in cx * s..((cx + 1) * s).min(slide_width) {
                        sum += h.values[(gy - r.y) * h.width + (gx - r.x)];
                    }
                }
                values[cy * out_w + cx] = sum / area;
            }
        }
    }
    let provenance = regions.first().map_or_else(
        || HeatmapProvenance {
            layer: 0,
            masking: Masking::On,
            reduction: HEAD_REDUCTION.into(),
            normalization: NORMALIZATION.into(),
            downsample: s,
        },
        |r| HeatmapProvenance {
            downsample: s * r.heatmap.provenance.downsample,
            ..r.heatmap.provenance.clone()
        },
    );
    Ok(HeatmapRaster {
        width: out_w,
        height: out_h,
        values,
        provenance,
    })
}

/// Colour reserved for exactly-zero (unattended) pixels.
pub const NO_ATTENTION_RGB: [u8; 3] = [0, 0, 0];

/// Quantizes `value` to a level in `1..=255` for positive values and 0 for
/// zero or negative values.
pub fn colormap_level(value: f64) -> u8 {
    if !(value > 0.0) {
        return 0;
    }
    1 + libm::round(value.min(1.0) * 254.0) as u8
}

/// Black-red-yellow-white ramp. Level 0 is the reserved colour; for levels
/// 1 to 255 every channel is nondecreasing and the channel sum strictly
/// increases.
pub fn colormap(value: f64) -> [u8; 3] {
    let level = colormap_level(value);
    if level == 0 {
        return NO_ATTENTION_RGB;
    }
    let s = 90 + (level as u32 * 675) / 255;
    let ch = |off: u32| s.saturating_sub(off).min(255) as u8;
    [ch(0), ch(255), ch(510)]
}
