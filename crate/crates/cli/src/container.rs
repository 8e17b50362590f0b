//! Per-slide preprocessed container, version 1, little-endian.
//!
//! ```text
//! magic         8 bytes  "MVITSLDE"
//! version       u32
//! slide id      u32 length + UTF-8
//! label         u8
//! slide width   u32, slide height u32   (pixels)
//! region size   u32, patch size u32
//! M, T, F       u32 each                (regions, patches per region, features)
//! coords        M x (u32 x, u32 y)      region top-left corners, row-major grid order
//! tissue        u64 count + M*T x f64   per-patch tissue fractions
//! features      u64 count + M*T*F x f64 row-major (region, patch, feature)
//! ```

use std::path::Path;

use maskvit_core::attention::AttentionMaskVector;
use maskvit_core::hvit::SlideSample;
use maskvit_core::tensor::Tensor;

use crate::codec::{Reader, Writer};
use crate::error::{CliError, Result};

pub const CONTAINER_MAGIC: &[u8; 8] = b"MVITSLDE";
pub const CONTAINER_VERSION: u32 = 1;

/// A preprocessed slide plus the geometry needed to render it.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideRecord {
    pub sample: SlideSample,
    pub width: usize,
    pub height: usize,
    pub region_size: usize,
    pub patch_size: usize,
}

pub fn encode_slide(rec: &SlideRecord) -> Vec<u8> {
    let s = &rec.sample;
    let shape = s.patch_features.shape();
    let mut w = Writer::new(CONTAINER_MAGIC, CONTAINER_VERSION);
    w.bytes(s.slide_id.as_bytes());
    w.u8(s.label);
    for v in [rec.width, rec.height, rec.region_size, rec.patch_size] {
        w.u32(v as u32);
    }
    for &d in shape {
        w.u32(d as u32);
    }
    for &(x, y) in &s.region_coords {
        w.u32(x);
        w.u32(y);
    }
    let tissue: Vec<f64> = s.tissue.iter().flat_map(|t| t.fractions().iter().copied()).collect();
    w.f64s(&tissue);
    w.f64s(s.patch_features.data());
    w.buf
}

pub fn decode_slide(bytes: &[u8]) -> Result<SlideRecord, String> {
    let (mut r, version) = Reader::open(bytes, CONTAINER_MAGIC)?;
    if version != CONTAINER_VERSION {
        return Err(format!("unsupported container version {version}"));
    }
    let id = r.string()?;
    let label = r.u8()?;
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let [width, height, region_size, patch_size, m, t, f] = dims;
    let coords = (0..m)
        .map(|_| Ok((r.u32()?, r.u32()?)))
        .collect::<Result<Vec<_>, String>>()?;
    let tissue = r.f64s()?;
    let features = r.f64s()?;
    r.finish()?;
    if tissue.len() != m * t {
        return Err(format!("{} tissue entries for {m} regions of {t} patches", tissue.len()));
    }
    let tissue = if t == 0 {
        Vec::new()
    } else {
        tissue
            .chunks(t)
            .map(|c| AttentionMaskVector::new(c.to_vec()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?
    };
    let feats = Tensor::new(vec![m, t, f], features).map_err(|e| e.to_string())?;
    let sample = SlideSample::new(id, coords, feats, tissue, label).map_err(|e| e.to_string())?;
    Ok(SlideRecord {
        sample,
        width,
        height,
        region_size,
        patch_size,
    })
}

pub fn save_slide(path: &Path, rec: &SlideRecord) -> Result<()> {
    crate::write_file(path, &encode_slide(rec))
}

pub fn load_slide(path: &Path) -> Result<SlideRecord> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_slide(&bytes).map_err(|m| CliError::format(path, m))
}
