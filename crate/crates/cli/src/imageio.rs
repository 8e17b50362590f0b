//! PNG input and output for masks, intensity images and heatmaps.
//!
//! Masks and intensity images are 8-bit grayscale PNGs. A mask's pixel
//! spacing lives in a sidecar text file next to it (`<mask>.spacing`)
//! holding a single `spacing_um <value>` line.
//!
//! A heatmap is written as three files sharing a stem:
//! `<stem>.png` holds the values as 16-bit grayscale (`level / 65535`),
//! `<stem>.rgb.png` the colormapped rendering, and `<stem>.json` the
//! provenance and encoding.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use maskvit_core::heatmap::{colormap, HeatmapProvenance, HeatmapRaster, NO_ATTENTION_RGB};
use maskvit_core::pipeline::{GrayImage, TissueMaskRaster};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const COLORMAP_NAME: &str = "black-red-yellow-white; 0 reserved as black (no attention)";
pub const VALUE_ENCODING: &str = "16-bit grayscale, value = level / 65535";

pub fn spacing_sidecar(mask_path: &Path) -> PathBuf {
    let mut s = mask_path.as_os_str().to_owned();
    s.push(".spacing");
    PathBuf::from(s)
}

fn read_luma8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => CliError::io(path, io),
        other => CliError::format(path, other.to_string()),
    })?;
    let image::DynamicImage::ImageLuma8(buf) = img else {
        return Err(CliError::format(path, "expected an 8-bit single-channel image"));
    };
    Ok((buf.width() as usize, buf.height() as usize, buf.into_raw()))
}

fn write_luma8(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, _> = ImageBuffer::from_raw(width as u32, height as u32, pixels.to_vec())
        .ok_or_else(|| CliError::format(path, "pixel count does not match dimensions"))?;
    save(path, |p| buf.save(p))
}

fn save(path: &Path, f: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<()> {
    crate::ensure_parent(path)?;
    f(path).map_err(|e| match e {
        image::ImageError::IoError(io) => CliError::io(path, io),
        other => CliError::format(path, other.to_string()),
    })
}

/// Reads a mask PNG, binarizing it: nonzero pixels become tissue (1).
/// Without an explicit spacing the sidecar file is consulted.
pub fn read_mask(path: &Path, spacing_um: Option<f64>) -> Result<TissueMaskRaster> {
    let (w, h, mut bitmap) = read_luma8(path)?;
    bitmap.iter_mut().for_each(|b| *b = u8::from(*b != 0));
    let spacing = match spacing_um {
        Some(s) => s,
        None => read_spacing(&spacing_sidecar(path))?,
    };
    TissueMaskRaster::new(w, h, spacing, bitmap).map_err(|e| CliError::format(path, e.to_string()))
}

fn read_spacing(path: &Path) -> Result<f64> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let line = text.lines().next().unwrap_or_default();
    line.strip_prefix("spacing_um ")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| CliError::format(path, format!("expected `spacing_um <value>`, got {line:?}")))
}

/// Writes the mask as 0/255 grayscale plus its spacing sidecar.
pub fn write_mask(path: &Path, mask: &TissueMaskRaster) -> Result<()> {
    let pixels: Vec<u8> = mask.bitmap.iter().map(|&b| if b != 0 { 255 } else { 0 }).collect();
    write_luma8(path, mask.width, mask.height, &pixels)?;
    crate::write_file(
        &spacing_sidecar(path),
        format!("spacing_um {}\n", mask.spacing_um).as_bytes(),
    )
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let (w, h, pixels) = read_luma8(path)?;
    GrayImage::new(w, h, pixels).map_err(|e| CliError::format(path, e.to_string()))
}

pub fn write_gray(path: &Path, image: &GrayImage) -> Result<()> {
    write_luma8(path, image.width, image.height, &image.pixels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub width: usize,
    pub height: usize,
    pub provenance: HeatmapProvenance,
    pub value_encoding: String,
    pub colormap: String,
    pub no_attention_rgb: [u8; 3],
}

/// Quantizes a value in `[0, 1]` to a 16-bit level.
pub fn value_level(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Writes `<stem>.png`, `<stem>.rgb.png` and `<stem>.json`.
pub fn write_heatmap(stem: &Path, raster: &HeatmapRaster) -> Result<()> {
    let (w, h) = (raster.width as u32, raster.height as u32);
    let levels: Vec<u16> = raster.values.iter().map(|&v| value_level(v)).collect();
    let gray: ImageBuffer<Luma<u16>, _> = ImageBuffer::from_raw(w, h, levels).expect("raster dims");
    save(&with_suffix(stem, ".png"), |p| gray.save(p))?;
    let rgb: Vec<u8> = raster.values.iter().flat_map(|&v| colormap(v)).collect();
    let rgb: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(w, h, rgb).expect("raster dims");
    save(&with_suffix(stem, ".rgb.png"), |p| rgb.save(p))?;
    let meta = HeatmapSidecar {
        width: raster.width,
        height: raster.height,
        provenance: raster.provenance.clone(),
        value_encoding: VALUE_ENCODING.into(),
        colormap: COLORMAP_NAME.into(),
        no_attention_rgb: NO_ATTENTION_RGB,
    };
    let json = serde_json::to_string_pretty(&meta).expect("sidecar serializes");
    crate::write_file(&with_suffix(stem, ".json"), json.as_bytes())
}

/// Reads back the values written by [`write_heatmap`].
pub fn read_heatmap(stem: &Path) -> Result<HeatmapRaster> {
    let meta_path = with_suffix(stem, ".json");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| CliError::io(&meta_path, e))?;
    let meta: HeatmapSidecar =
        serde_json::from_str(&text).map_err(|e| CliError::format(&meta_path, e.to_string()))?;
    let path = with_suffix(stem, ".png");
    let img = image::open(&path).map_err(|e| CliError::format(&path, e.to_string()))?;
    let image::DynamicImage::ImageLuma16(buf) = img else {
        return Err(CliError::format(&path, "expected a 16-bit grayscale image"));
    };
    if (buf.width() as usize, buf.height() as usize) != (meta.width, meta.height) {
        return Err(CliError::format(&path, "dimensions disagree with sidecar"));
    }
    Ok(HeatmapRaster {
        width: meta.width,
        height: meta.height,
        values: buf.into_raw().into_iter().map(|l| l as f64 / 65535.0).collect(),
        provenance: meta.provenance,
    })
}

/// Reads the colormapped rendering as RGB triples.
pub fn read_heatmap_rgb(stem: &Path) -> Result<Vec<[u8; 3]>> {
    let path = with_suffix(stem, ".rgb.png");
    let img = image::open(&path).map_err(|e| CliError::format(&path, e.to_string()))?;
    Ok(img.to_rgb8().pixels().map(|p| p.0).collect())
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
