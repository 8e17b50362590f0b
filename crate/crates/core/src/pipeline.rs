//! Tissue-mask tiling, per-patch tissue fractions, patch features, the
//! synthetic slide generator and stratified fold splitting.
//!
//! Regions sit on a grid anchored at `(0, 0)` with stride `R`. Regions that
//! run past the slide edge are padded with background, and padding counts
//! towards the region area when computing tissue fractions.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionMaskVector;
use crate::error::{Error, Result};
use crate::hvit::{SlideSample, MAX_ISUP};
use crate::tensor::Tensor;

/// Width of the raw per-patch feature vector produced by [`patch_features`].
pub const FEATURE_DIM: usize = 8;

/// Regions with less tissue than this are discarded.
pub const DEFAULT_MIN_TISSUE: f64 = 0.10;

/// Binary tissue segmentation; any nonzero byte is tissue.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueMaskRaster {
    pub width: usize,
    pub height: usize,
    /// Micrometres per pixel.
    pub spacing_um: f64,
    pub bitmap: Vec<u8>,
}

impl TissueMaskRaster {
    pub fn new(width: usize, height: usize, spacing_um: f64, bitmap: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || bitmap.len() != width * height {
            return Err(Error::Geometry(format!(
                "mask {width}x{height} with {} bytes",
                bitmap.len()
            )));
        }
        if !(spacing_um > 0.0) || !spacing_um.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "pixel spacing must be positive, got {spacing_um}"
            )));
        }
        Ok(Self {
            width,
            height,
            spacing_um,
            bitmap,
        })
    }

    pub fn is_tissue(&self, x: usize, y: usize) -> bool {
        x < self.width && y < self.height && self.bitmap[y * self.width + x] != 0
    }

    /// Tissue pixel count inside the square `[x, x+size) x [y, y+size)`,
    /// clipped to the raster.
    pub fn count_tissue(&self, x: usize, y: usize, size: usize) -> usize {
        let x1 = (x + size).min(self.width);
        let y1 = (y + size).min(self.height);
        if x >= x1 || y >= y1 {
            return 0;
        }
        (y..y1)
            .map(|row| {
                self.bitmap[row * self.width + x..row * self.width + x1]
                    .iter()
                    .filter(|&&v| v != 0)
                    .count()
            })
            .sum()
    }
}

/// 8-bit single-channel image aligned with a tissue mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::Geometry(format!(
                "image {width}x{height} with {} bytes",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Pixel value, zero outside the image.
    pub fn get(&self, x: usize, y: usize) -> u8 {
        if x < self.width && y < self.height {
            self.pixels[y * self.width + x]
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RegionSpec {
    pub x: usize,
    pub y: usize,
    pub size: usize,
    /// Tissue pixels over `size^2`.
    pub tissue_fraction: f64,
}

/// Tiles `mask` into `region_size` squares in row-major order and keeps
/// those whose tissue fraction is at least `min_tissue`.
pub fn extract_regions(
    mask: &TissueMaskRaster,
    region_size: usize,
    min_tissue: f64,
) -> Result<Vec<RegionSpec>> {
    if region_size == 0 {
        return Err(Error::InvalidArgument("region size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&min_tissue) {
        return Err(Error::InvalidArgument(format!(
            "min tissue {min_tissue} outside [0, 1]"
        )));
    }
    let area = (region_size * region_size) as f64;
    let mut out = Vec::new();
    for y in (0..mask.height).step_by(region_size) {
        for x in (0..mask.width).step_by(region_size) {
            let fraction = mask.count_tissue(x, y, region_size) as f64 / area;
            if fraction >= min_tissue {
                out.push(RegionSpec {
                    x,
                    y,
                    size: region_size,
                    tissue_fraction: fraction,
                });
            }
        }
    }
    Ok(out)
}

fn check_patch_geometry(region: &RegionSpec, patch_size: usize) -> Result<usize> {
    if patch_size == 0 || !region.size.is_multiple_of(patch_size) {
        return Err(Error::Geometry(format!(
            "region size {} is not a multiple of patch size {patch_size}",
            region.size
        )));
    }
    Ok(region.size / patch_size)
}

/// Per-patch tissue fractions of a region, row-major over its patch grid.
pub fn patch_tissue_fractions(
    mask: &TissueMaskRaster,
    region: &RegionSpec,
    patch_size: usize,
) -> Result<AttentionMaskVector> {
    let side = check_patch_geometry(region, patch_size)?;
    let area = (patch_size * patch_size) as f64;
    let mut fractions = Vec::with_capacity(side * side);
    for py in 0..side {
        for px in 0..side {
            let count = mask.count_tissue(
                region.x + px * patch_size,
                region.y + py * patch_size,
                patch_size,
            );
            fractions.push(count as f64 / area);
        }
    }
    AttentionMaskVector::new(fractions)
}

/// Raw features for every patch of a region, `T * FEATURE_DIM` values in
/// token order. Pixels outside the slide count as background with value 0.
///
/// Per patch, with intensities scaled to `[0, 1]`: tissue fraction, mean,
/// standard deviation, mean over tissue pixels (0 without tissue), and the
/// means of the four quadrants.
pub fn patch_features(
    image: &GrayImage,
    mask: &TissueMaskRaster,
    region: &RegionSpec,
    patch_size: usize,
) -> Result<Vec<f64>> {
    if image.width != mask.width || image.height != mask.height {
        return Err(Error::Geometry(format!(
            "image {}x{} does not match mask {}x{}",
            image.width, image.height, mask.width, mask.height
        )));
    }
    let side = check_patch_geometry(region, patch_size)?;
    let half = patch_size / 2;
    let mut out = Vec::with_capacity(side * side * FEATURE_DIM);
    for py in 0..side {
        for px in 0..side {
            let (x0, y0) = (region.x + px * patch_size, region.y + py * patch_size);
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            let mut tissue = 0usize;
            let mut tissue_sum = 0.0;
            let mut quad = [0.0f64; 4];
            let mut quad_n = [0usize; 4];
            for dy in 0..patch_size {
                for dx in 0..patch_size {
                    let v = image.get(x0 + dx, y0 + dy) as f64 / 255.0;
                    sum += v;
                    sum_sq += v * v;
                    if mask.is_tissue(x0 + dx, y0 + dy) {
                        tissue += 1;
                        tissue_sum += v;
                    }
                    let q = usize::from(dy >= half) * 2 + usize::from(dx >= half);
                    quad[q] += v;
                    quad_n[q] += 1;
                }
            }
            let n = (patch_size * patch_size) as f64;
            let mean = sum / n;
            let var = (sum_sq / n - mean * mean).max(0.0);
            out.push(tissue as f64 / n);
            out.push(mean);
            out.push(libm::sqrt(var));
            out.push(if tissue > 0 { tissue_sum / tissue as f64 } else { 0.0 });
            for q in 0..4 {
                out.push(if quad_n[q] > 0 { quad[q] / quad_n[q] as f64 } else { 0.0 });
            }
        }
    }
    Ok(out)
}

/// Tiles one slide and assembles its sample. Returns `None` when every
/// region falls below `min_tissue`.
pub fn preprocess_slide(
    slide_id: &str,
    mask: &TissueMaskRaster,
    image: &GrayImage,
    label: u8,
    region_size: usize,
    patch_size: usize,
    min_tissue: f64,
) -> Result<Option<SlideSample>> {
    let regions = extract_regions(mask, region_size, min_tissue)?;
    if regions.is_empty() {
        return Ok(None);
    }
    let side = region_size / patch_size.max(1);
    let tokens = side * side;
    let mut coords = Vec::with_capacity(regions.len());
    let mut tissue = Vec::with_capacity(regions.len());
    let mut features = Vec::with_capacity(regions.len() * tokens * FEATURE_DIM);
    for r in &regions {
        coords.push((r.x as u32, r.y as u32));
        tissue.push(patch_tissue_fractions(mask, r, patch_size)?);
        features.extend(patch_features(image, mask, r, patch_size)?);
    }
    let feats = Tensor::new(vec![regions.len(), tokens, FEATURE_DIM], features)?;
    SlideSample::new(String::from(slide_id), coords, feats, tissue, label).map(Some)
}

const GRADE_STEP: f64 = 36.0;

/// Mean tissue intensity the generator targets for a grade.
fn grade_center(grade: u8) -> f64 {
    GRADE_STEP * grade as f64 + 1.5 * GRADE_STEP
}

/// ISUP label from tissue pixels only: the mean intensity over tissue,
/// binned into six ordinal bins of width 36 starting at 36. `None` when the
/// mask holds no tissue.
pub fn label_from_tissue(mask: &TissueMaskRaster, image: &GrayImage) -> Option<u8> {
    let (mut sum, mut n) = (0u64, 0u64);
    for (m, p) in mask.bitmap.iter().zip(&image.pixels) {
        if *m != 0 {
            sum += *p as u64;
            n += 1;
        }
    }
    if n == 0 {
        return None;
    }
    let bin = libm::floor(sum as f64 / n as f64 / GRADE_STEP) - 1.0;
    Some(bin.clamp(0.0, MAX_ISUP as f64) as u8)
}

/// Parameters of the synthetic slide generator.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SyntheticSlideSpec {
    pub region_size: usize,
    pub patch_size: usize,
    /// Canvas spans 1..=max region columns and rows, minus a random margin.
    pub max_region_cols: usize,
    pub max_region_rows: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
    /// Blob radii as fractions of the region size.
    pub min_blob_radius: f64,
    pub max_blob_radius: f64,
    /// Half-width of the uniform per-pixel intensity noise.
    pub noise: u8,
    /// Probability that background intensity mirrors the slide's grade;
    /// otherwise it mimics a random grade.
    pub distractor_correlation: f64,
    pub spacing_um: f64,
    pub min_tissue: f64,
}

impl Default for SyntheticSlideSpec {
    fn default() -> Self {
        Self {
            region_size: 1024,
            patch_size: 256,
            max_region_cols: 3,
            max_region_rows: 2,
            min_blobs: 2,
            max_blobs: 5,
            min_blob_radius: 0.12,
            max_blob_radius: 0.4,
            noise: 24,
            distractor_correlation: 0.8,
            spacing_um: 0.5,
            min_tissue: DEFAULT_MIN_TISSUE,
        }
    }
}

impl SyntheticSlideSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.patch_size == 0 || !self.region_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "region size {} must be a multiple of patch size {}",
                self.region_size, self.patch_size
            ));
        }
        if self.max_region_cols == 0 || self.max_region_rows == 0 {
            return bad("canvas must span at least one region".into());
        }
        if self.min_blobs == 0 || self.min_blobs > self.max_blobs {
            return bad(format!(
                "blob count range {}..={} is empty",
                self.min_blobs, self.max_blobs
            ));
        }
        if !(self.min_blob_radius > 0.0 && self.min_blob_radius <= self.max_blob_radius) {
            return bad("blob radius range is empty".into());
        }
        if !(0.0..=1.0).contains(&self.distractor_correlation) {
            return bad("distractor correlation outside [0, 1]".into());
        }
        if !(self.spacing_um > 0.0) || !(0.0..=1.0).contains(&self.min_tissue) {
            return bad("invalid spacing or tissue threshold".into());
        }
        Ok(())
    }
}

/// One generated slide at pixel level.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSlide {
    pub id: String,
    pub mask: TissueMaskRaster,
    pub image: GrayImage,
    pub label: u8,
}

struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    offset: f64,
}

fn render_slide(spec: &SyntheticSlideSpec, grade: u8, rng: &mut ChaCha8Rng) -> (TissueMaskRaster, GrayImage) {
    let r = spec.region_size;
    let cols = rng.gen_range(1..=spec.max_region_cols);
    let rows = rng.gen_range(1..=spec.max_region_rows);
    let width = cols * r - rng.gen_range(0..=r / 4);
    let height = rows * r - rng.gen_range(0..=r / 4);

    let n_blobs = rng.gen_range(spec.min_blobs..=spec.max_blobs);
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| Blob {
            cx: rng.gen_range(0.0..width as f64),
            cy: rng.gen_range(0.0..height as f64),
            rx: rng.gen_range(spec.min_blob_radius..=spec.max_blob_radius) * r as f64,
            ry: rng.gen_range(spec.min_blob_radius..=spec.max_blob_radius) * r as f64,
            offset: rng.gen_range(-8.0..=8.0),
        })
        .collect();

    let distractor = if rng.gen_bool(spec.distractor_correlation) {
        grade
    } else {
        rng.gen_range(0..=MAX_ISUP)
    };
    let bg_level = grade_center(distractor);
    let tissue_level = grade_center(grade);

    // blob index + 1 per pixel, later blobs win
    let mut owner = vec![0u8; width * height];
    for (i, b) in blobs.iter().enumerate() {
        let x0 = libm::floor(b.cx - b.rx).max(0.0) as usize;
        let x1 = (libm::ceil(b.cx + b.rx) as usize).min(width - 1);
        let y0 = libm::floor(b.cy - b.ry).max(0.0) as usize;
        let y1 = (libm::ceil(b.cy + b.ry) as usize).min(height - 1);
        for y in y0..=y1 {
            let dy = (y as f64 + 0.5 - b.cy) / b.ry;
            for x in x0..=x1 {
                let dx = (x as f64 + 0.5 - b.cx) / b.rx;
                if dx * dx + dy * dy <= 1.0 {
                    owner[y * width + x] = i as u8 + 1;
                }
            }
        }
    }

    let span = 2 * spec.noise as u32 + 1;
    let mut bitmap = vec![0u8; width * height];
    let mut pixels = vec![0u8; width * height];
    let mut bits = 0u64;
    for (i, o) in owner.iter().enumerate() {
        if i % 8 == 0 {
            bits = rng.next_u64();
        }
        let byte = ((bits >> ((i % 8) * 8)) & 0xFF) as u32;
        let noise = (byte % span) as f64 - spec.noise as f64;
        let level = if *o > 0 {
            bitmap[i] = 1;
            tissue_level + blobs[*o as usize - 1].offset
        } else {
            bg_level
        };
        pixels[i] = libm::round(level + noise).clamp(0.0, 255.0) as u8;
    }
    (
        TissueMaskRaster {
            width,
            height,
            spacing_um: spec.spacing_um,
            bitmap,
        },
        GrayImage {
            width,
            height,
            pixels,
        },
    )
}

fn slide_rng(seed: u64, index: usize, attempt: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((index as u64) << 16) | attempt as u64);
    rng
}

/// Generates `n_slides` pixel-level slides. Grades are balanced across the
/// six classes before shuffling; each slide is re-rendered until at least
/// one region passes the tissue threshold. The stored label is always
/// recomputed from tissue pixels.
pub fn synthesize_slides(spec: &SyntheticSlideSpec, n_slides: usize, seed: u64) -> Result<Vec<SyntheticSlide>> {
    spec.validate()?;
    if n_slides == 0 {
        return Err(Error::InvalidArgument("n_slides must be at least 1".into()));
    }
    let mut grades: Vec<u8> = (0..n_slides).map(|i| (i % 6) as u8).collect();
    grades.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::with_capacity(n_slides);
    for (i, &grade) in grades.iter().enumerate() {
        let mut attempt = 0;
        let (mask, image) = loop {
            let mut rng = slide_rng(seed, i, attempt);
            let (mask, image) = render_slide(spec, grade, &mut rng);
            if !extract_regions(&mask, spec.region_size, spec.min_tissue)?.is_empty() {
                break (mask, image);
            }
            attempt += 1;
            if attempt > 1000 {
                return Err(Error::InvalidArgument(
                    "spec never yields a region above the tissue threshold".into(),
                ));
            }
        };
        let label = label_from_tissue(&mask, &image).expect("retained region holds tissue");
        out.push(SyntheticSlide {
            id: format!("slide_{i:04}"),
            mask,
            image,
            label,
        });
    }
    Ok(out)
}

/// Generates and preprocesses `n_slides` slides in memory.
pub fn synthesize_dataset(spec: &SyntheticSlideSpec, n_slides: usize, seed: u64) -> Result<Vec<SlideSample>> {
    synthesize_slides(spec, n_slides, seed)?
        .iter()
        .map(|s| {
            preprocess_slide(
                &s.id,
                &s.mask,
                &s.image,
                s.label,
                spec.region_size,
                spec.patch_size,
                spec.min_tissue,
            )
            .map(|o| o.expect("generator guarantees a retained region"))
        })
        .collect()
}

/// Splits indices into `k` disjoint folds so that every class is spread as
/// evenly as possible: per-class counts across folds differ by at most one,
/// and so do fold sizes.
pub fn stratified_folds(labels: &[u8], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    if k > labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{k} folds requested for {} samples",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<u8> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut folds = vec![Vec::new(); k];
    let mut next = 0usize;
    for c in classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        for i in members {
            folds[next % k].push(i);
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}
