//! Flat run configuration shared by every subcommand. Loaded from TOML,
//! then overridden by command-line flags.

use std::path::{Path, PathBuf};

use maskvit_core::hvit::{Masking, ModelConfig};
use maskvit_core::pipeline::{SyntheticSlideSpec, DEFAULT_MIN_TISSUE, FEATURE_DIM};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Which attention variants a command acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Variants {
    On,
    Off,
    Both,
}

impl Variants {
    pub fn maskings(self) -> Vec<Masking> {
        match self {
            Self::On => vec![Masking::On],
            Self::Off => vec![Masking::Off],
            Self::Both => vec![Masking::Off, Masking::On],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    /// Dataset manifest read by `preprocess`; defaults to the one `synth`
    /// writes under `out_dir`.
    pub manifest: Option<PathBuf>,
    pub seed: u64,
    pub masking: Variants,
    pub folds: usize,
    pub epochs: usize,
    pub lr: f64,
    pub downsample: usize,
    /// Region transformer layer whose class-token row feeds the heatmaps;
    /// defaults to the last one.
    pub heatmap_layer: Option<usize>,

    pub n_slides: usize,
    pub region_size: usize,
    pub patch_size: usize,
    pub min_tissue: f64,
    pub spacing_um: f64,
    pub max_region_cols: usize,
    pub max_region_rows: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
    pub min_blob_radius: f64,
    pub max_blob_radius: f64,
    pub noise: u8,
    pub distractor_correlation: f64,

    pub embed_dim: usize,
    pub region_depth: usize,
    pub slide_depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = SyntheticSlideSpec::default();
        let model = ModelConfig::default();
        Self {
            out_dir: PathBuf::from("run"),
            manifest: None,
            seed: 0,
            masking: Variants::Both,
            folds: 5,
            epochs: 10,
            lr: 5e-4,
            downsample: 16,
            heatmap_layer: None,
            n_slides: 120,
            region_size: spec.region_size,
            patch_size: spec.patch_size,
            min_tissue: DEFAULT_MIN_TISSUE,
            spacing_um: spec.spacing_um,
            max_region_cols: spec.max_region_cols,
            max_region_rows: spec.max_region_rows,
            min_blobs: spec.min_blobs,
            max_blobs: spec.max_blobs,
            min_blob_radius: spec.min_blob_radius,
            max_blob_radius: spec.max_blob_radius,
            noise: spec.noise,
            distractor_correlation: spec.distractor_correlation,
            embed_dim: model.embed_dim,
            region_depth: model.region_depth,
            slide_depth: model.slide_depth,
            num_heads: model.num_heads,
            mlp_ratio: model.mlp_ratio,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn synth_spec(&self) -> SyntheticSlideSpec {
        SyntheticSlideSpec {
            region_size: self.region_size,
            patch_size: self.patch_size,
            max_region_cols: self.max_region_cols,
            max_region_rows: self.max_region_rows,
            min_blobs: self.min_blobs,
            max_blobs: self.max_blobs,
            min_blob_radius: self.min_blob_radius,
            max_blob_radius: self.max_blob_radius,
            noise: self.noise,
            distractor_correlation: self.distractor_correlation,
            spacing_um: self.spacing_um,
            min_tissue: self.min_tissue,
        }
    }

    /// Model config for one fold; both variants of a fold share the seed.
    pub fn model_config(&self, fold: usize) -> ModelConfig {
        ModelConfig {
            region_size: self.region_size,
            patch_size: self.patch_size,
            input_dim: FEATURE_DIM,
            embed_dim: self.embed_dim,
            region_depth: self.region_depth,
            slide_depth: self.slide_depth,
            num_heads: self.num_heads,
            mlp_ratio: self.mlp_ratio,
            seed: self.seed.wrapping_add(fold as u64),
        }
    }

    pub fn heatmap_layer(&self) -> usize {
        self.heatmap_layer.unwrap_or(self.region_depth.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.n_slides == 0 {
            return bad("n_slides must be at least 1".into());
        }
        if self.folds < 2 {
            return bad(format!("folds must be at least 2, got {}", self.folds));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.downsample == 0 || !self.region_size.is_multiple_of(self.downsample) {
            return bad(format!(
                "downsample {} must be positive and divide region_size {}",
                self.downsample, self.region_size
            ));
        }
        if self.heatmap_layer() >= self.region_depth {
            return bad(format!(
                "heatmap_layer {} outside a region transformer of depth {}",
                self.heatmap_layer(),
                self.region_depth
            ));
        }
        self.synth_spec().validate()?;
        self.model_config(0).validate()?;
        Ok(())
    }
}
