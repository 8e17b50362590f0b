//! The five pipeline stages. Each reads and writes files under the run
//! directory:
//!
//! ```text
//! <out_dir>/manifest.jsonl
//! <out_dir>/slides/<id>.mask.png, <id>.mask.png.spacing, <id>.image.png
//! <out_dir>/preprocessed/<id>.mvs, index.json
//! <out_dir>/checkpoints/fold<k>_<masked|plain>.ckpt, .train.json
//! <out_dir>/report.json, report.txt
//! <out_dir>/heatmaps/<id>/<masked|plain>/region_<x>_<y>.*, stitched.*
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use maskvit_core::eval::evaluate;
use maskvit_core::heatmap::{region_heatmap, region_slice, stitch_heatmaps, PlacedHeatmap};
use maskvit_core::hvit::{
    train_epochs, EpochMetrics, HierarchicalVit, Masking, ModelCheckpoint, SlideSample, TrainOptions,
};
use maskvit_core::optim::{AdamConfig, AdamState};
use maskvit_core::pipeline::{preprocess_slide, stratified_folds, synthesize_slides};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::container::{load_slide, save_slide, SlideRecord};
use crate::error::{CliError, Result};
use crate::imageio::{read_gray, read_mask, write_gray, write_heatmap, write_mask};
use crate::manifest::{read_manifest, write_manifest, ManifestRecord};
use crate::report::{ExperimentReport, FoldResult, VariantReport};

/// File locations inside a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.jsonl")
    }

    pub fn slides(&self) -> PathBuf {
        self.root.join("slides")
    }

    pub fn preprocessed(&self) -> PathBuf {
        self.root.join("preprocessed")
    }

    pub fn slide_container(&self, id: &str) -> PathBuf {
        self.preprocessed().join(format!("{id}.mvs"))
    }

    pub fn index(&self) -> PathBuf {
        self.preprocessed().join("index.json")
    }

    pub fn checkpoint(&self, fold: usize, masking: Masking) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(format!("fold{}_{}.ckpt", fold + 1, masking.label()))
    }

    pub fn train_log(&self, fold: usize, masking: Masking) -> PathBuf {
        self.checkpoint(fold, masking).with_extension("train.json")
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn report_text(&self) -> PathBuf {
        self.root.join("report.txt")
    }

    pub fn heatmaps(&self, id: &str, masking: Masking) -> PathBuf {
        self.root.join("heatmaps").join(id).join(masking.label())
    }
}

fn warn(msg: impl AsRef<str>) {
    eprintln!("warning: {}", msg.as_ref());
}

fn info(msg: impl AsRef<str>) {
    eprintln!("{}", msg.as_ref());
}

/// Generates `n_slides` synthetic slides as PNGs plus a manifest.
pub fn synth(cfg: &RunConfig) -> Result<Vec<ManifestRecord>> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.out_dir);
    let slides = synthesize_slides(&cfg.synth_spec(), cfg.n_slides, cfg.seed)?;
    let records: Vec<ManifestRecord> = slides
        .par_iter()
        .map(|s| {
            let mask = format!("slides/{}.mask.png", s.id);
            let image = format!("slides/{}.image.png", s.id);
            write_mask(&paths.root.join(&mask), &s.mask)?;
            write_gray(&paths.root.join(&image), &s.image)?;
            Ok(ManifestRecord {
                id: s.id.clone(),
                mask: mask.into(),
                image: image.into(),
                label: s.label,
                spacing_um: None,
            })
        })
        .collect::<Result<_>>()?;
    write_manifest(&paths.manifest(), &records)?;
    info(format!("synth: wrote {} slides to {}", records.len(), paths.root.display()));
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessIndex {
    pub region_size: usize,
    pub patch_size: usize,
    pub min_tissue: f64,
    pub slides: Vec<String>,
    /// Slides with no region reaching `min_tissue`.
    pub skipped: Vec<String>,
}

/// Tiles every manifest slide into regions and patches and writes one
/// container per slide.
pub fn preprocess(cfg: &RunConfig) -> Result<PreprocessIndex> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.out_dir);
    let manifest = cfg.manifest.clone().unwrap_or_else(|| paths.manifest());
    let records = read_manifest(&manifest)?;
    let kept: Vec<Option<String>> = records
        .par_iter()
        .map(|r| {
            let mask = read_mask(&r.mask, r.spacing_um)?;
            let image = read_gray(&r.image)?;
            if (image.width, image.height) != (mask.width, mask.height) {
                return Err(CliError::format(&r.image, "image and mask dimensions differ"));
            }
            let sample = preprocess_slide(
                &r.id,
                &mask,
                &image,
                r.label,
                cfg.region_size,
                cfg.patch_size,
                cfg.min_tissue,
            )?;
            let Some(sample) = sample else { return Ok(None) };
            let rec = SlideRecord {
                sample,
                width: mask.width,
                height: mask.height,
                region_size: cfg.region_size,
                patch_size: cfg.patch_size,
            };
            save_slide(&paths.slide_container(&r.id), &rec)?;
            Ok(Some(r.id.clone()))
        })
        .collect::<Result<_>>()?;
    let mut index = PreprocessIndex {
        region_size: cfg.region_size,
        patch_size: cfg.patch_size,
        min_tissue: cfg.min_tissue,
        slides: Vec::new(),
        skipped: Vec::new(),
    };
    for (r, k) in records.iter().zip(kept) {
        match k {
            Some(id) => index.slides.push(id),
            None => {
                warn(format!(
                    "slide {} has no region with at least {} tissue; skipped",
                    r.id, cfg.min_tissue
                ));
                index.skipped.push(r.id.clone());
            }
        }
    }
    let json = serde_json::to_string_pretty(&index).expect("index serializes");
    crate::write_file(&paths.index(), json.as_bytes())?;
    info(format!(
        "preprocess: {} slides written, {} skipped",
        index.slides.len(),
        index.skipped.len()
    ));
    Ok(index)
}

/// Loads every preprocessed slide listed in the index, in index order.
pub fn load_dataset(cfg: &RunConfig) -> Result<Vec<SlideRecord>> {
    let paths = RunPaths::new(&cfg.out_dir);
    let index_path = paths.index();
    let text = std::fs::read_to_string(&index_path).map_err(|e| CliError::io(&index_path, e))?;
    let index: PreprocessIndex =
        serde_json::from_str(&text).map_err(|e| CliError::format(&index_path, e.to_string()))?;
    if (index.region_size, index.patch_size) != (cfg.region_size, cfg.patch_size) {
        return Err(CliError::Config(format!(
            "data was preprocessed with region/patch {}/{} but config says {}/{}",
            index.region_size, index.patch_size, cfg.region_size, cfg.patch_size
        )));
    }
    if index.slides.is_empty() {
        return Err(CliError::Config("no preprocessed slides".into()));
    }
    index
        .slides
        .par_iter()
        .map(|id| load_slide(&paths.slide_container(id)))
        .collect()
}

/// Stratified fold assignment of the loaded dataset.
pub fn fold_indices(cfg: &RunConfig, data: &[SlideRecord]) -> Result<Vec<Vec<usize>>> {
    let labels: Vec<u8> = data.iter().map(|r| r.sample.label).collect();
    Ok(stratified_folds(&labels, cfg.folds, cfg.seed)?)
}

fn split(data: &[SlideRecord], folds: &[Vec<usize>], fold: usize) -> (Vec<SlideSample>, Vec<SlideSample>) {
    let held = &folds[fold];
    let mut train = Vec::new();
    let mut tune = Vec::new();
    for (i, r) in data.iter().enumerate() {
        if held.binary_search(&i).is_ok() {
            tune.push(r.sample.clone());
        } else {
            train.push(r.sample.clone());
        }
    }
    (train, tune)
}

pub fn describe_checkpoint(path: &Path, ck: &ModelCheckpoint) -> String {
    format!(
        "loaded {} (masking={}, step={})",
        path.display(),
        ck.masking.label(),
        ck.step
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub fold: usize,
    pub masking: Masking,
    pub lr: f64,
    pub train_slides: usize,
    pub step: u64,
    pub epochs: Vec<EpochMetrics>,
}

/// Trains one checkpoint per (fold, variant). With `resume`, existing
/// checkpoints are loaded and trained for `epochs` more epochs.
pub fn train(cfg: &RunConfig, resume: bool) -> Result<Vec<TrainLog>> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.out_dir);
    let data = load_dataset(cfg)?;
    let folds = fold_indices(cfg, &data)?;
    let jobs: Vec<(usize, Masking)> = (0..cfg.folds)
        .flat_map(|f| cfg.masking.maskings().into_iter().map(move |m| (f, m)))
        .collect();
    jobs.par_iter()
        .map(|&(fold, masking)| {
            let (train_set, _) = split(&data, &folds, fold);
            let ck_path = paths.checkpoint(fold, masking);
            let log_path = paths.train_log(fold, masking);
            let config = cfg.model_config(fold);
            let (mut model, mut state, mut history) = if resume && ck_path.exists() {
                let ck = load_checkpoint(&ck_path)?;
                info(describe_checkpoint(&ck_path, &ck));
                if ck.masking != masking || ck.config != config {
                    return Err(CliError::Config(format!(
                        "{} was trained with a different masking or model config",
                        ck_path.display()
                    )));
                }
                let history = match std::fs::read_to_string(&log_path) {
                    Ok(t) => serde_json::from_str::<TrainLog>(&t)
                        .map_err(|e| CliError::format(&log_path, e.to_string()))?
                        .epochs,
                    Err(_) => Vec::new(),
                };
                (HierarchicalVit::from_checkpoint(&ck)?, ck.optimizer, history)
            } else {
                let model = HierarchicalVit::new(config)?;
                let state = AdamState::for_store(&model.store);
                (model, state, Vec::new())
            };
            let opts = TrainOptions {
                epochs: cfg.epochs,
                masking,
                adam: AdamConfig::with_lr(cfg.lr),
            };
            let metrics = train_epochs(&mut model, &mut state, &train_set, &opts)?;
            history.extend(metrics);
            save_checkpoint(&ck_path, &ModelCheckpoint::capture(&model, masking, &state))?;
            let log = TrainLog {
                fold,
                masking,
                lr: cfg.lr,
                train_slides: train_set.len(),
                step: state.step,
                epochs: history,
            };
            let json = serde_json::to_string_pretty(&log).expect("train log serializes");
            crate::write_file(&log_path, json.as_bytes())?;
            info(format!(
                "train: fold {} {} step {} final loss {:.4}",
                fold + 1,
                masking.label(),
                state.step,
                log.epochs.last().map_or(f64::NAN, |e| e.mean_loss)
            ));
            Ok(log)
        })
        .collect()
}

/// Evaluates every fold checkpoint on its held-out fold and writes
/// `report.json` and `report.txt`.
pub fn eval(cfg: &RunConfig) -> Result<ExperimentReport> {
    let start = Instant::now();
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.out_dir);
    let data = load_dataset(cfg)?;
    let folds = fold_indices(cfg, &data)?;
    let mut variants = Vec::new();
    for masking in cfg.masking.maskings() {
        let results = (0..cfg.folds)
            .into_par_iter()
            .map(|fold| {
                let path = paths.checkpoint(fold, masking);
                let ck = load_checkpoint(&path)?;
                info(describe_checkpoint(&path, &ck));
                if ck.masking != masking {
                    return Err(CliError::format(&path, "masking flag does not match file name"));
                }
                let model = HierarchicalVit::from_checkpoint(&ck)?;
                let (_, tune) = split(&data, &folds, fold);
                let ev = evaluate(&model, &tune, masking)?;
                if ev.kappa.degenerate {
                    warn(format!(
                        "fold {} {}: zero expected disagreement, kappa defined as 1",
                        fold + 1,
                        masking.label()
                    ));
                }
                Ok(FoldResult {
                    fold,
                    kappa: ev.kappa.value,
                    degenerate: ev.kappa.degenerate,
                    checkpoint_step: ck.step,
                    confusion: ev.confusion,
                    predictions: ev.predictions,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        variants.push(VariantReport::new(masking, results));
    }
    let report = ExperimentReport {
        config: cfg.clone(),
        num_slides: data.len(),
        fold_sizes: folds.iter().map(Vec::len).collect(),
        variants,
    };
    crate::write_file(&paths.report_json(), report.to_json().as_bytes())?;
    let text = report.to_text(Some(start.elapsed().as_secs_f64()));
    crate::write_file(&paths.report_text(), text.as_bytes())?;
    Ok(report)
}

/// Files written for one slide and variant.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapOutput {
    pub slide_id: String,
    pub masking: Masking,
    pub regions: Vec<PathBuf>,
    pub stitched: PathBuf,
}

/// Renders per-region and stitched heatmaps for the given slides (all
/// preprocessed slides when empty), using the checkpoint of the fold that
/// held each slide out.
pub fn heatmap(cfg: &RunConfig, slide_ids: &[String]) -> Result<Vec<HeatmapOutput>> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.out_dir);
    let data = load_dataset(cfg)?;
    let folds = fold_indices(cfg, &data)?;
    let mut selected = Vec::new();
    if slide_ids.is_empty() {
        selected.extend(0..data.len());
    } else {
        for id in slide_ids {
            let i = data
                .iter()
                .position(|r| &r.sample.slide_id == id)
                .ok_or_else(|| CliError::Config(format!("unknown slide {id}")))?;
            selected.push(i);
        }
    }
    let layer = cfg.heatmap_layer();
    let mut out = Vec::new();
    for masking in cfg.masking.maskings() {
        let models = (0..cfg.folds)
            .map(|fold| {
                let path = paths.checkpoint(fold, masking);
                let ck = load_checkpoint(&path)?;
                info(describe_checkpoint(&path, &ck));
                Ok(HierarchicalVit::from_checkpoint(&ck)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let rendered = selected
            .par_iter()
            .map(|&i| {
                let fold = folds.iter().position(|f| f.binary_search(&i).is_ok()).expect("partition");
                render_slide(&models[fold], &data[i], masking, layer, cfg.downsample, &paths)
            })
            .collect::<Result<Vec<_>>>()?;
        out.extend(rendered);
    }
    Ok(out)
}

fn render_slide(
    model: &HierarchicalVit,
    rec: &SlideRecord,
    masking: Masking,
    layer: usize,
    downsample: usize,
    paths: &RunPaths,
) -> Result<HeatmapOutput> {
    let s = &rec.sample;
    let dir = paths.heatmaps(&s.slide_id, masking);
    let attn = model.region_attention(s, masking, layer)?;
    let mut placed = Vec::with_capacity(s.num_regions());
    let mut regions = Vec::with_capacity(s.num_regions());
    for (m, &(x, y)) in s.region_coords.iter().enumerate() {
        let w = region_slice(&attn, m)?;
        let hm = region_heatmap(&w, &s.tissue[m], rec.region_size, rec.patch_size, masking, layer)?;
        let stem = dir.join(format!("region_{x}_{y}"));
        write_heatmap(&stem, &hm)?;
        regions.push(stem);
        placed.push(PlacedHeatmap {
            x: x as usize,
            y: y as usize,
            heatmap: hm,
        });
    }
    let stitched = stitch_heatmaps(&placed, rec.width, rec.height, downsample)?;
    let stem = dir.join("stitched");
    write_heatmap(&stem, &stitched)?;
    Ok(HeatmapOutput {
        slide_id: s.slide_id.clone(),
        masking,
        regions,
        stitched: stem,
    })
}

/// synth, preprocess, train and eval in sequence.
pub fn run_all(cfg: &RunConfig) -> Result<ExperimentReport> {
    synth(cfg)?;
    preprocess(cfg)?;
    train(cfg, false)?;
    eval(cfg)
}
