use std::fmt::Write as _;

use maskvit_core::eval::{ConfusionMatrix, SlidePrediction, NUM_ISUP_CLASSES};
use maskvit_core::hvit::Masking;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub kappa: f64,
    /// Expected disagreement was zero and kappa was defined as 1.
    pub degenerate: bool,
    pub checkpoint_step: u64,
    pub confusion: ConfusionMatrix,
    pub predictions: Vec<SlidePrediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub masking: Masking,
    pub method: String,
    pub folds: Vec<FoldResult>,
    pub mean_kappa: f64,
    /// Sample standard deviation across folds.
    pub std_kappa: f64,
}

/// Machine-readable experiment summary. Holds no timing so that a fixed
/// seed reproduces it byte for byte; wall-clock goes to the text report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: RunConfig,
    pub num_slides: usize,
    pub fold_sizes: Vec<usize>,
    pub variants: Vec<VariantReport>,
}

pub fn method_name(masking: Masking) -> &'static str {
    match masking {
        Masking::Off => "Plain self-attention",
        Masking::On => "Masked self-attention",
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl VariantReport {
    pub fn new(masking: Masking, folds: Vec<FoldResult>) -> Self {
        let kappas: Vec<f64> = folds.iter().map(|f| f.kappa).collect();
        let (mean_kappa, std_kappa) = mean_std(&kappas);
        Self {
            masking,
            method: method_name(masking).into(),
            folds,
            mean_kappa,
            std_kappa,
        }
    }
}

impl ExperimentReport {
    pub fn variant(&self, masking: Masking) -> Option<&VariantReport> {
        self.variants.iter().find(|v| v.masking == masking)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Two-row kappa table followed by per-fold values, pooled confusion
    /// matrices and the config.
    pub fn to_text(&self, wall_clock_s: Option<f64>) -> String {
        let mut out = String::new();
        let k = self.fold_sizes.len();
        let _ = writeln!(
            out,
            "ISUP score classification, quadratic weighted kappa on held-out folds \
             ({k}-fold stratified cross-validation, {} slides)\n",
            self.num_slides
        );
        let _ = write!(out, "{:<24}{:>18}", "Method", "Tune kappa");
        for f in 0..k {
            let _ = write!(out, "{:>9}", format!("fold {}", f + 1));
        }
        out.push('\n');
        for v in &self.variants {
            let _ = write!(
                out,
                "{:<24}{:>18}",
                v.method,
                format!("{:.3} ± {:.3}", v.mean_kappa, v.std_kappa)
            );
            for f in &v.folds {
                let mark = if f.degenerate { "*" } else { "" };
                let _ = write!(out, "{:>9}", format!("{:.3}{mark}", f.kappa));
            }
            out.push('\n');
        }
        if self.variants.iter().flat_map(|v| &v.folds).any(|f| f.degenerate) {
            out.push_str("* degenerate fold: zero expected disagreement, kappa defined as 1\n");
        }
        for v in &self.variants {
            let mut pooled = [[0u64; NUM_ISUP_CLASSES]; NUM_ISUP_CLASSES];
            for f in &v.folds {
                for (row, src) in pooled.iter_mut().zip(&f.confusion.counts) {
                    for (c, s) in row.iter_mut().zip(src) {
                        *c += s;
                    }
                }
            }
            let _ = writeln!(
                out,
                "\n{} confusion matrix over all folds (rows true, columns predicted):",
                v.method
            );
            let _ = writeln!(out, "      {}", (0..NUM_ISUP_CLASSES).map(|c| format!("{c:>5}")).collect::<String>());
            for (i, row) in pooled.iter().enumerate() {
                let _ = writeln!(out, "  {i:>3} {}", row.iter().map(|c| format!("{c:>5}")).collect::<String>());
            }
        }
        if let Some(t) = wall_clock_s {
            let _ = writeln!(out, "\nWall-clock: {t:.1} s");
        }
        let _ = writeln!(out, "\nConfig:\n{}", self.config.to_toml_string());
        out
    }
}
