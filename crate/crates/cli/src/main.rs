use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use maskvit::commands;
use maskvit::config::{RunConfig, Variants};
use maskvit::error::{CliError, EXIT_VALIDATION};

/// Masked hierarchical vision transformer: synthetic data, training,
/// cross-validated evaluation and attention heatmaps.
#[derive(Parser, Debug)]
#[command(name = "maskvit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic slides (mask + intensity PNGs) and a manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of slides to generate [default: 120]
        #[arg(long)]
        n_slides: Option<usize>,
    },
    /// Tile manifest slides into regions and patches.
    Preprocess {
        #[command(flatten)]
        common: Common,
        /// Manifest to read [default: <out-dir>/manifest.jsonl]
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train one checkpoint per fold and attention variant.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from existing checkpoints for --epochs more epochs
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate fold checkpoints and write report.json and report.txt.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Render region and stitched attention heatmaps.
    Heatmap {
        #[command(flatten)]
        common: Common,
        /// Slide id to render; repeatable [default: every preprocessed slide]
        #[arg(long = "slide")]
        slides: Vec<String>,
        /// Region transformer layer to visualize [default: last]
        #[arg(long)]
        layer: Option<usize>,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run config; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed for data, folds and model init [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Attention variants to act on [default: both]
    #[arg(long, value_enum)]
    masking: Option<Variants>,
    /// Number of cross-validation folds [default: 5]
    #[arg(long)]
    folds: Option<usize>,
    /// Training epochs [default: 10]
    #[arg(long)]
    epochs: Option<usize>,
    /// Adam learning rate [default: 0.0005]
    #[arg(long)]
    lr: Option<f64>,
    /// Heatmap stitching downsample factor [default: 16]
    #[arg(long)]
    downsample: Option<usize>,
    /// Run directory [default: run]
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f.clone() { cfg.$f = v; })* };
        }
        set!(seed, masking, folds, epochs, lr, downsample, out_dir);
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { common, n_slides } => {
            let mut cfg = common.resolve()?;
            if let Some(n) = n_slides {
                cfg.n_slides = n;
            }
            commands::synth(&cfg)?;
        }
        Command::Preprocess { common, manifest } => {
            let mut cfg = common.resolve()?;
            if manifest.is_some() {
                cfg.manifest = manifest;
            }
            commands::preprocess(&cfg)?;
        }
        Command::Train { common, resume } => {
            commands::train(&common.resolve()?, resume)?;
        }
        Command::Eval { common } => {
            let cfg = common.resolve()?;
            commands::eval(&cfg)?;
            let text = std::fs::read_to_string(commands::RunPaths::new(&cfg.out_dir).report_text())
                .map_err(|e| CliError::io(&cfg.out_dir, e))?;
            print!("{text}");
        }
        Command::Heatmap {
            common,
            slides,
            layer,
        } => {
            let mut cfg = common.resolve()?;
            if layer.is_some() {
                cfg.heatmap_layer = layer;
            }
            for out in commands::heatmap(&cfg, &slides)? {
                println!("{}", out.stitched.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_VALIDATION as u8),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
