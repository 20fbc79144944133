//! Command-line surface: `train`, `eval`, `score`, `ablate`, `synth-data`
//! and `export-features`.
//!
//! Configuration resolves as defaults, then `--config` file, then `DIQA_*`
//! environment variables, then `--set key=value`. Commands that load a
//! checkpoint start from the checkpoint's own configuration instead of the
//! defaults. Every file written goes under `--out-dir` and is listed in
//! `<out-dir>/outputs.json`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ablation::{run_ablation, write_results, AblationSpec};
use crate::checkpoint::{build_bundle, load_checkpoint, save_checkpoint};
use crate::config::{RunConfig, ENV_PREFIX};
use crate::data::{generate_synthetic_dataset, load_manifest, preprocess, Distortion, Manifest, Split, SynthOptions};
use crate::error::{Error, Result};
use crate::eval::{evaluate, export_features};
use crate::model::{policy_from_config, score_image, ModelBundle};
use crate::schedule::seeded_rng;
use crate::train::{train, write_loss_history};

#[derive(Debug, Parser)]
#[command(name = "diffusion-iqa", version, about = "No-reference image quality from denoiser cross-attention")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Root for every artifact written.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit adapters and prompt context on the manifest's train split.
    Train {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Score a manifest split and report SRCC/PLCC.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val, test or all.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Print the quality score of one image.
    Score {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate every cell of a named grid.
    Ablate {
        /// One of the built-in grids: table2, fig5, table3, table4, table5,
        /// table9, table10, fig6, table7.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Write a synthetic distortion dataset into the output directory.
    SynthData {
        #[arg(long, default_value_t = 500)]
        n: usize,
        /// gaussian_blur, additive_noise or blocking.
        #[arg(long, default_value = "gaussian_blur")]
        distortion: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Image side in pixels.
        #[arg(long, default_value_t = 128)]
        size: usize,
    },
    /// Dump per-image averaged attention vectors and pooled scores.
    ExportFeatures {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "all")]
        split: String,
    },
}

/// Applies file, environment and `--set` layers on top of `base`.
pub fn resolve_config(base: RunConfig, common: &Common) -> Result<RunConfig> {
    let mut cfg = base;
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.apply_text(&text)?;
    }
    cfg.apply_env(std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)))?;
    cfg.apply_overrides(&common.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn select(manifest: &Manifest, split: &str) -> Result<Manifest> {
    if split == "all" {
        return Ok(manifest.clone());
    }
    let which: Split = split.parse().map_err(Error::Config)?;
    let m = manifest.split(which);
    if m.is_empty() {
        return Err(Error::EmptyManifest);
    }
    Ok(m)
}

/// Loads a checkpoint and lets the resolved config adjust what can change
/// without retraining: inference timesteps and the seed.
fn load_for_inference(checkpoint: &Path, common: &Common) -> Result<(ModelBundle, RunConfig)> {
    let mut bundle = load_checkpoint(checkpoint)?;
    let cfg = resolve_config(bundle.config.clone(), common)?;
    bundle.policy = policy_from_config(&cfg, &bundle.schedule)?;
    bundle.config.seed = cfg.seed;
    Ok((bundle, cfg))
}

struct Outputs {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl Outputs {
    fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn add(&mut self, path: PathBuf) {
        self.files.push(path);
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.path(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.add(path.clone());
        Ok(path)
    }

    /// Merges this run's files into `outputs.json`.
    fn finish(self) -> Result<()> {
        let index = self.root.join("outputs.json");
        let mut listed: Vec<String> = std::fs::read_to_string(&index)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default();
        for f in &self.files {
            let rel = f.strip_prefix(&self.root).unwrap_or(f).to_string_lossy().into_owned();
            if !listed.contains(&rel) {
                listed.push(rel);
            }
        }
        listed.sort();
        let text = serde_json::to_string_pretty(&listed)?;
        std::fs::write(&index, text).map_err(|e| Error::io(&index, e))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let mut out = Outputs::new(&common.out_dir)?;
    match &cli.command {
        Command::Train { manifest } => {
            let cfg = resolve_config(RunConfig::default(), common)?;
            let m = load_manifest(manifest)?;
            let train_split = m.split(Split::Train);
            let train_set = if train_split.is_empty() { m } else { train_split };
            let bundle = build_bundle(&cfg)?;
            let outcome = train(bundle, &train_set, &cfg)?;
            let ckpt = out.path("model.safetensors");
            save_checkpoint(&outcome.bundle, &ckpt)?;
            out.add(ckpt.clone());
            out.add(crate::checkpoint::sidecar_path(&ckpt));
            let hist = out.path("loss_history.jsonl");
            write_loss_history(&hist, &outcome.history)?;
            out.add(hist);
            let last = outcome.history.last().map_or(f64::NAN, |h| h.mean_loss);
            println!(
                "trained {} samples, {} updates, final loss {last:.4e}; checkpoint {}",
                train_set.len(),
                outcome.steps,
                ckpt.display()
            );
        }
        Command::Eval {
            manifest,
            checkpoint,
            split,
        } => {
            let (bundle, cfg) = load_for_inference(checkpoint, common)?;
            let m = select(&load_manifest(manifest)?, split)?;
            let report = evaluate(&bundle, &m, cfg.seed)?;
            out.write_text("eval_report.json", &report.to_json()?)?;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            println!(
                "{}: {} images, srcc {}, plcc {}{}",
                report.dataset,
                report.records.len(),
                fmt(report.srcc),
                fmt(report.plcc),
                report.degenerate.as_deref().map(|d| format!(" ({d})")).unwrap_or_default()
            );
        }
        Command::Score { image, checkpoint } => {
            let (bundle, cfg) = load_for_inference(checkpoint, common)?;
            let img = preprocess(image, bundle.image_size)?;
            let score = score_image(&img, &bundle, &mut seeded_rng(cfg.seed))?;
            println!("{score}");
        }
        Command::Ablate { grid, manifest } => {
            let cfg = resolve_config(RunConfig::default(), common)?;
            let spec = AblationSpec::named(grid)?;
            let m = load_manifest(manifest)?;
            let (train_m, test_m) = (m.split(Split::Train), m.split(Split::Test));
            if train_m.is_empty() || test_m.is_empty() {
                return Err(Error::ManifestInvalid("ablation needs train and test splits".into()));
            }
            let results = run_ablation(&cfg, &spec, &train_m, &test_m)?;
            for path in write_results(&out.path("ablation"), &spec, &results)? {
                out.add(path);
            }
            print!("{}", crate::ablation::render_table(&spec, &results));
        }
        Command::SynthData {
            n,
            distortion,
            seed,
            size,
        } => {
            let cfg = resolve_config(RunConfig::default(), common)?;
            let distortion: Distortion = distortion.parse()?;
            let opts = SynthOptions {
                size: *size,
                ..SynthOptions::new(*n, distortion, seed.unwrap_or(cfg.seed))
            };
            let m = generate_synthetic_dataset(&opts, &common.out_dir)?;
            out.add(out.path("manifest.csv"));
            for r in &m.records {
                out.add(m.resolve(r));
            }
            println!("wrote {} images and {}", m.len(), out.path("manifest.csv").display());
        }
        Command::ExportFeatures {
            manifest,
            checkpoint,
            split,
        } => {
            let (bundle, cfg) = load_for_inference(checkpoint, common)?;
            let m = select(&load_manifest(manifest)?, split)?;
            let path = out.path("features.jsonl");
            let recs = export_features(&bundle, &m, &path, cfg.seed)?;
            out.add(path.clone());
            println!("wrote {} feature records to {}", recs.len(), path.display());
        }
    }
    out.finish()
}

/// Parses `args` and runs; returns the process exit code (2 for usage
/// errors, 1 for runtime errors).
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
