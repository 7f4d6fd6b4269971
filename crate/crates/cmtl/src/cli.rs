//! The `cmtl` command line.
//!
//! Exit codes: 0 on success, 1 when a command fails on its inputs, 2 on
//! usage errors. `CMTL_THREADS` caps the worker threads used for evaluation.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use cmtl_core::data::{synthesize_dataset, DotAnnotatedImage};
use cmtl_core::ground_truth::generate_density_map;
use cmtl_core::model::predict_density;
use cmtl_core::train::{cross_validate, fit_and_train_with, ExperimentConfig};
use cmtl_core::GroundTruthConfig;
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::dataset::{load_manifest, read_gray_png, write_manifest};
use crate::dmap::read_dmap;
use crate::render::render_density;
use crate::reports::{load_config, write_history, write_json};
use crate::{evaluate_parallel, Error, Result};

#[derive(Debug, Parser)]
#[command(name = "cmtl", version, about = "Crowd counting with a cascaded multi-task network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    /// Full-width network with the original optimizer settings.
    Full,
    /// Quarter-width network tuned for small synthetic sets on a CPU.
    Desk,
}

impl Preset {
    fn config(self) -> ExperimentConfig {
        match self {
            Preset::Full => ExperimentConfig::default(),
            Preset::Desk => ExperimentConfig::desk_scale(),
        }
    }
}

#[derive(Debug, clap::Args)]
struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// Experiment or training-settings JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults used for everything the config file leaves out.
    #[arg(long, value_enum, default_value = "full")]
    preset: Preset,
    /// Train without the count-group prior stage.
    #[arg(long)]
    single_stage: bool,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainArgs {
    fn experiment(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p, self.preset.config())?,
            None => self.preset.config(),
        };
        if self.single_stage {
            cfg.training.ablation_single_stage = true;
        }
        if let Some(seed) = self.seed {
            cfg.training.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dot-annotated dataset.
    Synth {
        #[arg(long)]
        n: usize,
        /// Image size as HxW.
        #[arg(long, value_parser = parse_size, default_value = "64x64")]
        size: (usize, usize),
        /// Inclusive head-count range as lo:hi.
        #[arg(long, value_parser = parse_range, default_value = "0:50")]
        count: (usize, usize),
        /// Head blob radius in pixels.
        #[arg(long, default_value_t = 2.0)]
        radius: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write ground-truth density maps (DMAP plus a PNG view) for a manifest.
    GenerateGt {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 4.0)]
        sigma: f64,
        /// Keep the mass of kernels cut off by the image border out of the map.
        #[arg(long)]
        no_renormalize: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network and write model.ckpt and history.csv.
    Train {
        #[command(flatten)]
        args: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a model on a manifest and write a JSON report.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report file.
        #[arg(long)]
        out: PathBuf,
    },
    /// k-fold cross-validation.
    Crossval {
        #[command(flatten)]
        args: TrainArgs,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict density maps for a PNG image or every image of a manifest.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a DMAP file as a false-color PNG.
    Render {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW, e.g. 64x64")?;
    let h = h.trim().parse().map_err(|_| format!("bad height `{h}`"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width `{w}`"))?;
    Ok((h, w))
}

fn parse_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let (lo, hi) = s.split_once(':').ok_or("expected lo:hi, e.g. 0:50")?;
    let lo: usize = lo.trim().parse().map_err(|_| format!("bad lower bound `{lo}`"))?;
    let hi: usize = hi.trim().parse().map_err(|_| format!("bad upper bound `{hi}`"))?;
    if hi < lo {
        return Err(format!("empty range {lo}:{hi}"));
    }
    Ok((lo, hi))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("CMTL_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("CMTL_THREADS must be a positive integer, got `{v}`")))?;
    // A pool already configured by an earlier call in this process is kept.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match configure_threads().and_then(|()| execute(cli.command)) {
        Ok(()) => 0,
        Err(Error::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_images(data: &Path) -> Result<Vec<DotAnnotatedImage>> {
    let images = load_manifest(data)?;
    if images.is_empty() {
        return Err(Error::format(data, "manifest lists no images"));
    }
    Ok(images)
}

#[derive(Serialize)]
struct InferredCount {
    id: String,
    estimated_count: f64,
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            n,
            size,
            count,
            radius,
            seed,
            out,
        } => {
            create_dir(&out)?;
            let images = synthesize_dataset(n, size, count, radius, seed)?;
            let manifest = write_manifest(&out, &images)?;
            println!("wrote {} images to {}", images.len(), manifest.display());
        }
        Command::GenerateGt {
            data,
            sigma,
            no_renormalize,
            out,
        } => {
            let cfg = GroundTruthConfig {
                sigma,
                renormalize_truncated: !no_renormalize,
            };
            cfg.validate()?;
            let images = load_images(&data)?;
            create_dir(&out)?;
            for img in &images {
                let map = generate_density_map((img.image().height(), img.image().width()), img.heads(), &cfg)
                    .map_err(|e| Error::format(&data, format!("image `{}`: {e}", img.id())))?;
                render_density(&map, &out.join(format!("{}.png", img.id())))?;
            }
            println!("wrote {} density maps to {}", images.len(), out.display());
        }
        Command::Train { args, out } => {
            let cfg = args.experiment()?;
            let images = load_images(&args.data)?;
            create_dir(&out)?;
            write_json(&out.join("config.json"), &cfg)?;
            let trained = fit_and_train_with(&images, &cfg, |event| {
                let r = event.record;
                eprintln!("epoch {}: L {:.6} L_c {:.6} L_d {:.6}", r.epoch, r.loss, r.classification, r.density);
                if event.checkpoint_due {
                    let path = out.join(format!("epoch-{:04}.ckpt", r.epoch));
                    save_checkpoint(
                        &path,
                        &Checkpoint {
                            params: event.params.clone(),
                            boundaries: None,
                        },
                    )
                    .map_err(|e| cmtl_core::Error::Observer(e.to_string()))?;
                }
                Ok(())
            })?;
            write_history(&out.join("history.csv"), &trained.history)?;
            let model = out.join("model.ckpt");
            save_checkpoint(
                &model,
                &Checkpoint {
                    params: trained.params,
                    boundaries: Some(trained.boundaries),
                },
            )?;
            println!("wrote {}", model.display());
        }
        Command::Eval { model, data, out } => {
            let ckpt = load_checkpoint(&model)?;
            let images = load_images(&data)?;
            let report = evaluate_parallel(&ckpt.params, &images)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            write_json(&out, &report)?;
            println!("{}", report.table_row());
        }
        Command::Crossval { args, folds, out } => {
            let cfg = args.experiment()?;
            let images = load_images(&args.data)?;
            create_dir(&out)?;
            let cv = cross_validate(&images, folds, &cfg)?;
            write_json(&out.join("crossval.json"), &cv)?;
            for (i, f) in cv.folds.iter().enumerate() {
                println!("fold {}: {}", i + 1, f.table_row());
            }
            println!("pooled: {}", cv.aggregate.table_row());
        }
        Command::Infer { model, data, out } => {
            let ckpt = load_checkpoint(&model)?;
            let is_png = data.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
            let inputs: Vec<(String, cmtl_core::data::GrayImage)> = if is_png {
                let id = data.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
                vec![(id, read_gray_png(&data)?)]
            } else {
                load_images(&data)?
                    .into_iter()
                    .map(|d| (d.id().to_string(), d.image().clone()))
                    .collect()
            };
            create_dir(&out)?;
            let mut counts = Vec::with_capacity(inputs.len());
            for (id, image) in inputs {
                let pred = predict_density(&ckpt.params, &image)
                    .map_err(|e| Error::format(&data, format!("image `{id}`: {e}")))?;
                render_density(&pred.density_map(), &out.join(format!("{id}.png")))?;
                println!("{id}: {:.2}", pred.count());
                counts.push(InferredCount {
                    id,
                    estimated_count: pred.count(),
                });
            }
            write_json(&out.join("counts.json"), &counts)?;
        }
        Command::Render { data, out } => {
            let map = read_dmap(&data)?;
            create_dir(&out)?;
            let stem = data.file_stem().map_or("density".into(), |s| s.to_string_lossy().into_owned());
            let png = out.join(format!("{stem}.png"));
            render_density(&map, &png)?;
            println!("wrote {}", png.display());
        }
    }
    Ok(())
}
