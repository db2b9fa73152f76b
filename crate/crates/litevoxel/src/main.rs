//! Command-line front end: dataset synthesis, training, rendering, and
//! evaluation. Usage errors exit 2 (via clap); data/config errors exit 1.

use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

use litevoxel::grid::VoxelGrid;
use litevoxel::img::write_ppm;
use litevoxel::raster::{render_image, RenderOptions};
use litevoxel::scene::SceneSpec;
use litevoxel::train::{self, Dataset, TrainConfig};
use litevoxel::Result;

#[derive(Parser)]
#[command(name = "litevoxel", version, about = "Sparse-voxel scene reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Ablation {
    /// Disable the low-frequency loss reweighting (gamma fixed at 0).
    Lf,
    /// Disable pruning entirely.
    Prune,
    /// Disable subdivision entirely.
    Subdiv,
    /// Collapse depth stratification to a single bin.
    Bins,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic box-scene dataset (images + cameras.json).
    Synth {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Scene spec JSON; the stock three-box scene when omitted.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Override the number of ring views.
        #[arg(long)]
        views: Option<usize>,
        /// Override the square image resolution.
        #[arg(long)]
        size: Option<u32>,
    },
    /// Train a voxel grid on a dataset directory.
    Train {
        /// Dataset directory (from `synth` or hand-assembled).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoint.json, metrics.csv, and logs.
        #[arg(long)]
        out: PathBuf,
        /// Training config JSON; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the iteration count.
        #[arg(long)]
        iters: Option<u64>,
        /// Override the RNG seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Disable one mechanism for A/B comparisons (repeatable).
        #[arg(long, value_enum)]
        ablate: Vec<Ablation>,
        /// Progress print cadence (0 = silent).
        #[arg(long, default_value_t = 0)]
        log_every: u64,
    },
    /// Render every dataset view from a checkpoint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory containing cameras.json.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for render_%04d.ppm.
        #[arg(long)]
        out: PathBuf,
    },
    /// Report reconstruction quality of a checkpoint against a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the full report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            scene,
            views,
            size,
        } => {
            let mut spec = match scene {
                Some(path) => SceneSpec::load(&path)?,
                None => SceneSpec::example(),
            };
            if let Some(v) = views {
                spec.ring.count = v;
            }
            if let Some(s) = size {
                spec.width = s;
                spec.height = s;
            }
            let cams = litevoxel::scene::synth(&spec, &out)?;
            println!("wrote {} views to {}", cams.len(), out.display());
        }
        Command::Train {
            data,
            out,
            config,
            iters,
            seed,
            ablate,
            log_every,
        } => {
            let mut cfg = match config {
                Some(path) => TrainConfig::load(&path)?,
                None => TrainConfig::default(),
            };
            if let Some(n) = iters {
                cfg.iters = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.log_every = log_every;
            cfg.lf_off |= ablate.contains(&Ablation::Lf);
            cfg.prune_off |= ablate.contains(&Ablation::Prune);
            cfg.subdivide_off |= ablate.contains(&Ablation::Subdiv);
            cfg.depth_bins_off |= ablate.contains(&Ablation::Bins);

            let dataset = Dataset::load(&data)?;
            let outcome = train::train(&dataset, &cfg)?;
            std::fs::create_dir_all(&out)?;
            outcome.grid.save_checkpoint(&out.join("checkpoint.json"))?;
            train::write_metrics_csv(&outcome.metrics, &out.join("metrics.csv"))?;
            write_adapt_logs(&outcome, &out)?;
            let report = train::eval(&outcome.grid, &dataset)?;
            println!(
                "trained {} iters: psnr {:.2} dB, ssim {:.4}, {} live voxels ({} bytes, peak {})",
                cfg.iters,
                report.mean_psnr,
                report.mean_ssim,
                outcome.grid.len(),
                outcome.grid.model_bytes(),
                outcome.peak_model_bytes
            );
        }
        Command::Render {
            checkpoint,
            data,
            out,
        } => {
            let grid = VoxelGrid::load_checkpoint(&checkpoint)?;
            let cameras = litevoxel::geometry::load_cameras(&data.join("cameras.json"))?;
            std::fs::create_dir_all(&out)?;
            for (i, cam) in cameras.iter().enumerate() {
                let r = render_image(&grid, cam, RenderOptions::default());
                write_ppm(&r.image, &out.join(format!("render_{i:04}.ppm")))?;
            }
            println!("rendered {} views to {}", cameras.len(), out.display());
        }
        Command::Eval {
            checkpoint,
            data,
            out,
        } => {
            let grid = VoxelGrid::load_checkpoint(&checkpoint)?;
            let dataset = Dataset::load(&data)?;
            let report = train::eval(&grid, &dataset)?;
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            }
            println!(
                "psnr {:.2} dB  ssim {:.4}  flat-mse {:.3e}  voxels {}  bytes {}",
                report.mean_psnr,
                report.mean_ssim,
                report.flat_region_mse,
                report.live_voxels,
                report.model_bytes
            );
        }
    }
    Ok(())
}

/// Append-style CSV logs of every adaptation step.
fn write_adapt_logs(outcome: &train::TrainOutcome, out: &std::path::Path) -> Result<()> {
    let mut prune_csv = String::from("iter,bin,population,tau,pruned,protected,cap_limited\n");
    for (iter, rep) in &outcome.prune_reports {
        for b in &rep.bins {
            prune_csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                iter, b.bin, b.population, b.tau, b.pruned, b.protected, rep.cap_limited
            ));
        }
    }
    std::fs::write(out.join("prune_log.csv"), prune_csv)?;

    let mut split_csv = String::from("iter,eligible,splits,truncated_by,min_priority\n");
    for (iter, rep) in &outcome.split_reports {
        split_csv.push_str(&format!(
            "{},{},{},{},{}\n",
            iter,
            rep.eligible,
            rep.split.len(),
            rep.truncated_by,
            rep.min_selected_priority
        ));
    }
    std::fs::write(out.join("split_log.csv"), split_csv)?;
    Ok(())
}
