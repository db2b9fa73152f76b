//! End-to-end training: dataset loading, the optimization loop with the
//! gamma-ramped low-frequency reweighting, and the periodic
//! prune-then-subdivide adaptation step.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::geometry::{load_cameras, Camera};
use crate::grid::{Bounds, VoxelGrid, DEFAULT_L_MAX};
use crate::img::{read_ppm, Image};
use crate::losses::{self, LossWeights, LF_EPSILON};
use crate::optim::{AdamConfig, Optimizer};
use crate::prune::{self, PruneConfig, PruneReport};
use crate::raster::{self, RenderOptions};
use crate::subdiv::{self, SplitReport, SubdivideConfig};
use crate::{Error, Result};

fn default_iters() -> u64 {
    2000
}
fn default_init_level() -> u8 {
    3
}
fn default_alpha0() -> f64 {
    0.1
}
fn default_color0() -> [f64; 3] {
    [0.5; 3]
}
fn default_l_max() -> u8 {
    DEFAULT_L_MAX
}
fn default_bounds() -> Bounds {
    Bounds::unit()
}
fn default_gamma_max() -> f64 {
    0.6
}
fn default_t0_frac() -> f64 {
    0.3
}
fn default_t1_frac() -> f64 {
    0.6
}

/// Full training configuration; every field has a sensible default so a
/// config file only needs to override what it changes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iters: u64,
    pub seed: u64,
    pub init_level: u8,
    pub l_max: u8,
    pub bounds: Bounds,
    pub alpha0: f64,
    pub color0: [f64; 3],
    /// Adaptation cadence; `None` resolves to iters / 20.
    pub adapt_every: Option<u64>,
    /// Gamma ramp for the low-frequency reweighting, as fractions of the run.
    pub gamma_max: f64,
    pub t0_frac: f64,
    pub t1_frac: f64,
    pub loss: LossWeights,
    pub adam: AdamConfig,
    pub prune: PruneConfig,
    pub subdivide: SubdivideConfig,
    /// Ablation switches.
    pub lf_off: bool,
    pub prune_off: bool,
    pub subdivide_off: bool,
    pub depth_bins_off: bool,
    /// Progress lines to stderr every this many iterations; 0 is silent.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters: default_iters(),
            seed: 7,
            init_level: default_init_level(),
            l_max: default_l_max(),
            bounds: default_bounds(),
            alpha0: default_alpha0(),
            color0: default_color0(),
            adapt_every: None,
            gamma_max: default_gamma_max(),
            t0_frac: default_t0_frac(),
            t1_frac: default_t1_frac(),
            loss: LossWeights::default(),
            adam: AdamConfig::default(),
            prune: PruneConfig::default(),
            subdivide: SubdivideConfig::default(),
            lf_off: false,
            prune_off: false,
            subdivide_off: false,
            depth_bins_off: false,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::Config("iters must be positive".into()));
        }
        if !(0.0 <= self.t0_frac && self.t0_frac < self.t1_frac && self.t1_frac <= 1.0) {
            return Err(Error::Config(
                "gamma ramp needs 0 <= t0_frac < t1_frac <= 1".into(),
            ));
        }
        self.prune.validate()?;
        self.subdivide.validate()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolved_adapt_every(&self) -> u64 {
        self.adapt_every.unwrap_or((self.iters / 20).max(1)).max(1)
    }
}

/// Posed views plus their ground-truth images.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
}

impl Dataset {
    pub fn new(cameras: Vec<Camera>, images: Vec<Image>) -> Result<Self> {
        if cameras.len() != images.len() || cameras.is_empty() {
            return Err(Error::Data(format!(
                "need equal nonzero camera/image counts, got {}/{}",
                cameras.len(),
                images.len()
            )));
        }
        for (i, (c, im)) in cameras.iter().zip(images.iter()).enumerate() {
            if c.width != im.width || c.height != im.height {
                return Err(Error::Data(format!(
                    "view {i}: camera {}x{} vs image {}x{}",
                    c.width, c.height, im.width, im.height
                )));
            }
        }
        Ok(Dataset { cameras, images })
    }

    /// Load `cameras.json` and `images/view_%04d.ppm` from a dataset
    /// directory (the layout `synth` writes).
    pub fn load(dir: &Path) -> Result<Self> {
        let cameras = load_cameras(&dir.join("cameras.json"))?;
        let images = cameras
            .iter()
            .enumerate()
            .map(|(i, _)| read_ppm(&dir.join(format!("images/view_{i:04}.ppm"))))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(cameras, images)
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }
}

/// One metrics.csv row; one is emitted per training iteration.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub iter: u64,
    pub total_loss: f64,
    pub lf: f64,
    pub ssim: f64,
    pub t_conc: f64,
    pub tv: f64,
    pub psnr: f64,
    pub live_voxels: usize,
    pub peak_voxels: usize,
    pub model_bytes: u64,
    pub peak_model_bytes: u64,
    pub splits: usize,
    pub prunes: usize,
    pub gamma: f64,
}

pub const METRICS_HEADER: &str = "iter,total_loss,lf,ssim,t_conc,tv,psnr,live_voxels,peak_voxels,model_bytes,peak_model_bytes,splits,prunes,gamma";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iter,
            self.total_loss,
            self.lf,
            self.ssim,
            self.t_conc,
            self.tv,
            self.psnr,
            self.live_voxels,
            self.peak_voxels,
            self.model_bytes,
            self.peak_model_bytes,
            self.splits,
            self.prunes,
            self.gamma
        )
    }
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub grid: VoxelGrid,
    pub metrics: Vec<MetricsRow>,
    pub prune_reports: Vec<(u64, PruneReport)>,
    pub split_reports: Vec<(u64, SplitReport)>,
    pub peak_voxels: usize,
    pub peak_model_bytes: u64,
}

/// Run the full optimization: per-view gradient steps round-robin over a
/// seed-shuffled view order, with prune/subdivide adaptation every
/// `adapt_every` iterations. Deterministic for a fixed config and dataset
/// at any worker count.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut grid = VoxelGrid::init_uniform_with_lmax(
        cfg.bounds,
        cfg.init_level,
        cfg.alpha0,
        cfg.color0,
        cfg.l_max,
    )?;
    let mut optimizer = Optimizer::new(cfg.adam, &grid);
    let initial_live = grid.len();
    let mut subdiv_cfg = cfg.subdivide;
    if subdiv_cfg.hard_cap == 0 {
        subdiv_cfg.hard_cap = initial_live * 8;
    }
    let mut prune_cfg = cfg.prune;
    if cfg.depth_bins_off {
        prune_cfg.num_bins = 1;
    }
    let adapt_every = cfg.resolved_adapt_every();
    let t0 = (cfg.t0_frac * cfg.iters as f64).round() as u64;
    let t1 = (cfg.t1_frac * cfg.iters as f64).round() as u64;

    // gradient maps are stop-grad, computed once per view
    let sobel_maps: Vec<Vec<f64>> = dataset
        .images
        .iter()
        .map(losses::sobel_map)
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.iters as usize);
    let mut prune_reports = Vec::new();
    let mut split_reports = Vec::new();
    let mut peak_voxels = grid.len();
    let mut peak_model_bytes = grid.model_bytes();

    for t in 0..cfg.iters {
        let slot = (t as usize) % dataset.len();
        if slot == 0 {
            order.shuffle(&mut rng);
        }
        let view = order[slot];
        let cam = &dataset.cameras[view];
        let gt = &dataset.images[view];

        let gamma = if cfg.lf_off {
            0.0
        } else {
            losses::gamma_schedule(t, t0, t1, cfg.gamma_max)?
        };
        let weights = losses::lf_weights(&sobel_maps[view], gamma, LF_EPSILON);

        let out = raster::render_image(
            &grid,
            cam,
            RenderOptions {
                keep_rays: true,
                early_termination: true,
            },
        );
        raster::accumulate_stats(&mut grid, &out, gt);
        let (breakdown, grads) = losses::total_loss(&out, gt, &weights, &grid, &cfg.loss)?;
        let mut grad_map = raster::backward_image(&out, &grads.dl_dc, &grads.dl_dt);
        for (k, g) in grads.voxel_opacity {
            grad_map.entry(k).or_insert([0.0; 4])[3] += g;
        }
        let psnr = losses::psnr(&out.image, gt)?;
        drop(out);
        optimizer.step(&mut grid, &grad_map)?;

        let mut splits = 0;
        let mut prunes = 0;
        if (t + 1) % adapt_every == 0 && t + 1 < cfg.iters {
            prune::update_inside_states(&mut grid, &prune_cfg);
            if !cfg.prune_off {
                let report = prune_step_and_refresh(
                    &mut grid,
                    &mut optimizer,
                    &dataset.cameras,
                    &prune_cfg,
                    t + 1,
                    cfg.iters,
                )?;
                prunes = report.total_removed;
                prune_reports.push((t + 1, report));
            }
            subdiv::update_usefulness_scores(&mut grid, subdiv_cfg.usefulness_ema);
            if !cfg.subdivide_off {
                let report =
                    subdiv::select_and_split(&mut grid, &dataset.cameras, &subdiv_cfg, &mut optimizer)?;
                splits = report.split.len();
                split_reports.push((t + 1, report));
            }
            grid.reset_windows();
        }

        peak_voxels = peak_voxels.max(grid.len());
        peak_model_bytes = peak_model_bytes.max(grid.model_bytes());
        metrics.push(MetricsRow {
            iter: t,
            total_loss: breakdown.total,
            lf: breakdown.lf,
            ssim: breakdown.ssim,
            t_conc: breakdown.t_conc,
            tv: breakdown.tv,
            psnr,
            live_voxels: grid.len(),
            peak_voxels,
            model_bytes: grid.model_bytes(),
            peak_model_bytes,
            splits,
            prunes,
            gamma,
        });
        if cfg.log_every > 0 && (t + 1) % cfg.log_every == 0 {
            eprintln!(
                "iter {:>6}  loss {:.5}  psnr {:.2}  live {}  peak {}",
                t + 1,
                breakdown.total,
                psnr,
                grid.len(),
                peak_voxels
            );
        }
    }

    Ok(TrainOutcome {
        grid,
        metrics,
        prune_reports,
        split_reports,
        peak_voxels,
        peak_model_bytes,
    })
}

fn prune_step_and_refresh(
    grid: &mut VoxelGrid,
    optimizer: &mut Optimizer,
    cameras: &[Camera],
    cfg: &PruneConfig,
    t: u64,
    total: u64,
) -> Result<PruneReport> {
    let report = prune::prune_step(grid, cameras, cfg, t, total);
    optimizer.refresh_after_topology(grid, &report.removed, &[], &[])?;
    Ok(report)
}

/// Per-view and mean reconstruction quality for a trained grid.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub per_view_psnr: Vec<f64>,
    pub per_view_ssim: Vec<f64>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Mean photometric MSE restricted to low-gradient ground-truth pixels.
    pub flat_region_mse: f64,
    pub live_voxels: usize,
    pub model_bytes: u64,
}

pub const FLAT_REGION_THRESHOLD: f64 = 0.2;

pub fn eval(grid: &VoxelGrid, dataset: &Dataset) -> Result<EvalReport> {
    let mut per_view_psnr = Vec::with_capacity(dataset.len());
    let mut per_view_ssim = Vec::with_capacity(dataset.len());
    let mut flat_sum = 0.0;
    for (cam, gt) in dataset.cameras.iter().zip(dataset.images.iter()) {
        let out = raster::render_image(grid, cam, RenderOptions::default());
        per_view_psnr.push(losses::psnr(&out.image, gt)?);
        per_view_ssim.push(losses::ssim_index(&out.image, gt)?);
        let sobel = losses::sobel_map(gt)?;
        flat_sum += losses::flat_region_mse(&out.image, gt, &sobel, FLAT_REGION_THRESHOLD);
    }
    let n = dataset.len() as f64;
    Ok(EvalReport {
        mean_psnr: per_view_psnr.iter().sum::<f64>() / n,
        mean_ssim: per_view_ssim.iter().sum::<f64>() / n,
        flat_region_mse: flat_sum / n,
        per_view_psnr,
        per_view_ssim,
        live_voxels: grid.len(),
        model_bytes: grid.model_bytes(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::SceneSpec;

    fn tiny_dataset() -> (Dataset, SceneSpec) {
        let mut spec = SceneSpec::example();
        spec.width = 16;
        spec.height = 16;
        spec.ring.count = 3;
        let cameras = spec.cameras().unwrap();
        let images = cameras
            .iter()
            .map(|c| crate::scene::trace_scene(&spec, c).unwrap())
            .collect();
        (Dataset::new(cameras, images).unwrap(), spec)
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            iters: 40,
            init_level: 2,
            adapt_every: Some(10),
            ..Default::default()
        }
    }

    #[test]
    fn smoke_train_reduces_loss() {
        let (data, _) = tiny_dataset();
        let out = train(&data, &tiny_config()).unwrap();
        assert_eq!(out.metrics.len(), 40);
        let head: f64 = out.metrics[..5].iter().map(|m| m.total_loss).sum();
        let tail: f64 = out.metrics[35..].iter().map(|m| m.total_loss).sum();
        assert!(tail < head, "loss should drop: head {head} tail {tail}");
        assert!(out.peak_voxels >= out.grid.len());
        assert!(out.grid.check_no_overlap());
    }

    #[test]
    fn training_is_deterministic() {
        let (data, _) = tiny_dataset();
        let cfg = tiny_config();
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert_eq!(
            a.grid.to_checkpoint_json().unwrap(),
            b.grid.to_checkpoint_json().unwrap()
        );
        for (x, y) in a.metrics.iter().zip(b.metrics.iter()) {
            assert_eq!(x.csv_line(), y.csv_line());
        }
    }

    #[test]
    fn seed_changes_trajectory() {
        let (data, _) = tiny_dataset();
        let cfg = tiny_config();
        let other = TrainConfig { seed: 99, ..cfg.clone() };
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &other).unwrap();
        let same = a
            .metrics
            .iter()
            .zip(b.metrics.iter())
            .all(|(x, y)| x.total_loss == y.total_loss);
        assert!(!same, "different seeds should visit views differently");
    }

    #[test]
    fn ablation_flags_respected() {
        let (data, _) = tiny_dataset();
        let cfg = TrainConfig {
            prune_off: true,
            subdivide_off: true,
            lf_off: true,
            ..tiny_config()
        };
        let out = train(&data, &cfg).unwrap();
        assert!(out.prune_reports.is_empty());
        assert!(out.split_reports.is_empty());
        assert!(out.metrics.iter().all(|m| m.gamma == 0.0));
        // no topology change: live count stays at the 4^3 initialization
        assert!(out.metrics.iter().all(|m| m.live_voxels == 64));
    }

    #[test]
    fn metrics_csv_round_trip_shape() {
        let (data, _) = tiny_dataset();
        let out = train(&data, &tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics_csv(&out.metrics, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER);
        assert_eq!(lines.count(), 40);
        for line in text.lines().skip(1) {
            assert_eq!(line.split(',').count(), METRICS_HEADER.split(',').count());
        }
    }

    #[test]
    fn dataset_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = SceneSpec::example();
        spec.width = 8;
        spec.height = 8;
        spec.ring.count = 2;
        crate::scene::synth(&spec, dir.path()).unwrap();
        let data = Dataset::load(dir.path()).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data.images[0].width, 8);
    }

    #[test]
    fn mismatched_dataset_rejected() {
        let (data, _) = tiny_dataset();
        let cams = data.cameras.clone();
        assert!(Dataset::new(cams, vec![Image::new(2, 2); 3]).is_err());
        assert!(Dataset::new(data.cameras.clone(), vec![]).is_err());
    }

    #[test]
    fn eval_reports_sane_values() {
        let (data, _) = tiny_dataset();
        let out = train(&data, &tiny_config()).unwrap();
        let report = eval(&out.grid, &data).unwrap();
        assert_eq!(report.per_view_psnr.len(), data.len());
        assert!(report.mean_psnr > 5.0);
        assert!(report.mean_ssim <= 1.0 && report.mean_ssim > -1.0);
        assert_eq!(report.model_bytes, out.grid.model_bytes());
    }
}
