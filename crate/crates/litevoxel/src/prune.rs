//! Depth-stratified quantile pruning with EMA+hysteresis inside labels,
//! keep-halo protection, and a per-step removal cap.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use crate::geometry::{depth_proxy, min_footprint, Camera};
use crate::grid::{InsideState, VoxelGrid, VoxelKey};
use crate::raster::CONTRIBUTION_FLOOR;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Number of depth bins.
    pub num_bins: usize,
    /// Quantile annealed linearly from q_start to q_end over training.
    pub q_start: f64,
    pub q_end: f64,
    /// Strength of the mild near/far quantile relaxation (far bins prune
    /// slightly less).
    pub near_far_relax: f64,
    /// EMA factor for the inside score.
    pub ema_alpha: f64,
    /// Hysteresis thresholds, m_low < m_high.
    pub m_low: f64,
    pub m_high: f64,
    /// Max removable fraction of live voxels per adapt step.
    pub cap_fraction: f64,
    /// Keep-halo: protect high-contribution voxels above this w_max that
    /// also have a high-contribution face neighbor.
    pub halo_wmax: f64,
    /// Keep-halo: protect voxels with h_v below this multiple of the local
    /// ray footprint.
    pub halo_size_ratio: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            num_bins: 8,
            q_start: 0.05,
            q_end: 0.25,
            near_far_relax: 0.2,
            ema_alpha: 0.1,
            m_low: 0.3,
            m_high: 0.7,
            cap_fraction: 0.05,
            halo_wmax: 0.5,
            halo_size_ratio: 2.0,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.m_low >= self.m_high {
            return Err(crate::Error::Config("require m_low < m_high".into()));
        }
        if !(0.0 < self.cap_fraction && self.cap_fraction <= 1.0) {
            return Err(crate::Error::Config("cap_fraction must be in (0,1]".into()));
        }
        if !(0.0 < self.ema_alpha && self.ema_alpha <= 1.0) {
            return Err(crate::Error::Config("ema_alpha must be in (0,1]".into()));
        }
        if self.num_bins < 1 {
            return Err(crate::Error::Config("num_bins must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BinReport {
    pub bin: usize,
    pub population: usize,
    pub tau: f64,
    pub pruned: usize,
    pub protected: usize,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct PruneReport {
    pub bins: Vec<BinReport>,
    pub cap_limited: bool,
    pub total_removed: usize,
    pub removed: Vec<VoxelKey>,
}

/// Depth-bin assignment: rank live voxels by their depth proxy and cut into
/// B equally populated bins (populations differ by at most one). Ties break
/// by voxel key.
pub fn assign_depth_bins(
    grid: &VoxelGrid,
    cameras: &[Camera],
    num_bins: usize,
) -> BTreeMap<VoxelKey, usize> {
    assert!(num_bins >= 1 && !cameras.is_empty());
    let mut ranked: Vec<(f64, VoxelKey)> = grid
        .keys()
        .map(|k| (depth_proxy(cameras, grid.center(k)), *k))
        .collect();
    ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let n = ranked.len();
    ranked
        .into_iter()
        .enumerate()
        .map(|(rank, (_, k))| (k, rank * num_bins / n.max(1)))
        .collect()
}

/// Left-continuous empirical-CDF inverse: the smallest observed value t
/// with F(t) >= q. `None` for an empty bin.
pub fn bin_threshold(weights: &[f64], q: f64) -> Option<f64> {
    if weights.is_empty() {
        return None;
    }
    assert!(0.0 < q && q < 1.0);
    let mut sorted = weights.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let idx = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
    Some(sorted[idx])
}

/// EMA + hysteresis update of the inside label.
pub fn update_inside_state(
    ema: f64,
    state: InsideState,
    x_t: f64,
    cfg: &PruneConfig,
) -> (f64, InsideState) {
    let m = (1.0 - cfg.ema_alpha) * ema + cfg.ema_alpha * x_t;
    let s = if m < cfg.m_low {
        InsideState::Out
    } else if m > cfg.m_high {
        InsideState::In
    } else {
        state
    };
    (m, s)
}

/// Run the inside-label update for every live voxel, using the current
/// window's contribution as the inside score (1 when w_max clears the
/// contribution floor).
pub fn update_inside_states(grid: &mut VoxelGrid, cfg: &PruneConfig) {
    for (_, v) in grid.iter_mut() {
        let x = if v.w_max > CONTRIBUTION_FLOOR { 1.0 } else { 0.0 };
        let (m, s) = update_inside_state(v.inside_ema, v.inside_state, x, cfg);
        v.inside_ema = m;
        v.inside_state = s;
    }
}

/// Keep-halo: voxels small relative to the camera footprint, or
/// high-contribution voxels adjacent to another high-contribution voxel
/// (contour proxy), are temporarily protected from pruning.
pub fn keep_halo_mask(
    grid: &VoxelGrid,
    cameras: &[Camera],
    cfg: &PruneConfig,
) -> BTreeSet<VoxelKey> {
    let mut protected = BTreeSet::new();
    for (k, v) in grid.iter() {
        let h = grid.half_size(k.level);
        let delta = min_footprint(cameras, grid.center(k));
        if h < cfg.halo_size_ratio * delta {
            protected.insert(*k);
            continue;
        }
        if v.w_max > cfg.halo_wmax {
            let neighbor_hot = (0..3).any(|axis| {
                [-1i64, 1].iter().any(|dir| {
                    k.face_neighbor(axis, *dir)
                        .and_then(|nb| grid.get(&nb))
                        .map(|nv| nv.w_max > cfg.halo_wmax)
                        .unwrap_or(false)
                })
            });
            if neighbor_hot {
                protected.insert(*k);
            }
        }
    }
    protected
}

/// Annealed per-bin quantile: linear q_start -> q_end over training, then a
/// mild multiplicative near/far relaxation so far bins prune slightly less.
pub fn annealed_quantile(cfg: &PruneConfig, bin: usize, num_bins: usize, t: u64, total: u64) -> f64 {
    let frac = if total == 0 {
        1.0
    } else {
        (t as f64 / total as f64).clamp(0.0, 1.0)
    };
    let q = cfg.q_start + (cfg.q_end - cfg.q_start) * frac;
    let relax = if num_bins > 1 {
        1.0 - cfg.near_far_relax * (bin as f64 / (num_bins - 1) as f64 - 0.5)
    } else {
        1.0
    };
    (q * relax).clamp(1e-9, 1.0 - 1e-9)
}

/// One pruning pass: bin by depth, threshold each bin's w_max at the
/// annealed quantile, add out-labeled voxels, subtract the keep-halo set,
/// enforce the per-step cap (lowest-w_max first, ties by key), and remove.
pub fn prune_step(
    grid: &mut VoxelGrid,
    cameras: &[Camera],
    cfg: &PruneConfig,
    t: u64,
    total_iters: u64,
) -> PruneReport {
    let live = grid.len();
    if live == 0 {
        return PruneReport::default();
    }
    let bins = assign_depth_bins(grid, cameras, cfg.num_bins);
    let halo = keep_halo_mask(grid, cameras, cfg);

    let mut bin_weights: Vec<Vec<f64>> = vec![Vec::new(); cfg.num_bins];
    for (k, v) in grid.iter() {
        bin_weights[bins[k]].push(v.w_max);
    }
    let taus: Vec<Option<f64>> = bin_weights
        .iter()
        .enumerate()
        .map(|(b, w)| bin_threshold(w, annealed_quantile(cfg, b, cfg.num_bins, t, total_iters)))
        .collect();

    let mut candidates: Vec<(f64, VoxelKey)> = Vec::new();
    let mut protected_counts = vec![0usize; cfg.num_bins];
    for (k, v) in grid.iter() {
        let b = bins[k];
        let below = taus[b].map(|tau| v.w_max <= tau).unwrap_or(false);
        let is_candidate = v.inside_state == InsideState::Out || below;
        if !is_candidate {
            continue;
        }
        if halo.contains(k) {
            protected_counts[b] += 1;
        } else {
            candidates.push((v.w_max, *k));
        }
    }

    let cap = ((cfg.cap_fraction * live as f64).ceil() as usize).max(1);
    let cap_limited = candidates.len() > cap;
    if cap_limited {
        candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        candidates.truncate(cap);
    }

    let removed: Vec<VoxelKey> = candidates.iter().map(|(_, k)| *k).collect();
    let mut pruned_per_bin = vec![0usize; cfg.num_bins];
    for k in &removed {
        pruned_per_bin[bins[k]] += 1;
    }
    let (n_removed, _) = grid.remove_voxels(&removed);
    debug_assert_eq!(n_removed, removed.len());

    PruneReport {
        bins: (0..cfg.num_bins)
            .map(|b| BinReport {
                bin: b,
                population: bin_weights[b].len(),
                tau: taus[b].unwrap_or(f64::NAN),
                pruned: pruned_per_bin[b],
                protected: protected_counts[b],
            })
            .collect(),
        cap_limited,
        total_removed: removed.len(),
        removed,
    }
}
