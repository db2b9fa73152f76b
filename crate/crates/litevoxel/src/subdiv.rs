//! Footprint-gated, priority-ranked, budgeted voxel splitting with a mild
//! far-depth bias.

use serde::{Deserialize, Serialize};

use crate::geometry::{depth_proxy, min_footprint, Camera};
use crate::grid::{VoxelGrid, VoxelKey};
use crate::optim::Optimizer;
use crate::Result;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SubdivideConfig {
    /// Footprint eligibility factor: split only when h_v > kappa * delta_v.
    pub kappa: f64,
    /// Far-bias strength, sensible range [0.1, 0.3].
    pub beta: f64,
    /// Max splits per adapt step; when `None` the budget is
    /// ceil(budget_fraction * live).
    pub budget: Option<usize>,
    pub budget_fraction: f64,
    /// Absolute live-voxel ceiling; 0 means "resolve to 8x the initial
    /// count at training start".
    pub hard_cap: usize,
    /// EMA factor for the usefulness score.
    pub usefulness_ema: f64,
}

impl Default for SubdivideConfig {
    fn default() -> Self {
        SubdivideConfig {
            kappa: 1.0,
            beta: 0.2,
            budget: None,
            budget_fraction: 0.02,
            hard_cap: 0,
            usefulness_ema: 0.1,
        }
    }
}

impl SubdivideConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.usefulness_ema && self.usefulness_ema <= 1.0) {
            return Err(crate::Error::Config("usefulness_ema must be in (0,1]".into()));
        }
        if !(0.1..=0.3).contains(&self.beta) {
            eprintln!(
                "warning: far-bias beta {} outside the recommended [0.1, 0.3]",
                self.beta
            );
        }
        Ok(())
    }

    pub fn effective_budget(&self, live: usize) -> usize {
        self.budget
            .unwrap_or_else(|| (self.budget_fraction * live as f64).ceil() as usize)
    }
}

/// Running robust depth percentiles used for far-bias normalization.
#[derive(Debug, Clone, Copy)]
pub struct DepthPercentiles {
    pub z_p5: f64,
    pub z_p95: f64,
}

/// Linear-interpolated quantile of unsorted data.
fn quantile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    values[lo] * (1.0 - frac) + values[hi] * frac
}

impl DepthPercentiles {
    /// Exact 5th/95th percentiles of the live voxels' depth proxies,
    /// recomputed at every adapt step.
    pub fn from_grid(grid: &VoxelGrid, cameras: &[Camera]) -> Option<Self> {
        if grid.is_empty() {
            return None;
        }
        let mut depths: Vec<f64> = grid
            .keys()
            .map(|k| depth_proxy(cameras, grid.center(k)))
            .collect();
        let z_p95 = quantile(&mut depths, 0.95);
        let z_p5 = quantile(&mut depths, 0.05);
        Some(DepthPercentiles { z_p5, z_p95 })
    }
}

/// Footprint eligibility: below the finest level and larger than the
/// camera-resolvable footprint.
pub fn eligibility(level: u8, l_max: u8, half_size: f64, delta: f64, kappa: f64) -> bool {
    level < l_max && half_size > kappa * delta
}

/// Robust-normalize a depth to [0,1] against the running percentiles;
/// degenerate spread maps everything to 0.5.
pub fn normalize_depth(z: f64, p: &DepthPercentiles) -> f64 {
    let spread = p.z_p95 - p.z_p5;
    if spread <= 0.0 {
        return 0.5;
    }
    ((z - p.z_p5) / spread).clamp(0.0, 1.0)
}

/// Gentle far-bias b = 1 + beta * z_normalized.
pub fn far_bias(z_norm: f64, beta: f64) -> f64 {
    1.0 + beta * z_norm
}

/// EMA update of the usefulness score.
pub fn update_usefulness(u: f64, signal: f64, ema_alpha: f64) -> f64 {
    (1.0 - ema_alpha) * u + ema_alpha * signal
}

/// Fold the current window's residual statistics into every voxel's
/// usefulness EMA: signal = w_max * mean photometric residual over
/// contributing rays.
pub fn update_usefulness_scores(grid: &mut VoxelGrid, ema_alpha: f64) {
    for (_, v) in grid.iter_mut() {
        let mean_resid = if v.resid_count > 0 {
            v.resid_sum / v.resid_count as f64
        } else {
            0.0
        };
        let signal = v.w_max * mean_resid;
        v.usefulness = update_usefulness(v.usefulness, signal, ema_alpha);
    }
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct SplitReport {
    pub split: Vec<VoxelKey>,
    pub children: Vec<VoxelKey>,
    pub eligible: usize,
    /// "budget", "hard_cap", or "none" — what truncated the candidate list.
    pub truncated_by: String,
    pub min_selected_priority: f64,
}

/// Rank eligible voxels by priority u_v * b(z_v), split the top candidates
/// under the budget and the hard live-voxel cap, and refresh optimizer
/// state for the changed entries.
pub fn select_and_split(
    grid: &mut VoxelGrid,
    cameras: &[Camera],
    cfg: &SubdivideConfig,
    optimizer: &mut Optimizer,
) -> Result<SplitReport> {
    let hard_cap = cfg.hard_cap;
    let live = grid.len();
    let budget = cfg.effective_budget(live);
    let Some(percentiles) = DepthPercentiles::from_grid(grid, cameras) else {
        return Ok(SplitReport::default());
    };

    let mut candidates: Vec<(f64, VoxelKey)> = grid
        .iter()
        .filter_map(|(k, v)| {
            let center = grid.center(k);
            let delta = min_footprint(cameras, center);
            if !eligibility(k.level, grid.l_max, grid.half_size(k.level), delta, cfg.kappa) {
                return None;
            }
            let z = depth_proxy(cameras, center);
            let priority = v.usefulness * far_bias(normalize_depth(z, &percentiles), cfg.beta);
            Some((priority, *k))
        })
        .collect();
    let eligible = candidates.len();
    // highest priority first, ties by key order
    candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

    let cap_room = if hard_cap > live {
        (hard_cap - live) / 7
    } else {
        0
    };
    let take = candidates.len().min(budget).min(cap_room);
    let truncated_by = if take < candidates.len() && take == cap_room && cap_room < budget {
        "hard_cap"
    } else if take < candidates.len() {
        "budget"
    } else {
        "none"
    };
    let selected = &candidates[..take];
    let min_selected_priority = selected.last().map(|(p, _)| *p).unwrap_or(f64::NAN);

    let mut split = Vec::with_capacity(take);
    let mut children = Vec::with_capacity(take * 8);
    for (_, k) in selected {
        let kids = grid.split_voxel(k)?;
        split.push(*k);
        children.extend_from_slice(&kids);
    }
    optimizer.refresh_after_topology(grid, &[], &split, &children)?;
    Ok(SplitReport {
        split,
        children,
        eligible,
        truncated_by: truncated_by.to_string(),
        min_selected_priority,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::identity_pose;
    use crate::grid::Bounds;
    use crate::optim::AdamConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eligibility_cases() {
        assert!(eligibility(2, 10, 0.1, 0.05, 1.0));
        assert!(!eligibility(2, 10, 0.04, 0.05, 1.0));
        assert!(!eligibility(10, 10, 0.1, 0.0001, 1.0));
    }

    #[test]
    fn depth_normalization_clips() {
        let p = DepthPercentiles {
            z_p5: 1.0,
            z_p95: 3.0,
        };
        assert_eq!(normalize_depth(1.0, &p), 0.0);
        assert_eq!(normalize_depth(3.0, &p), 1.0);
        assert_eq!(normalize_depth(0.2, &p), 0.0);
        assert_eq!(normalize_depth(9.0, &p), 1.0);
        assert!((normalize_depth(2.0, &p) - 0.5).abs() < 1e-12);
        let degenerate = DepthPercentiles {
            z_p5: 2.0,
            z_p95: 2.0,
        };
        assert_eq!(normalize_depth(5.0, &degenerate), 0.5);
    }

    #[test]
    fn far_bias_values() {
        assert_eq!(far_bias(0.0, 0.2), 1.0);
        assert!((far_bias(1.0, 0.2) - 1.2).abs() < 1e-15);
        assert!((far_bias(0.5, 0.1) - 1.05).abs() < 1e-15);
    }

    #[test]
    fn usefulness_ema_fixed_point() {
        let mut u = 0.0;
        for _ in 0..500 {
            u = update_usefulness(u, 0.7, 0.1);
        }
        assert!((u - 0.7).abs() < 1e-9);
        let mut z = 0.9;
        for _ in 0..500 {
            z = update_usefulness(z, 0.0, 0.1);
        }
        assert!(z < 1e-9);
    }

    #[test]
    fn usefulness_matches_scalar_fold_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let alpha = 0.17;
        let signals: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..2.0)).collect();
        let got = signals.iter().fold(0.0, |u, s| update_usefulness(u, *s, alpha));
        let mut want = 0.0;
        for s in &signals {
            want = (1.0 - alpha) * want + alpha * s;
        }
        assert!((got - want).abs() < 1e-12);
    }

    fn front_camera(fx: f64) -> Camera {
        let mut pose = identity_pose();
        pose[0][3] = -0.5;
        pose[1][3] = -0.5;
        pose[2][3] = 2.0;
        Camera::new(64, 64, fx, fx, 32.0, 32.0, pose).unwrap()
    }

    fn setup(level: u8) -> (VoxelGrid, Vec<Camera>, Optimizer) {
        let g = VoxelGrid::init_uniform(Bounds::unit(), level, 0.5, [0.5; 3]).unwrap();
        let opt = Optimizer::new(AdamConfig::default(), &g);
        // high focal -> tiny footprint -> everything eligible
        (g, vec![front_camera(4096.0)], opt)
    }

    #[test]
    fn zero_budget_no_splits() {
        let (mut g, cams, mut opt) = setup(1);
        let cfg = SubdivideConfig {
            budget: Some(0),
            hard_cap: 10_000,
            ..Default::default()
        };
        let rep = select_and_split(&mut g, &cams, &cfg, &mut opt).unwrap();
        assert!(rep.split.is_empty());
        assert_eq!(g.len(), 8);
    }

    #[test]
    fn top_priority_selected() {
        let (mut g, cams, mut opt) = setup(1);
        let keys: Vec<_> = g.keys().copied().collect();
        let us = [5.0, 2.0, 9.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        for (k, u) in keys.iter().zip(us.iter()) {
            g.get_mut(k).unwrap().usefulness = *u;
        }
        let cfg = SubdivideConfig {
            budget: Some(2),
            hard_cap: 10_000,
            beta: 0.0001,
            ..Default::default()
        };
        // beta ~ 0 so ordering is by usefulness alone
        let rep = select_and_split(&mut g, &cams, &cfg, &mut opt).unwrap();
        assert_eq!(rep.split.len(), 2);
        assert!(rep.split.contains(&keys[0]));
        assert!(rep.split.contains(&keys[2]));
        assert!(opt.keys_match(&g));
    }

    #[test]
    fn hard_cap_blocks_splits() {
        let (mut g, cams, mut opt) = setup(1);
        let keys: Vec<_> = g.keys().copied().collect();
        for k in &keys {
            g.get_mut(k).unwrap().usefulness = 1.0;
        }
        let cfg = SubdivideConfig {
            budget: Some(3),
            hard_cap: 12, // 8 live + 7 > 12
            ..Default::default()
        };
        let rep = select_and_split(&mut g, &cams, &cfg, &mut opt).unwrap();
        assert!(rep.split.is_empty());
        assert_eq!(rep.truncated_by, "hard_cap");
        assert_eq!(g.len(), 8);
    }

    #[test]
    fn never_splits_ineligible() {
        // huge footprint: nothing is eligible
        let g = VoxelGrid::init_uniform(Bounds::unit(), 1, 0.5, [0.5; 3]).unwrap();
        let mut opt = Optimizer::new(AdamConfig::default(), &g);
        let mut g = g;
        let cams = vec![front_camera(4.0)];
        let cfg = SubdivideConfig {
            budget: Some(100),
            hard_cap: 10_000,
            ..Default::default()
        };
        let rep = select_and_split(&mut g, &cams, &cfg, &mut opt).unwrap();
        assert_eq!(rep.eligible, 0);
        assert!(rep.split.is_empty());
    }

    // Brute-force "filter + sort + truncate" oracle and the scaling /
    // far-bias invariants.
    #[test]
    fn selection_matches_sort_oracle_and_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        for trial in 0..30 {
            let (mut g, cams, mut opt) = setup(2);
            let keys: Vec<_> = g.keys().copied().collect();
            for k in &keys {
                g.get_mut(k).unwrap().usefulness = rng.gen_range(0.0..1.0);
            }
            let cfg = SubdivideConfig {
                budget: Some(5),
                hard_cap: 4096,
                beta: 0.2,
                ..Default::default()
            };
            // oracle on a clone before mutation
            let percentiles = DepthPercentiles::from_grid(&g, &cams).unwrap();
            let mut oracle: Vec<(f64, VoxelKey)> = g
                .iter()
                .filter(|(k, _)| {
                    let d = min_footprint(&cams, g.center(k));
                    eligibility(k.level, g.l_max, g.half_size(k.level), d, cfg.kappa)
                })
                .map(|(k, v)| {
                    let z = depth_proxy(&cams, g.center(k));
                    (
                        v.usefulness * far_bias(normalize_depth(z, &percentiles), cfg.beta),
                        *k,
                    )
                })
                .collect();
            oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<VoxelKey> = oracle.iter().take(5).map(|(_, k)| *k).collect();

            // scaling invariance: multiply all usefulness by a positive constant
            let mut g2 = g.clone();
            let scale = rng.gen_range(0.1..10.0);
            for k in &keys {
                g2.get_mut(k).unwrap().usefulness *= scale;
            }
            let mut opt2 = Optimizer::new(AdamConfig::default(), &g2);

            let rep = select_and_split(&mut g, &cams, &cfg, &mut opt).unwrap();
            assert_eq!(rep.split, want, "trial {trial}");
            assert!(rep.split.len() <= 5);
            let rep2 = select_and_split(&mut g2, &cams, &cfg, &mut opt2).unwrap();
            assert_eq!(rep2.split, want, "scaling changed the selection");
        }
    }

    #[test]
    fn deeper_voxel_preferred_at_equal_usefulness() {
        let (mut g, cams, mut opt) = setup(1);
        let keys: Vec<_> = g.keys().copied().collect();
        for k in &keys {
            g.get_mut(k).unwrap().usefulness = 1.0;
        }
        let cfg = SubdivideConfig {
            budget: Some(4),
            hard_cap: 10_000,
            beta: 0.2,
            ..Default::default()
        };
        let rep = select_and_split(&mut g, &cams, &cfg, &mut opt).unwrap();
        // the camera looks down +z, so the deeper half (idx z = 1) wins
        assert_eq!(rep.split.len(), 4);
        for k in &rep.split {
            assert_eq!(k.idx[2], 1, "expected far voxels first, got {k:?}");
        }
    }
}
