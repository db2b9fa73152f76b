//! Per-voxel Adam optimizer with a topology-aware state lifecycle: state
//! exists exactly for the live voxels, children start fresh, pruned state is
//! dropped.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::grid::{VoxelGrid, VoxelKey};
use crate::raster::GradMap;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    /// Learning rate for the three color parameters.
    pub lr_color: f64,
    /// Learning rate for the opacity parameter; opacity gradients shrink
    /// under sigmoid saturation, so it runs hotter.
    pub lr_opacity: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr_color: 2e-2,
            lr_opacity: 5e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: [f64; 4],
    pub v: [f64; 4],
    pub t: u64,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub cfg: AdamConfig,
    state: BTreeMap<VoxelKey, AdamState>,
}

impl Optimizer {
    /// Build zeroed state for every live voxel.
    pub fn new(cfg: AdamConfig, grid: &VoxelGrid) -> Self {
        Optimizer {
            state: grid.keys().map(|k| (*k, AdamState::default())).collect(),
            cfg,
        }
    }

    pub fn state_keys(&self) -> impl Iterator<Item = &VoxelKey> {
        self.state.keys()
    }

    pub fn state(&self, key: &VoxelKey) -> Option<&AdamState> {
        self.state.get(key)
    }

    /// One Adam update over every live voxel. Missing gradient entries act
    /// as zero gradient.
    pub fn step(&mut self, grid: &mut VoxelGrid, grads: &GradMap) -> Result<()> {
        let cfg = self.cfg;
        for (key, voxel) in grid.iter_mut() {
            let st = self
                .state
                .get_mut(key)
                .ok_or_else(|| Error::Consistency(format!("no optimizer state for {key:?}")))?;
            let g = grads.get(key).copied().unwrap_or([0.0; 4]);
            st.t += 1;
            let bc1 = 1.0 - cfg.beta1.powi(st.t as i32);
            let bc2 = 1.0 - cfg.beta2.powi(st.t as i32);
            for p in 0..4 {
                st.m[p] = cfg.beta1 * st.m[p] + (1.0 - cfg.beta1) * g[p];
                st.v[p] = cfg.beta2 * st.v[p] + (1.0 - cfg.beta2) * g[p] * g[p];
                let m_hat = st.m[p] / bc1;
                let v_hat = st.v[p] / bc2;
                let lr = if p < 3 { cfg.lr_color } else { cfg.lr_opacity };
                let delta = lr * m_hat / (v_hat.sqrt() + cfg.eps);
                if delta != 0.0 {
                    if p < 3 {
                        voxel.color_params[p] -= delta;
                    } else {
                        voxel.opacity_param -= delta;
                    }
                }
            }
        }
        Ok(())
    }

    /// Apply a topology change: drop pruned and split-parent state, zero
    /// state for new children. Errors indicate an adaptation-barrier
    /// violation.
    pub fn refresh_after_topology(
        &mut self,
        grid: &VoxelGrid,
        pruned: &[VoxelKey],
        split_parents: &[VoxelKey],
        children: &[VoxelKey],
    ) -> Result<()> {
        for k in pruned.iter().chain(split_parents) {
            if grid.contains(k) {
                return Err(Error::Consistency(format!(
                    "{k:?} reported removed but still live"
                )));
            }
            if self.state.remove(k).is_none() {
                return Err(Error::Consistency(format!("{k:?} had no optimizer state")));
            }
        }
        for k in children {
            if !grid.contains(k) {
                return Err(Error::Consistency(format!(
                    "child {k:?} reported but not live"
                )));
            }
            self.state.insert(*k, AdamState::default());
        }
        if self.state.len() != grid.len() {
            return Err(Error::Consistency(format!(
                "state count {} != live count {}",
                self.state.len(),
                grid.len()
            )));
        }
        Ok(())
    }

    /// Exact key-set agreement between optimizer state and the grid.
    pub fn keys_match(&self, grid: &VoxelGrid) -> bool {
        self.state.len() == grid.len() && grid.keys().all(|k| self.state.contains_key(k))
    }
}
