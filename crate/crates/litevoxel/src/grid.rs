//! Sparse octree voxel storage with split/remove topology operations and a
//! lossless JSON checkpoint format.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::geometry::Vec3;
use crate::{Error, Result};

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Canonical cell identity: octree level plus integer cell coordinate at
/// that level. Ordering is (level, i, j, k), which fixes every tie-break in
/// the adaptation logic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VoxelKey {
    pub level: u8,
    pub idx: [u32; 3],
}

impl VoxelKey {
    pub fn root() -> Self {
        VoxelKey {
            level: 0,
            idx: [0, 0, 0],
        }
    }

    pub fn child(&self, octant: usize) -> VoxelKey {
        VoxelKey {
            level: self.level + 1,
            idx: [
                self.idx[0] * 2 + ((octant >> 2) & 1) as u32,
                self.idx[1] * 2 + ((octant >> 1) & 1) as u32,
                self.idx[2] * 2 + (octant & 1) as u32,
            ],
        }
    }

    pub fn parent(&self) -> Option<VoxelKey> {
        if self.level == 0 {
            None
        } else {
            Some(VoxelKey {
                level: self.level - 1,
                idx: [self.idx[0] / 2, self.idx[1] / 2, self.idx[2] / 2],
            })
        }
    }

    /// Is `self` a strict ancestor of `other`?
    pub fn is_ancestor_of(&self, other: &VoxelKey) -> bool {
        if self.level >= other.level {
            return false;
        }
        let shift = (other.level - self.level) as u32;
        (0..3).all(|a| other.idx[a] >> shift == self.idx[a])
    }

    /// Same-level face neighbor in axis `axis` (0..3), direction +1/-1.
    pub fn face_neighbor(&self, axis: usize, dir: i64) -> Option<VoxelKey> {
        let c = self.idx[axis] as i64 + dir;
        if c < 0 || c >= (1i64 << self.level) {
            return None;
        }
        let mut idx = self.idx;
        idx[axis] = c as u32;
        Some(VoxelKey {
            level: self.level,
            idx,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InsideState {
    In,
    Out,
}

/// Octree cell payload: sigmoid-parameterized color and opacity plus the
/// adaptation statistics gathered between topology changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Voxel {
    /// Unconstrained color parameters; rendered color = sigmoid per channel.
    pub color_params: [f64; 3],
    /// Unconstrained opacity parameter; alpha = sigmoid(opacity_param).
    pub opacity_param: f64,
    /// Running max blending weight over the current statistics window.
    pub w_max: f64,
    /// Usefulness EMA driving subdivision priority.
    pub usefulness: f64,
    /// EMA of the inside score driving the hysteresis label.
    pub inside_ema: f64,
    pub inside_state: InsideState,
    /// Window accumulators for the usefulness signal (not checkpointed).
    #[serde(skip)]
    pub resid_sum: f64,
    #[serde(skip)]
    pub resid_count: u64,
}

impl Voxel {
    pub fn new(color0: [f64; 3], alpha0: f64) -> Self {
        Voxel {
            color_params: [logit(color0[0]), logit(color0[1]), logit(color0[2])],
            opacity_param: logit(alpha0),
            w_max: 0.0,
            usefulness: 0.0,
            // consistent with the initial In label: a fresh voxel must
            // demonstrate sustained non-contribution before it can flip Out
            inside_ema: 1.0,
            inside_state: InsideState::In,
            resid_sum: 0.0,
            resid_count: 0,
        }
    }

    pub fn alpha(&self) -> f64 {
        sigmoid(self.opacity_param)
    }

    pub fn color(&self) -> [f64; 3] {
        [
            sigmoid(self.color_params[0]),
            sigmoid(self.color_params[1]),
            sigmoid(self.color_params[2]),
        ]
    }

    /// w_max <- max(w_max, w); the window resets after each adaptation step.
    pub fn update_wmax(&mut self, w: f64) {
        if w > self.w_max {
            self.w_max = w;
        }
    }

    pub fn reset_window(&mut self) {
        self.w_max = 0.0;
        self.resid_sum = 0.0;
        self.resid_count = 0;
    }
}

/// Cubic axis-aligned scene bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl Bounds {
    pub fn unit() -> Self {
        Bounds {
            min: [0.0; 3],
            max: [1.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ];
        if e[0] <= 0.0 || (e[0] - e[1]).abs() > 1e-9 * e[0] || (e[0] - e[2]).abs() > 1e-9 * e[0] {
            return Err(Error::Argument("scene bounds must be a cube".into()));
        }
        Ok(())
    }

    pub fn edge(&self) -> f64 {
        self.max[0] - self.min[0]
    }
}

pub const DEFAULT_L_MAX: u8 = 10;

/// Accounting bytes per live voxel: 4 trainable f32 scalars (3 color + 1
/// opacity) plus two optimizer moments each.
pub const BYTES_PER_VOXEL: u64 = 48;

/// Sparse octree keyed by (level, cell coordinate). Stored cells never
/// overlap: no stored cell is an ancestor of another stored cell.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    pub bounds: Bounds,
    pub l_max: u8,
    cells: BTreeMap<VoxelKey, Voxel>,
    /// Stored-descendant counts for every strict ancestor node; drives
    /// hierarchical ray traversal.
    interior: BTreeMap<VoxelKey, u32>,
}

impl VoxelGrid {
    pub fn new(bounds: Bounds, l_max: u8) -> Result<Self> {
        bounds.validate()?;
        Ok(VoxelGrid {
            bounds,
            l_max,
            cells: BTreeMap::new(),
            interior: BTreeMap::new(),
        })
    }

    /// Fill all 8^level cells at `level` with the given initial parameters.
    pub fn init_uniform(
        bounds: Bounds,
        level: u8,
        alpha0: f64,
        color0: [f64; 3],
    ) -> Result<Self> {
        Self::init_uniform_with_lmax(bounds, level, alpha0, color0, DEFAULT_L_MAX)
    }

    pub fn init_uniform_with_lmax(
        bounds: Bounds,
        level: u8,
        alpha0: f64,
        color0: [f64; 3],
        l_max: u8,
    ) -> Result<Self> {
        if level > l_max {
            return Err(Error::Argument(format!(
                "init level {level} exceeds l_max {l_max}"
            )));
        }
        if !(0.0 < alpha0 && alpha0 < 1.0) {
            return Err(Error::Argument("alpha0 must be in (0,1)".into()));
        }
        let mut grid = Self::new(bounds, l_max)?;
        let n = 1u32 << level;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    grid.insert(
                        VoxelKey {
                            level,
                            idx: [i, j, k],
                        },
                        Voxel::new(color0, alpha0),
                    )?;
                }
            }
        }
        Ok(grid)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn contains(&self, key: &VoxelKey) -> bool {
        self.cells.contains_key(key)
    }

    pub fn get(&self, key: &VoxelKey) -> Option<&Voxel> {
        self.cells.get(key)
    }

    pub fn get_mut(&mut self, key: &VoxelKey) -> Option<&mut Voxel> {
        self.cells.get_mut(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&VoxelKey, &Voxel)> {
        self.cells.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&VoxelKey, &mut Voxel)> {
        self.cells.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &VoxelKey> {
        self.cells.keys()
    }

    pub fn has_stored_descendant(&self, node: &VoxelKey) -> bool {
        self.interior.contains_key(node)
    }

    /// Cell edge length at a level.
    pub fn edge_at(&self, level: u8) -> f64 {
        self.bounds.edge() / (1u64 << level) as f64
    }

    /// Half-size h_v = h_0 * 2^-level.
    pub fn half_size(&self, level: u8) -> f64 {
        0.5 * self.edge_at(level)
    }

    pub fn center(&self, key: &VoxelKey) -> Vec3 {
        let e = self.edge_at(key.level);
        [
            self.bounds.min[0] + (key.idx[0] as f64 + 0.5) * e,
            self.bounds.min[1] + (key.idx[1] as f64 + 0.5) * e,
            self.bounds.min[2] + (key.idx[2] as f64 + 0.5) * e,
        ]
    }

    pub fn cell_bounds(&self, key: &VoxelKey) -> (Vec3, Vec3) {
        let e = self.edge_at(key.level);
        let lo = [
            self.bounds.min[0] + key.idx[0] as f64 * e,
            self.bounds.min[1] + key.idx[1] as f64 * e,
            self.bounds.min[2] + key.idx[2] as f64 * e,
        ];
        ([lo[0], lo[1], lo[2]], [lo[0] + e, lo[1] + e, lo[2] + e])
    }

    pub fn insert(&mut self, key: VoxelKey, voxel: Voxel) -> Result<()> {
        if key.level > self.l_max {
            return Err(Error::Argument(format!(
                "key level {} exceeds l_max {}",
                key.level, self.l_max
            )));
        }
        if self.cells.insert(key, voxel).is_none() {
            let mut node = key;
            while let Some(p) = node.parent() {
                *self.interior.entry(p).or_insert(0) += 1;
                node = p;
            }
        }
        Ok(())
    }

    fn remove_one(&mut self, key: &VoxelKey) -> Option<Voxel> {
        let v = self.cells.remove(key)?;
        let mut node = *key;
        while let Some(p) = node.parent() {
            let c = self.interior.get_mut(&p).expect("interior count missing");
            *c -= 1;
            if *c == 0 {
                self.interior.remove(&p);
            }
            node = p;
        }
        Some(v)
    }

    /// Replace a voxel by its 8 children. Children inherit the parent's
    /// color/opacity parameters; statistics reset and must be re-earned.
    pub fn split_voxel(&mut self, key: &VoxelKey) -> Result<[VoxelKey; 8]> {
        let voxel = self
            .cells
            .get(key)
            .ok_or_else(|| Error::NotFound(format!("no voxel at {key:?}")))?
            .clone();
        if key.level >= self.l_max {
            return Err(Error::Argument(format!(
                "refusing to split voxel at finest level {}",
                self.l_max
            )));
        }
        self.remove_one(key);
        let mut children = [VoxelKey::root(); 8];
        for (oct, slot) in children.iter_mut().enumerate() {
            let ck = key.child(oct);
            let child = Voxel {
                color_params: voxel.color_params,
                opacity_param: voxel.opacity_param,
                w_max: 0.0,
                usefulness: 0.0,
                inside_ema: 0.0,
                inside_state: voxel.inside_state,
                resid_sum: 0.0,
                resid_count: 0,
            };
            self.insert(ck, child)?;
            *slot = ck;
        }
        Ok(children)
    }

    /// Remove the listed voxels; unknown ids are skipped. Returns
    /// (removed, unknown) counts.
    pub fn remove_voxels(&mut self, ids: &[VoxelKey]) -> (usize, usize) {
        let mut removed = 0;
        let mut unknown = 0;
        for id in ids {
            if self.remove_one(id).is_some() {
                removed += 1;
            } else {
                unknown += 1;
            }
        }
        (removed, unknown)
    }

    /// Accounting model footprint: 48 bytes per live voxel (trainable params
    /// plus two optimizer moments).
    pub fn model_bytes(&self) -> u64 {
        self.cells.len() as u64 * BYTES_PER_VOXEL
    }

    /// Non-overlap check used by property tests: no stored cell is an
    /// ancestor of another stored cell.
    pub fn check_no_overlap(&self) -> bool {
        self.cells.keys().all(|k| !self.any_ancestor_stored(k))
    }

    fn any_ancestor_stored(&self, key: &VoxelKey) -> bool {
        let mut node = *key;
        while let Some(p) = node.parent() {
            if self.cells.contains_key(&p) {
                return true;
            }
            node = p;
        }
        false
    }

    pub fn reset_windows(&mut self) {
        for v in self.cells.values_mut() {
            v.reset_window();
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json()?)?;
        Ok(())
    }

    pub fn to_checkpoint_json(&self) -> Result<String> {
        let ck = Checkpoint {
            version: 1,
            bounds: self.bounds,
            l_max: self.l_max,
            voxels: self
                .cells
                .iter()
                .map(|(k, v)| CheckpointVoxel {
                    level: k.level,
                    key: k.idx,
                    color_params: v.color_params,
                    opacity_param: v.opacity_param,
                    w_max: v.w_max,
                    usefulness: v.usefulness,
                    inside_ema: v.inside_ema,
                    inside_state: v.inside_state,
                })
                .collect(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_checkpoint_json(&text)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        let mut grid = Self::new(ck.bounds, ck.l_max)?;
        for v in ck.voxels {
            grid.insert(
                VoxelKey {
                    level: v.level,
                    idx: v.key,
                },
                Voxel {
                    color_params: v.color_params,
                    opacity_param: v.opacity_param,
                    w_max: v.w_max,
                    usefulness: v.usefulness,
                    inside_ema: v.inside_ema,
                    inside_state: v.inside_state,
                    resid_sum: 0.0,
                    resid_count: 0,
                },
            )?;
        }
        Ok(grid)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    bounds: Bounds,
    l_max: u8,
    voxels: Vec<CheckpointVoxel>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointVoxel {
    level: u8,
    key: [u32; 3],
    color_params: [f64; 3],
    opacity_param: f64,
    w_max: f64,
    usefulness: f64,
    inside_ema: f64,
    inside_state: InsideState,
}
