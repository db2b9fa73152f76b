//! Synthetic desk-scale scenes: axis-aligned colored boxes, an orbiting
//! camera ring, and an analytic ray tracer independent of the voxel
//! rasterizer. `synth` writes a complete training dataset to disk.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::geometry::{
    save_cameras, v_add, v_cross, v_norm, v_normalize, v_sub, Camera, Mat4, Vec3,
};
use crate::grid::{logit, Bounds, Voxel, VoxelGrid, VoxelKey};
use crate::img::{write_ppm, Image};
use crate::raster::ray_box_intersect;
use crate::{Error, Result};

/// One translucent axis-aligned box. Composites like a single voxel: alpha
/// is applied once per ray crossing, independent of path length.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxSpec {
    pub min: Vec3,
    pub max: Vec3,
    pub color: [f64; 3],
    pub alpha: f64,
}

/// Ring of inward-looking cameras orbiting `look_at`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RingSpec {
    pub count: usize,
    pub radius: f64,
    /// Vertical offset above the orbit plane (scene +y points down).
    pub height: f64,
    pub look_at: Vec3,
    pub fov_deg: f64,
    /// Azimuthal offset of the first camera, in degrees. A half-step offset
    /// yields a held-out ring that shares no view with the training ring.
    #[serde(default)]
    pub phase_deg: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub bounds: Bounds,
    pub boxes: Vec<BoxSpec>,
    pub background: [f64; 3],
    pub width: u32,
    pub height: u32,
    pub ring: RingSpec,
}

impl SceneSpec {
    /// The stock three-box scene used by `synth` when no spec file is given.
    /// Each box has exactly one axis whose faces sit on odd multiples of
    /// 1/16, off the coarse-grid planes: a level-3 initialization cannot
    /// represent those edges exactly, so refinement is genuinely needed, yet
    /// every partially covered coarse cell is at least half inside a box and
    /// keeps a healthy blending weight while it waits to be subdivided.
    pub fn example() -> Self {
        SceneSpec {
            bounds: Bounds::unit(),
            boxes: vec![
                BoxSpec {
                    min: [0.1875, 0.5, 0.25],
                    max: [0.4375, 0.75, 0.5],
                    color: [0.85, 0.25, 0.2],
                    alpha: 0.95,
                },
                BoxSpec {
                    min: [0.5625, 0.375, 0.5],
                    max: [0.8125, 0.625, 0.75],
                    color: [0.2, 0.75, 0.3],
                    alpha: 0.95,
                },
                BoxSpec {
                    min: [0.375, 0.125, 0.3125],
                    max: [0.625, 0.375, 0.5625],
                    color: [0.25, 0.35, 0.9],
                    alpha: 0.9,
                },
            ],
            background: [0.0; 3],
            width: 64,
            height: 64,
            ring: RingSpec {
                count: 16,
                radius: 1.5,
                height: 1.0,
                look_at: [0.5, 0.5, 0.5],
                fov_deg: 45.0,
                phase_deg: 0.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if self.boxes.is_empty() {
            return Err(Error::Config("scene has no boxes".into()));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            for a in 0..3 {
                if b.min[a] >= b.max[a] {
                    return Err(Error::Config(format!("box {i} has empty extent")));
                }
                if b.min[a] < self.bounds.min[a] || b.max[a] > self.bounds.max[a] {
                    return Err(Error::Config(format!("box {i} leaves the scene bounds")));
                }
            }
            if !(0.0 < b.alpha && b.alpha < 1.0) {
                return Err(Error::Config(format!("box {i} alpha must be in (0,1)")));
            }
        }
        if self.ring.count == 0 {
            return Err(Error::Config("camera ring needs at least one view".into()));
        }
        if !(0.0 < self.ring.fov_deg && self.ring.fov_deg < 180.0) {
            return Err(Error::Config("fov must be in (0, 180) degrees".into()));
        }
        if self.ring.radius <= self.ring.height.abs() {
            return Err(Error::Config(
                "ring radius must exceed |height| to keep look-at well posed".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let spec: SceneSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        let fov = self.ring.fov_deg.to_radians();
        let f = self.width as f64 / 2.0 / (fov / 2.0).tan();
        (0..self.ring.count)
            .map(|i| {
                let theta = self.ring.phase_deg.to_radians()
                    + 2.0 * std::f64::consts::PI * i as f64 / self.ring.count as f64;
                let p = v_add(
                    self.ring.look_at,
                    [
                        self.ring.radius * theta.cos(),
                        -self.ring.height,
                        self.ring.radius * theta.sin(),
                    ],
                );
                look_at_camera(self.width, self.height, f, f, p, self.ring.look_at)
            })
            .collect()
    }
}

/// Build a camera at `position` looking at `target`, with scene +y as the
/// image-down direction.
pub fn look_at_camera(
    width: u32,
    height: u32,
    fx: f64,
    fy: f64,
    position: Vec3,
    target: Vec3,
) -> Result<Camera> {
    let forward = v_sub(target, position);
    if v_norm(forward) < 1e-12 {
        return Err(Error::Argument("camera position coincides with target".into()));
    }
    let forward = v_normalize(forward);
    let down_hint = [0.0, 1.0, 0.0];
    let right = v_cross(down_hint, forward);
    if v_norm(right) < 1e-9 {
        return Err(Error::Argument("camera looks straight along the up axis".into()));
    }
    let right = v_normalize(right);
    let down = v_cross(forward, right);
    // rows of the rotation are the camera axes in world coordinates;
    // t = -R p puts the camera center at `position`
    let mut m: Mat4 = [[0.0; 4]; 4];
    for (row, axis) in [right, down, forward].iter().enumerate() {
        m[row][..3].copy_from_slice(axis);
        m[row][3] = -crate::geometry::v_dot(*axis, position);
    }
    m[3][3] = 1.0;
    Camera::new(
        width,
        height,
        fx,
        fy,
        width as f64 / 2.0,
        height as f64 / 2.0,
        m,
    )
}

/// Analytic reference render of the box scene: intersect every box, sort by
/// entry distance, composite front to back over the background. Shares no
/// code with the voxel rasterizer's traversal.
pub fn trace_scene(spec: &SceneSpec, camera: &Camera) -> Result<Image> {
    let mut img = Image::new(camera.width, camera.height);
    for y in 0..camera.height {
        for x in 0..camera.width {
            let ray = camera.pixel_ray(x, y)?;
            let mut hits: Vec<(f64, usize)> = spec
                .boxes
                .iter()
                .enumerate()
                .filter_map(|(i, b)| {
                    ray_box_intersect(ray.origin, ray.direction, b.min, b.max)
                        .map(|(t_in, _)| (t_in, i))
                })
                .collect();
            hits.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let mut t_acc = 1.0;
            let mut c = [0.0; 3];
            for (_, i) in &hits {
                let b = &spec.boxes[*i];
                let w = t_acc * b.alpha;
                for ch in 0..3 {
                    c[ch] += w * b.color[ch];
                }
                t_acc *= 1.0 - b.alpha;
            }
            for ch in 0..3 {
                c[ch] += t_acc * spec.background[ch];
            }
            *img.at_mut(x, y) = c;
        }
    }
    Ok(img)
}

/// Exact voxelization of a box scene at one octree level: every cell whose
/// center lies inside a box gets that box's color and alpha. Only valid as a
/// rasterizer cross-check when each box is exactly one cell.
pub fn grid_from_spec(spec: &SceneSpec, level: u8) -> Result<VoxelGrid> {
    let mut grid = VoxelGrid::new(spec.bounds, crate::grid::DEFAULT_L_MAX)?;
    let n = 1u32 << level;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let key = VoxelKey {
                    level,
                    idx: [i, j, k],
                };
                let c = grid.center(&key);
                let hit = spec.boxes.iter().find(|b| {
                    (0..3).all(|a| c[a] > b.min[a] && c[a] < b.max[a])
                });
                if let Some(b) = hit {
                    grid.insert(
                        key,
                        Voxel {
                            color_params: [
                                logit(b.color[0]),
                                logit(b.color[1]),
                                logit(b.color[2]),
                            ],
                            opacity_param: logit(b.alpha),
                            ..Voxel::new([0.5; 3], 0.5)
                        },
                    )?;
                }
            }
        }
    }
    Ok(grid)
}

/// Write the full dataset: `cameras.json`, `scene.json`, and one
/// `images/view_%04d.ppm` per ring camera.
pub fn synth(spec: &SceneSpec, out_dir: &Path) -> Result<Vec<Camera>> {
    spec.validate()?;
    let cameras = spec.cameras()?;
    std::fs::create_dir_all(out_dir.join("images"))?;
    save_cameras(&cameras, &out_dir.join("cameras.json"))?;
    spec.save(&out_dir.join("scene.json"))?;
    for (i, cam) in cameras.iter().enumerate() {
        let img = trace_scene(spec, cam)?;
        write_ppm(&img, &out_dir.join(format!("images/view_{i:04}.ppm")))?;
    }
    Ok(cameras)
}
