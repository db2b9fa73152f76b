//! Pinhole cameras, primary rays, camera-space depth, and the camera-induced
//! ray footprint used to gate subdivision.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat4 = [[f64; 4]; 4];

pub fn v_add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn v_sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn v_scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn v_dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn v_cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn v_norm(a: Vec3) -> f64 {
    v_dot(a, a).sqrt()
}

pub fn v_normalize(a: Vec3) -> Vec3 {
    let n = v_norm(a);
    v_scale(a, 1.0 / n)
}

/// A primary ray: origin at the camera center, unit direction through a
/// pixel center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub pixel: (u32, u32),
}

/// Pinhole camera with a rigid world-to-camera pose (row-major 4x4).
///
/// Camera frame convention: +x right, +y down, +z forward; depth is the
/// camera-space z coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major rigid transform mapping world points into the camera frame.
    pub world_to_camera: Mat4,
}

impl Camera {
    pub fn new(
        width: u32,
        height: u32,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        world_to_camera: Mat4,
    ) -> Result<Self> {
        let cam = Camera {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            world_to_camera,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 1 || self.height < 1 {
            return Err(Error::Argument("camera dimensions must be >= 1".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Argument("focal lengths must be positive".into()));
        }
        let m = &self.world_to_camera;
        let rows = [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ];
        for i in 0..3 {
            for j in 0..3 {
                let d = v_dot(rows[i], rows[j]) - if i == j { 1.0 } else { 0.0 };
                if d.abs() > 1e-6 {
                    return Err(Error::Argument(
                        "rotation block of world_to_camera is not orthonormal".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn rotation_rows(&self) -> [Vec3; 3] {
        let m = &self.world_to_camera;
        [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ]
    }

    fn translation(&self) -> Vec3 {
        let m = &self.world_to_camera;
        [m[0][3], m[1][3], m[2][3]]
    }

    /// Camera center in world coordinates: o = -R^T t.
    pub fn center(&self) -> Vec3 {
        let r = self.rotation_rows();
        let t = self.translation();
        // columns of R are rows of R^T
        [
            -(r[0][0] * t[0] + r[1][0] * t[1] + r[2][0] * t[2]),
            -(r[0][1] * t[0] + r[1][1] * t[1] + r[2][1] * t[2]),
            -(r[0][2] * t[0] + r[1][2] * t[1] + r[2][2] * t[2]),
        ]
    }

    /// World point -> camera frame.
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let r = self.rotation_rows();
        let t = self.translation();
        [
            v_dot(r[0], p) + t[0],
            v_dot(r[1], p) + t[1],
            v_dot(r[2], p) + t[2],
        ]
    }

    /// Camera-frame direction -> world frame (rotation only).
    fn dir_to_world(&self, d: Vec3) -> Vec3 {
        let r = self.rotation_rows();
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    /// Primary ray through the center of pixel (x, y).
    pub fn pixel_ray(&self, x: u32, y: u32) -> Result<Ray> {
        if x >= self.width || y >= self.height {
            return Err(Error::Argument(format!(
                "pixel ({x}, {y}) out of bounds for {}x{} image",
                self.width, self.height
            )));
        }
        let dx = (x as f64 + 0.5 - self.cx) / self.fx;
        let dy = (y as f64 + 0.5 - self.cy) / self.fy;
        let dir = v_normalize(self.dir_to_world([dx, dy, 1.0]));
        Ok(Ray {
            origin: self.center(),
            direction: dir,
            pixel: (x, y),
        })
    }

    /// Camera-space depth of a world point (z component after the pose).
    pub fn depth(&self, p: Vec3) -> f64 {
        self.to_camera(p)[2]
    }

    /// World-space spacing between adjacent pixel rays at depth `z`:
    /// delta = z / min(fx, fy).
    pub fn inter_ray_spacing(&self, z: f64) -> Result<f64> {
        if z <= 0.0 {
            return Err(Error::Argument(format!(
                "inter_ray_spacing requires z > 0, got {z}"
            )));
        }
        Ok(z / self.fx.min(self.fy))
    }

    /// True when the world point projects inside the image with positive depth.
    pub fn sees(&self, p: Vec3) -> bool {
        let c = self.to_camera(p);
        if c[2] <= 0.0 {
            return false;
        }
        let u = self.fx * c[0] / c[2] + self.cx;
        let v = self.fy * c[1] / c[2] + self.cy;
        u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64
    }
}

/// Per-voxel footprint: minimum of delta(z) over cameras with the point in
/// front of them. Infinite when no camera faces the point.
pub fn min_footprint(cameras: &[Camera], p: Vec3) -> f64 {
    let mut best = f64::INFINITY;
    for cam in cameras {
        let z = cam.depth(p);
        if z > 0.0 {
            let d = z / cam.fx.min(cam.fy);
            if d < best {
                best = d;
            }
        }
    }
    best
}

/// Depth proxy for binning and subdivision priority: mean camera-space depth
/// over cameras that see the point, falling back to the distance to the
/// nearest camera center when no camera sees it.
pub fn depth_proxy(cameras: &[Camera], p: Vec3) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for cam in cameras {
        if cam.sees(p) {
            sum += cam.depth(p);
            n += 1;
        }
    }
    if n > 0 {
        sum / n as f64
    } else {
        cameras
            .iter()
            .map(|c| v_norm(v_sub(p, c.center())))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Serialize, Deserialize)]
struct CameraJson {
    width: u32,
    height: u32,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    world_to_camera: Vec<f64>,
}

/// Load `cameras.json`: an array of {width, height, fx, fy, cx, cy,
/// world_to_camera: [16 numbers, row-major]}.
pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    let text = std::fs::read_to_string(path)?;
    let raw: Vec<CameraJson> = serde_json::from_str(&text)?;
    raw.into_iter()
        .map(|c| {
            if c.world_to_camera.len() != 16 {
                return Err(Error::Data(format!(
                    "world_to_camera must have 16 entries, got {}",
                    c.world_to_camera.len()
                )));
            }
            let mut m = [[0.0; 4]; 4];
            for i in 0..4 {
                for j in 0..4 {
                    m[i][j] = c.world_to_camera[i * 4 + j];
                }
            }
            Camera::new(c.width, c.height, c.fx, c.fy, c.cx, c.cy, m)
        })
        .collect()
}

pub fn save_cameras(cameras: &[Camera], path: &Path) -> Result<()> {
    let raw: Vec<CameraJson> = cameras
        .iter()
        .map(|c| CameraJson {
            width: c.width,
            height: c.height,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            world_to_camera: c
                .world_to_camera
                .iter()
                .flat_map(|row| row.iter().copied())
                .collect(),
        })
        .collect();
    std::fs::write(path, serde_json::to_string_pretty(&raw)?)?;
    Ok(())
}

pub fn identity_pose() -> Mat4 {
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}
