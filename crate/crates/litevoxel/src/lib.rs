//! Sparse-voxel octree scene reconstruction trained by differentiable
//! front-to-back compositing, with low-frequency-aware loss reweighting,
//! depth-quantile pruning, and budgeted priority-driven subdivision.
//!
//! The crate ships a library plus a CLI (`litevoxel`) for synthetic dataset
//! generation, training, rendering, and evaluation. All heavy inner loops
//! (rendering, backward pass, loss maps) are data-parallel over image rows
//! when the default `parallel` feature is enabled, with a sequential fallback
//! otherwise; results are bit-identical across worker counts.

pub mod geometry;
pub mod grid;
pub mod img;
pub mod losses;
pub mod optim;
pub mod prune;
pub mod raster;
pub mod scene;
pub mod subdiv;
pub mod train;

pub use geometry::{Camera, Ray};
pub use grid::{Voxel, VoxelGrid, VoxelKey};
pub use img::Image;
pub use raster::RenderOutput;
pub use train::TrainConfig;

use thiserror::Error as ThisError;

#[derive(Debug, ThisError)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("parse error at byte {offset}: {msg}")]
    Parse { msg: String, offset: usize },
    #[error("optimizer/grid consistency violation: {0}")]
    Consistency(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Map `f` over `0..n` in index order. Parallel when the `parallel` feature
/// is on; the collected output is ordered by index either way, so callers
/// observe identical results at any worker count.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential version of [`map_indexed`], kept available under every feature
/// combination for oracle comparisons and benchmarks.
pub fn map_indexed_serial<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}
