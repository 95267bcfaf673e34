//! Neural light fields: networks that map 4D ray coordinates straight to
//! integrated radiance, optionally through a learned ray-space embedding
//! and a voxel grid of local light fields.

pub mod checkpoint;
pub mod encoding;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod model;
pub mod scenes;
pub mod train;
pub mod net;

/// Floating-point scalar the networks and models are generic over. Training
/// runs in `f32`; gradient checks use `f64`.
pub trait Real: ndarray::NdFloat + std::iter::Sum {
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn f64(self) -> f64 {
        self
    }
}
