//! Multi-expert query decoding for LiDAR-camera 3D detection that stays
//! robust when one sensor fails.
//!
//! Object queries are routed one by one to a LiDAR, camera, or fused expert
//! decoder by a small router that looks only at features inside a local
//! window around each query's reference point. Everything runs on synthetic
//! scenes with a self-contained `f64` autograd so every mechanism can be
//! tested on a laptop.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod corruption;
pub mod decoder;
pub mod encode;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
mod linalg;
pub mod model;
pub mod optim;
pub mod params;
pub mod routing;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{MomeError, Result};
pub use tensor::Tensor;
