//! Underwater radiance field with per-channel illuminance attenuation.
//!
//! The field emits density, color and attenuation at every point. Rendering
//! with attenuation reproduces the degraded underwater views it is trained
//! on; rendering without it yields the restored views.

// `!(x > 0)` deliberately rejects NaN; channel loops index fixed RGB triples.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod error;
pub mod field;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod photometry;
pub mod raster;
pub mod renderer;
pub mod scalar;
pub mod trainer;
pub mod waterform;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type FieldParamsF32 = field::FieldParams<f32>;
pub type FieldParamsF64 = field::FieldParams<f64>;
pub type ModelF32 = model::Model<f32>;
pub type ModelF64 = model::Model<f64>;
pub type TrainerF32 = trainer::Trainer<f32>;
pub type TrainerF64 = trainer::Trainer<f64>;
