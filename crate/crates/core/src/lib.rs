//! Neural marketing-mix modeling over a `(geo, week, channel, embedding)`
//! tensor.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the bottom of this file pick one.

pub mod attention;
pub mod attribution;
pub mod config;
pub mod diff;
pub mod error;
pub mod heads;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod probe;
pub mod scalar;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{NnnError, Result};
pub use model::{ModelConfig, Nnn};
pub use scalar::Scalar;
pub use tensor::MediaTensor;

pub type Nnn32 = Nnn<f32>;
pub type Nnn64 = Nnn<f64>;
pub type MediaTensor32 = MediaTensor<f32>;
pub type MediaTensor64 = MediaTensor<f64>;
