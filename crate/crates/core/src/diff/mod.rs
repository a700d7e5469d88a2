//! Differentiable building blocks with hand-derived backward passes.
//!
//! Each layer exposes `forward` (inference), a cached forward, and a
//! `backward` that accumulates into a [`Gradients`] buffer laid out like the
//! owning [`ParamStore`].

pub mod dense;
pub mod gradcheck;
pub mod mlp;
pub mod ops;
pub mod params;

pub use dense::Dense;
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use mlp::{MlpCache, MlpResnet};
pub use params::{Gradients, Init, ParamRef, ParamStore};
