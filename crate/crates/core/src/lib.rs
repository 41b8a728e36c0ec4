//! Community-attentive spatio-temporal forecasting of weekly event counts.
//!
//! The crate is layered bottom-up: [`tensor`], [`tape`] and [`adam`] form a
//! small reverse-mode autodiff core; [`data`] turns incident CSVs into weekly
//! panels and training windows; [`model`] holds the network; [`training`],
//! [`eval`] and [`synth`] train it, score it and build test panels.

pub mod adam;
pub mod artifact;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod params;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{Ablation, CastNet, ModelConfig};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
