//! Core library for multi-spectral scene classification with
//! physics-motivated layers: trainable Gabor filter banks, mixed
//! max/average pooling, averaged dilated convolutions and channel
//! attention over fused per-band features, all running on a small
//! reverse-mode autodiff engine with deterministic, seeded execution.

pub mod attention;
pub mod backbone;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gabor;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;
pub mod util;

pub use error::{Error, Result};
pub use model::{Model, ModelSpec};
pub use nn::Mode;
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tensor::{BnStats, PoolMode, Tape, Tensor, VarId};
