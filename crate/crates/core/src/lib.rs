//! Image manipulation localization: a windowed ViT encoder on a zero-padded
//! canvas, a simple feature pyramid, an all-MLP head and an edge-weighted
//! BCE objective, with the evaluation and robustness tooling around them.

pub mod autograd;
pub mod data;
pub mod error;
pub mod imageops;
pub mod linalg;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod morphology;
pub mod padding;
pub mod robustness;
pub mod par;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::{seed_all, Mask, Rng, Tensor};
