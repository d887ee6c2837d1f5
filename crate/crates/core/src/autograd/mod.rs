//! Reverse-mode autodiff used by the model and trainer.

pub mod graph;
pub mod params;

pub use graph::{gather_index, BnStats, Gradients, Graph, ResizeGeom, Var};
pub use params::{BnUpdate, Ctx, Grads, ParamStore};
