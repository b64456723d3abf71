//! Minimal reverse-mode differentiation, MLPs and the Adam updater.

mod adam;
mod graph;
mod mlp;
mod params;

pub use adam::{AdamConfig, AdamState};
pub use graph::{sigmoid, softplus, Gradients, Graph, Matrix, Var};
pub use mlp::{Activation, BoundMlp, Mlp, MlpJson};
pub use params::{ParamEntry, ParamLayout, ParamVector, Parameterized};
