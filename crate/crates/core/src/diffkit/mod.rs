//! Minimal differentiable numeric kernel: dense `f64` matrices, a reverse-mode
//! tape, two-layer perceptrons, Adam/SGD, linear solves and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod linalg;
pub mod matrix;
pub mod mlp;
pub mod params;
pub mod tape;

pub use checkpoint::Checkpoint;
pub use linalg::{solve, Factorization};
pub use matrix::Tensor2;
pub use mlp::{Activation, Mlp2};
pub use params::{AdamConfig, ParamId, ParamStore, StepReport};
pub use tape::{sigmoid, Gradients, Graph, Var};
