//! Dense `f64` matrices, the head's nonlinearities, a small gradient tape and
//! the AdamW optimizer.

mod matrix;
pub mod ops;
pub mod optim;
mod tape;

pub use matrix::Matrix;
pub use ops::{gelu, gelu_scalar, layer_normalize, LAYER_NORM_EPS};
pub use optim::{cosine_lr, AdamWConfig, OptimState};
pub use tape::{Gradients, NamedTensor, ParamId, ParamStore, Tape, Var};
