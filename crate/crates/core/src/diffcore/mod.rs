//! Minimal differentiable-computation substrate: dense matrices, a
//! reverse-mode tape, SiLU feed-forward stacks, and AdamW.

mod checkpoint;
mod mlp;
mod optim;
mod params;
mod tape;

pub use checkpoint::Checkpoint;
pub use mlp::MlpSpec;
pub use optim::{clip_grad_norm, AdamW};
pub use params::{Param, ParamStore};
pub use tape::{Tape, Var};

#[allow(unused_imports)]
pub(crate) use tape::{sigmoid, softplus};

/// Row-major dense matrix; vectors are 1×n or n×1.
pub type Tensor = ndarray::Array2<f64>;
