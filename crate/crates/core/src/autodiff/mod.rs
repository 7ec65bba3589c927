//! Dense `f64` tensors, a reverse-mode tape and the AdamW optimizer.

pub mod functional;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
