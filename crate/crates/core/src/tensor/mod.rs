//! Minimal dense tensors with reverse-mode automatic differentiation.

pub mod checkpoint;
mod dense;
mod element;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod nn;
mod optim;
mod param;

pub use dense::Tensor;
pub use element::{gemm, Element, MatRef};
pub use graph::{BnParams, Graph, Var, BN_EPS, BN_MOMENTUM};
pub use optim::{adam_step, AdamState};
pub use param::{ParamId, ParamKind, ParamStore, Parameter};
