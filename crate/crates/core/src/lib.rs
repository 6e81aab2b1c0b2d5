//! Text-prior guided super-resolution of low-resolution text images.
//!
//! A recognizer turns a text image into a per-frame categorical probability
//! sequence (the text prior). A deconvolution stack lifts that sequence into a
//! feature map which is fused into every residual block of a super-resolution
//! network. Stages can be chained so later stages read the prior from the
//! previous stage's super-resolved output.

pub mod data;
pub mod error;
pub mod eval;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod recognizer;
pub mod tensor;
pub mod tpgsr;

pub use error::{Error, Result};
pub use tensor::{Element, Graph, ParamStore, Tensor, Var};
