//! The prior-guided super-resolution network and its multi-stage pipeline.

mod block;
mod pipeline;
mod sr;
mod transformer;

pub use block::TpGuidedBlock;
pub use pipeline::{
    default_lambdas, single_stage_source, stage_prefix, validate_lambdas, ForwardMode, ModelConfig, StageOutput, StagePlan, Tpgsr,
    LAMBDA_SUM_TOL,
};
pub use sr::{SrConfig, SrModule};
pub use transformer::{TpTransformer, TptConfig};
