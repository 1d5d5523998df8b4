//! Exemplar-based image editing with semantic-delta conditioning of a
//! rectified-flow editing model, trained under single-pair supervision.
//!
//! The crate is organised along the pipeline:
//! tensor autodiff core → frozen vision encoder and patch codec → delta
//! adapter → flow backbone → objectives → synthetic data → trainer → eval.

pub mod adapter;
pub mod data;
pub mod error;
pub mod eval;
pub mod formats;
pub mod gradsuite;
pub mod flownet;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod vision;

pub use error::{Error, Result};
pub use tensor::{backward, grad_check, GradCheckReport, Gradients, Tensor};
