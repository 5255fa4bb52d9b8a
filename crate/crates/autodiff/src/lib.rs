//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records operations as they execute. Calling
//! [`Graph::backward`] on a scalar node walks the tape once in reverse and
//! returns gradients for every node that depends on a parameter or input.
//! Parameters live in a [`ParamStore`] and are updated by [`Adam`].

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use kernels::SegmentPair;
pub use optim::{Adam, AdamConfig, LrSchedule};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;
