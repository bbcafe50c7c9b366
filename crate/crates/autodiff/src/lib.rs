//! Minimal reverse-mode autodiff over dense row-major tensors.
//!
//! Everything differentiable is a method on [`Graph`]: values are recorded as
//! they are computed and `Graph::backward` returns parameter gradients. The
//! [`gradcheck`] module verifies any scalar function built this way against
//! central finite differences.

pub mod error;
pub mod gradcheck;
mod graph;
pub mod ops;
mod param;
mod real;
mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{finite_difference_check, relative_error, GradCheckReport, ParamCheck};
pub use graph::{BackwardCtx, BranchLog, Gradients, Graph, Var};
pub use param::{ParamGrads, ParamId, ParamStore, Parameter};
pub use real::{gemm, Real};
pub use tensor::{numel, Tensor};
