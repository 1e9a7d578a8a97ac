//! Reverse-mode differentiation over a closed set of dense tensor operations,
//! plus an Adam optimizer with decoupled weight decay.
//!
//! All arithmetic is 64-bit. A [`Graph`] records one forward computation; its
//! [`Graph::backward`] pass adds gradients into the slots of the parameters in a
//! [`ParamStore`]. Gradients accumulate until zeroed, which lets callers run
//! several backward passes before a single [`adam_step`].

mod error;
mod gradcheck;
mod graph;
mod ops;
mod param;
mod suite;
mod tensor;

pub use error::{DiffError, Result};
pub use gradcheck::{finite_diff_check, finite_diff_check_opts, finite_diff_check_with, CheckOptions, relative_error, GradCheckReport, Probe};
pub use graph::{Graph, NodeId};
pub use ops::Op;
pub use param::{adam_step, fan_in_uniform, AdamConfig, AdamState, ParamId, ParamStore, Parameter};
pub use suite::{check_op, closed_op_set, op_gradient_suite, OpCheck};
pub use tensor::Tensor;
