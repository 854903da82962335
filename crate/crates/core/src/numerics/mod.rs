//! Numeric substrate: dense matrices, a reverse-mode tape, parameters,
//! AdamW and a finite-difference gradient checker.

mod gradcheck;
mod graph;
mod matrix;
mod optim;
mod params;
mod rng;
mod softmax;

pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport, ParamCheck};
pub use graph::{Graph, NodeId};
pub use matrix::Matrix;
pub use optim::{adamw_step, AdamwConfig, AdamwState};
pub use params::{ParamId, ParamRole, Parameter, ParameterStore};
pub use rng::{RngState, SeededRng};
pub use softmax::{masked_log_softmax, masked_softmax_rows, sigmoid, softplus, Mask};
