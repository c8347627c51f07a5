//! A small reverse-mode autodiff engine over `f64` tensors: a recorded tape
//! of eager operations, named parameters with an Adam optimizer and binary
//! checkpoints, and a finite-difference gradient checker.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use params::{ParamSet, CHECKPOINT_MAGIC};
pub use tape::{dense, lstm_cell, Gradients, NodeRef, Tape};
pub use tensor::{matmul, NnError, Tensor};
