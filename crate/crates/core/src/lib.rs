//! Multi-task linear representation learning by two-phase gradient descent.
//!
//! Tasks share a low-rank representation: task `t` regresses on `B*·w*_t`
//! with `B* ∈ R^{d×k}`. The crate provides the solvers (two-phase GD and the
//! baselines), transfer of a learned representation to a new task by SGD with
//! step decay, curriculum training over noise levels, and the synthetic
//! experiment harness behind the `lrmt` binary.

pub mod curriculum;
pub mod error;
pub mod harness;
pub mod losses;
pub mod numerics;
pub mod solvers;
pub mod synthdata;
pub mod transfer;

pub use error::{Error, Result};
pub use losses::{FactorPair, GradPair, Objective};
pub use numerics::{Matrix, SeededRng};
pub use solvers::{HyperParams, SolveResult};
pub use synthdata::{GroundTruth, MultiTaskDataset};
