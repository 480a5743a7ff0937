//! Rectified-flow ODE toolkit.
//!
//! Solvers for `dZ/dt = v(Z, t)` built on a truncated Taylor expansion of the
//! velocity integral (Euler, second and third order with finite-difference
//! derivative probes), their inversion form, a toy attention velocity field
//! with value-feature sharing for editing, a small MLP trained with the
//! rectified-flow regression loss, and drivers for reconstruction-error and
//! convergence studies.
//!
//! Time runs on `[0, 1]`: `t = 0` is data, `t = 1` is Gaussian noise.
//! Sampling (denoising) integrates `1 -> 0`, inversion integrates `0 -> 1`.

pub mod attnfield;
pub mod error;
pub mod field;
pub mod harness;
pub mod solver;
pub mod tensorio;
pub mod train;

pub use attnfield::{AttentionField, FeatureCache, ShareConfig};
pub use error::{Error, Result};
pub use field::{AnalyticField, AnalyticKind, ConditionId, VelocityField};
pub use solver::{Direction, Pass, SolverConfig, StepReport, TimeGrid, TrajectoryRecord};
pub use tensorio::Tensor;
pub use train::{MlpField, ToyDistribution, TrainConfig};
