//! Inverse RL by matching state marginals under an f-divergence, on
//! finite-horizon tabular MDPs solved exactly with soft value iteration.

// `!(x > 0.0)` style checks reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod density_ratio;
pub mod divergence;
pub mod grad;
pub mod gradcheck;
pub mod io;
pub mod kl_eval;
pub mod mdp;
pub mod reward;
pub mod runner;
pub mod scenarios;
pub mod soft_solver;
pub mod trainer;

pub use density_ratio::{RatioEstimator, RatioMode};
pub use divergence::{divergence_exact, ExpertDensity, FDivKind};
pub use grad::{EstimatorKind, GradReport};
pub use mdp::{build_gridworld, FiniteMdp, GridAction, GridSpec, Trajectory};
pub use reward::{FeatureMap, RewardKind, RewardModel};
pub use soft_solver::{solve, SoftSolution, SolverConfig, TrajectoryBatch};
