//! Objectives, gradient oracles and the constants the convergence bound
//! consumes.

mod constants;
mod problem;
pub mod rng;
mod vector;

pub use constants::{
    diversity_at, power_iteration, problem_constants, sampled_smoothness, EstimateFlags,
    ProblemConstants,
};
pub use problem::{NoiseSpec, Problem, ProblemKind, ProblemSpec};
pub use vector::{dist_sq, max_abs_diff, norm_sq, ordered_mean, ParameterVector};
