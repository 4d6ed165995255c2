//! Single time-scale stochastic subgradient method for conditional
//! stochastic optimization `min_β E[g(E[f(X,Y,β) | X])]`, where a tracking
//! model `Ψ(X,θ)` follows the inner conditional mean and both parameters
//! move on one stepsize sequence.
//!
//! Built-in problems are the Bellman residual of a linear MDP and an uplift
//! regression with a transformed response. Both expose exact oracles so
//! the objective, the tracking error and the Lyapunov function can be
//! evaluated without sampling.

// `!(x > y)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::result_large_err)]

pub mod diagnostics;
pub mod error;
pub mod linear_mdp;
pub mod oracles;
pub mod rng;
pub mod solver;
pub mod trace;
pub mod uplift;
pub mod verify;

pub use diagnostics::{DiagnosticsReport, LyapunovParams, Regularity};
pub use error::{Error, Result};
pub use linear_mdp::{BellmanProblem, GeneratorOptions, LinearMdp, MdpInstance, Policy};
pub use oracles::{
    Dims, ExactOracle, HuberLoss, LinearTracking, Matrix, OracleConstants, ProblemOracle,
    StepSample, Vector,
};
pub use solver::{IterateState, MetricsHook, RunFailure, SolverConfig, StepsizeSchedule};
pub use trace::{RunTrace, TraceRecord};
pub use uplift::{UpliftInstance, UpliftProblem};
