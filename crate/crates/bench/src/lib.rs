//! Shared fixtures for the benchmarks.

use cso_core::linear_mdp::{generate_linear_mdp, BellmanProblem};
use cso_core::uplift::{make_uplift_problem, UpliftInstance, UpliftProblem, DEFAULT_NOISE_STD};

/// Reference-scale linear MDP: 100 states, 50 actions, 10 features.
pub fn reference_mdp(seed: u64) -> BellmanProblem {
    let instance =
        generate_linear_mdp(100, 50, 10, seed, 8.0).expect("generator accepts these sizes");
    BellmanProblem::from_instance(&instance, 1.0, 10.0, 1000.0).expect("valid radii")
}

pub fn reference_uplift(n_x: usize, seed: u64) -> UpliftProblem {
    let instance = UpliftInstance::generate(n_x, DEFAULT_NOISE_STD, seed).expect("valid sizes");
    make_uplift_problem(instance, 1.0, 10.0, 1000.0).expect("valid radii")
}
