//! Bundled numerical checks for a problem with exact oracles and a linear
//! tracking model.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    bregman_sweep, bregman_tracking_sweep, coercivity_sweep, constant_bounds_sweep,
    direction_unbiasedness_check, exact_f_agreement, gram_matrix, lojasiewicz_m, lojasiewicz_sweep,
    random_in_ball, SweepReport, SweepScales,
};
use crate::error::Result;
use crate::oracles::{
    finite_diff_check, gradient_fd_error, CorruptedSubgradient, ExactOracle, LinearTracking,
    ProblemOracle, Vector, DEFAULT_FD_STEP,
};
use crate::rng::{self, CHECK_STREAM};

pub const FD_TOL: f64 = 1e-5;
pub const BREGMAN_LAMBDA: f64 = 2.0;
pub const BREGMAN_TOL: f64 = 1e-12;
pub const TRACKING_TOL: f64 = 1e-10;
pub const LOJASIEWICZ_TOL: f64 = 1e-10;
pub const COERCIVITY_FACTOR: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyLevel {
    Quick,
    Default,
}

impl VerifyLevel {
    fn divisor(self) -> usize {
        match self {
            VerifyLevel::Quick => 10,
            VerifyLevel::Default => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyOptions {
    pub level: VerifyLevel,
    pub seed: u64,
    pub tracking_gain: f64,
    pub scales: SweepScales,
    /// When set, the finite-difference check runs against an `f`
    /// subgradient shifted by this amount.
    pub inject_fault: Option<f64>,
}

impl VerifyOptions {
    pub fn new(level: VerifyLevel, seed: u64) -> Self {
        VerifyOptions {
            level,
            seed,
            tracking_gain: 100.0,
            scales: SweepScales {
                beta: 10.0,
                theta: 20.0,
            },
            inject_fault: None,
        }
    }
}

/// Sample sizes per check at a given level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Budget {
    pub fd_points: usize,
    pub mc_points: usize,
    pub mc_draws: usize,
    pub unbiased_points: usize,
    pub unbiased_draws: usize,
    pub sweep_points: usize,
    pub coercivity_points: usize,
}

impl Budget {
    pub fn for_level(level: VerifyLevel) -> Self {
        let d = level.divisor();
        Budget {
            fd_points: 100 / d,
            mc_points: 20,
            mc_draws: 100_000 / d,
            unbiased_points: 10,
            unbiased_draws: 100_000 / d,
            sweep_points: 1000 / d,
            coercivity_points: 100 / d,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed)
    }

    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(CheckOutcome {
            name: name.to_string(),
            passed,
            detail,
        });
    }

    fn push_sweep(&mut self, name: &str, sweep: &SweepReport) {
        self.push(
            name,
            sweep.passed(),
            format!(
                "{} points, {} violations, worst margin {:e}",
                sweep.checked, sweep.violations, sweep.worst_margin
            ),
        );
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {}: {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            )?;
        }
        Ok(())
    }
}

/// Largest finite-difference error of the `f`, `Ψ` and `g` oracles over
/// random points.
pub fn finite_difference_sweep<P: ProblemOracle>(
    problem: &P,
    scales: SweepScales,
    points: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = rng::stream(seed, CHECK_STREAM);
    let dims = problem.dims();
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let sample = problem.sample(&mut rng);
        let beta = random_in_ball(dims.n_beta, scales.beta, &mut rng);
        let theta = random_in_ball(dims.n_theta, scales.theta, &mut rng);
        worst = worst.max(finite_diff_check(
            problem,
            &sample.x,
            &sample.y,
            &beta,
            &theta,
            DEFAULT_FD_STEP,
        )?);
        let u = random_in_ball(dims.n_f, 3.0, &mut rng);
        let g_err = gradient_fd_error(
            |v: &Vector| problem.g_value(v),
            &u,
            &problem.g_grad(&u),
            DEFAULT_FD_STEP,
        )?;
        worst = worst.max(g_err);
    }
    Ok(worst)
}

/// Runs every check; failures are reported, not returned as errors.
pub fn verify_problem<P: ExactOracle + LinearTracking>(
    problem: &P,
    options: &VerifyOptions,
) -> Result<VerifyReport> {
    let budget = Budget::for_level(options.level);
    let scales = options.scales;
    let dims = problem.dims();
    let mut report = VerifyReport::default();

    let fd = match options.inject_fault {
        Some(offset) => {
            let corrupted = CorruptedSubgradient {
                inner: problem,
                offset,
            };
            finite_difference_sweep(&corrupted, scales, budget.fd_points, options.seed)?
        }
        None => finite_difference_sweep(problem, scales, budget.fd_points, options.seed)?,
    };
    report.push(
        "finite_differences",
        fd <= FD_TOL,
        format!(
            "{} points, max relative error {fd:e} (tolerance {FD_TOL:e})",
            budget.fd_points
        ),
    );

    let mut rng = rng::stream(options.seed, CHECK_STREAM + 1);
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for _ in 0..budget.mc_points {
        let x = problem.sample(&mut rng).x;
        let beta = random_in_ball(dims.n_beta, scales.beta, &mut rng);
        let cmp = exact_f_agreement(problem, &x, &beta, budget.mc_draws, &mut rng)?;
        ok &= cmp.passed;
        worst = worst.max(cmp.worst_ratio);
    }
    report.push(
        "exact_f_monte_carlo",
        ok,
        format!(
            "{} points x {} draws, worst |error|/(4 sigma/sqrt N) = {worst:.3}",
            budget.mc_points, budget.mc_draws
        ),
    );

    let mut worst: f64 = 0.0;
    let mut ok = true;
    for _ in 0..budget.unbiased_points {
        let beta = random_in_ball(dims.n_beta, scales.beta, &mut rng);
        let theta = random_in_ball(dims.n_theta, scales.theta, &mut rng);
        let cmp = direction_unbiasedness_check(
            problem,
            &beta,
            &theta,
            options.tracking_gain,
            budget.unbiased_draws,
            &mut rng,
        )?;
        ok &= cmp.passed;
        worst = worst.max(cmp.worst_ratio);
    }
    report.push(
        "direction_unbiasedness",
        ok,
        format!(
            "{} points x {} draws, worst |error|/(4 sigma/sqrt N) = {worst:.3}",
            budget.unbiased_points, budget.unbiased_draws
        ),
    );

    let sweep = bregman_sweep(
        problem,
        BREGMAN_LAMBDA,
        scales,
        budget.sweep_points,
        BREGMAN_TOL,
        &mut rng,
    )?;
    report.push_sweep("bregman_nonnegative", &sweep);
    let sweep = bregman_tracking_sweep(
        problem,
        BREGMAN_LAMBDA,
        scales,
        budget.sweep_points,
        TRACKING_TOL,
        &mut rng,
    )?;
    report.push_sweep("bregman_zero_at_tracking", &sweep);

    match lojasiewicz_m(&gram_matrix(problem)) {
        Ok(m) => {
            let sweep = lojasiewicz_sweep(
                problem,
                m,
                scales,
                budget.sweep_points,
                LOJASIEWICZ_TOL,
                &mut rng,
            )?;
            report.push_sweep("lojasiewicz", &sweep);
        }
        Err(e) => report.push("lojasiewicz", false, e.to_string()),
    }

    match coercivity_sweep(
        problem,
        scales.beta,
        COERCIVITY_FACTOR,
        budget.coercivity_points,
        &mut rng,
    ) {
        Ok(sweep) => report.push_sweep("coercivity", &sweep),
        Err(e) => report.push("coercivity", false, e.to_string()),
    }

    match constant_bounds_sweep(problem, scales, budget.sweep_points, &mut rng) {
        Ok(sweep) => report.push_sweep("published_constants", &sweep),
        Err(e) => report.push("published_constants", false, e.to_string()),
    }

    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear_mdp::{generate_linear_mdp, BellmanProblem};
    use crate::uplift::{make_uplift_problem, UpliftInstance};

    #[test]
    fn quick_suite_passes_on_both_benchmarks() {
        let inst = generate_linear_mdp(10, 4, 3, 0, 8.0).unwrap();
        let mdp = BellmanProblem::from_instance(&inst, 1.0, 10.0, 1000.0).unwrap();
        let report = verify_problem(&mdp, &VerifyOptions::new(VerifyLevel::Quick, 1)).unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.checks.len(), 8);

        let uplift = make_uplift_problem(
            UpliftInstance::generate(5, 0.5, 0).unwrap(),
            1.0,
            10.0,
            1000.0,
        )
        .unwrap();
        let report = verify_problem(&uplift, &VerifyOptions::new(VerifyLevel::Quick, 1)).unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn injected_fault_fails_only_the_derivative_check() {
        let inst = generate_linear_mdp(10, 4, 3, 0, 8.0).unwrap();
        let mdp = BellmanProblem::from_instance(&inst, 1.0, 10.0, 1000.0).unwrap();
        let mut options = VerifyOptions::new(VerifyLevel::Quick, 1);
        options.inject_fault = Some(0.1);
        let report = verify_problem(&mdp, &options).unwrap();
        let failed: Vec<_> = report.failures().map(|c| c.name.as_str()).collect();
        assert_eq!(failed, ["finite_differences"]);
        assert!(report.to_string().contains("FAIL finite_differences"));
    }
}
