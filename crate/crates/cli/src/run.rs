//! The `run` pipeline: build the problem, attach metric hooks, solve, and
//! summarize.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::Context;
use log::{info, warn};
use serde::Serialize;

use cso_core::diagnostics::{
    descent_summary, draw_test_set, lyapunov_series, DescentSummary, DiagnosticsReport,
    ExactDiagnosticsHook, LyapunovParams, Regularity, TestSetHook,
};
use cso_core::linear_mdp::BellmanProblem;
use cso_core::solver::{initial_state, run};
use cso_core::uplift::make_uplift_problem;
use cso_core::{ExactOracle, LinearTracking, MetricsHook, RunTrace, Vector};

use crate::config::{Instance, RunConfig};
use crate::{CliResult, Failure};

/// Final-over-initial ratios of the tracked quantities.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Ratios {
    #[serde(rename = "exact_Q")]
    pub exact_q: Option<f64>,
    #[serde(rename = "exact_G")]
    pub exact_g: Option<f64>,
    pub test_dir_theta_norm: Option<f64>,
    /// `‖β^K − β*‖ / ‖β⁰ − β*‖`.
    pub beta_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub problem: &'static str,
    pub n_beta: usize,
    pub n_theta: usize,
    pub n_f: usize,
    pub iterations: u64,
    pub seed: u64,
    pub tracking_gain: f64,
    pub gamma_threshold: Option<f64>,
    pub gain_exceeds_threshold: Option<bool>,
    pub theorem48_gamma_bound: Option<f64>,
    pub theorem48_condition: Option<bool>,
    pub lyapunov: Option<LyapunovParams>,
    pub initial: Option<DiagnosticsReport>,
    #[serde(rename = "final")]
    pub final_: Option<DiagnosticsReport>,
    pub ratios: Ratios,
    pub lyapunov_descent: Option<DescentSummary>,
    pub final_beta: Vec<f64>,
    pub final_theta: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub trace: RunTrace,
    pub report: RunReport,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| num / den)
}

/// Builds the configured problem and runs it. `base` resolves relative
/// instance paths. On a mid-run failure the partial trace is written to
/// `trace_path` before returning.
pub fn execute(
    config: &RunConfig,
    base: &Path,
    trace_path: Option<&Path>,
) -> CliResult<RunOutcome> {
    config.validate().map_err(Failure::usage)?;
    let instance = config.problem.load(base).map_err(Failure::usage)?;
    let s = &config.solver;
    match instance {
        Instance::Mdp(inst) => {
            let problem = BellmanProblem::from_instance(
                &inst,
                config.huber_delta,
                s.beta_radius,
                s.theta_radius,
            )
            .map_err(Failure::usage)?;
            let reference = problem.exact_solution().ok();
            solve("linear_mdp", &problem, config, reference, trace_path)
        }
        Instance::Uplift(inst) => {
            let problem =
                make_uplift_problem(inst, config.huber_delta, s.beta_radius, s.theta_radius)
                    .map_err(Failure::usage)?;
            let reference = Some(problem.exact_solution());
            solve("uplift", &problem, config, reference, trace_path)
        }
    }
}

pub fn write_trace(trace: &RunTrace, path: &Path) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    trace
        .write_csv(BufWriter::new(file))
        .with_context(|| format!("writing {}", path.display()))
}

pub fn write_report(report: &RunReport, path: &Path) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn solve<P>(
    name: &'static str,
    problem: &P,
    config: &RunConfig,
    reference: Option<Vector>,
    trace_path: Option<&Path>,
) -> CliResult<RunOutcome>
where
    P: ExactOracle + LinearTracking,
{
    let solver = &config.solver;
    let regularity = match Regularity::of(problem) {
        Ok(r) => Some(r),
        Err(e) => {
            warn!("regularity constants unavailable: {e}");
            None
        }
    };
    let lyapunov = config
        .lyapunov
        .or_else(|| regularity.map(|r| r.default_lyapunov()));
    let start = initial_state(problem, solver).map_err(Failure::usage)?;
    let diagnose = |beta: &Vector, theta: &Vector| {
        regularity.and_then(|_| {
            DiagnosticsReport::compute(problem, beta, theta, solver.tracking_gain, lyapunov)
                .map_err(|e| warn!("diagnostics unavailable: {e}"))
                .ok()
        })
    };
    let initial = diagnose(&start.beta, &start.theta);

    let mut test_hook = (config.test_size > 0).then(|| TestSetHook::<P> {
        data: draw_test_set(problem, config.test_size, solver.seed),
        tracking_gain: solver.tracking_gain,
        cadence: config.effective_test_cadence(),
    });
    let mut exact_hook = ExactDiagnosticsHook {
        cadence: config.diagnostic_cadence,
        lyapunov,
    };
    let mut hooks: Vec<&mut dyn MetricsHook<P>> = Vec::new();
    if let Some(h) = test_hook.as_mut() {
        hooks.push(h);
    }
    hooks.push(&mut exact_hook);

    let started = std::time::Instant::now();
    let trace = match run(problem, solver, &mut hooks) {
        Ok(trace) => trace,
        Err(failure) => {
            if let Some(path) = trace_path {
                if let Err(e) = write_trace(&failure.partial, path) {
                    warn!("could not flush partial trace: {e:#}");
                }
            }
            return Err(Failure::numerical(failure.error));
        }
    };
    info!(
        "{name}: {} iterations in {:.3} s",
        solver.iterations,
        started.elapsed().as_secs_f64()
    );

    let end = trace
        .final_state
        .clone()
        .expect("a completed run has a final state");
    let last = diagnose(&end.beta, &end.theta);
    let mut ratios = Ratios::default();
    if let (Some(a), Some(b)) = (&initial, &last) {
        ratios.exact_q = ratio(b.exact_q, a.exact_q);
        ratios.exact_g = ratio(b.exact_g, a.exact_g);
    }
    let mut tested = trace.records.iter().filter_map(|r| r.test);
    if let (Some(first), Some(final_test)) = (tested.next(), tested.next_back()) {
        ratios.test_dir_theta_norm = ratio(final_test.dir_theta_norm, first.dir_theta_norm);
    }
    if let Some(star) = &reference {
        ratios.beta_error = ratio((&end.beta - star).norm(), (&start.beta - star).norm());
    }
    let (ks, ws) = lyapunov_series(&trace.records);
    let dims = problem.dims();
    let bound = regularity
        .zip(lyapunov)
        .and_then(|(r, p)| r.theorem48_gamma_bound(p));
    let report = RunReport {
        problem: name,
        n_beta: dims.n_beta,
        n_theta: dims.n_theta,
        n_f: dims.n_f,
        iterations: solver.iterations,
        seed: solver.seed,
        tracking_gain: solver.tracking_gain,
        gamma_threshold: regularity.map(|r| r.gamma_threshold()),
        gain_exceeds_threshold: regularity.map(|r| solver.tracking_gain > r.gamma_threshold()),
        theorem48_gamma_bound: bound,
        theorem48_condition: regularity.map(|_| bound.is_some_and(|b| solver.tracking_gain > b)),
        lyapunov,
        initial,
        final_: last,
        ratios,
        lyapunov_descent: descent_summary(&ks, &ws),
        final_beta: end.beta.iter().copied().collect(),
        final_theta: end.theta.iter().copied().collect(),
    };
    Ok(RunOutcome { trace, report })
}
