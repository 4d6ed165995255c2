//! The projected single time-scale iteration.
//!
//! From the current pair `(β^k, θ^k)` and one joint observation `(X^k, Y^k)`:
//!
//! ```text
//! d_β = −f_β(X,Y,β) · ∇g(Ψ(X,θ))
//! d_θ =  γ · Ψ_θ(X,θ) · (f(X,Y,β) − Ψ(X,θ))
//! β ← Π_B(β + τ_k d_β)
//! θ ← Π_{‖θ‖≤R}(θ + τ_k d_θ)
//! ```
//!
//! Both parameters move on the same stepsize `τ_k`; the tracking gain `γ`
//! only scales the `θ` direction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracles::{Matrix, ProblemOracle, StepSample, Vector};
use crate::rng::{self, TRAIN_STREAM};
use crate::trace::{RunTrace, TraceRecord, TrainMetrics};

/// The algorithm state `z^k = (β^k, θ^k)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterateState {
    pub beta: Vector,
    pub theta: Vector,
    pub k: u64,
}

/// Stepsize families. Only the rational decay `τ_k = a / (1 + k/b)^p` is
/// provided; for `p ∈ (1/2, 1]` it is positive, not summable and square
/// summable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(
    tag = "family",
    rename_all = "snake_case",
    deny_unknown_fields,
    try_from = "RawSchedule"
)]
pub enum StepsizeSchedule {
    RationalDecay { a: f64, b: f64, p: f64 },
}

#[derive(Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
enum RawSchedule {
    RationalDecay { a: f64, b: f64, p: f64 },
}

impl TryFrom<RawSchedule> for StepsizeSchedule {
    type Error = Error;

    fn try_from(raw: RawSchedule) -> Result<Self> {
        let RawSchedule::RationalDecay { a, b, p } = raw;
        StepsizeSchedule::rational_decay(a, b, p)
    }
}

impl StepsizeSchedule {
    pub fn rational_decay(a: f64, b: f64, p: f64) -> Result<Self> {
        if !(a.is_finite() && a > 0.0) {
            return Err(Error::InvalidInput(format!(
                "stepsize scale a must be positive, got {a}"
            )));
        }
        if !(b.is_finite() && b > 0.0) {
            return Err(Error::InvalidInput(format!(
                "stepsize shift b must be positive, got {b}"
            )));
        }
        if !(p > 0.5 && p <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "stepsize exponent p must lie in (1/2, 1], got {p}"
            )));
        }
        Ok(StepsizeSchedule::RationalDecay { a, b, p })
    }

    /// `τ_k = 1/(1 + k/1000)`.
    pub fn reference() -> Self {
        StepsizeSchedule::RationalDecay {
            a: 1.0,
            b: 1000.0,
            p: 1.0,
        }
    }

    /// Upper bound on `Σ_{k≥0} τ_k²`, from comparing the sum with the
    /// integral of the decreasing summand: `a² + a²·b/(2p − 1)`.
    pub fn sum_of_squares_bound(&self) -> f64 {
        let StepsizeSchedule::RationalDecay { a, b, p } = *self;
        a * a + a * a * b / (2.0 * p - 1.0)
    }
}

/// `τ_k` for the given schedule.
pub fn stepsize(schedule: &StepsizeSchedule, k: u64) -> f64 {
    let StepsizeSchedule::RationalDecay { a, b, p } = *schedule;
    let base = 1.0 + k as f64 / b;
    if p == 1.0 {
        a / base
    } else {
        a / base.powf(p)
    }
}

/// Solver parameters. Validated on construction and on deserialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, try_from = "RawSolverConfig")]
pub struct SolverConfig {
    /// The gain `γ` multiplying the `θ` direction.
    pub tracking_gain: f64,
    /// Radius of the feasible ball for `β` (consumed by built-in problems).
    pub beta_radius: f64,
    /// Radius `R` of the ball `Θ_R`.
    pub theta_radius: f64,
    pub schedule: StepsizeSchedule,
    pub iterations: u64,
    pub seed: u64,
    /// Record every this many iterations; `None` picks the default cadence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics_cadence: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_beta: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_theta: Option<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSolverConfig {
    tracking_gain: f64,
    beta_radius: f64,
    theta_radius: f64,
    schedule: StepsizeSchedule,
    iterations: u64,
    seed: u64,
    #[serde(default)]
    metrics_cadence: Option<u64>,
    #[serde(default)]
    initial_beta: Option<Vec<f64>>,
    #[serde(default)]
    initial_theta: Option<Vec<f64>>,
}

impl TryFrom<RawSolverConfig> for SolverConfig {
    type Error = Error;

    fn try_from(raw: RawSolverConfig) -> Result<Self> {
        let config = SolverConfig {
            tracking_gain: raw.tracking_gain,
            beta_radius: raw.beta_radius,
            theta_radius: raw.theta_radius,
            schedule: raw.schedule,
            iterations: raw.iterations,
            seed: raw.seed,
            metrics_cadence: raw.metrics_cadence,
            initial_beta: raw.initial_beta,
            initial_theta: raw.initial_theta,
        };
        config.validate()?;
        Ok(config)
    }
}

impl SolverConfig {
    /// The experiment configuration: `γ = 100`, `‖β‖ ≤ 10`, `‖θ‖ ≤ 1000`,
    /// `τ_k = 1/(1 + k/1000)`, 5000 iterations.
    pub fn reference(seed: u64) -> Self {
        SolverConfig {
            tracking_gain: 100.0,
            beta_radius: 10.0,
            theta_radius: 1000.0,
            schedule: StepsizeSchedule::reference(),
            iterations: 5000,
            seed,
            metrics_cadence: None,
            initial_beta: None,
            initial_theta: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, value: f64| {
            if value.is_finite() && value > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidInput(format!(
                    "{name} must be positive, got {value}"
                )))
            }
        };
        positive("tracking_gain", self.tracking_gain)?;
        positive("beta_radius", self.beta_radius)?;
        positive("theta_radius", self.theta_radius)?;
        if self.metrics_cadence == Some(0) {
            return Err(Error::InvalidInput(
                "metrics_cadence must be at least 1".into(),
            ));
        }
        for (name, init) in [
            ("initial_beta", &self.initial_beta),
            ("initial_theta", &self.initial_theta),
        ] {
            if let Some(values) = init {
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidInput(format!(
                        "{name} has non-finite entries"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Every iteration up to 10⁴ iterations, otherwise `⌈iterations/10⁴⌉`.
    pub fn effective_metrics_cadence(&self) -> u64 {
        self.metrics_cadence
            .unwrap_or_else(|| default_cadence(self.iterations))
    }
}

pub fn default_cadence(iterations: u64) -> u64 {
    const MAX_ROWS: u64 = 10_000;
    if iterations <= MAX_ROWS {
        1
    } else {
        iterations.div_ceil(MAX_ROWS)
    }
}

fn check_finite(quantity: &str, v: &Vector) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::numerical(quantity, "non-finite value"))
    }
}

/// Euclidean norm that stays finite when the squared norm would overflow.
pub fn stable_norm(v: &Vector) -> f64 {
    let norm = v.norm();
    if norm.is_finite() {
        return norm;
    }
    let scale = v.amax();
    if !scale.is_finite() || scale == 0.0 {
        return norm;
    }
    scale * (v / scale).norm()
}

pub(crate) fn ball_projection(v: Vector, radius: f64) -> Vector {
    // Rescaling lands within a few ulps of the sphere; accepting that slack
    // keeps the projection exactly idempotent.
    let norm = stable_norm(&v);
    if norm <= radius * (1.0 + 8.0 * f64::EPSILON) {
        v
    } else {
        v * (radius / norm)
    }
}

/// Euclidean projection onto `{v : ‖v‖ ≤ radius}`.
pub fn project_ball(v: &Vector, radius: f64) -> Result<Vector> {
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::InvalidInput(format!(
            "ball radius must be positive, got {radius}"
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(
            "cannot project a non-finite vector".into(),
        ));
    }
    Ok(ball_projection(v.clone(), radius))
}

/// `d_β = −f_β · ∇g` with `f_β` stored `n_β × n_f`.
pub fn direction_beta(f_sub: &Matrix, grad_g: &Vector) -> Result<Vector> {
    if f_sub.ncols() != grad_g.len() {
        return Err(Error::shape("direction_beta", f_sub.ncols(), grad_g.len()));
    }
    Ok(-(f_sub * grad_g))
}

/// `d_θ = γ · Ψ_θ · (f − Ψ)` with `Ψ_θ` stored `n_θ × n_f`.
pub fn direction_theta(
    psi_sub: &Matrix,
    f_val: &Vector,
    psi_val: &Vector,
    tracking_gain: f64,
) -> Result<Vector> {
    if f_val.len() != psi_val.len() {
        return Err(Error::shape("direction_theta", f_val.len(), psi_val.len()));
    }
    if psi_sub.ncols() != f_val.len() {
        return Err(Error::shape(
            "direction_theta",
            psi_sub.ncols(),
            f_val.len(),
        ));
    }
    if !(tracking_gain > 0.0) {
        return Err(Error::InvalidInput(format!(
            "tracking gain must be positive, got {tracking_gain}"
        )));
    }
    Ok(psi_sub * (f_val - psi_val) * tracking_gain)
}

/// Everything one observation yields at the current iterate.
#[derive(Clone, Debug)]
pub struct StepEvaluation {
    pub f: Vector,
    pub psi: Vector,
    pub dir_beta: Vector,
    pub dir_theta: Vector,
}

/// Evaluates the oracles at `(β, θ)` for one sample and forms both directions.
pub fn evaluate<P: ProblemOracle>(
    problem: &P,
    beta: &Vector,
    theta: &Vector,
    sample: &StepSample<P::X, P::Y>,
    tracking_gain: f64,
) -> Result<StepEvaluation> {
    let dims = problem.dims();
    let f = problem.f_value(&sample.x, &sample.y, beta)?;
    if f.len() != dims.n_f {
        return Err(Error::shape("f_value", dims.n_f, f.len()));
    }
    check_finite("f", &f)?;
    let f_sub = problem.f_subgrad(&sample.x, &sample.y, beta)?;
    if f_sub.shape() != (dims.n_beta, dims.n_f) {
        return Err(Error::shape(
            "f_subgrad",
            format!("{:?}", (dims.n_beta, dims.n_f)),
            format!("{:?}", f_sub.shape()),
        ));
    }
    let psi = problem.psi_value(&sample.x, theta)?;
    if psi.len() != dims.n_f {
        return Err(Error::shape("psi_value", dims.n_f, psi.len()));
    }
    check_finite("psi", &psi)?;
    let psi_sub = problem.psi_subgrad(&sample.x, theta)?;
    if psi_sub.shape() != (dims.n_theta, dims.n_f) {
        return Err(Error::shape(
            "psi_subgrad",
            format!("{:?}", (dims.n_theta, dims.n_f)),
            format!("{:?}", psi_sub.shape()),
        ));
    }
    let grad_g = problem.g_grad(&psi);
    let dir_beta = direction_beta(&f_sub, &grad_g)?;
    check_finite("direction_beta", &dir_beta)?;
    let dir_theta = direction_theta(&psi_sub, &f, &psi, tracking_gain)?;
    check_finite("direction_theta", &dir_theta)?;
    Ok(StepEvaluation {
        f,
        psi,
        dir_beta,
        dir_theta,
    })
}

fn apply<P: ProblemOracle>(
    state: &IterateState,
    eval: &StepEvaluation,
    problem: &P,
    config: &SolverConfig,
) -> Result<IterateState> {
    let tau = stepsize(&config.schedule, state.k);
    let beta = problem.project_beta(&state.beta + &eval.dir_beta * tau);
    check_finite("beta", &beta)?;
    let theta = ball_projection(&state.theta + &eval.dir_theta * tau, config.theta_radius);
    check_finite("theta", &theta)?;
    Ok(IterateState {
        beta,
        theta,
        k: state.k + 1,
    })
}

/// One iteration of the method for a freshly drawn sample.
pub fn step<P: ProblemOracle>(
    state: &IterateState,
    sample: &StepSample<P::X, P::Y>,
    problem: &P,
    config: &SolverConfig,
) -> Result<IterateState> {
    let eval = evaluate(
        problem,
        &state.beta,
        &state.theta,
        sample,
        config.tracking_gain,
    )?;
    apply(state, &eval, problem, config)
}

/// Starting point: zero vectors unless the config overrides them, projected
/// onto the feasible sets.
pub fn initial_state<P: ProblemOracle>(problem: &P, config: &SolverConfig) -> Result<IterateState> {
    let dims = problem.dims();
    let from = |init: &Option<Vec<f64>>, n: usize, what: &'static str| -> Result<Vector> {
        match init {
            None => Ok(Vector::zeros(n)),
            Some(v) if v.len() == n => Ok(Vector::from_column_slice(v)),
            Some(v) => Err(Error::shape(what, n, v.len())),
        }
    };
    let beta = problem.project_beta(from(&config.initial_beta, dims.n_beta, "initial_beta")?);
    let theta = ball_projection(
        from(&config.initial_theta, dims.n_theta, "initial_theta")?,
        config.theta_radius,
    );
    Ok(IterateState { beta, theta, k: 0 })
}

/// Observer invoked on recorded rows of a run. A hook fills in the parts of
/// the record it is responsible for (test metrics, exact diagnostics, ...).
pub trait MetricsHook<P: ProblemOracle> {
    /// Observe every `cadence()` iterations (and always at the final one).
    fn cadence(&self) -> u64;

    fn observe(
        &mut self,
        problem: &P,
        state: &IterateState,
        record: &mut TraceRecord,
    ) -> Result<()>;
}

/// A run that stopped early, with everything recorded before the failure.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct RunFailure {
    #[source]
    pub error: Error,
    pub partial: RunTrace,
}

impl From<RunFailure> for Error {
    fn from(f: RunFailure) -> Self {
        f.error
    }
}

/// Runs `config.iterations` steps from the initial state.
///
/// Record `k` describes the iterate `(β^k, θ^k)`: the stepsize `τ_k`, the
/// training quantities of the sample used to leave it (absent on the final
/// row), and whatever the hooks add. Exactly one sample is drawn per
/// iteration from the training stream, so traces are reproducible from
/// `(seed, config, problem)` and independent of cadences.
pub fn run<P: ProblemOracle>(
    problem: &P,
    config: &SolverConfig,
    hooks: &mut [&mut dyn MetricsHook<P>],
) -> std::result::Result<RunTrace, RunFailure> {
    let mut records = Vec::new();
    let fail = |error: Error, records: Vec<TraceRecord>, state: Option<IterateState>| RunFailure {
        error,
        partial: RunTrace {
            records,
            final_state: state,
        },
    };
    if let Err(e) = config.validate() {
        return Err(fail(e, records, None));
    }
    let mut state = match initial_state(problem, config) {
        Ok(s) => s,
        Err(e) => return Err(fail(e, records, None)),
    };
    let mut rng = rng::stream(config.seed, TRAIN_STREAM);
    let cadence = config.effective_metrics_cadence();
    let last = config.iterations;

    loop {
        let k = state.k;
        let is_last = k == last;
        let mut record = (k % cadence == 0 || is_last)
            .then(|| TraceRecord::new(k, stepsize(&config.schedule, k)));
        if let Some(rec) = record.as_mut() {
            for hook in hooks.iter_mut() {
                let every = hook.cadence().max(1);
                if k % every == 0 || is_last {
                    if let Err(e) = hook
                        .observe(problem, &state, rec)
                        .and_then(|()| rec.check_finite())
                    {
                        let e = Error::AtIteration {
                            k,
                            source: Box::new(e),
                        };
                        return Err(fail(e, records, Some(state)));
                    }
                }
            }
        }
        if is_last {
            records.extend(record);
            break;
        }
        let sample = problem.sample(&mut rng);
        let next = evaluate(
            problem,
            &state.beta,
            &state.theta,
            &sample,
            config.tracking_gain,
        )
        .and_then(|eval| {
            if let Some(rec) = record.as_mut() {
                rec.train = Some(TrainMetrics {
                    g_f: problem.g_value(&eval.f),
                    g_psi: problem.g_value(&eval.psi),
                    q: 0.5 * (&eval.f - &eval.psi).norm_squared(),
                });
                rec.check_finite()?;
            }
            apply(&state, &eval, problem, config)
        });
        match next {
            Ok(next) => {
                records.extend(record);
                state = next;
            }
            Err(e) => {
                records.extend(record.filter(|r| r.check_finite().is_ok()));
                let e = Error::AtIteration {
                    k,
                    source: Box::new(e),
                };
                return Err(fail(e, records, Some(state)));
            }
        }
    }

    Ok(RunTrace {
        records,
        final_state: Some(state),
    })
}
