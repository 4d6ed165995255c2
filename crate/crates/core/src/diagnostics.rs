//! Exact objective quantities, regularity constants and statistical checks.
//!
//! For a problem with a finite `X`-law `w` and closed-form
//! `F(x, β) = E[f | X = x]`:
//!
//! ```text
//! Q(β,θ)   = ½ Σ_x w(x) ‖F(x,β) − Ψ(x,θ)‖²
//! G(β)     = Σ_x w(x) g(F(x,β))
//! Δ^λ(β,θ) = Σ_x w(x) [g(F) − g(Ψ) − ⟨∇g(Ψ), F − Ψ⟩ + (λ/2)‖F − Ψ‖²]
//! W        = G + α Δ^λ
//! ```
//!
//! For a linear tracking model `Ψ(x,θ) = ψ(x)ᵀθ`, the Gram matrix
//! `Σ_x w(x) ψ(x)ψ(x)ᵀ` gives the Łojasiewicz constant
//! `M = 1/(2 λ_min)` with `Q ≤ M ‖Q_θ‖²` whenever `F` is representable.

use nalgebra::{Cholesky, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::oracles::{
    ExactOracle, LinearTracking, Matrix, OracleConstants, ProblemOracle, StepSample, Vector,
};
use crate::rng::{self, TEST_STREAM};
use crate::solver::{direction_theta, evaluate, IterateState, MetricsHook};
use crate::trace::{ExactMetrics, TraceRecord};

pub use crate::trace::TestMetrics;

/// Smallest eigenvalue accepted as nonsingular.
pub const MIN_EIGENVALUE: f64 = 1e-12;
pub const EIGEN_TOL: f64 = 1e-10;
const EIGEN_MAX_ITER: usize = 10_000;
pub const DENSE_EIGEN_MAX_DIM: usize = 500;

/// Number of standard errors allowed in Monte-Carlo comparisons.
pub const MC_SIGMAS: f64 = 4.0;

fn support_values<P: ExactOracle>(
    problem: &P,
    beta: &Vector,
    theta: &Vector,
) -> Result<Vec<(f64, Vector, Vector)>> {
    let f = problem.exact_f_on_support(beta)?;
    problem
        .x_law()
        .iter()
        .zip(f)
        .map(|((x, w), f)| Ok((*w, f, problem.psi_value(x, theta)?)))
        .collect()
}

/// `Q(β, θ)` under the exact `X`-law.
pub fn exact_q<P: ExactOracle>(problem: &P, beta: &Vector, theta: &Vector) -> Result<f64> {
    Ok(support_values(problem, beta, theta)?
        .iter()
        .map(|(w, f, psi)| 0.5 * w * (f - psi).norm_squared())
        .sum())
}

/// `G(β)`, the objective.
pub fn exact_g<P: ExactOracle>(problem: &P, beta: &Vector) -> Result<f64> {
    let f = problem.exact_f_on_support(beta)?;
    Ok(problem
        .x_law()
        .iter()
        .zip(&f)
        .map(|((_, w), f)| w * problem.g_value(f))
        .sum())
}

fn check_nonnegative(name: &str, value: f64) -> Result<()> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "{name} must be nonnegative, got {value}"
        )))
    }
}

/// `Δ^λ(β, θ)`.
pub fn bregman_delta<P: ExactOracle>(
    problem: &P,
    beta: &Vector,
    theta: &Vector,
    lambda: f64,
) -> Result<f64> {
    check_nonnegative("lambda", lambda)?;
    Ok(support_values(problem, beta, theta)?
        .iter()
        .map(|(w, f, psi)| {
            let gap = f - psi;
            let linear = problem.g_grad(psi).dot(&gap);
            w * (problem.g_value(f) - problem.g_value(psi) - linear
                + 0.5 * lambda * gap.norm_squared())
        })
        .sum())
}

/// `W = G + αΔ^λ`.
pub fn lyapunov_w<P: ExactOracle>(
    problem: &P,
    beta: &Vector,
    theta: &Vector,
    alpha: f64,
    lambda: f64,
) -> Result<f64> {
    check_nonnegative("alpha", alpha)?;
    let g = exact_g(problem, beta)?;
    if alpha == 0.0 {
        return Ok(g);
    }
    Ok(g + alpha * bregman_delta(problem, beta, theta, lambda)?)
}

/// `Σ_x w(x) ψ(x)ψ(x)ᵀ`, `n_θ × n_θ`.
pub fn gram_matrix<P: ExactOracle + LinearTracking>(problem: &P) -> Matrix {
    let n = problem.dims().n_theta;
    let mut gram = Matrix::zeros(n, n);
    for (x, w) in problem.x_law() {
        let psi = problem.features(x);
        gram.gemm(*w, &psi, &psi.transpose(), 1.0);
    }
    // Accumulated rank-one updates are symmetric only up to rounding.
    (&gram + gram.transpose()) * 0.5
}

/// Extreme eigenvalues of a symmetric matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Spectrum {
    pub min: f64,
    pub max: f64,
}

fn check_square_symmetric(m: &Matrix) -> Result<()> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(Error::shape(
            "gram",
            "nonempty square",
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    let asym = (m - m.transpose()).amax();
    if asym > 1e-12 * m.amax().max(1.0) {
        return Err(Error::InvalidInput(format!(
            "matrix is not symmetric (asymmetry {asym:e})"
        )));
    }
    Ok(())
}

/// Smallest eigenvalue by inverse power iteration on the Cholesky factor,
/// falling back to a dense eigendecomposition when the iteration stalls.
/// Fails with a condition-violated error when the matrix is numerically
/// singular or indefinite.
pub fn min_eigenvalue(m: &Matrix) -> Result<f64> {
    check_square_symmetric(m)?;
    let n = m.nrows();
    let scale = m.amax();
    let singular = || {
        Error::ConditionViolated(format!(
            "Gram matrix is numerically singular (smallest eigenvalue below {MIN_EIGENVALUE:e})"
        ))
    };
    let Some(chol) = Cholesky::new(m.clone()) else {
        return Err(singular());
    };
    let mut x = Vector::from_fn(n, |i, _| 1.0 + i as f64 / n as f64);
    x /= x.norm();
    let mut estimate = None;
    for _ in 0..EIGEN_MAX_ITER {
        let mut y = chol.solve(&x);
        let norm = y.norm();
        if !norm.is_finite() || norm == 0.0 {
            break;
        }
        y /= norm;
        let mx = m * &y;
        let rayleigh = y.dot(&mx);
        let residual = (mx - &y * rayleigh).norm();
        x = y;
        if residual <= EIGEN_TOL * scale.max(f64::MIN_POSITIVE) {
            estimate = Some(rayleigh);
            break;
        }
    }
    let lambda = match estimate {
        Some(l) => l,
        None if n <= DENSE_EIGEN_MAX_DIM => SymmetricEigen::new(m.clone()).eigenvalues.min(),
        None => {
            return Err(Error::numerical(
                "min eigenvalue",
                "inverse power iteration did not converge",
            ))
        }
    };
    if !(lambda > MIN_EIGENVALUE) {
        return Err(singular());
    }
    Ok(lambda)
}

pub fn spectrum(m: &Matrix) -> Result<Spectrum> {
    check_square_symmetric(m)?;
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    Ok(Spectrum {
        min: eig.min(),
        max: eig.max(),
    })
}

/// `M = 1/(2 λ_min(Gram))`.
pub fn lojasiewicz_m(gram: &Matrix) -> Result<f64> {
    Ok(1.0 / (2.0 * min_eigenvalue(gram)?))
}

/// The tracking gain above which the method provably converges:
/// `2 L̄_f² M L_∇g`.
pub fn tracking_gain_threshold(l_f_bar: f64, m: f64, l_grad_g: f64) -> f64 {
    2.0 * l_f_bar * l_f_bar * m * l_grad_g
}

/// The lower bound on `γ` for `(α, λ)`, or `None` when `λ` does not exceed
/// `2 L̄_Ψ² M L_∇g`.
pub fn theorem48_gamma_bound(
    alpha: f64,
    lambda: f64,
    l_f_bar: f64,
    l_psi_bar: f64,
    m: f64,
    l_grad_g: f64,
) -> Option<f64> {
    let floor = 2.0 * l_psi_bar * l_psi_bar * m * l_grad_g;
    if !(lambda > floor) || !(alpha > 0.0) {
        return None;
    }
    let top = (alpha + 1.0) * l_grad_g + alpha * lambda;
    Some(l_f_bar * l_f_bar * m * top * top / (2.0 * alpha * (lambda - floor)))
}

/// True iff `λ > 2L̄_Ψ²ML_∇g` and `γ` exceeds [`theorem48_gamma_bound`].
pub fn theorem48_condition(
    alpha: f64,
    lambda: f64,
    gamma: f64,
    l_f_bar: f64,
    l_psi_bar: f64,
    m: f64,
    l_grad_g: f64,
) -> bool {
    theorem48_gamma_bound(alpha, lambda, l_f_bar, l_psi_bar, m, l_grad_g)
        .is_some_and(|bound| gamma > bound)
}

/// Parameters `(α, λ)` of the Lyapunov function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovParams {
    pub alpha: f64,
    pub lambda: f64,
}

impl LyapunovParams {
    /// `λ = 2L_∇g(1 + 2L̄_Ψ²M)`, `α = L_∇g/(L_∇g + λ)`.
    pub fn default_for(l_psi_bar: f64, m: f64, l_grad_g: f64) -> Self {
        let lambda = 2.0 * l_grad_g * (1.0 + 2.0 * l_psi_bar * l_psi_bar * m);
        LyapunovParams {
            alpha: l_grad_g / (l_grad_g + lambda),
            lambda,
        }
    }
}

/// Constants the analysis needs for a linear-tracking problem.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Regularity {
    pub l_grad_g: f64,
    pub l_f_bar: f64,
    pub l_psi_bar: f64,
    pub m: f64,
    pub gram: Spectrum,
}

impl Regularity {
    pub fn of<P: ExactOracle + LinearTracking>(problem: &P) -> Result<Self> {
        let c = problem.constants();
        let gram = gram_matrix(problem);
        let m = lojasiewicz_m(&gram)?;
        Ok(Regularity {
            l_grad_g: OracleConstants::require(c.l_grad_g, "L_grad_g")?,
            l_f_bar: OracleConstants::require(c.l_f_bar, "L_f_bar")?,
            l_psi_bar: OracleConstants::require(c.l_psi_bar, "L_psi_bar")?,
            m,
            gram: spectrum(&gram)?,
        })
    }

    pub fn gamma_threshold(&self) -> f64 {
        tracking_gain_threshold(self.l_f_bar, self.m, self.l_grad_g)
    }

    pub fn default_lyapunov(&self) -> LyapunovParams {
        LyapunovParams::default_for(self.l_psi_bar, self.m, self.l_grad_g)
    }

    pub fn theorem48_gamma_bound(&self, params: LyapunovParams) -> Option<f64> {
        theorem48_gamma_bound(
            params.alpha,
            params.lambda,
            self.l_f_bar,
            self.l_psi_bar,
            self.m,
            self.l_grad_g,
        )
    }
}

/// Exact `Q_θ = −Σ_x w(x) ψ(x)(F(x,β) − ψ(x)ᵀθ)` for a linear tracking model.
pub fn q_theta<P: ExactOracle + LinearTracking>(
    problem: &P,
    beta: &Vector,
    theta: &Vector,
) -> Result<Vector> {
    let f = problem.exact_f_on_support(beta)?;
    let mut grad = Vector::zeros(problem.dims().n_theta);
    for ((x, w), f) in problem.x_law().iter().zip(&f) {
        let psi = problem.features(x);
        let gap = f - psi.tr_mul(theta);
        grad.gemv(-*w, &psi, &gap, 1.0);
    }
    Ok(grad)
}

/// The averages reported on a held-out set.
pub fn test_metrics<P: ProblemOracle>(
    problem: &P,
    dataset: &[StepSample<P::X, P::Y>],
    beta: &Vector,
    theta: &Vector,
    tracking_gain: f64,
) -> Result<TestMetrics> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("test set is empty".into()));
    }
    let dims = problem.dims();
    let (mut g_f, mut g_psi, mut q) = (0.0, 0.0, 0.0);
    let mut d_beta = Vector::zeros(dims.n_beta);
    let mut d_theta = Vector::zeros(dims.n_theta);
    for sample in dataset {
        let eval = evaluate(problem, beta, theta, sample, tracking_gain)?;
        g_f += problem.g_value(&eval.f);
        g_psi += problem.g_value(&eval.psi);
        q += 0.5 * (&eval.f - &eval.psi).norm_squared();
        d_beta += &eval.dir_beta;
        d_theta += &eval.dir_theta;
    }
    let n = dataset.len() as f64;
    Ok(TestMetrics {
        mean_g_f: g_f / n,
        mean_g_psi: g_psi / n,
        mean_q: q / n,
        dir_beta_norm: d_beta.norm() / n,
        dir_theta_norm: d_theta.norm() / n,
    })
}

/// A held-out set drawn from its own stream of the run seed.
pub fn draw_test_set<P: ProblemOracle>(
    problem: &P,
    size: usize,
    seed: u64,
) -> Vec<StepSample<P::X, P::Y>> {
    let mut rng = rng::stream(seed, TEST_STREAM);
    (0..size).map(|_| problem.sample(&mut rng)).collect()
}

/// Monte-Carlo comparison of a vector estimate against its exact value.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct McComparison {
    pub samples: usize,
    pub estimate: Vec<f64>,
    pub exact: Vec<f64>,
    /// Per-component `4σ/√n`.
    pub bound: Vec<f64>,
    /// Largest `|estimate − exact| / bound` over components.
    pub worst_ratio: f64,
    pub passed: bool,
}

/// Streaming per-component mean and variance.
#[derive(Clone, Debug)]
pub struct MeanAccumulator {
    n: usize,
    mean: Vector,
    m2: Vector,
}

impl MeanAccumulator {
    pub fn new(dim: usize) -> Self {
        MeanAccumulator {
            n: 0,
            mean: Vector::zeros(dim),
            m2: Vector::zeros(dim),
        }
    }

    pub fn push(&mut self, v: &Vector) {
        self.n += 1;
        let delta = v - &self.mean;
        self.mean.axpy(1.0 / self.n as f64, &delta, 1.0);
        let after = v - &self.mean;
        self.m2 += delta.component_mul(&after);
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    /// Sample standard deviations.
    pub fn std(&self) -> Vector {
        let denom = (self.n.max(2) - 1) as f64;
        self.m2.map(|m| (m / denom).max(0.0).sqrt())
    }

    /// Compare the mean with `exact` at `MC_SIGMAS` standard errors. A
    /// relative slack of `1e−12` absorbs rounding when the variance is 0.
    pub fn compare(&self, exact: &Vector) -> McComparison {
        let root_n = (self.n as f64).sqrt();
        let std = self.std();
        let mut worst: f64 = 0.0;
        let mut passed = true;
        let mut bound = Vec::with_capacity(exact.len());
        for i in 0..exact.len() {
            let b = MC_SIGMAS * std[i] / root_n;
            let slack = 1e-12 * (1.0 + exact[i].abs());
            let diff = (self.mean[i] - exact[i]).abs();
            passed &= diff <= b + slack;
            let ratio = if b > 0.0 {
                diff / b
            } else if diff <= slack {
                0.0
            } else {
                f64::INFINITY
            };
            worst = worst.max(ratio);
            bound.push(b);
        }
        McComparison {
            samples: self.n,
            estimate: self.mean.iter().copied().collect(),
            exact: exact.iter().copied().collect(),
            bound,
            worst_ratio: worst,
            passed,
        }
    }
}

/// Signature of a `θ`-direction rule `(Ψ_θ, f, Ψ, γ) ↦ d_θ`.
pub type ThetaDirection = fn(&Matrix, &Vector, &Vector, f64) -> Result<Vector>;

/// Checks that the sampled `θ` direction is an unbiased estimate of
/// `−γ Q_θ(β, θ)`.
pub fn direction_unbiasedness_check<P, R>(
    problem: &P,
    beta: &Vector,
    theta: &Vector,
    tracking_gain: f64,
    n: usize,
    rng: &mut R,
) -> Result<McComparison>
where
    P: ExactOracle + LinearTracking,
    R: Rng + ?Sized,
{
    direction_unbiasedness_check_with(problem, beta, theta, tracking_gain, n, rng, direction_theta)
}

/// As [`direction_unbiasedness_check`] with a caller-supplied direction
/// rule, so that a deliberately wrong rule can be shown to fail.
pub fn direction_unbiasedness_check_with<P, R>(
    problem: &P,
    beta: &Vector,
    theta: &Vector,
    tracking_gain: f64,
    n: usize,
    rng: &mut R,
    direction: ThetaDirection,
) -> Result<McComparison>
where
    P: ExactOracle + LinearTracking,
    R: Rng + ?Sized,
{
    if n < 2 {
        return Err(Error::InvalidInput("need at least two samples".into()));
    }
    let mut acc = MeanAccumulator::new(problem.dims().n_theta);
    for _ in 0..n {
        let sample = problem.sample(rng);
        let f = problem.f_value(&sample.x, &sample.y, beta)?;
        let psi = problem.psi_value(&sample.x, theta)?;
        let psi_sub = problem.psi_subgrad(&sample.x, theta)?;
        acc.push(&direction(&psi_sub, &f, &psi, tracking_gain)?);
    }
    let exact = -q_theta(problem, beta, theta)? * tracking_gain;
    Ok(acc.compare(&exact))
}

/// Conditional Monte-Carlo check of `F(x, β)` at one `x`.
pub fn exact_f_agreement<P: ExactOracle, R: Rng + ?Sized>(
    problem: &P,
    x: &P::X,
    beta: &Vector,
    n: usize,
    rng: &mut R,
) -> Result<McComparison> {
    if n < 2 {
        return Err(Error::InvalidInput("need at least two samples".into()));
    }
    let mut acc = MeanAccumulator::new(problem.dims().n_f);
    for _ in 0..n {
        let y = problem.sample_y_given(x, rng);
        acc.push(&problem.f_value(x, &y, beta)?);
    }
    Ok(acc.compare(&problem.exact_f(x, beta)?))
}

/// Draws a point uniformly from the ball of the given radius.
pub fn random_in_ball<R: Rng + ?Sized>(dim: usize, radius: f64, rng: &mut R) -> Vector {
    let mut v = Vector::from_fn(dim, |_, _| StandardNormal.sample(rng));
    let norm = v.norm();
    if norm > 0.0 {
        let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
        v *= r / norm;
    }
    v
}

/// Draws a point uniformly from the sphere of the given radius.
pub fn random_on_sphere<R: Rng + ?Sized>(dim: usize, radius: f64, rng: &mut R) -> Vector {
    loop {
        let v = Vector::from_fn(dim, |_, _| StandardNormal.sample(rng));
        let norm = v.norm();
        if norm > 0.0 {
            return v * (radius / norm);
        }
    }
}

/// Outcome of checking an inequality at many random points.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub checked: usize,
    pub violations: usize,
    /// Smallest `rhs − lhs` seen; negative when violated.
    pub worst_margin: f64,
}

impl SweepReport {
    fn new() -> Self {
        SweepReport {
            checked: 0,
            violations: 0,
            worst_margin: f64::INFINITY,
        }
    }

    fn record(&mut self, margin: f64) {
        self.checked += 1;
        if !(margin >= 0.0) {
            self.violations += 1;
        }
        self.worst_margin = self.worst_margin.min(margin);
    }

    pub fn passed(&self) -> bool {
        self.violations == 0 && self.checked > 0
    }
}

/// Radii of the balls random `(β, θ)` are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepScales {
    pub beta: f64,
    pub theta: f64,
}

/// `Δ^λ ≥ −tol` at random pairs.
pub fn bregman_sweep<P: ExactOracle, R: Rng + ?Sized>(
    problem: &P,
    lambda: f64,
    scales: SweepScales,
    points: usize,
    tol: f64,
    rng: &mut R,
) -> Result<SweepReport> {
    let dims = problem.dims();
    let mut report = SweepReport::new();
    for _ in 0..points {
        let beta = random_in_ball(dims.n_beta, scales.beta, rng);
        let theta = random_in_ball(dims.n_theta, scales.theta, rng);
        report.record(bregman_delta(problem, &beta, &theta, lambda)? + tol);
    }
    Ok(report)
}

/// `Δ^λ ≤ tol` at exact tracking pairs `(β, θ̄(β))`.
pub fn bregman_tracking_sweep<P: ExactOracle, R: Rng + ?Sized>(
    problem: &P,
    lambda: f64,
    scales: SweepScales,
    points: usize,
    tol: f64,
    rng: &mut R,
) -> Result<SweepReport> {
    let dims = problem.dims();
    let mut report = SweepReport::new();
    for _ in 0..points {
        let beta = random_in_ball(dims.n_beta, scales.beta, rng);
        let theta = problem.tracking_theta(&beta).ok_or_else(|| {
            Error::Unsupported("problem cannot construct tracking parameters".into())
        })?;
        report.record(tol - bregman_delta(problem, &beta, &theta, lambda)?);
    }
    Ok(report)
}

/// `Q ≤ M‖Q_θ‖² + tol` at random pairs.
pub fn lojasiewicz_sweep<P: ExactOracle + LinearTracking, R: Rng + ?Sized>(
    problem: &P,
    m: f64,
    scales: SweepScales,
    points: usize,
    tol: f64,
    rng: &mut R,
) -> Result<SweepReport> {
    let dims = problem.dims();
    let mut report = SweepReport::new();
    for _ in 0..points {
        let beta = random_in_ball(dims.n_beta, scales.beta, rng);
        let theta = random_in_ball(dims.n_theta, scales.theta, rng);
        let q = exact_q(problem, &beta, &theta)?;
        let grad = q_theta(problem, &beta, &theta)?;
        report.record(m * grad.norm_squared() + tol - q);
    }
    Ok(report)
}

/// Radius beyond which `⟨θ, Q_θ(β,θ)⟩ > 0` for a given `β`:
/// `⟨θ, Q_θ⟩ ≥ λ_min‖θ‖² − ‖θ‖·‖E[ψF]‖` and by Cauchy–Schwarz
/// `‖E[ψF]‖ ≤ (tr(Gram)·E‖F‖²)^{1/2}`.
pub fn coercivity_radius<P: ExactOracle + LinearTracking>(
    problem: &P,
    gram: &Matrix,
    lambda_min: f64,
    beta: &Vector,
) -> Result<f64> {
    let f = problem.exact_f_on_support(beta)?;
    let second_moment: f64 = problem
        .x_law()
        .iter()
        .zip(&f)
        .map(|((_, w), f)| w * f.norm_squared())
        .sum();
    Ok((gram.trace() * second_moment).sqrt() / lambda_min)
}

/// `⟨θ, Q_θ⟩ > 0` for `θ` on the sphere of radius `factor × coercivity_radius`.
pub fn coercivity_sweep<P: ExactOracle + LinearTracking, R: Rng + ?Sized>(
    problem: &P,
    beta_scale: f64,
    factor: f64,
    points: usize,
    rng: &mut R,
) -> Result<SweepReport> {
    let dims = problem.dims();
    let gram = gram_matrix(problem);
    let lambda_min = min_eigenvalue(&gram)?;
    let mut report = SweepReport::new();
    for _ in 0..points {
        let beta = random_in_ball(dims.n_beta, beta_scale, rng);
        let radius = factor * coercivity_radius(problem, &gram, lambda_min, &beta)?;
        let theta = random_on_sphere(dims.n_theta, radius.max(f64::MIN_POSITIVE), rng);
        let inner = theta.dot(&q_theta(problem, &beta, &theta)?);
        // Strict positivity is the claim; a zero margin counts as failure.
        report.record(if inner > 0.0 {
            inner
        } else {
            -inner.abs() - f64::MIN_POSITIVE
        });
    }
    Ok(report)
}

/// Empirical check that sampled subgradients and loss gradients respect the
/// published bounds `L̄_f`, `L̄_Ψ`, `L_g`.
pub fn constant_bounds_sweep<P: ProblemOracle, R: Rng + ?Sized>(
    problem: &P,
    scales: SweepScales,
    points: usize,
    rng: &mut R,
) -> Result<SweepReport> {
    let c = problem.constants();
    let l_f = OracleConstants::require(c.l_f_bar, "L_f_bar")?;
    let l_psi = OracleConstants::require(c.l_psi_bar, "L_psi_bar")?;
    let l_g = OracleConstants::require(c.l_g, "L_g")?;
    let dims = problem.dims();
    let spectral = |m: &Matrix| m.clone().singular_values().max();
    let mut report = SweepReport::new();
    for _ in 0..points {
        let sample = problem.sample(rng);
        let beta = random_in_ball(dims.n_beta, scales.beta, rng);
        let theta = random_in_ball(dims.n_theta, scales.theta, rng);
        let f_sub = problem.f_subgrad(&sample.x, &sample.y, &beta)?;
        let psi_sub = problem.psi_subgrad(&sample.x, &theta)?;
        let u = random_in_ball(dims.n_f, 10.0 * l_g.max(1.0), rng);
        let slack = 1e-12;
        let margin = (l_f * (1.0 + slack) - spectral(&f_sub))
            .min(l_psi * (1.0 + slack) - spectral(&psi_sub))
            .min(l_g * (1.0 + slack) - problem.g_grad(&u).norm());
        report.record(margin);
    }
    Ok(report)
}

/// Least-squares slope of `ys` against `xs`.
pub fn regression_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    })
}

/// Noise-tolerant descent summary of a logged series.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DescentSummary {
    /// Regression slope over the final half of the logged points.
    pub trailing_slope: f64,
    pub final_value: f64,
    /// Median over the first tenth of the logged points.
    pub early_median: f64,
    pub passed: bool,
}

/// Slope over the last 50% of the points `≤ 0` and final value not above
/// the median of the first 10%.
pub fn descent_summary(ks: &[f64], values: &[f64]) -> Option<DescentSummary> {
    let n = values.len();
    if ks.len() != n || n < 4 {
        return None;
    }
    let half = n / 2;
    let trailing_slope = regression_slope(&ks[half..], &values[half..])?;
    let mut early: Vec<f64> = values[..(n / 10).max(1)].to_vec();
    let early_median = median(&mut early)?;
    let final_value = values[n - 1];
    Some(DescentSummary {
        trailing_slope,
        final_value,
        early_median,
        passed: trailing_slope <= 0.0 && final_value <= early_median,
    })
}

/// `k` and Lyapunov values of the rows that carry them.
pub fn lyapunov_series(records: &[TraceRecord]) -> (Vec<f64>, Vec<f64>) {
    records
        .iter()
        .filter_map(|r| r.exact.and_then(|e| e.lyapunov_w).map(|w| (r.k as f64, w)))
        .unzip()
}

/// Everything reported about a `(β, θ)` pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    #[serde(rename = "exact_Q")]
    pub exact_q: f64,
    #[serde(rename = "exact_G")]
    pub exact_g: f64,
    pub bregman_delta: f64,
    #[serde(rename = "lyapunov_W")]
    pub lyapunov_w: f64,
    pub alpha: f64,
    pub lambda: f64,
    #[serde(rename = "lojasiewicz_M")]
    pub lojasiewicz_m: f64,
    pub gram_lambda_min: f64,
    pub gram_lambda_max: f64,
    pub gamma_threshold: f64,
    pub tracking_gain: f64,
    pub gain_exceeds_threshold: bool,
    pub theorem48_gamma_bound: Option<f64>,
    pub theorem48_condition: bool,
    pub constants: OracleConstants,
}

impl DiagnosticsReport {
    pub fn compute<P: ExactOracle + LinearTracking>(
        problem: &P,
        beta: &Vector,
        theta: &Vector,
        tracking_gain: f64,
        params: Option<LyapunovParams>,
    ) -> Result<Self> {
        let reg = Regularity::of(problem)?;
        let params = params.unwrap_or_else(|| reg.default_lyapunov());
        let exact_g = exact_g(problem, beta)?;
        let delta = bregman_delta(problem, beta, theta, params.lambda)?;
        let bound = reg.theorem48_gamma_bound(params);
        let gamma_threshold = reg.gamma_threshold();
        Ok(DiagnosticsReport {
            exact_q: exact_q(problem, beta, theta)?,
            exact_g,
            bregman_delta: delta,
            lyapunov_w: exact_g + params.alpha * delta,
            alpha: params.alpha,
            lambda: params.lambda,
            lojasiewicz_m: reg.m,
            gram_lambda_min: reg.gram.min,
            gram_lambda_max: reg.gram.max,
            gamma_threshold,
            tracking_gain,
            gain_exceeds_threshold: tracking_gain > gamma_threshold,
            theorem48_gamma_bound: bound,
            theorem48_condition: bound.is_some_and(|b| tracking_gain > b),
            constants: problem.constants(),
        })
    }
}

/// Fills in held-out metrics on a fixed test set.
pub struct TestSetHook<P: ProblemOracle> {
    pub data: Vec<StepSample<P::X, P::Y>>,
    pub tracking_gain: f64,
    pub cadence: u64,
}

impl<P: ProblemOracle> MetricsHook<P> for TestSetHook<P> {
    fn cadence(&self) -> u64 {
        self.cadence
    }

    fn observe(
        &mut self,
        problem: &P,
        state: &IterateState,
        record: &mut TraceRecord,
    ) -> Result<()> {
        record.test = Some(test_metrics(
            problem,
            &self.data,
            &state.beta,
            &state.theta,
            self.tracking_gain,
        )?);
        Ok(())
    }
}

/// Fills in exact `Q`, `G` and, when parameters are given, `W`.
pub struct ExactDiagnosticsHook {
    pub cadence: u64,
    pub lyapunov: Option<LyapunovParams>,
}

impl<P: ExactOracle> MetricsHook<P> for ExactDiagnosticsHook {
    fn cadence(&self) -> u64 {
        self.cadence
    }

    fn observe(
        &mut self,
        problem: &P,
        state: &IterateState,
        record: &mut TraceRecord,
    ) -> Result<()> {
        let q = exact_q(problem, &state.beta, &state.theta)?;
        let g = exact_g(problem, &state.beta)?;
        let lyapunov_w = match self.lyapunov {
            Some(p) => {
                Some(g + p.alpha * bregman_delta(problem, &state.beta, &state.theta, p.lambda)?)
            }
            None => None,
        };
        record.exact = Some(ExactMetrics { q, g, lyapunov_w });
        Ok(())
    }
}
