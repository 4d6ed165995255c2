//! Uplift modeling as conditional stochastic optimization.
//!
//! Individuals have a discrete feature `x`, receive treatment `T = 1` with
//! known probability `Π(x)` (otherwise `T = −1`) and show an outcome `Y`.
//! The transformed response
//!
//! ```text
//! Z = Y/Π(x)        if T = 1
//! Z = −Y/(1 − Π(x)) if T = −1
//! ```
//!
//! has `E[Z | X = x] = m₁(x) − m₋₁(x) = u(x)`, the uplift. A linear model
//! `ψ(x)ᵀβ` is fit by minimizing `E[g(E[(ψ(X)ᵀβ, Z) | X])]` with
//! `g(u₁, u₂) = Huber(u₁ − u₂)`.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracles::{
    huber_grad, huber_value, Dims, ExactOracle, HuberLoss, LinearTracking, Matrix, OracleConstants,
    ProblemOracle, StepSample, Vector,
};
use crate::rng::{self, GENERATOR_STREAM};
use crate::solver::ball_projection;

pub const DEFAULT_N_X: usize = 20;
pub const DEFAULT_NOISE_STD: f64 = 0.5;
pub const DEFAULT_PROPENSITY_RANGE: (f64, f64) = (0.2, 0.8);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, try_from = "RawInstance")]
pub struct UpliftInstance {
    pub n_x: usize,
    /// `Π(x)`, strictly inside `(0, 1)`.
    pub propensity: Vec<f64>,
    /// Mean outcome under treatment, `m₁(x)`.
    pub m1: Vec<f64>,
    /// Mean outcome under control, `m₋₁(x)`.
    pub m_1: Vec<f64>,
    pub noise_std: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInstance {
    n_x: usize,
    propensity: Vec<f64>,
    m1: Vec<f64>,
    m_1: Vec<f64>,
    noise_std: f64,
    #[serde(default)]
    seed: Option<u64>,
}

impl TryFrom<RawInstance> for UpliftInstance {
    type Error = Error;

    fn try_from(raw: RawInstance) -> Result<Self> {
        let mut instance = UpliftInstance::new(raw.propensity, raw.m1, raw.m_1, raw.noise_std)?;
        if instance.n_x != raw.n_x {
            return Err(Error::shape("n_x", raw.n_x, instance.n_x));
        }
        instance.seed = raw.seed;
        Ok(instance)
    }
}

impl UpliftInstance {
    pub fn new(propensity: Vec<f64>, m1: Vec<f64>, m_1: Vec<f64>, noise_std: f64) -> Result<Self> {
        let n_x = propensity.len();
        if n_x == 0 {
            return Err(Error::InvalidInput(
                "uplift instance needs at least one feature value".into(),
            ));
        }
        if m1.len() != n_x {
            return Err(Error::shape("m1", n_x, m1.len()));
        }
        if m_1.len() != n_x {
            return Err(Error::shape("m_1", n_x, m_1.len()));
        }
        if let Some((x, p)) = propensity
            .iter()
            .enumerate()
            .find(|(_, p)| !(**p > 0.0 && **p < 1.0))
        {
            return Err(Error::InvalidInput(format!(
                "propensity at x={x} must lie in (0, 1), got {p}"
            )));
        }
        if m1.iter().chain(&m_1).any(|m| !m.is_finite()) {
            return Err(Error::InvalidInput("outcome means must be finite".into()));
        }
        if !(noise_std.is_finite() && noise_std >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "noise_std must be nonnegative, got {noise_std}"
            )));
        }
        Ok(UpliftInstance {
            n_x,
            propensity,
            m1,
            m_1,
            noise_std,
            seed: None,
        })
    }

    /// Random instance: `Π(x)` uniform on `[0.2, 0.8]`, control means
    /// uniform on `[−1, 1]`, uplifts uniform on `[−1, 1]`.
    pub fn generate(n_x: usize, noise_std: f64, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, GENERATOR_STREAM);
        let (lo, hi) = DEFAULT_PROPENSITY_RANGE;
        let propensity = (0..n_x).map(|_| rng.random_range(lo..=hi)).collect();
        let m_1: Vec<f64> = (0..n_x).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let m1 = m_1
            .iter()
            .map(|m| m + rng.random_range(-1.0..=1.0))
            .collect();
        let mut instance = UpliftInstance::new(propensity, m1, m_1, noise_std)?;
        instance.seed = Some(seed);
        Ok(instance)
    }

    /// `u(x) = m₁(x) − m₋₁(x)`.
    pub fn uplift(&self, x: usize) -> f64 {
        self.m1[x] - self.m_1[x]
    }

    pub fn uplift_vector(&self) -> Vector {
        Vector::from_fn(self.n_x, |x, _| self.uplift(x))
    }

    /// One-hot `ψ(x)`.
    pub fn feature(&self, x: usize) -> Vector {
        let mut e = Vector::zeros(self.n_x);
        e[x] = 1.0;
        e
    }

    fn check_x(&self, x: usize) -> Result<()> {
        if x >= self.n_x {
            return Err(Error::InvalidInput(format!(
                "feature value {x} out of range for n_x={}",
                self.n_x
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// A raw observation and its transformed response.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpliftDraw {
    /// `+1` treated, `−1` control.
    pub t: i8,
    pub y: f64,
    pub z: f64,
}

/// `Z` from a raw `(x, T, Y)` triplet.
pub fn transformed_response(propensity: f64, t: i8, y: f64) -> f64 {
    if t == 1 {
        y / propensity
    } else {
        -y / (1.0 - propensity)
    }
}

fn draw_given<R: Rng + ?Sized>(instance: &UpliftInstance, x: usize, rng: &mut R) -> UpliftDraw {
    let p = instance.propensity[x];
    let treated = rng.random::<f64>() < p;
    let (t, mean) = if treated {
        (1, instance.m1[x])
    } else {
        (-1, instance.m_1[x])
    };
    let noise: f64 = StandardNormal.sample(rng);
    let y = mean + instance.noise_std * noise;
    UpliftDraw {
        t,
        y,
        z: transformed_response(p, t, y),
    }
}

/// `x` uniform, then `T`, `Y` and `Z`.
pub fn sample_uplift<R: Rng + ?Sized>(
    instance: &UpliftInstance,
    rng: &mut R,
) -> StepSample<usize, UpliftDraw> {
    let x = rng.random_range(0..instance.n_x);
    StepSample {
        x,
        y: draw_given(instance, x, rng),
    }
}

/// `F(x, β) = [ψ(x)ᵀβ, u(x)]`.
pub fn uplift_exact_f(instance: &UpliftInstance, x: usize, beta: &Vector) -> Result<Vector> {
    instance.check_x(x)?;
    if beta.len() != instance.n_x {
        return Err(Error::shape("beta", instance.n_x, beta.len()));
    }
    Ok(Vector::from_column_slice(&[beta[x], instance.uplift(x)]))
}

#[derive(Clone, Debug)]
pub struct UpliftProblem {
    instance: UpliftInstance,
    huber: HuberLoss,
    beta_radius: f64,
    theta_radius: f64,
    law: Vec<(usize, f64)>,
}

pub fn make_uplift_problem(
    instance: UpliftInstance,
    huber_delta: f64,
    beta_radius: f64,
    theta_radius: f64,
) -> Result<UpliftProblem> {
    let huber = HuberLoss::new(huber_delta)?;
    for (name, r) in [("beta_radius", beta_radius), ("theta_radius", theta_radius)] {
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::InvalidInput(format!(
                "{name} must be positive, got {r}"
            )));
        }
    }
    let n = instance.n_x;
    let law = (0..n).map(|x| (x, 1.0 / n as f64)).collect();
    Ok(UpliftProblem {
        instance,
        huber,
        beta_radius,
        theta_radius,
        law,
    })
}

impl UpliftProblem {
    pub fn instance(&self) -> &UpliftInstance {
        &self.instance
    }

    pub fn beta_radius(&self) -> f64 {
        self.beta_radius
    }

    pub fn theta_radius(&self) -> f64 {
        self.theta_radius
    }

    /// The minimizer `β = u` (every `ψ(x)ᵀβ` equals the uplift).
    pub fn exact_solution(&self) -> Vector {
        self.instance.uplift_vector()
    }

    fn difference(u: &Vector) -> Vector {
        Vector::from_element(1, u[0] - u[1])
    }

    fn check_len(&self, what: &'static str, v: &Vector, n: usize) -> Result<()> {
        if v.len() != n {
            return Err(Error::shape(what, n, v.len()));
        }
        Ok(())
    }
}

impl ProblemOracle for UpliftProblem {
    type X = usize;
    type Y = UpliftDraw;

    fn dims(&self) -> Dims {
        let n = self.instance.n_x;
        Dims {
            n_beta: n,
            n_theta: 2 * n,
            n_f: 2,
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> StepSample<usize, UpliftDraw> {
        sample_uplift(&self.instance, rng)
    }

    fn f_value(&self, x: &usize, y: &UpliftDraw, beta: &Vector) -> Result<Vector> {
        self.instance.check_x(*x)?;
        self.check_len("beta", beta, self.instance.n_x)?;
        Ok(Vector::from_column_slice(&[beta[*x], y.z]))
    }

    fn f_subgrad(&self, x: &usize, _y: &UpliftDraw, beta: &Vector) -> Result<Matrix> {
        self.instance.check_x(*x)?;
        self.check_len("beta", beta, self.instance.n_x)?;
        let mut m = Matrix::zeros(self.instance.n_x, 2);
        m[(*x, 0)] = 1.0;
        Ok(m)
    }

    fn psi_value(&self, x: &usize, theta: &Vector) -> Result<Vector> {
        self.instance.check_x(*x)?;
        let n = self.instance.n_x;
        self.check_len("theta", theta, 2 * n)?;
        Ok(Vector::from_column_slice(&[theta[*x], theta[n + *x]]))
    }

    fn psi_subgrad(&self, x: &usize, theta: &Vector) -> Result<Matrix> {
        self.instance.check_x(*x)?;
        self.check_len("theta", theta, 2 * self.instance.n_x)?;
        Ok(self.features(x))
    }

    fn g_value(&self, u: &Vector) -> f64 {
        huber_value(&Self::difference(u), self.huber.delta())
    }

    fn g_grad(&self, u: &Vector) -> Vector {
        let h = huber_grad(&Self::difference(u), self.huber.delta())[0];
        Vector::from_column_slice(&[h, -h])
    }

    fn project_beta(&self, beta: Vector) -> Vector {
        ball_projection(beta, self.beta_radius)
    }

    /// `∇g(u) = h'(u₁ − u₂)·(1, −1)`, so `‖∇g‖ ≤ √2·δ` and `∇g` is
    /// 2-Lipschitz. Both feature maps are one-hot with unit norm.
    fn constants(&self) -> OracleConstants {
        OracleConstants {
            l_g: Some(std::f64::consts::SQRT_2 * self.huber.delta()),
            l_grad_g: Some(2.0),
            l_f_bar: Some(1.0),
            l_psi_bar: Some(1.0),
            c_f: None,
            c_psi: Some(0.0),
        }
    }
}

impl ExactOracle for UpliftProblem {
    fn x_law(&self) -> &[(usize, f64)] {
        &self.law
    }

    fn exact_f(&self, x: &usize, beta: &Vector) -> Result<Vector> {
        uplift_exact_f(&self.instance, *x, beta)
    }

    fn sample_y_given<R: Rng + ?Sized>(&self, x: &usize, rng: &mut R) -> UpliftDraw {
        draw_given(&self.instance, *x, rng)
    }

    fn tracking_theta(&self, beta: &Vector) -> Option<Vector> {
        let n = self.instance.n_x;
        (beta.len() == n).then(|| {
            let mut theta = Vector::zeros(2 * n);
            theta.rows_mut(0, n).copy_from(beta);
            theta
                .rows_mut(n, n)
                .copy_from(&self.instance.uplift_vector());
            theta
        })
    }
}

impl LinearTracking for UpliftProblem {
    /// `2n_x × 2` block matrix `diag(ψ(x), ψ(x))`.
    fn features(&self, x: &usize) -> Matrix {
        let n = self.instance.n_x;
        let mut m = Matrix::zeros(2 * n, 2);
        m[(*x, 0)] = 1.0;
        m[(n + *x, 1)] = 1.0;
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::finite_diff_check;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn instance() -> UpliftInstance {
        UpliftInstance::generate(DEFAULT_N_X, DEFAULT_NOISE_STD, 5).unwrap()
    }

    #[test]
    fn noiseless_half_propensity_responses() {
        let inst = UpliftInstance::new(vec![0.5], vec![1.0], vec![0.0], 0.0).unwrap();
        let mut rng = rng::stream(0, 0);
        let mut seen = [false; 2];
        for _ in 0..200 {
            let z = sample_uplift(&inst, &mut rng).y.z;
            assert!(z == 2.0 || z == 0.0, "unexpected Z {z}");
            seen[(z == 2.0) as usize] = true;
        }
        assert_eq!(seen, [true, true]);
    }

    #[test]
    fn degenerate_propensities_are_rejected() {
        assert!(UpliftInstance::new(vec![0.0], vec![1.0], vec![0.0], 0.1).is_err());
        assert!(UpliftInstance::new(vec![1.0], vec![1.0], vec![0.0], 0.1).is_err());
        assert!(UpliftInstance::new(vec![0.5], vec![1.0], vec![0.0, 1.0], 0.1).is_err());
        assert!(UpliftInstance::new(vec![0.5], vec![1.0], vec![0.0], -1.0).is_err());
        assert!(UpliftInstance::new(vec![], vec![], vec![], 0.1).is_err());
    }

    #[test]
    fn generated_instance_respects_ranges() {
        let inst = instance();
        assert_eq!(inst.n_x, 20);
        assert!(inst.propensity.iter().all(|p| (0.2..=0.8).contains(p)));
        assert_eq!(inst, UpliftInstance::generate(20, 0.5, 5).unwrap());
    }

    #[test]
    fn transformed_response_is_conditionally_unbiased() {
        let inst = instance();
        let mut rng = rng::stream(1, 0);
        let n = 1_000_000;
        for x in [0, 7, 19] {
            let (mut sum, mut sum_sq) = (0.0, 0.0);
            for _ in 0..n {
                let z = draw_given(&inst, x, &mut rng).z;
                sum += z;
                sum_sq += z * z;
            }
            let mean = sum / n as f64;
            let sd = (sum_sq / n as f64 - mean * mean).sqrt();
            assert!(
                (mean - inst.uplift(x)).abs() <= 4.0 * sd / (n as f64).sqrt(),
                "x={x}"
            );
        }
    }

    #[test]
    fn exact_f_examples() {
        let inst = instance();
        let zero = Vector::zeros(20);
        assert_eq!(
            uplift_exact_f(&inst, 3, &zero).unwrap(),
            Vector::from_column_slice(&[0.0, inst.uplift(3)])
        );
        let null = UpliftInstance::new(vec![0.3; 4], vec![0.7; 4], vec![0.7; 4], 1.0).unwrap();
        assert_eq!(uplift_exact_f(&null, 2, &Vector::zeros(4)).unwrap()[1], 0.0);
        assert!(uplift_exact_f(&inst, 20, &zero).is_err());
    }

    #[test]
    fn exact_f_agrees_with_monte_carlo() {
        let problem = make_uplift_problem(instance(), 1.0, 10.0, 1000.0).unwrap();
        let mut rng = rng::stream(2, 0);
        let beta = Vector::from_fn(20, |_, _| rng.random_range(-1.0..1.0));
        let n = 100_000;
        for x in [1, 11] {
            let (mut sum, mut sum_sq) = (Vector::zeros(2), Vector::zeros(2));
            for _ in 0..n {
                let y = problem.sample_y_given(&x, &mut rng);
                let f = problem.f_value(&x, &y, &beta).unwrap();
                sum += &f;
                sum_sq += f.component_mul(&f);
            }
            let mean = &sum / n as f64;
            let exact = problem.exact_f(&x, &beta).unwrap();
            for i in 0..2 {
                let sd = (sum_sq[i] / n as f64 - mean[i] * mean[i]).max(0.0).sqrt();
                assert!((mean[i] - exact[i]).abs() <= 4.0 * sd / (n as f64).sqrt() + 1e-12);
            }
        }
    }

    #[test]
    fn problem_dims_and_exact_tracking_point() {
        let problem = make_uplift_problem(instance(), 1.0, 10.0, 1000.0).unwrap();
        assert_eq!(
            problem.dims(),
            Dims {
                n_beta: 20,
                n_theta: 40,
                n_f: 2
            }
        );
        let beta = problem.exact_solution();
        let theta = problem.tracking_theta(&beta).unwrap();
        for (x, _) in problem.x_law() {
            let f = problem.exact_f(x, &beta).unwrap();
            let psi = problem.psi_value(x, &theta).unwrap();
            assert_eq!(f, psi);
            assert_eq!(problem.g_value(&f), 0.0);
        }
    }

    #[test]
    fn oracles_match_finite_differences() {
        let problem = make_uplift_problem(instance(), 1.0, 10.0, 1000.0).unwrap();
        let mut rng = rng::stream(3, 0);
        for _ in 0..10 {
            let s = problem.sample(&mut rng);
            let beta = Vector::from_fn(20, |_, _| rng.random_range(-2.0..2.0));
            let theta = Vector::from_fn(40, |_, _| rng.random_range(-2.0..2.0));
            assert!(finite_diff_check(&problem, &s.x, &s.y, &beta, &theta, 1e-6).unwrap() <= 1e-9);
        }
    }

    #[test]
    fn f_subgrad_ignores_response() {
        let problem = make_uplift_problem(instance(), 1.0, 10.0, 1000.0).unwrap();
        let draw = UpliftDraw {
            t: 1,
            y: 3.0,
            z: 6.0,
        };
        let m = problem.f_subgrad(&4, &draw, &Vector::zeros(20)).unwrap();
        assert_eq!(m.column(1).amax(), 0.0);
        assert_eq!(m[(4, 0)], 1.0);
        assert_eq!(m.column(0).sum(), 1.0);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let inst = instance();
        let text = inst.to_json().unwrap();
        assert_eq!(UpliftInstance::from_json(&text).unwrap(), inst);
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["n_x", "propensity", "m1", "m_1", "noise_std", "seed"] {
            assert!(value.get(key).is_some(), "missing {key}");
        }
        let bad = text.replacen("\"n_x\":20", "\"n_x\":21", 1);
        assert!(UpliftInstance::from_json(&bad).is_err());
    }

    proptest! {
        #[test]
        fn g_gradient_respects_published_constants(
            a in prop::collection::vec(-5.0f64..5.0, 2),
            b in prop::collection::vec(-5.0f64..5.0, 2),
        ) {
            let problem = make_uplift_problem(UpliftInstance::generate(3, 0.5, 0).unwrap(), 1.0, 10.0, 1000.0).unwrap();
            let c = problem.constants();
            let (a, b) = (Vector::from_vec(a), Vector::from_vec(b));
            let (ga, gb) = (problem.g_grad(&a), problem.g_grad(&b));
            prop_assert!(ga.norm() <= c.l_g.unwrap() + 1e-12);
            prop_assert!((ga - gb).norm() <= c.l_grad_g.unwrap() * (a - b).norm() + 1e-12);
        }
    }

    #[test]
    fn zero_noise_solution_has_zero_objective() {
        let problem = make_uplift_problem(instance(), 1.0, 10.0, 1000.0).unwrap();
        let beta = problem.exact_solution();
        let total: f64 = problem
            .x_law()
            .iter()
            .map(|(x, w)| w * problem.g_value(&problem.exact_f(x, &beta).unwrap()))
            .sum();
        assert_abs_diff_eq!(total, 0.0);
    }
}
