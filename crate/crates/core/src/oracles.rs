//! Problem-oracle contract and the built-in building blocks: the Huber outer
//! loss and the linear tracking model.
//!
//! A problem supplies sampling from the joint law of `(X, Y)` together with
//! values and generalized (sub)gradients of the inner function `f`, the
//! tracking model `Ψ` and the outer loss `g`. Matrices follow one layout
//! throughout: a subgradient of a map `R^n -> R^m` is stored `n × m`, so that
//! a chain rule is a plain matrix-vector product.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Dimensions `(n_β, n_θ, n_f)` of a problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n_beta: usize,
    pub n_theta: usize,
    pub n_f: usize,
}

/// Regularity constants a problem publishes when they are known in closed
/// form. Diagnostics that need a missing constant refuse to run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OracleConstants {
    /// Bound on `‖∇g‖`.
    pub l_g: Option<f64>,
    /// Lipschitz constant of `∇g`.
    pub l_grad_g: Option<f64>,
    /// Bound on the norm of subgradients of `f` in `β`.
    pub l_f_bar: Option<f64>,
    /// Bound on the norm of subgradients of `Ψ` in `θ`.
    pub l_psi_bar: Option<f64>,
    /// Bound on `‖f‖` over the feasible set.
    pub c_f: Option<f64>,
    /// Bound on `‖Ψ(X, θ⁰)‖` at the default starting point.
    pub c_psi: Option<f64>,
}

impl OracleConstants {
    pub fn require(value: Option<f64>, name: &str) -> Result<f64> {
        value.ok_or_else(|| Error::Unsupported(format!("problem does not publish constant {name}")))
    }
}

/// One observation `(X^k, Y^k)` from the joint distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSample<X, Y> {
    pub x: X,
    pub y: Y,
}

/// Sampling plus evaluation contract for a conditional stochastic
/// optimization problem `min_β E[g(E[f(X,Y,β) | X])]`.
///
/// Implementations must be immutable after construction; all methods take
/// `&self` and the type must be `Sync` so that several runs can share one
/// problem.
pub trait ProblemOracle: Sync {
    type X: Clone + Send + Sync;
    type Y: Clone + Send + Sync;

    fn dims(&self) -> Dims;

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> StepSample<Self::X, Self::Y>;

    /// Inner function `f(x, y, β)`, length `n_f`.
    fn f_value(&self, x: &Self::X, y: &Self::Y, beta: &Vector) -> Result<Vector>;

    /// An element of the generalized subdifferential of `f` in `β`, `n_β × n_f`.
    fn f_subgrad(&self, x: &Self::X, y: &Self::Y, beta: &Vector) -> Result<Matrix>;

    /// Tracking model `Ψ(x, θ)`, length `n_f`.
    fn psi_value(&self, x: &Self::X, theta: &Vector) -> Result<Vector>;

    /// An element of the generalized subdifferential of `Ψ` in `θ`, `n_θ × n_f`.
    fn psi_subgrad(&self, x: &Self::X, theta: &Vector) -> Result<Matrix>;

    fn g_value(&self, u: &Vector) -> f64;

    fn g_grad(&self, u: &Vector) -> Vector;

    /// Orthogonal projection onto the feasible set of `β`.
    fn project_beta(&self, beta: Vector) -> Vector;

    fn constants(&self) -> OracleConstants {
        OracleConstants::default()
    }
}

/// Problems whose `X` has a finite, enumerable law and whose conditional
/// expectation `F(x, β) = E[f | X = x]` is available in closed form.
pub trait ExactOracle: ProblemOracle {
    /// Support of `X` with probabilities summing to one.
    fn x_law(&self) -> &[(Self::X, f64)];

    fn exact_f(&self, x: &Self::X, beta: &Vector) -> Result<Vector>;

    /// `F(x, β)` for every support point, in `x_law` order.
    fn exact_f_on_support(&self, beta: &Vector) -> Result<Vec<Vector>> {
        self.x_law()
            .iter()
            .map(|(x, _)| self.exact_f(x, beta))
            .collect()
    }

    /// Draw `Y` from its conditional law given `X = x`.
    fn sample_y_given<R: Rng + ?Sized>(&self, x: &Self::X, rng: &mut R) -> Self::Y;

    /// A parameter `θ̄(β)` with `Ψ(·, θ̄(β)) = F(·, β)` on the support, when
    /// the problem can construct one.
    fn tracking_theta(&self, _beta: &Vector) -> Option<Vector> {
        None
    }
}

/// Marker for problems whose tracking model is linear, `Ψ(x, θ) = ψ(x)ᵀθ`.
pub trait LinearTracking: ProblemOracle {
    /// Feature matrix `ψ(x)`, `n_θ × n_f`.
    fn features(&self, x: &Self::X) -> Matrix;
}

/// Huber loss on `R^n` with threshold `δ`:
/// `½‖u‖²` inside the ball of radius `δ`, `δ‖u‖ − ½δ²` outside.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HuberLoss {
    delta: f64,
}

impl HuberLoss {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::InvalidInput(format!(
                "Huber delta must be positive, got {delta}"
            )));
        }
        Ok(Self { delta })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn value(&self, u: &Vector) -> f64 {
        huber_value(u, self.delta)
    }

    pub fn grad(&self, u: &Vector) -> Vector {
        huber_grad(u, self.delta)
    }

    /// `L_g = δ`.
    pub fn grad_bound(&self) -> f64 {
        self.delta
    }

    /// `L_∇g = 1`.
    pub fn grad_lipschitz(&self) -> f64 {
        1.0
    }
}

pub fn huber_value(u: &Vector, delta: f64) -> f64 {
    let norm = u.norm();
    if norm <= delta {
        0.5 * norm * norm
    } else {
        delta * norm - 0.5 * delta * delta
    }
}

/// Gradient of [`huber_value`]. At `u = 0` the gradient is `0`.
pub fn huber_grad(u: &Vector, delta: f64) -> Vector {
    let norm = u.norm();
    if norm <= delta {
        u.clone()
    } else {
        u * (delta / norm)
    }
}

/// `Ψ(x, θ) = featuresᵀ θ` for an `n_θ × n_f` feature matrix.
pub fn linear_model_value(features: &Matrix, theta: &Vector) -> Result<Vector> {
    if features.nrows() != theta.len() {
        return Err(Error::shape(
            "linear_model_value",
            features.nrows(),
            theta.len(),
        ));
    }
    Ok(features.tr_mul(theta))
}

/// The subgradient of a linear model is its feature matrix, whatever `θ`.
pub fn linear_model_subgrad(features: &Matrix) -> Matrix {
    features.clone()
}

/// Default step for central differences.
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Max over entries of `|central difference − analytic| / (1 + |analytic|)`
/// for a vector-valued map `R^n -> R^m` whose analytic Jacobian is given in
/// the `n × m` layout.
pub fn jacobian_fd_error<F>(map: F, point: &Vector, analytic: &Matrix, h: f64) -> Result<f64>
where
    F: Fn(&Vector) -> Result<Vector>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    if analytic.nrows() != point.len() {
        return Err(Error::shape(
            "jacobian_fd_error",
            point.len(),
            analytic.nrows(),
        ));
    }
    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.len() {
        probe[i] = point[i] + h;
        let up = map(&probe)?;
        probe[i] = point[i] - h;
        let down = map(&probe)?;
        probe[i] = point[i];
        if up.len() != analytic.ncols() {
            return Err(Error::shape(
                "jacobian_fd_error",
                analytic.ncols(),
                up.len(),
            ));
        }
        for j in 0..up.len() {
            let numeric = (up[j] - down[j]) / (2.0 * h);
            let entry = analytic[(i, j)];
            worst = worst.max((numeric - entry).abs() / (1.0 + entry.abs()));
        }
    }
    Ok(worst)
}

/// Finite-difference check of a scalar function's gradient.
pub fn gradient_fd_error<F>(value: F, point: &Vector, grad: &Vector, h: f64) -> Result<f64>
where
    F: Fn(&Vector) -> f64,
{
    let analytic = Matrix::from_column_slice(grad.len(), 1, grad.as_slice());
    jacobian_fd_error(
        |p| Ok(Vector::from_element(1, value(p))),
        point,
        &analytic,
        h,
    )
}

/// Validates the `f` and `Ψ` subgradient oracles of a problem at one point by
/// central differences. Returns the larger of the two max relative errors.
///
/// The point should be one where both maps are classically differentiable.
pub fn finite_diff_check<P: ProblemOracle>(
    oracle: &P,
    x: &P::X,
    y: &P::Y,
    beta: &Vector,
    theta: &Vector,
    h: f64,
) -> Result<f64> {
    let f_sub = oracle.f_subgrad(x, y, beta)?;
    let f_err = jacobian_fd_error(|b| oracle.f_value(x, y, b), beta, &f_sub, h)?;
    let psi_sub = oracle.psi_subgrad(x, theta)?;
    let psi_err = jacobian_fd_error(|t| oracle.psi_value(x, t), theta, &psi_sub, h)?;
    Ok(f_err.max(psi_err))
}

/// Wraps a problem and shifts every entry of its `f` subgradient by a fixed
/// offset. Used to confirm that the finite-difference checks detect faults.
pub struct CorruptedSubgradient<'a, P> {
    pub inner: &'a P,
    pub offset: f64,
}

impl<P: ProblemOracle> ProblemOracle for CorruptedSubgradient<'_, P> {
    type X = P::X;
    type Y = P::Y;

    fn dims(&self) -> Dims {
        self.inner.dims()
    }
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> StepSample<P::X, P::Y> {
        self.inner.sample(rng)
    }
    fn f_value(&self, x: &P::X, y: &P::Y, beta: &Vector) -> Result<Vector> {
        self.inner.f_value(x, y, beta)
    }
    fn f_subgrad(&self, x: &P::X, y: &P::Y, beta: &Vector) -> Result<Matrix> {
        Ok(self.inner.f_subgrad(x, y, beta)?.add_scalar(self.offset))
    }
    fn psi_value(&self, x: &P::X, theta: &Vector) -> Result<Vector> {
        self.inner.psi_value(x, theta)
    }
    fn psi_subgrad(&self, x: &P::X, theta: &Vector) -> Result<Matrix> {
        self.inner.psi_subgrad(x, theta)
    }
    fn g_value(&self, u: &Vector) -> f64 {
        self.inner.g_value(u)
    }
    fn g_grad(&self, u: &Vector) -> Vector {
        self.inner.g_grad(u)
    }
    fn project_beta(&self, beta: Vector) -> Vector {
        self.inner.project_beta(beta)
    }
    fn constants(&self) -> OracleConstants {
        self.inner.constants()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    #[test]
    fn huber_value_examples() {
        assert_eq!(huber_value(&v(&[0.0]), 1.0), 0.0);
        assert_abs_diff_eq!(huber_value(&v(&[0.5]), 1.0), 0.125, epsilon = 1e-15);
        assert_abs_diff_eq!(huber_value(&v(&[2.0]), 1.0), 1.5, epsilon = 1e-15);
    }

    #[test]
    fn huber_grad_examples() {
        assert_eq!(huber_grad(&v(&[0.5]), 1.0), v(&[0.5]));
        let g = huber_grad(&v(&[3.0, 4.0]), 1.0);
        assert_abs_diff_eq!(g[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], 0.8, epsilon = 1e-15);
        // Both branches give the same value on the boundary.
        let edge = v(&[1.0]);
        assert_eq!(huber_grad(&edge, 1.0), edge);
        assert_eq!(&edge * (1.0 / edge.norm()), edge);
        assert_eq!(huber_grad(&v(&[0.0, 0.0]), 1.0), v(&[0.0, 0.0]));
    }

    #[test]
    fn huber_rejects_bad_delta() {
        assert!(HuberLoss::new(0.0).is_err());
        assert!(HuberLoss::new(-1.0).is_err());
        assert!(HuberLoss::new(f64::NAN).is_err());
    }

    #[test]
    fn huber_gradient_matches_finite_differences() {
        let u = v(&[0.3, 0.4]); // ‖u‖ = 0.5
        let err =
            gradient_fd_error(|p| huber_value(p, 1.0), &u, &huber_grad(&u, 1.0), 1e-6).unwrap();
        assert!(err <= 1e-6, "error {err}");
    }

    #[test]
    fn linear_model_examples() {
        let features = Matrix::from_column_slice(2, 1, &[1.0, 2.0]);
        assert_eq!(
            linear_model_value(&features, &v(&[3.0, 4.0])).unwrap(),
            v(&[11.0])
        );
        assert_eq!(
            linear_model_value(&features, &v(&[0.0, 0.0])).unwrap(),
            v(&[0.0])
        );
        let eye = Matrix::identity(3, 3);
        assert_eq!(
            linear_model_value(&eye, &v(&[1.0, -2.0, 5.0])).unwrap(),
            v(&[1.0, -2.0, 5.0])
        );
        assert!(matches!(
            linear_model_value(&features, &v(&[1.0])),
            Err(Error::Shape { .. })
        ));
        assert_eq!(
            linear_model_subgrad(&Matrix::zeros(2, 3)),
            Matrix::zeros(2, 3)
        );
    }

    #[test]
    fn linear_model_subgrad_matches_finite_differences() {
        let features = Matrix::from_row_slice(3, 2, &[0.5, -1.0, 2.0, 0.25, -0.75, 1.5]);
        let theta = v(&[0.1, -0.2, 0.3]);
        let err = jacobian_fd_error(
            |t| linear_model_value(&features, t),
            &theta,
            &linear_model_subgrad(&features),
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-9, "error {err}");
    }

    #[test]
    fn fd_check_rejects_nonpositive_step() {
        let f = Matrix::identity(1, 1);
        assert!(matches!(
            jacobian_fd_error(|p| Ok(p.clone()), &v(&[1.0]), &f, 0.0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn fd_check_detects_corruption() {
        let features = Matrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let corrupted = linear_model_subgrad(&features).add_scalar(0.1);
        let err = jacobian_fd_error(
            |t| linear_model_value(&features, t),
            &v(&[0.2, 0.3]),
            &corrupted,
            1e-6,
        )
        .unwrap();
        assert!(err >= 0.05, "error {err}");
    }

    proptest! {
        #[test]
        fn huber_bounds(u in prop::collection::vec(-10.0f64..10.0, 1..5), delta in 0.1f64..5.0) {
            let u = Vector::from_vec(u);
            let val = huber_value(&u, delta);
            let half_sq = 0.5 * u.norm_squared();
            prop_assert!(val >= 0.0);
            prop_assert!(val <= half_sq + 1e-12);
            prop_assert!(huber_grad(&u, delta).norm() <= delta * (1.0 + 1e-12));
        }

        #[test]
        fn huber_grad_is_one_lipschitz(
            u in prop::collection::vec(-5.0f64..5.0, 3),
            w in prop::collection::vec(-5.0f64..5.0, 3),
        ) {
            let (u, w) = (Vector::from_vec(u), Vector::from_vec(w));
            let lhs = (huber_grad(&u, 1.0) - huber_grad(&w, 1.0)).norm();
            prop_assert!(lhs <= (u - w).norm() + 1e-12);
        }
    }
}
