//! Linear MDPs for policy evaluation and the Bellman-residual problem.
//!
//! Transitions factor through a feature map, `P(·|s,a) = φ(s,a)ᵀ μ`, and
//! rewards are linear, `r(s,a) = φ(s,a)ᵀ ν`. For a fixed policy `π` the
//! residual of the linear Q-function `φᵀβ` at a transition `(s,a) → (s',a')`
//! is
//!
//! ```text
//! f = φ(s,a)ᵀβ − φ(s,a)ᵀν − γ·φ(s',a')ᵀβ
//! ```
//!
//! and its conditional mean is again linear in the features:
//! `F(s,a,β) = φ(s,a)ᵀ(β − ν − γ·M_π β)` with `M_π = μ·C_π`, where row `s'`
//! of `C_π` is `Σ_a' π(a'|s') φ(s',a')ᵀ`.

use std::path::Path;

use nalgebra::SymmetricEigen;
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracles::{
    linear_model_value, Dims, ExactOracle, HuberLoss, LinearTracking, Matrix, OracleConstants,
    ProblemOracle, StepSample, Vector,
};
use crate::rng::{self, GENERATOR_STREAM};
use crate::solver::ball_projection;

const ROW_SUM_TOL: f64 = 1e-12;
const NEGATIVE_TOL: f64 = 1e-12;

pub const STATIONARY_TOL: f64 = 1e-12;
pub const STATIONARY_MAX_ITER: usize = 1_000_000;
pub const STATIONARY_RESIDUAL_TOL: f64 = 1e-10;
pub const SOLUTION_RESIDUAL_TOL: f64 = 1e-8;

/// Largest state count for which the dense stationary solve is attempted.
pub const DENSE_STATIONARY_MAX_STATES: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateAction {
    pub s: usize,
    pub a: usize,
}

/// `X = (s, a)`, `Y = (s', a')`.
pub type MdpSample = StepSample<StateAction, StateAction>;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearMdp {
    n_states: usize,
    n_actions: usize,
    feature_dim: usize,
    discount: f64,
    /// `φ(s,a)` at index `s·A + a`.
    phi: Vec<Vector>,
    /// `d × S`; row `j` is the factor measure `μ^(j)`.
    mu: Matrix,
    nu: Vector,
}

impl LinearMdp {
    /// Validates shapes, finiteness and that every `P(·|s,a)` is a
    /// probability vector.
    pub fn new(phi: Vec<Vec<Vector>>, mu: Matrix, nu: Vector, discount: f64) -> Result<Self> {
        let n_states = phi.len();
        if n_states == 0 {
            return Err(Error::InvalidInput(
                "an MDP needs at least one state".into(),
            ));
        }
        let n_actions = phi[0].len();
        if n_actions == 0 {
            return Err(Error::InvalidInput(
                "an MDP needs at least one action".into(),
            ));
        }
        let feature_dim = nu.len();
        if feature_dim == 0 {
            return Err(Error::InvalidInput(
                "feature dimension must be positive".into(),
            ));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::InvalidInput(format!(
                "discount must lie in (0, 1), got {discount}"
            )));
        }
        if mu.shape() != (feature_dim, n_states) {
            return Err(Error::shape(
                "mu",
                format!("{feature_dim}x{n_states}"),
                format!("{}x{}", mu.nrows(), mu.ncols()),
            ));
        }
        let mut flat = Vec::with_capacity(n_states * n_actions);
        for (s, row) in phi.into_iter().enumerate() {
            if row.len() != n_actions {
                return Err(Error::shape(
                    "phi actions",
                    n_actions,
                    format!("{} at state {s}", row.len()),
                ));
            }
            for v in row {
                if v.len() != feature_dim {
                    return Err(Error::shape("phi features", feature_dim, v.len()));
                }
                flat.push(v);
            }
        }
        let finite = |m: &[f64]| m.iter().all(|x| x.is_finite());
        if !finite(mu.as_slice())
            || !finite(nu.as_slice())
            || flat.iter().any(|v| !finite(v.as_slice()))
        {
            return Err(Error::InvalidInput(
                "MDP contains non-finite entries".into(),
            ));
        }
        let mdp = LinearMdp {
            n_states,
            n_actions,
            feature_dim,
            discount,
            phi: flat,
            mu,
            nu,
        };
        mdp.check_transitions()?;
        Ok(mdp)
    }

    fn check_transitions(&self) -> Result<()> {
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let p = self.transition_row(s, a);
                let sum: f64 = p.iter().sum();
                let min = p.iter().copied().fold(f64::INFINITY, f64::min);
                if (sum - 1.0).abs() > ROW_SUM_TOL || min < -NEGATIVE_TOL {
                    return Err(Error::InvalidInput(format!(
                        "P(.|{s},{a}) is not a probability vector (sum {sum}, min {min})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn mu(&self) -> &Matrix {
        &self.mu
    }

    pub fn nu(&self) -> &Vector {
        &self.nu
    }

    fn index(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    fn check_pair(&self, x: StateAction) -> Result<()> {
        if x.s >= self.n_states || x.a >= self.n_actions {
            return Err(Error::InvalidInput(format!(
                "state-action ({}, {}) out of range for {}x{}",
                x.s, x.a, self.n_states, self.n_actions
            )));
        }
        Ok(())
    }

    /// `φ(s, a)`; panics on out-of-range indices.
    pub fn features(&self, s: usize, a: usize) -> &Vector {
        &self.phi[self.index(s, a)]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.features(s, a).dot(&self.nu)
    }

    fn transition_row(&self, s: usize, a: usize) -> Vector {
        self.mu.tr_mul(self.features(s, a))
    }

    /// `P(·|s,a) = φ(s,a)ᵀ μ` as a vector over states.
    pub fn transition_dist(&self, s: usize, a: usize) -> Result<Vector> {
        self.check_pair(StateAction { s, a })?;
        Ok(self.transition_row(s, a))
    }

    fn check_policy(&self, policy: &Policy) -> Result<()> {
        if policy.pi.shape() != (self.n_states, self.n_actions) {
            return Err(Error::shape(
                "policy",
                format!("{}x{}", self.n_states, self.n_actions),
                format!("{}x{}", policy.pi.nrows(), policy.pi.ncols()),
            ));
        }
        Ok(())
    }

    /// The state chain under `π`: `P^π(s'|s) = Σ_a π(a|s) P(s'|s,a)`, `S × S`.
    pub fn state_chain(&self, policy: &Policy) -> Result<Matrix> {
        self.check_policy(policy)?;
        let mut chain = Matrix::zeros(self.n_states, self.n_states);
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let w = policy.pi[(s, a)];
                if w != 0.0 {
                    let row = self.transition_row(s, a);
                    for t in 0..self.n_states {
                        chain[(s, t)] += w * row[t];
                    }
                }
            }
        }
        Ok(chain)
    }

    /// `C_π`, `S × d`: row `s'` is `Σ_a' π(a'|s') φ(s',a')ᵀ`.
    pub fn policy_features(&self, policy: &Policy) -> Result<Matrix> {
        self.check_policy(policy)?;
        let mut c = Matrix::zeros(self.n_states, self.feature_dim);
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let w = policy.pi[(s, a)];
                let phi = self.features(s, a);
                for j in 0..self.feature_dim {
                    c[(s, j)] += w * phi[j];
                }
            }
        }
        Ok(c)
    }

    /// `M_π = μ·C_π`, `d × d`.
    pub fn successor_operator(&self, policy: &Policy) -> Result<Matrix> {
        Ok(&self.mu * self.policy_features(policy)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pi: Matrix,
}

impl Policy {
    /// `pi` is `S × A` with stochastic rows.
    pub fn new(pi: Matrix) -> Result<Self> {
        if pi.nrows() == 0 || pi.ncols() == 0 {
            return Err(Error::InvalidInput("policy table is empty".into()));
        }
        for (s, row) in pi.row_iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidInput(format!(
                    "policy row {s} is not a probability vector"
                )));
            }
        }
        Ok(Policy { pi })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Result<Self> {
        if n_actions == 0 {
            return Err(Error::InvalidInput(
                "policy needs at least one action".into(),
            ));
        }
        Policy::new(Matrix::from_element(
            n_states,
            n_actions,
            1.0 / n_actions as f64,
        ))
    }

    pub fn table(&self) -> &Matrix {
        &self.pi
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.pi[(s, a)]
    }
}

/// Stationary `q` with `qᵀP^π = qᵀ` by power iteration.
///
/// Iterates until successive iterates differ by at most `1e−12` in `ℓ1`,
/// then certifies `‖qᵀP^π − qᵀ‖∞ ≤ 1e−10`. Small chains that fail to
/// converge (e.g. periodic ones) fall back to the dense solve.
pub fn stationary_distribution(mdp: &LinearMdp, policy: &Policy) -> Result<Vector> {
    let chain = mdp.state_chain(policy)?;
    let n = mdp.n_states();
    let mut q = Vector::from_element(n, 1.0 / n as f64);
    let mut converged = false;
    for _ in 0..STATIONARY_MAX_ITER {
        let mut next = chain.tr_mul(&q);
        let total = next.sum();
        next /= total;
        let change = (&next - &q).lp_norm(1);
        q = next;
        if change <= STATIONARY_TOL {
            converged = true;
            break;
        }
    }
    if converged && stationary_residual(&chain, &q) <= STATIONARY_RESIDUAL_TOL {
        return Ok(q);
    }
    if n <= DENSE_STATIONARY_MAX_STATES {
        return stationary_distribution_dense(mdp, policy);
    }
    Err(Error::numerical(
        "stationary distribution",
        format!("power iteration did not converge within {STATIONARY_MAX_ITER} iterations"),
    ))
}

fn stationary_residual(chain: &Matrix, q: &Vector) -> f64 {
    (chain.tr_mul(q) - q).amax()
}

/// Stationary distribution from the linear system `(P^πᵀ − I) q = 0`,
/// `Σq = 1`, with the last balance equation replaced by the normalization.
pub fn stationary_distribution_dense(mdp: &LinearMdp, policy: &Policy) -> Result<Vector> {
    let chain = mdp.state_chain(policy)?;
    let n = mdp.n_states();
    let mut system = chain.transpose() - Matrix::identity(n, n);
    let mut rhs = Vector::zeros(n);
    system.row_mut(n - 1).fill(1.0);
    rhs[n - 1] = 1.0;
    let q = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::numerical("stationary distribution", "singular balance system"))?;
    if q.iter().any(|p| *p < -1e-10) {
        return Err(Error::numerical(
            "stationary distribution",
            "negative mass: chain is not irreducible",
        ));
    }
    let q = q.map(|p| p.max(0.0));
    let q = &q / q.sum();
    let residual = stationary_residual(&chain, &q);
    if residual > STATIONARY_RESIDUAL_TOL {
        return Err(Error::numerical(
            "stationary distribution",
            format!("residual {residual:e}"),
        ));
    }
    Ok(q)
}

/// `β* = (I − γM_π)⁻¹ν`, the unique zero of `F(·, β)`.
pub fn exact_solution_beta(mdp: &LinearMdp, policy: &Policy) -> Result<Vector> {
    let m = mdp.successor_operator(policy)?;
    let d = mdp.feature_dim();
    let system = Matrix::identity(d, d) - m * mdp.discount();
    let beta = system
        .lu()
        .solve(mdp.nu())
        .ok_or_else(|| Error::numerical("exact solution", "I - discount*M is singular"))?;
    let theta = tracking_parameter(mdp, policy, &beta)?;
    let residual = mdp
        .phi
        .iter()
        .map(|phi| phi.dot(&theta).abs())
        .fold(0.0, f64::max);
    if !(residual <= SOLUTION_RESIDUAL_TOL) {
        return Err(Error::numerical(
            "exact solution",
            format!("max |F(x, beta*)| = {residual:e}"),
        ));
    }
    Ok(beta)
}

/// `θ̄(β) = β − ν − γM_πβ`, so that `F(x, β) = φ(x)ᵀθ̄(β)` everywhere.
pub fn tracking_parameter(mdp: &LinearMdp, policy: &Policy, beta: &Vector) -> Result<Vector> {
    if beta.len() != mdp.feature_dim() {
        return Err(Error::shape("beta", mdp.feature_dim(), beta.len()));
    }
    let m = mdp.successor_operator(policy)?;
    Ok(beta - mdp.nu() - (m * beta) * mdp.discount())
}

/// `F(x, β) = E[f | X = x]`.
pub fn exact_f(mdp: &LinearMdp, policy: &Policy, x: StateAction, beta: &Vector) -> Result<f64> {
    mdp.check_pair(x)?;
    Ok(mdp
        .features(x.s, x.a)
        .dot(&tracking_parameter(mdp, policy, beta)?))
}

/// Residual `φ(s,a)ᵀβ − r(s,a) − γφ(s',a')ᵀβ` of one transition.
pub fn bellman_f(mdp: &LinearMdp, sample: &MdpSample, beta: &Vector) -> Result<f64> {
    mdp.check_pair(sample.x)?;
    mdp.check_pair(sample.y)?;
    if beta.len() != mdp.feature_dim() {
        return Err(Error::shape("beta", mdp.feature_dim(), beta.len()));
    }
    let phi = mdp.features(sample.x.s, sample.x.a);
    let next = mdp.features(sample.y.s, sample.y.a);
    Ok(phi.dot(beta) - phi.dot(mdp.nu()) - mdp.discount() * next.dot(beta))
}

/// `φ(s,a) − γφ(s',a')`; `f` is linear in `β`.
pub fn bellman_f_subgrad(mdp: &LinearMdp, sample: &MdpSample) -> Result<Vector> {
    mdp.check_pair(sample.x)?;
    mdp.check_pair(sample.y)?;
    Ok(
        mdp.features(sample.x.s, sample.x.a)
            - mdp.features(sample.y.s, sample.y.a) * mdp.discount(),
    )
}

/// Index drawn from cumulative weights.
fn draw<R: Rng + ?Sized>(cumulative: &[f64], rng: &mut R) -> usize {
    let total = cumulative[cumulative.len() - 1];
    let u = rng.random::<f64>() * total;
    cumulative
        .partition_point(|c| *c <= u)
        .min(cumulative.len() - 1)
}

fn cumulate(weights: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .into_iter()
        .map(|w| {
            acc += w.max(0.0);
            acc
        })
        .collect()
}

/// Precomputed inverse-CDF tables for the stationary transition law.
#[derive(Clone, Debug)]
pub struct TransitionSampler {
    n_states: usize,
    n_actions: usize,
    states: Vec<f64>,
    /// `S` rows of length `A`.
    actions: Vec<f64>,
    /// `S·A` rows of length `S`.
    next_states: Vec<f64>,
}

impl TransitionSampler {
    pub fn new(mdp: &LinearMdp, policy: &Policy, q: &Vector) -> Result<Self> {
        mdp.check_policy(policy)?;
        if q.len() != mdp.n_states() {
            return Err(Error::shape(
                "stationary distribution",
                mdp.n_states(),
                q.len(),
            ));
        }
        let (n_states, n_actions) = (mdp.n_states(), mdp.n_actions());
        let states = cumulate(q.iter().copied());
        let actions = (0..n_states)
            .flat_map(|s| cumulate(policy.pi.row(s).iter().copied()))
            .collect();
        let mut next_states = Vec::with_capacity(n_states * n_actions * n_states);
        for s in 0..n_states {
            for a in 0..n_actions {
                next_states.extend(cumulate(mdp.transition_row(s, a).iter().copied()));
            }
        }
        Ok(TransitionSampler {
            n_states,
            n_actions,
            states,
            actions,
            next_states,
        })
    }

    fn action<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        draw(
            &self.actions[s * self.n_actions..(s + 1) * self.n_actions],
            rng,
        )
    }

    /// `(s', a')` with `s' ~ P(·|s,a)`, `a' ~ π(·|s')`.
    pub fn successor<R: Rng + ?Sized>(&self, x: StateAction, rng: &mut R) -> StateAction {
        let row = (x.s * self.n_actions + x.a) * self.n_states;
        let s = draw(&self.next_states[row..row + self.n_states], rng);
        StateAction {
            s,
            a: self.action(s, rng),
        }
    }

    /// `s ~ q`, `a ~ π(·|s)`, then the successor pair.
    pub fn sample_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> MdpSample {
        let s = draw(&self.states, rng);
        let x = StateAction {
            s,
            a: self.action(s, rng),
        };
        StepSample {
            x,
            y: self.successor(x, rng),
        }
    }
}

/// One joint draw from the stationary policy-evaluation law.
pub fn sample_pair<R: Rng + ?Sized>(
    mdp: &LinearMdp,
    policy: &Policy,
    q: &Vector,
    rng: &mut R,
) -> Result<MdpSample> {
    Ok(TransitionSampler::new(mdp, policy, q)?.sample_pair(rng))
}

/// How feature vectors are represented in a generated instance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureBasis {
    /// `φ(s,a)` are points of the simplex and the rows of `μ` are
    /// distributions over states.
    Simplex,
    /// The simplex instance re-expressed in coordinates where the feature
    /// second-moment matrix under the stationary law is
    /// `(feature_rms²/d)·I`. `μ` is transformed inversely, so every
    /// transition law is unchanged but the factor measures become signed.
    Whitened { feature_rms: f64 },
}

pub const DEFAULT_FEATURE_RMS: f64 = 0.12;
pub const DEFAULT_DISCOUNT: f64 = 0.95;
pub const DEFAULT_POLICY_SMOOTHING: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorOptions {
    pub basis: FeatureBasis,
    /// Remove the part of `ν` that shifts every Q-value by a constant.
    pub center_rewards: bool,
    pub discount: f64,
    /// Weight of the uniform distribution mixed into every policy row.
    pub policy_smoothing: f64,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        GeneratorOptions {
            basis: FeatureBasis::Whitened {
                feature_rms: DEFAULT_FEATURE_RMS,
            },
            center_rewards: true,
            discount: DEFAULT_DISCOUNT,
            policy_smoothing: DEFAULT_POLICY_SMOOTHING,
        }
    }
}

/// A generated or loaded MDP together with the policy under evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct MdpInstance {
    pub mdp: LinearMdp,
    pub policy: Policy,
    pub seed: Option<u64>,
}

fn dirichlet_ones<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|x| x / total).collect()
}

/// Random instance with `‖β*‖ = reward_scale` and default options.
pub fn generate_linear_mdp(
    n_states: usize,
    n_actions: usize,
    feature_dim: usize,
    seed: u64,
    reward_scale: f64,
) -> Result<MdpInstance> {
    generate_linear_mdp_with(
        n_states,
        n_actions,
        feature_dim,
        seed,
        reward_scale,
        &GeneratorOptions::default(),
    )
}

/// Random instance by the simplex-mixture recipe: `φ(s,a)` and the rows of
/// `μ` are Dirichlet(1) draws, policy rows are Dirichlet(1) draws mixed
/// with a little uniform mass, `ν` starts uniform on `[−1,1]^d`. The basis
/// is then optionally whitened, `ν` optionally centered, and finally `ν` is
/// rescaled so that `‖β*‖ = reward_scale`.
pub fn generate_linear_mdp_with(
    n_states: usize,
    n_actions: usize,
    feature_dim: usize,
    seed: u64,
    reward_scale: f64,
    options: &GeneratorOptions,
) -> Result<MdpInstance> {
    if n_states == 0 || n_actions == 0 || feature_dim == 0 {
        return Err(Error::InvalidInput(format!(
            "sizes must be positive, got S={n_states}, A={n_actions}, d={feature_dim}"
        )));
    }
    if !(reward_scale.is_finite() && reward_scale > 0.0) {
        return Err(Error::InvalidInput(format!(
            "reward_scale must be positive, got {reward_scale}"
        )));
    }
    if !(0.0..=1.0).contains(&options.policy_smoothing) {
        return Err(Error::InvalidInput(
            "policy_smoothing must lie in [0, 1]".into(),
        ));
    }
    let mut rng = rng::stream(seed, GENERATOR_STREAM);
    let (s_n, a_n, d) = (n_states, n_actions, feature_dim);

    let mut phi: Vec<Vec<Vector>> = (0..s_n)
        .map(|_| {
            (0..a_n)
                .map(|_| Vector::from_vec(dirichlet_ones(d, &mut rng)))
                .collect()
        })
        .collect();
    let mut mu = Matrix::zeros(d, s_n);
    for j in 0..d {
        for (t, p) in dirichlet_ones(s_n, &mut rng).into_iter().enumerate() {
            mu[(j, t)] = p;
        }
    }
    let eps = options.policy_smoothing;
    let mut pi = Matrix::zeros(s_n, a_n);
    for s in 0..s_n {
        for (a, p) in dirichlet_ones(a_n, &mut rng).into_iter().enumerate() {
            pi[(s, a)] = (1.0 - eps) * p + eps / a_n as f64;
        }
        let total: f64 = pi.row(s).sum();
        pi.row_mut(s).scale_mut(1.0 / total);
    }
    let mut nu = Vector::from_fn(d, |_, _| rng.random_range(-1.0..=1.0));

    let policy = Policy::new(pi)?;
    let simplex = LinearMdp::new(phi.clone(), mu.clone(), nu.clone(), options.discount)?;
    let q = stationary_distribution(&simplex, &policy)?;
    let weights = |s: usize, a: usize| q[s] * policy.prob(s, a);

    if let FeatureBasis::Whitened { feature_rms } = options.basis {
        if !(feature_rms.is_finite() && feature_rms > 0.0) {
            return Err(Error::InvalidInput(format!(
                "feature_rms must be positive, got {feature_rms}"
            )));
        }
        let mut gram = Matrix::zeros(d, d);
        for (s, row) in phi.iter().enumerate() {
            for (a, v) in row.iter().enumerate() {
                gram.ger(weights(s, a), v, v, 1.0);
            }
        }
        let eig = SymmetricEigen::new(gram);
        let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
        if !(lo > 1e-12 * hi) {
            return Err(Error::InvalidInput(format!(
                "features are linearly dependent under the stationary law (eigenvalues {lo:e}..{hi:e}); \
                 use the simplex basis"
            )));
        }
        let scale = feature_rms / (d as f64).sqrt();
        let u = &eig.eigenvectors;
        let forward =
            u * Matrix::from_diagonal(&eig.eigenvalues.map(|l| scale / l.sqrt())) * u.transpose();
        let backward =
            u * Matrix::from_diagonal(&eig.eigenvalues.map(|l| l.sqrt() / scale)) * u.transpose();
        for row in phi.iter_mut() {
            for v in row.iter_mut() {
                *v = &forward * &*v;
            }
        }
        mu = backward * mu;
    }

    if options.center_rewards && d > 1 {
        // The stationary feature mean ℓ is a left eigenvector of M_π with
        // eigenvalue 1, so ℓᵀν is amplified by 1/(1 − γ) in β*.
        let mut mean = Vector::zeros(d);
        for (s, row) in phi.iter().enumerate() {
            for (a, v) in row.iter().enumerate() {
                mean.axpy(weights(s, a), v, 1.0);
            }
        }
        let shift = nu.dot(&mean) / mean.norm_squared();
        nu.axpy(-shift, &mean, 1.0);
    }

    let unscaled = LinearMdp::new(phi.clone(), mu.clone(), nu.clone(), options.discount)?;
    let beta = exact_solution_beta(&unscaled, &policy)?;
    let norm = beta.norm();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::numerical(
            "reward scaling",
            format!("exact solution has norm {norm}"),
        ));
    }
    nu *= reward_scale / norm;
    let mdp = LinearMdp::new(phi, mu, nu, options.discount)?;
    Ok(MdpInstance {
        mdp,
        policy,
        seed: Some(seed),
    })
}

/// On-disk form of an instance.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MdpFile {
    #[serde(rename = "S")]
    n_states: usize,
    #[serde(rename = "A")]
    n_actions: usize,
    d: usize,
    discount: f64,
    phi: Vec<Vec<Vec<f64>>>,
    mu: Vec<Vec<f64>>,
    nu: Vec<f64>,
    policy: Vec<Vec<f64>>,
    #[serde(default)]
    seed: Option<u64>,
}

fn matrix_from_rows(rows: &[Vec<f64>], ncols: usize, what: &'static str) -> Result<Matrix> {
    if let Some(bad) = rows.iter().find(|r| r.len() != ncols) {
        return Err(Error::shape(what, ncols, bad.len()));
    }
    Ok(Matrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl MdpInstance {
    pub fn to_json(&self) -> Result<String> {
        let mdp = &self.mdp;
        let file = MdpFile {
            n_states: mdp.n_states,
            n_actions: mdp.n_actions,
            d: mdp.feature_dim,
            discount: mdp.discount,
            phi: (0..mdp.n_states)
                .map(|s| {
                    (0..mdp.n_actions)
                        .map(|a| mdp.features(s, a).as_slice().to_vec())
                        .collect()
                })
                .collect(),
            mu: matrix_rows(&mdp.mu),
            nu: mdp.nu.as_slice().to_vec(),
            policy: matrix_rows(&self.policy.pi),
            seed: self.seed,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MdpFile = serde_json::from_str(text)?;
        if file.phi.len() != file.n_states {
            return Err(Error::shape("phi states", file.n_states, file.phi.len()));
        }
        if file.mu.len() != file.d {
            return Err(Error::shape("mu rows", file.d, file.mu.len()));
        }
        if file.nu.len() != file.d {
            return Err(Error::shape("nu", file.d, file.nu.len()));
        }
        if file.policy.len() != file.n_states {
            return Err(Error::shape(
                "policy rows",
                file.n_states,
                file.policy.len(),
            ));
        }
        let mut phi = Vec::with_capacity(file.n_states);
        for row in &file.phi {
            if row.len() != file.n_actions {
                return Err(Error::shape("phi actions", file.n_actions, row.len()));
            }
            phi.push(row.iter().map(|v| Vector::from_column_slice(v)).collect());
        }
        let mu = matrix_from_rows(&file.mu, file.n_states, "mu columns")?;
        let mdp = LinearMdp::new(phi, mu, Vector::from_vec(file.nu), file.discount)?;
        let policy = Policy::new(matrix_from_rows(
            &file.policy,
            file.n_actions,
            "policy columns",
        )?)?;
        Ok(MdpInstance {
            mdp,
            policy,
            seed: file.seed,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// The Bellman-residual problem `min_β E[g(E[f | s,a])]` with a linear
/// tracking model over the MDP's own features and Huber `g`.
#[derive(Clone, Debug)]
pub struct BellmanProblem {
    mdp: LinearMdp,
    policy: Policy,
    huber: HuberLoss,
    beta_radius: f64,
    theta_radius: f64,
    stationary: Vector,
    sampler: TransitionSampler,
    successor: Matrix,
    law: Vec<(StateAction, f64)>,
    max_feature_norm: f64,
    max_abs_reward: f64,
}

pub fn make_bellman_problem(
    mdp: LinearMdp,
    policy: Policy,
    huber_delta: f64,
    beta_radius: f64,
    theta_radius: f64,
) -> Result<BellmanProblem> {
    BellmanProblem::new(mdp, policy, huber_delta, beta_radius, theta_radius)
}

impl BellmanProblem {
    pub fn new(
        mdp: LinearMdp,
        policy: Policy,
        huber_delta: f64,
        beta_radius: f64,
        theta_radius: f64,
    ) -> Result<Self> {
        let huber = HuberLoss::new(huber_delta)?;
        for (name, r) in [("beta_radius", beta_radius), ("theta_radius", theta_radius)] {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "{name} must be positive, got {r}"
                )));
            }
        }
        let stationary = stationary_distribution(&mdp, &policy)?;
        let sampler = TransitionSampler::new(&mdp, &policy, &stationary)?;
        let successor = mdp.successor_operator(&policy)?;
        let mut law = Vec::with_capacity(mdp.n_states * mdp.n_actions);
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                law.push((StateAction { s, a }, stationary[s] * policy.prob(s, a)));
            }
        }
        let max_feature_norm = mdp.phi.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let max_abs_reward = mdp
            .phi
            .iter()
            .map(|v| v.dot(&mdp.nu).abs())
            .fold(0.0, f64::max);
        Ok(BellmanProblem {
            mdp,
            policy,
            huber,
            beta_radius,
            theta_radius,
            stationary,
            sampler,
            successor,
            law,
            max_feature_norm,
            max_abs_reward,
        })
    }

    pub fn from_instance(
        instance: &MdpInstance,
        huber_delta: f64,
        beta_radius: f64,
        theta_radius: f64,
    ) -> Result<Self> {
        Self::new(
            instance.mdp.clone(),
            instance.policy.clone(),
            huber_delta,
            beta_radius,
            theta_radius,
        )
    }

    pub fn mdp(&self) -> &LinearMdp {
        &self.mdp
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn stationary(&self) -> &Vector {
        &self.stationary
    }

    pub fn beta_radius(&self) -> f64 {
        self.beta_radius
    }

    pub fn theta_radius(&self) -> f64 {
        self.theta_radius
    }

    pub fn max_feature_norm(&self) -> f64 {
        self.max_feature_norm
    }

    pub fn exact_solution(&self) -> Result<Vector> {
        exact_solution_beta(&self.mdp, &self.policy)
    }

    fn theta_bar(&self, beta: &Vector) -> Vector {
        beta - self.mdp.nu() - (&self.successor * beta) * self.mdp.discount()
    }

    fn check_beta(&self, beta: &Vector) -> Result<()> {
        if beta.len() != self.mdp.feature_dim {
            return Err(Error::shape("beta", self.mdp.feature_dim, beta.len()));
        }
        Ok(())
    }
}

impl ProblemOracle for BellmanProblem {
    type X = StateAction;
    type Y = StateAction;

    fn dims(&self) -> Dims {
        let d = self.mdp.feature_dim;
        Dims {
            n_beta: d,
            n_theta: d,
            n_f: 1,
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> MdpSample {
        self.sampler.sample_pair(rng)
    }

    fn f_value(&self, x: &StateAction, y: &StateAction, beta: &Vector) -> Result<Vector> {
        let sample = StepSample { x: *x, y: *y };
        Ok(Vector::from_element(
            1,
            bellman_f(&self.mdp, &sample, beta)?,
        ))
    }

    fn f_subgrad(&self, x: &StateAction, y: &StateAction, beta: &Vector) -> Result<Matrix> {
        self.check_beta(beta)?;
        let grad = bellman_f_subgrad(&self.mdp, &StepSample { x: *x, y: *y })?;
        Ok(Matrix::from_column_slice(grad.len(), 1, grad.as_slice()))
    }

    fn psi_value(&self, x: &StateAction, theta: &Vector) -> Result<Vector> {
        self.mdp.check_pair(*x)?;
        linear_model_value(&self.features(x), theta)
    }

    fn psi_subgrad(&self, x: &StateAction, theta: &Vector) -> Result<Matrix> {
        self.mdp.check_pair(*x)?;
        if theta.len() != self.mdp.feature_dim {
            return Err(Error::shape("theta", self.mdp.feature_dim, theta.len()));
        }
        Ok(self.features(x))
    }

    fn g_value(&self, u: &Vector) -> f64 {
        self.huber.value(u)
    }

    fn g_grad(&self, u: &Vector) -> Vector {
        self.huber.grad(u)
    }

    fn project_beta(&self, beta: Vector) -> Vector {
        ball_projection(beta, self.beta_radius)
    }

    fn constants(&self) -> OracleConstants {
        let phi = self.max_feature_norm;
        OracleConstants {
            l_g: Some(self.huber.grad_bound()),
            l_grad_g: Some(self.huber.grad_lipschitz()),
            l_f_bar: Some((1.0 + self.mdp.discount) * phi),
            l_psi_bar: Some(phi),
            c_f: Some((1.0 + self.mdp.discount) * phi * self.beta_radius + self.max_abs_reward),
            c_psi: Some(0.0),
        }
    }
}

impl ExactOracle for BellmanProblem {
    fn x_law(&self) -> &[(StateAction, f64)] {
        &self.law
    }

    fn exact_f(&self, x: &StateAction, beta: &Vector) -> Result<Vector> {
        self.mdp.check_pair(*x)?;
        self.check_beta(beta)?;
        Ok(Vector::from_element(
            1,
            self.mdp.features(x.s, x.a).dot(&self.theta_bar(beta)),
        ))
    }

    fn exact_f_on_support(&self, beta: &Vector) -> Result<Vec<Vector>> {
        self.check_beta(beta)?;
        let theta = self.theta_bar(beta);
        Ok(self
            .mdp
            .phi
            .iter()
            .map(|phi| Vector::from_element(1, phi.dot(&theta)))
            .collect())
    }

    fn sample_y_given<R: Rng + ?Sized>(&self, x: &StateAction, rng: &mut R) -> StateAction {
        self.sampler.successor(*x, rng)
    }

    fn tracking_theta(&self, beta: &Vector) -> Option<Vector> {
        (beta.len() == self.mdp.feature_dim).then(|| self.theta_bar(beta))
    }
}

impl LinearTracking for BellmanProblem {
    fn features(&self, x: &StateAction) -> Matrix {
        let phi = self.mdp.features(x.s, x.a);
        Matrix::from_column_slice(phi.len(), 1, phi.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::finite_diff_check;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    fn small(seed: u64) -> MdpInstance {
        generate_linear_mdp(5, 3, 3, seed, 2.0).unwrap()
    }

    /// Two states, one action, features are indicator vectors.
    fn two_state(mu: [[f64; 2]; 2], nu: [f64; 2], discount: f64) -> MdpInstance {
        let phi = vec![vec![v(&[1.0, 0.0])], vec![v(&[0.0, 1.0])]];
        let mu = Matrix::from_row_slice(2, 2, &[mu[0][0], mu[0][1], mu[1][0], mu[1][1]]);
        let mdp = LinearMdp::new(phi, mu, v(&nu), discount).unwrap();
        MdpInstance {
            mdp,
            policy: Policy::uniform(2, 1).unwrap(),
            seed: None,
        }
    }

    fn all_rows_valid(mdp: &LinearMdp) -> bool {
        (0..mdp.n_states()).all(|s| {
            (0..mdp.n_actions()).all(|a| {
                let p = mdp.transition_dist(s, a).unwrap();
                (p.sum() - 1.0).abs() <= 1e-12 && p.min() >= -1e-15
            })
        })
    }

    #[test]
    fn generated_transitions_are_distributions() {
        for seed in 0..5 {
            assert!(all_rows_valid(&small(seed).mdp));
        }
        let simplex = GeneratorOptions {
            basis: FeatureBasis::Simplex,
            ..Default::default()
        };
        let inst = generate_linear_mdp_with(7, 2, 4, 9, 1.0, &simplex).unwrap();
        assert!(all_rows_valid(&inst.mdp));
        for s in 0..7 {
            for a in 0..2 {
                let phi = inst.mdp.features(s, a);
                assert!(phi.min() >= 0.0);
                assert_abs_diff_eq!(phi.sum(), 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_single_state_instance() {
        let simplex = GeneratorOptions {
            basis: FeatureBasis::Simplex,
            ..Default::default()
        };
        let inst = generate_linear_mdp_with(1, 1, 1, 0, 1.0, &simplex).unwrap();
        assert_eq!(inst.mdp.features(0, 0), &v(&[1.0]));
        assert_eq!(inst.mdp.mu(), &Matrix::from_element(1, 1, 1.0));
        let inst = generate_linear_mdp(1, 1, 1, 0, 1.0).unwrap();
        assert_abs_diff_eq!(
            inst.mdp.transition_dist(0, 0).unwrap()[0],
            1.0,
            epsilon = 1e-15
        );
        assert_eq!(
            stationary_distribution(&inst.mdp, &inst.policy).unwrap(),
            v(&[1.0])
        );
    }

    #[test]
    fn generator_is_deterministic_and_seed_sensitive() {
        let a = generate_linear_mdp(100, 50, 10, 42, 8.0).unwrap();
        let b = generate_linear_mdp(100, 50, 10, 42, 8.0).unwrap();
        let c = generate_linear_mdp(100, 50, 10, 43, 8.0).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_ne!(a.to_json().unwrap(), c.to_json().unwrap());
        let beta = exact_solution_beta(&a.mdp, &a.policy).unwrap();
        assert_abs_diff_eq!(beta.norm(), 8.0, epsilon = 1e-9);
    }

    #[test]
    fn generator_rejects_bad_sizes() {
        assert!(generate_linear_mdp(0, 1, 1, 0, 1.0).is_err());
        assert!(generate_linear_mdp(1, 0, 1, 0, 1.0).is_err());
        assert!(generate_linear_mdp(1, 1, 0, 0, 1.0).is_err());
        assert!(generate_linear_mdp(2, 2, 2, 0, 0.0).is_err());
    }

    #[test]
    fn whitening_preserves_transitions_and_normalizes_features() {
        let simplex = GeneratorOptions {
            basis: FeatureBasis::Simplex,
            ..Default::default()
        };
        let plain = generate_linear_mdp_with(20, 4, 5, 3, 1.0, &simplex).unwrap();
        let white =
            generate_linear_mdp_with(20, 4, 5, 3, 1.0, &GeneratorOptions::default()).unwrap();
        for s in 0..20 {
            for a in 0..4 {
                let diff = plain.mdp.transition_dist(s, a).unwrap()
                    - white.mdp.transition_dist(s, a).unwrap();
                assert!(diff.amax() < 1e-13);
            }
        }
        let q = stationary_distribution(&white.mdp, &white.policy).unwrap();
        let mut gram = Matrix::zeros(5, 5);
        for s in 0..20 {
            for a in 0..4 {
                let phi = white.mdp.features(s, a);
                gram.ger(q[s] * white.policy.prob(s, a), phi, phi, 1.0);
            }
        }
        let target = DEFAULT_FEATURE_RMS * DEFAULT_FEATURE_RMS / 5.0;
        assert!((gram - Matrix::identity(5, 5) * target).amax() < 1e-10 * target.max(1.0));
    }

    #[test]
    fn centered_rewards_have_zero_stationary_mean() {
        let inst = generate_linear_mdp(30, 5, 4, 11, 3.0).unwrap();
        let q = stationary_distribution(&inst.mdp, &inst.policy).unwrap();
        let mean: f64 = (0..30)
            .flat_map(|s| (0..5).map(move |a| (s, a)))
            .map(|(s, a)| q[s] * inst.policy.prob(s, a) * inst.mdp.reward(s, a))
            .sum();
        let scale = (0..30)
            .map(|s| inst.mdp.reward(s, 0).abs())
            .fold(0.0, f64::max);
        assert!(mean.abs() < 1e-12 * scale.max(1.0));
    }

    #[test]
    fn transition_dist_examples() {
        let inst = two_state([[0.3, 0.7], [0.6, 0.4]], [1.0, 0.0], 0.5);
        // φ = e_j collapses the mixture onto row j of μ.
        assert_eq!(inst.mdp.transition_dist(1, 0).unwrap(), v(&[0.6, 0.4]));
        assert!(inst.mdp.transition_dist(2, 0).is_err());
        assert!(inst.mdp.transition_dist(0, 1).is_err());

        let inst = small(1);
        let (s, a) = (3, 2);
        let phi = inst.mdp.features(s, a);
        let mut brute = Vector::zeros(5);
        for j in 0..3 {
            for t in 0..5 {
                brute[t] += phi[j] * inst.mdp.mu()[(j, t)];
            }
        }
        assert!((brute - inst.mdp.transition_dist(s, a).unwrap()).amax() < 1e-15);
    }

    #[test]
    fn invalid_transitions_are_rejected() {
        let phi = vec![vec![v(&[1.0])]];
        assert!(
            LinearMdp::new(phi.clone(), Matrix::from_element(1, 1, 0.9), v(&[0.0]), 0.5).is_err()
        );
        assert!(
            LinearMdp::new(phi.clone(), Matrix::from_element(1, 1, 1.0), v(&[0.0]), 1.0).is_err()
        );
        assert!(LinearMdp::new(phi, Matrix::from_element(1, 2, 0.5), v(&[0.0]), 0.5).is_err());
        assert!(Policy::new(Matrix::from_row_slice(1, 2, &[0.7, 0.7])).is_err());
    }

    #[test]
    fn stationary_examples() {
        let inst = two_state([[0.3, 0.7], [0.7, 0.3]], [0.0, 0.0], 0.5);
        let q = stationary_distribution(&inst.mdp, &inst.policy).unwrap();
        assert_abs_diff_eq!(q, v(&[0.5, 0.5]), epsilon = 1e-12);

        for seed in 0..3 {
            let inst = small(seed);
            let power = stationary_distribution(&inst.mdp, &inst.policy).unwrap();
            let dense = stationary_distribution_dense(&inst.mdp, &inst.policy).unwrap();
            assert!((&power - &dense).amax() < 1e-10);
            let chain = inst.mdp.state_chain(&inst.policy).unwrap();
            assert!(stationary_residual(&chain, &power) <= STATIONARY_RESIDUAL_TOL);
            assert!(power.min() >= 0.0);
            assert_abs_diff_eq!(power.sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn periodic_chain_falls_back_to_dense_solve() {
        let inst = two_state([[0.0, 1.0], [1.0, 0.0]], [0.0, 0.0], 0.5);
        let q = stationary_distribution(&inst.mdp, &inst.policy).unwrap();
        assert_abs_diff_eq!(q, v(&[0.5, 0.5]), epsilon = 1e-12);
    }

    #[test]
    fn bellman_f_examples() {
        let inst = small(2);
        let mdp = &inst.mdp;
        let sample = StepSample {
            x: StateAction { s: 1, a: 2 },
            y: StateAction { s: 4, a: 0 },
        };
        let zero = Vector::zeros(3);
        assert_abs_diff_eq!(
            bellman_f(mdp, &sample, &zero).unwrap(),
            -mdp.reward(1, 2),
            epsilon = 1e-15
        );

        // With γ → 0 and ν = 0 the residual is just φᵀβ.
        let tiny = LinearMdp::new(
            (0..5)
                .map(|s| (0..3).map(|a| mdp.features(s, a).clone()).collect())
                .collect(),
            mdp.mu().clone(),
            Vector::zeros(3),
            f64::MIN_POSITIVE,
        )
        .unwrap();
        let beta = v(&[0.5, -1.0, 2.0]);
        assert_abs_diff_eq!(
            bellman_f(&tiny, &sample, &beta).unwrap(),
            mdp.features(1, 2).dot(&beta),
            epsilon = 1e-15
        );
        let grad = bellman_f_subgrad(&tiny, &sample).unwrap();
        assert_abs_diff_eq!(grad, mdp.features(1, 2).clone(), epsilon = 1e-15);
    }

    #[test]
    fn subgrad_on_self_transition_scales_features() {
        let inst = small(3);
        let x = StateAction { s: 2, a: 1 };
        let grad = bellman_f_subgrad(&inst.mdp, &StepSample { x, y: x }).unwrap();
        let expected = inst.mdp.features(2, 1) * (1.0 - 0.95);
        assert!((grad - expected).amax() < 1e-15);
    }

    #[test]
    fn bellman_oracles_match_finite_differences() {
        let inst = small(4);
        let problem = BellmanProblem::from_instance(&inst, 1.0, 10.0, 1000.0).unwrap();
        let mut rng = rng::stream(0, 9);
        for _ in 0..10 {
            let sample = problem.sample(&mut rng);
            let beta = Vector::from_fn(3, |_, _| rng.random_range(-3.0..3.0));
            let theta = Vector::from_fn(3, |_, _| rng.random_range(-3.0..3.0));
            let err =
                finite_diff_check(&problem, &sample.x, &sample.y, &beta, &theta, 1e-6).unwrap();
            assert!(err <= 1e-10, "finite-difference error {err}");
        }
    }

    #[test]
    fn exact_solution_examples() {
        // Scalar instance: S = A = d = 1 so m = 1 and β* = ν/(1 − γ).
        let phi = vec![vec![v(&[1.0])]];
        let mdp = LinearMdp::new(phi, Matrix::from_element(1, 1, 1.0), v(&[0.3]), 0.9).unwrap();
        let policy = Policy::uniform(1, 1).unwrap();
        let beta = exact_solution_beta(&mdp, &policy).unwrap();
        assert_abs_diff_eq!(beta[0], 0.3 / (1.0 - 0.9), epsilon = 1e-12);

        // Nearly undiscounted: β* → ν.
        let inst = two_state([[0.3, 0.7], [0.6, 0.4]], [1.0, -2.0], 1e-300);
        let beta = exact_solution_beta(&inst.mdp, &inst.policy).unwrap();
        assert_abs_diff_eq!(beta, v(&[1.0, -2.0]), epsilon = 1e-15);

        for seed in 0..5 {
            let inst = small(seed);
            let beta = exact_solution_beta(&inst.mdp, &inst.policy).unwrap();
            for s in 0..5 {
                for a in 0..3 {
                    let f = exact_f(&inst.mdp, &inst.policy, StateAction { s, a }, &beta).unwrap();
                    assert!(f.abs() <= 1e-8);
                }
            }
        }
    }

    #[test]
    fn exact_f_without_discounting_is_shifted_linear_model() {
        let inst = two_state([[0.3, 0.7], [0.6, 0.4]], [1.0, -2.0], 1e-300);
        let beta = v(&[3.0, 5.0]);
        let x = StateAction { s: 1, a: 0 };
        assert_abs_diff_eq!(
            exact_f(&inst.mdp, &inst.policy, x, &beta).unwrap(),
            7.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn stationary_pair_frequencies() {
        let inst = small(5);
        let q = stationary_distribution(&inst.mdp, &inst.policy).unwrap();
        let sampler = TransitionSampler::new(&inst.mdp, &inst.policy, &q).unwrap();
        let mut rng = rng::stream(1, 0);
        let n = 1_000_000;
        let mut states = [0usize; 5];
        let mut next = [0usize; 5];
        let x = StateAction { s: 3, a: 1 };
        for _ in 0..n {
            states[sampler.sample_pair(&mut rng).x.s] += 1;
            next[sampler.successor(x, &mut rng).s] += 1;
        }
        let p = inst.mdp.transition_dist(3, 1).unwrap();
        for s in 0..5 {
            let sd = (q[s] * (1.0 - q[s]) / n as f64).sqrt();
            assert!((states[s] as f64 / n as f64 - q[s]).abs() <= 4.0 * sd);
            let sd = (p[s] * (1.0 - p[s]) / n as f64).sqrt();
            assert!((next[s] as f64 / n as f64 - p[s]).abs() <= 4.0 * sd);
        }
    }

    #[test]
    fn trivial_mdp_always_samples_the_same_pair() {
        let inst = generate_linear_mdp(1, 1, 1, 0, 1.0).unwrap();
        let q = stationary_distribution(&inst.mdp, &inst.policy).unwrap();
        let mut rng = rng::stream(0, 0);
        for _ in 0..100 {
            let sample = sample_pair(&inst.mdp, &inst.policy, &q, &mut rng).unwrap();
            assert_eq!(sample.x, StateAction { s: 0, a: 0 });
            assert_eq!(sample.y, StateAction { s: 0, a: 0 });
        }
    }

    #[test]
    fn exact_f_agrees_with_conditional_monte_carlo() {
        let inst = generate_linear_mdp(8, 3, 4, 6, 5.0).unwrap();
        let problem = BellmanProblem::from_instance(&inst, 1.0, 10.0, 1000.0).unwrap();
        let beta_star = problem.exact_solution().unwrap();
        let mut rng = rng::stream(2, 0);
        let n = 100_000;
        for trial in 0..21 {
            let x = StateAction {
                s: rng.random_range(0..8),
                a: rng.random_range(0..3),
            };
            let beta = if trial == 0 {
                beta_star.clone()
            } else {
                Vector::from_fn(4, |_, _| rng.random_range(-5.0..5.0))
            };
            let (mut sum, mut sum_sq) = (0.0, 0.0);
            for _ in 0..n {
                let y = problem.sample_y_given(&x, &mut rng);
                let f = problem.f_value(&x, &y, &beta).unwrap()[0];
                sum += f;
                sum_sq += f * f;
            }
            let mean = sum / n as f64;
            let sd = (sum_sq / n as f64 - mean * mean).max(0.0).sqrt();
            let exact = problem.exact_f(&x, &beta).unwrap()[0];
            assert!(
                (mean - exact).abs() <= 4.0 * sd / (n as f64).sqrt() + 1e-12,
                "trial {trial}"
            );
        }
    }

    #[test]
    fn problem_shape_and_constants() {
        let inst = small(7);
        let problem =
            make_bellman_problem(inst.mdp.clone(), inst.policy.clone(), 1.0, 10.0, 1000.0).unwrap();
        assert_eq!(
            problem.dims(),
            Dims {
                n_beta: 3,
                n_theta: 3,
                n_f: 1
            }
        );
        let c = problem.constants();
        let phi = problem.max_feature_norm();
        assert_eq!(c.l_g, Some(1.0));
        assert_eq!(c.l_grad_g, Some(1.0));
        assert_abs_diff_eq!(c.l_f_bar.unwrap(), 1.95 * phi, epsilon = 1e-15);
        assert_eq!(c.l_psi_bar, Some(phi));
        let total: f64 = problem.x_law().iter().map(|(_, w)| w).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn f_equals_psi_without_rewards_or_discounting() {
        let inst = small(8);
        let mdp = LinearMdp::new(
            (0..5)
                .map(|s| (0..3).map(|a| inst.mdp.features(s, a).clone()).collect())
                .collect(),
            inst.mdp.mu().clone(),
            Vector::zeros(3),
            f64::MIN_POSITIVE,
        )
        .unwrap();
        let problem = BellmanProblem::new(mdp, inst.policy, 1.0, 10.0, 1000.0).unwrap();
        let beta = v(&[1.0, -0.5, 0.25]);
        let mut rng = rng::stream(3, 0);
        for _ in 0..20 {
            let s = problem.sample(&mut rng);
            let f = problem.f_value(&s.x, &s.y, &beta).unwrap();
            let psi = problem.psi_value(&s.x, &beta).unwrap();
            assert_abs_diff_eq!(f, psi, epsilon = 1e-15);
        }
    }

    #[test]
    fn json_round_trip() {
        let inst = small(9);
        let text = inst.to_json().unwrap();
        let back = MdpInstance::from_json(&text).unwrap();
        assert_eq!(back, inst);
        assert!(MdpInstance::from_json(&text.replacen('{', r#"{"extra":1,"#, 1)).is_err());
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in [
            "S", "A", "d", "discount", "phi", "mu", "nu", "policy", "seed",
        ] {
            assert!(value.get(key).is_some(), "missing {key}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn tracking_parameter_reproduces_exact_f(seed in 0u64..1000, raw in prop::collection::vec(-10.0f64..10.0, 3)) {
            let inst = small(seed);
            let problem = BellmanProblem::from_instance(&inst, 1.0, 10.0, 1000.0).unwrap();
            let beta = Vector::from_vec(raw);
            let theta = problem.tracking_theta(&beta).unwrap();
            let exact = problem.exact_f_on_support(&beta).unwrap();
            for ((x, _), f) in problem.x_law().iter().zip(&exact) {
                let psi = problem.psi_value(x, &theta).unwrap();
                prop_assert!((psi[0] - f[0]).abs() <= 1e-10);
                let direct = exact_f(&inst.mdp, &inst.policy, *x, &beta).unwrap();
                prop_assert!((direct - f[0]).abs() <= 1e-10);
            }
        }

        #[test]
        fn generated_instances_are_valid(seed in 0u64..10_000, s in 1usize..12, a in 1usize..5, d in 1usize..4) {
            let simplex = GeneratorOptions { basis: FeatureBasis::Simplex, ..Default::default() };
            let inst = generate_linear_mdp_with(s, a, d, seed, 1.0, &simplex).unwrap();
            prop_assert!(all_rows_valid(&inst.mdp));
            let beta = exact_solution_beta(&inst.mdp, &inst.policy).unwrap();
            prop_assert!((beta.norm() - 1.0).abs() < 1e-9);
        }
    }
}
