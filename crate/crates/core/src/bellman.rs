//! Exact matrix-level objects: Bellman operators, TD fixed points, mean
//! update directions and the gradient-splitting certificates.
//!
//! The TD(0) mean direction satisfies `-g(theta) = B (theta - theta*)` with
//! `B = Phi^T D (I - gamma P) Phi`, and `B + B^T = 2A` for the symmetric
//! `A = (1 - gamma) Phi^T D Phi + gamma Phi^T L Phi`. The certificates build
//! `B` from the transition matrix and `A` from Dirichlet Laplacians, then
//! measure how far `B + B^T - 2A` is from zero. Building `A` by symmetrizing
//! `B` would make that check vacuous, so the two are never derived from each
//! other.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{check_len, Error, Result};
use crate::features::FeatureMap;
use crate::geometry::{d_norm_sq, dirichlet_sq, dirichlet_sq_with, laplacian, laplacian_of, ValueVector};
use crate::mdp::InducedChain;

/// Largest admissible `||mean direction at theta*||_2`.
pub const FIXED_POINT_TOL: f64 = 1e-9;
/// Certificate tolerance for TD(0).
pub const TD0_CERT_TOL: f64 = 1e-10;
/// Base certificate tolerance for TD(lambda), before the tail budget.
pub const TD_LAMBDA_CERT_TOL: f64 = 1e-8;
/// Fraction of the tolerance the series tail may consume when `M` is chosen
/// automatically.
const TAIL_SHARE: f64 = 0.01;

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::Invalid(format!("lambda must lie in [0,1), got {lambda}")));
    }
    Ok(())
}

fn check_features(chain: &InducedChain, features: &FeatureMap) -> Result<()> {
    check_len(chain.n_states(), features.n_states())
}

/// `Phi^T D`.
fn phi_t_d(chain: &InducedChain, features: &FeatureMap) -> DMatrix<f64> {
    let mut out = features.phi().transpose();
    for (s, p) in chain.pi().iter().enumerate() {
        out.column_mut(s).scale_mut(*p);
    }
    out
}

/// `(T v)(s) = sum_s' P(s,s') (r(s,s') + gamma v(s'))`.
pub fn bellman_apply(chain: &InducedChain, v: &ValueVector) -> Result<ValueVector> {
    check_len(chain.n_states(), v.len())?;
    Ok(chain.reward() + chain.p() * v * chain.gamma())
}

/// The true value function and its stationary mean.
#[derive(Clone, Debug, Serialize)]
pub struct TrueValue {
    pub v: Vec<f64>,
    /// `pi^T V`.
    pub mean: f64,
    /// `max |(I - gamma P) V - R|`.
    pub residual: f64,
}

impl TrueValue {
    pub fn vector(&self) -> ValueVector {
        DVector::from_column_slice(&self.v)
    }
}

/// Solves `(I - gamma P) V = R` and checks `pi^T V = pi^T R / (1 - gamma)`.
pub fn true_value(chain: &InducedChain) -> Result<TrueValue> {
    let n = chain.n_states();
    let gamma = chain.gamma();
    let system = DMatrix::identity(n, n) - chain.p() * gamma;
    let v = solve_refined(&system, chain.reward()).ok_or_else(|| Error::SingularSystem("I - gamma P".into()))?;
    let residual = (&system * &v - chain.reward()).amax();
    let mean = chain.pi().dot(&v);
    let closed = chain.pi().dot(chain.reward()) / (1.0 - gamma);
    if (mean - closed).abs() > 1e-10 * (1.0 + closed.abs()) {
        return Err(Error::Invalid(format!(
            "pi^T V = {mean} disagrees with pi^T R/(1-gamma) = {closed}"
        )));
    }
    Ok(TrueValue {
        v: v.iter().copied().collect(),
        mean,
        residual,
    })
}

/// LU solve followed by one step of iterative refinement.
fn solve_refined(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let lu = a.clone().lu();
    let mut x = lu.solve(b)?;
    let r = b - a * &x;
    x += lu.solve(&r)?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Mean TD(0) direction under stationary sampling,
/// `g(theta) = Phi^T D R + Phi^T D (gamma P - I) Phi theta`.
pub fn mean_direction_td0(chain: &InducedChain, features: &FeatureMap, theta: &DVector<f64>) -> Result<DVector<f64>> {
    check_features(chain, features)?;
    check_len(features.k(), theta.len())?;
    let v = features.value_of(theta)?;
    let shifted = chain.p() * &v * chain.gamma() - v;
    Ok(phi_t_d(chain, features) * (chain.reward() + shifted))
}

/// A TD fixed point and how well it zeroes the mean direction.
#[derive(Clone, Debug, Serialize)]
pub struct FixedPoint {
    pub theta_star: Vec<f64>,
    pub lambda: f64,
    /// `(1 - lambda) / (1 - gamma lambda)`.
    pub kappa: f64,
    /// `||mean direction at theta*||_2`.
    pub residual: f64,
}

impl FixedPoint {
    pub fn theta(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta_star)
    }
}

fn solve_fixed_point(lhs: DMatrix<f64>, rhs: DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let smin = lhs
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if !(smin > 1e-14 * lhs.amax().max(1.0)) {
        return Err(Error::SingularSystem(format!("{what} has sigma_min = {smin:e}")));
    }
    solve_refined(&lhs, &rhs).ok_or_else(|| Error::SingularSystem(what.into()))
}

/// Solves `Phi^T D (I - gamma P) Phi theta = Phi^T D R`.
pub fn td0_fixed_point(chain: &InducedChain, features: &FeatureMap) -> Result<FixedPoint> {
    check_features(chain, features)?;
    let ptd = phi_t_d(chain, features);
    let n = chain.n_states();
    let lhs = &ptd * (DMatrix::identity(n, n) - chain.p() * chain.gamma()) * features.phi();
    let rhs = &ptd * chain.reward();
    let theta = solve_fixed_point(lhs, rhs, "Phi^T D (I - gamma P) Phi")?;
    let residual = mean_direction_td0(chain, features, &theta)?.norm();
    if residual > FIXED_POINT_TOL {
        return Err(Error::SingularSystem(format!(
            "TD(0) fixed point residual {residual:e}"
        )));
    }
    Ok(FixedPoint {
        theta_star: theta.iter().copied().collect(),
        lambda: 0.0,
        kappa: 1.0,
        residual,
    })
}

/// How `T^(lambda)` is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TLambdaMode {
    /// `(I - gamma lambda P)^{-1} R + (1 - lambda) gamma P (I - gamma lambda P)^{-1} J`.
    ClosedForm,
    /// Both geometric series cut after index `M`: the reward part summed as
    /// `sum_{t<=M} (gamma lambda)^t P^t R` (the double series with its two
    /// sums exchanged), the bootstrap part as
    /// `(1 - lambda) sum_{m<=M} lambda^m gamma^{m+1} P^{m+1} J`.
    Truncated(usize),
    /// The double series cut at outer index `m = M` without exchanging sums.
    /// Its reward tail decays like `lambda^{M+1}`, not `(gamma lambda)^{M+1}`.
    OuterCut(usize),
}

fn resolvent(chain: &InducedChain, scale: f64) -> Result<DMatrix<f64>> {
    let n = chain.n_states();
    (DMatrix::identity(n, n) - chain.p() * scale)
        .try_inverse()
        .ok_or_else(|| Error::SingularSystem("I - gamma lambda P".into()))
}

/// Applies the lambda-averaged Bellman operator.
pub fn t_lambda_apply(chain: &InducedChain, j: &ValueVector, lambda: f64, mode: TLambdaMode) -> Result<ValueVector> {
    check_lambda(lambda)?;
    check_len(chain.n_states(), j.len())?;
    let gamma = chain.gamma();
    let p = chain.p();
    match mode {
        TLambdaMode::ClosedForm => {
            let inv = resolvent(chain, gamma * lambda)?;
            Ok(&inv * chain.reward() + p * (&inv * j) * ((1.0 - lambda) * gamma))
        }
        TLambdaMode::Truncated(m_max) => {
            let mut reward_part = chain.reward().clone();
            let mut pr = chain.reward().clone();
            let mut pj = j.clone();
            let mut boot = DVector::zeros(j.len());
            for m in 0..=m_max {
                if m > 0 {
                    pr = p * pr;
                    reward_part += &pr * (gamma * lambda).powi(m as i32);
                }
                pj = p * pj;
                boot += &pj * (lambda.powi(m as i32) * gamma.powi(m as i32 + 1));
            }
            Ok(reward_part + boot * (1.0 - lambda))
        }
        TLambdaMode::OuterCut(m_max) => {
            // s_m = sum_{t<=m} gamma^t P^t R, q_m = gamma^{m+1} P^{m+1} J.
            let mut pr = chain.reward().clone();
            let mut partial = pr.clone();
            let mut pj = j.clone();
            let mut out = DVector::zeros(j.len());
            for m in 0..=m_max {
                if m > 0 {
                    pr = p * pr;
                    partial += &pr * gamma.powi(m as i32);
                }
                pj = p * pj;
                out += (&partial + &pj * gamma.powi(m as i32 + 1)) * lambda.powi(m as i32);
            }
            Ok(out * (1.0 - lambda))
        }
    }
}

/// Sup-norm bound on `|T^(lambda) J - truncated(J)|` for the given mode.
pub fn t_lambda_tail_bound(chain: &InducedChain, j: &ValueVector, lambda: f64, mode: TLambdaMode) -> f64 {
    let gamma = chain.gamma();
    let gl = gamma * lambda;
    let r = chain.reward().amax();
    let jn = j.amax();
    match mode {
        TLambdaMode::ClosedForm => 0.0,
        TLambdaMode::Truncated(m) => gl.powi(m as i32 + 1) / (1.0 - gl) * (r + (1.0 - lambda) * gamma * jn),
        TLambdaMode::OuterCut(m) => {
            lambda.powi(m as i32 + 1) * r / (1.0 - gamma)
                + (1.0 - lambda) * gamma * gl.powi(m as i32 + 1) / (1.0 - gl) * jn
        }
    }
}

/// Mean TD(lambda) direction `x(theta) = Phi^T D (T^(lambda)(Phi theta) - Phi theta)`.
pub fn mean_direction_td_lambda(
    chain: &InducedChain,
    features: &FeatureMap,
    theta: &DVector<f64>,
    lambda: f64,
) -> Result<DVector<f64>> {
    check_features(chain, features)?;
    let v = features.value_of(theta)?;
    let tv = t_lambda_apply(chain, &v, lambda, TLambdaMode::ClosedForm)?;
    Ok(phi_t_d(chain, features) * (tv - v))
}

/// Solves `Phi^T D ((1-lambda) gamma P (I - gamma lambda P)^{-1} - I) Phi theta
/// = -Phi^T D (I - gamma lambda P)^{-1} R`.
pub fn td_lambda_fixed_point(chain: &InducedChain, features: &FeatureMap, lambda: f64) -> Result<FixedPoint> {
    check_lambda(lambda)?;
    check_features(chain, features)?;
    let gamma = chain.gamma();
    let n = chain.n_states();
    let inv = resolvent(chain, gamma * lambda)?;
    let ptd = phi_t_d(chain, features);
    let op = chain.p() * &inv * ((1.0 - lambda) * gamma) - DMatrix::identity(n, n);
    let lhs = &ptd * op * features.phi();
    let rhs = -(&ptd * (&inv * chain.reward()));
    let theta = solve_fixed_point(lhs, rhs, "TD(lambda) normal equations")?;
    let residual = mean_direction_td_lambda(chain, features, &theta, lambda)?.norm();
    if residual > FIXED_POINT_TOL {
        return Err(Error::SingularSystem(format!(
            "TD(lambda) fixed point residual {residual:e}"
        )));
    }
    Ok(FixedPoint {
        theta_star: theta.iter().copied().collect(),
        lambda,
        kappa: (1.0 - lambda) / (1.0 - gamma * lambda),
        residual,
    })
}

/// Matrices `B`, `A` with `-mean_direction = B (theta - theta*)` and
/// `f(theta) = (theta - theta*)^T A (theta - theta*)`.
#[derive(Clone, Debug, Serialize)]
pub struct SplittingCertificate {
    #[serde(skip)]
    pub b: DMatrix<f64>,
    #[serde(skip)]
    pub a: DMatrix<f64>,
    pub lambda: f64,
    /// Max row sum of `|B + B^T - 2A|`.
    pub residual_inf: f64,
    /// Tolerance the residual is held to (includes the tail budget).
    pub tolerance: f64,
    /// Truncation index of the lambda series (`None` for TD(0)).
    pub series_truncation_m: Option<usize>,
    /// `(gamma lambda)^{M+1} / (1 - gamma lambda)`.
    pub tail_budget: f64,
    /// Max row sum of `|B_truncated - B_closed_form|` (TD(lambda) only).
    pub closed_form_gap: f64,
    /// Asymmetry `max |B - B^T|`, zero for reversible chains.
    pub b_asymmetry: f64,
    /// Smallest eigenvalue of `A`.
    pub a_min_eigenvalue: f64,
}

impl SplittingCertificate {
    pub fn holds(&self) -> bool {
        self.residual_inf <= self.tolerance && self.a_min_eigenvalue >= -1e-10
    }
}

fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn finish_certificate(
    b: DMatrix<f64>,
    a: DMatrix<f64>,
    lambda: f64,
    tolerance: f64,
    series_truncation_m: Option<usize>,
    tail_budget: f64,
    closed_form_gap: f64,
) -> SplittingCertificate {
    let residual_inf = inf_norm(&(&b + b.transpose() - &a * 2.0));
    let b_asymmetry = (&b - b.transpose()).amax();
    let a_sym = (&a + a.transpose()) * 0.5;
    let a_min_eigenvalue = SymmetricEigen::new(a_sym)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    SplittingCertificate {
        b,
        a,
        lambda,
        residual_inf,
        tolerance,
        series_truncation_m,
        tail_budget,
        closed_form_gap,
        b_asymmetry,
        a_min_eigenvalue,
    }
}

/// TD(0) certificate: `B = Phi^T D (I - gamma P) Phi`,
/// `A = (1 - gamma) Phi^T D Phi + gamma Phi^T L Phi`.
pub fn splitting_certificate_td0(chain: &InducedChain, features: &FeatureMap) -> Result<SplittingCertificate> {
    check_features(chain, features)?;
    let n = chain.n_states();
    let gamma = chain.gamma();
    let phi = features.phi();
    let ptd = phi_t_d(chain, features);
    let b = &ptd * (DMatrix::identity(n, n) - chain.p() * gamma) * phi;
    let gram = &ptd * phi;
    let a = gram * (1.0 - gamma) + phi.transpose() * laplacian(chain) * phi * gamma;
    Ok(finish_certificate(b, a, 0.0, TD0_CERT_TOL, None, 0.0, 0.0))
}

/// `(gamma lambda)^{M+1} / (1 - gamma lambda)`.
pub fn tail_budget(gamma: f64, lambda: f64, m: usize) -> f64 {
    let gl = gamma * lambda;
    gl.powi(m as i32 + 1) / (1.0 - gl)
}

/// Smallest `M` whose tail budget is at most `TAIL_SHARE * tolerance`.
pub fn auto_truncation(gamma: f64, lambda: f64, tolerance: f64) -> usize {
    let target = TAIL_SHARE * tolerance;
    (0..)
        .find(|&m| tail_budget(gamma, lambda, m) <= target)
        .expect("geometric tail reaches any positive target")
}

/// TD(lambda) certificate with series truncated at `M`.
///
/// `B = Phi^T D Phi - (1-lambda) sum_{m<=M} lambda^m gamma^{m+1} Phi^T D P^{m+1} Phi`,
/// `A = (1 - gamma kappa) Phi^T D Phi + (1-lambda) sum_{m<=M} lambda^m gamma^{m+1} Phi^T L_{m+1} Phi`
/// with `L_k` the `k`-step Dirichlet Laplacian. With `truncation = None` the
/// index is picked by [`auto_truncation`]; an explicit index that cannot meet
/// the tolerance is an error naming the required one.
pub fn splitting_certificate_td_lambda(
    chain: &InducedChain,
    features: &FeatureMap,
    lambda: f64,
    truncation: Option<usize>,
) -> Result<SplittingCertificate> {
    check_lambda(lambda)?;
    check_features(chain, features)?;
    let gamma = chain.gamma();
    let required = auto_truncation(gamma, lambda, TD_LAMBDA_CERT_TOL);
    let m_max = match truncation {
        Some(m) if m < required => return Err(Error::TruncationTooShort { given: m, required }),
        Some(m) => m,
        None => required,
    };
    let kappa = (1.0 - lambda) / (1.0 - gamma * lambda);
    let phi = features.phi();
    let ptd = phi_t_d(chain, features);
    let gram = &ptd * phi;
    let k = features.k();

    let mut b_sum = DMatrix::zeros(k, k);
    let mut a_sum = DMatrix::zeros(k, k);
    let mut pk = chain.p().clone();
    for m in 0..=m_max {
        if m > 0 {
            pk = &pk * chain.p();
        }
        let c = lambda.powi(m as i32) * gamma.powi(m as i32 + 1);
        b_sum += &ptd * &pk * phi * c;
        a_sum += phi.transpose() * laplacian_of(chain.pi(), &pk) * phi * c;
    }
    let b = &gram - b_sum * (1.0 - lambda);
    let a = &gram * (1.0 - gamma * kappa) + a_sum * (1.0 - lambda);

    let inv = resolvent(chain, gamma * lambda)?;
    let b_closed = &gram - &ptd * chain.p() * inv * phi * ((1.0 - lambda) * gamma);
    let closed_form_gap = inf_norm(&(&b - b_closed));

    let budget = tail_budget(gamma, lambda, m_max);
    Ok(finish_certificate(
        b,
        a,
        lambda,
        TD_LAMBDA_CERT_TOL + budget,
        Some(m_max),
        budget,
        closed_form_gap,
    ))
}

/// Both sides of `(theta* - theta)^T g(theta) =
/// (1-gamma) ||V* - V_theta||_D^2 + gamma ||V* - V_theta||_Dir^2`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct InnerProductGap {
    pub lhs: f64,
    pub rhs: f64,
    /// `(1 - gamma) ||V* - V_theta||_D^2`, the older lower bound.
    pub d_norm_part: f64,
}

impl InnerProductGap {
    pub fn holds(&self) -> bool {
        (self.lhs - self.rhs).abs() <= 1e-10 * (1.0 + self.rhs.abs())
    }
}

/// Evaluates both sides independently: the left from the mean direction,
/// the right from the two seminorms.
pub fn corollary1_gap(
    chain: &InducedChain,
    features: &FeatureMap,
    theta_star: &DVector<f64>,
    theta: &DVector<f64>,
) -> Result<InnerProductGap> {
    let g = mean_direction_td0(chain, features, theta)?;
    let lhs = (theta_star - theta).dot(&g);
    let diff = features.value_of(&(theta_star - theta))?;
    let gamma = chain.gamma();
    let d_norm_part = (1.0 - gamma) * d_norm_sq(chain, &diff)?;
    let rhs = d_norm_part + gamma * dirichlet_sq(chain, &diff, 1)?;
    Ok(InnerProductGap { lhs, rhs, d_norm_part })
}

/// `f(theta) = (1-gamma) ||V_theta - V*||_D^2 + gamma ||V_theta - V*||_Dir^2`,
/// evaluated from the seminorms.
pub fn td0_objective(
    chain: &InducedChain,
    features: &FeatureMap,
    theta_star: &DVector<f64>,
    theta: &DVector<f64>,
) -> Result<f64> {
    let diff = features.value_of(&(theta - theta_star))?;
    let gamma = chain.gamma();
    Ok((1.0 - gamma) * d_norm_sq(chain, &diff)? + gamma * dirichlet_sq(chain, &diff, 1)?)
}

/// `f^(lambda)` from the `k`-step seminorms, series truncated at `M`.
pub fn td_lambda_objective(
    chain: &InducedChain,
    features: &FeatureMap,
    theta_star: &DVector<f64>,
    theta: &DVector<f64>,
    lambda: f64,
    m_max: usize,
) -> Result<f64> {
    check_lambda(lambda)?;
    let diff = features.value_of(&(theta - theta_star))?;
    let gamma = chain.gamma();
    let kappa = (1.0 - lambda) / (1.0 - gamma * lambda);
    let mut total = (1.0 - gamma * kappa) * d_norm_sq(chain, &diff)?;
    let mut pk = chain.p().clone();
    for m in 0..=m_max {
        if m > 0 {
            pk = &pk * chain.p();
        }
        total += (1.0 - lambda)
            * lambda.powi(m as i32)
            * gamma.powi(m as i32 + 1)
            * dirichlet_sq_with(chain.pi(), &pk, &diff);
    }
    Ok(total)
}

/// Quadratic `(theta - a)^T A (theta - a)` with precomputed `A`.
#[derive(Clone, Debug)]
pub struct Quadratic {
    a: DMatrix<f64>,
    center: DVector<f64>,
}

impl Quadratic {
    pub fn new(a: DMatrix<f64>, center: DVector<f64>) -> Self {
        Self { a, center }
    }

    pub fn from_certificate(cert: &SplittingCertificate, center: DVector<f64>) -> Self {
        Self::new(cert.a.clone(), center)
    }

    pub fn value(&self, theta: &DVector<f64>) -> f64 {
        let d = theta - &self.center;
        d.dot(&(&self.a * &d))
    }

    /// `grad f = 2 A (theta - a)`.
    pub fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.a * (theta - &self.center) * 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{random_ergodic_chain, reference_chain, sample_trajectory, GarnetSpec, Start};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn damped_cycle(gamma: f64) -> InducedChain {
        let cycle = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let r = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.5, -1.0, 0.2, 0.0, 0.3]);
        InducedChain::new(cycle * 0.9 + DMatrix::identity(3, 3) * 0.1, r, gamma, None).unwrap()
    }

    fn random_instance(seed: u64, n: usize, k: usize, gamma: f64) -> (InducedChain, FeatureMap) {
        let spec = GarnetSpec {
            n_states: n,
            n_actions: 2,
            branching: n.min(3),
            gamma,
        };
        let chain = random_ergodic_chain(&spec, seed, 100).unwrap();
        let features = FeatureMap::random_unit_rows(n, k, seed + 1000).unwrap();
        (chain, features)
    }

    fn random_theta(rng: &mut ChaCha8Rng, k: usize) -> DVector<f64> {
        DVector::from_fn(k, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn bellman_examples() {
        let c = reference_chain(0.5).unwrap();
        let tv = true_value(&c).unwrap();
        assert!((bellman_apply(&c, &tv.vector()).unwrap() - tv.vector()).amax() < 1e-10);
        let zero = DVector::zeros(2);
        let once = bellman_apply(&c, &zero).unwrap();
        assert_eq!(once.as_slice(), &[1.0, 0.0]);
        // Dense oracle: R + gamma P R = (1 + 0.5*0.9, 0.5*0.1).
        let twice = bellman_apply(&c, &once).unwrap();
        assert!((twice[0] - 1.45).abs() < 1e-15);
        assert!((twice[1] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn reference_true_value() {
        let tv = true_value(&reference_chain(0.5).unwrap()).unwrap();
        assert!((tv.v[0] - 11.0 / 6.0).abs() < 1e-12);
        assert!((tv.v[1] - 1.0 / 6.0).abs() < 1e-12);
        assert!((tv.mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_reward_value() {
        let c = InducedChain::new(
            DMatrix::from_row_slice(2, 2, &[0.3, 0.7, 0.6, 0.4]),
            DMatrix::from_element(2, 2, 2.0),
            0.8,
            None,
        )
        .unwrap();
        let tv = true_value(&c).unwrap();
        for v in &tv.v {
            assert!((v - 10.0).abs() < 1e-12);
        }
    }

    #[test]
    fn random_true_value_residual() {
        for seed in 0..10 {
            let (c, _) = random_instance(seed, 7, 3, 0.99);
            assert!(true_value(&c).unwrap().residual <= 1e-10);
        }
    }

    #[test]
    fn identity_features_recover_true_value() {
        let c = damped_cycle(0.9);
        let fp = td0_fixed_point(&c, &FeatureMap::identity(3)).unwrap();
        let tv = true_value(&c).unwrap();
        for (a, b) in fp.theta_star.iter().zip(&tv.v) {
            assert!((a - b).abs() < 1e-10);
        }
        // With Phi = I the mean direction is D(R + (gamma P - I) theta).
        let theta = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let g = mean_direction_td0(&c, &FeatureMap::identity(3), &theta).unwrap();
        let hand = c.d() * (c.reward() + (c.p() * 0.9 - DMatrix::identity(3, 3)) * &theta);
        assert!((g - hand).amax() < 1e-14);
        for lambda in [0.0, 0.3, 0.9] {
            let fl = td_lambda_fixed_point(&c, &FeatureMap::identity(3), lambda).unwrap();
            for (a, b) in fl.theta_star.iter().zip(&tv.v) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn scalar_constant_feature_fixed_point() {
        // K = 1 with phi = 1: theta* solves pi^T (I - gamma P) 1 theta = pi^T R,
        // i.e. (1 - gamma) theta = pi^T R.
        let c = damped_cycle(0.7);
        let f = FeatureMap::new(DMatrix::from_element(3, 1, 1.0)).unwrap();
        let fp = td0_fixed_point(&c, &f).unwrap();
        let by_hand = c.pi().dot(c.reward()) / (1.0 - 0.7);
        assert!((fp.theta_star[0] - by_hand).abs() < 1e-12);
        let g = mean_direction_td0(&c, &f, &fp.theta()).unwrap();
        assert!(g.norm() < 1e-10);
    }

    #[test]
    fn random_fixed_points_zero_the_mean_direction() {
        for seed in 0..20 {
            let (c, f) = random_instance(seed, 6, 3, 0.9);
            assert!(td0_fixed_point(&c, &f).unwrap().residual <= 1e-9);
            let fl = td_lambda_fixed_point(&c, &f, 0.5).unwrap();
            assert!(fl.residual <= 1e-9);
            assert!((fl.kappa - 0.5 / 0.55).abs() < 1e-15);
        }
    }

    #[test]
    fn lambda_zero_fixed_point_reduces() {
        let (c, f) = random_instance(3, 6, 2, 0.9);
        let a = td0_fixed_point(&c, &f).unwrap();
        let b = td_lambda_fixed_point(&c, &f, 0.0).unwrap();
        for (x, y) in a.theta_star.iter().zip(&b.theta_star) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn gram_matrix_is_positive_definite() {
        for seed in 0..10 {
            let (c, f) = random_instance(seed, 7, 4, 0.9);
            let gram = f.phi().transpose() * c.d() * f.phi();
            let min = SymmetricEigen::new(gram).eigenvalues.min();
            assert!(min > 0.0);
        }
    }

    #[test]
    fn mean_direction_matches_monte_carlo() {
        let (c, f) = random_instance(11, 5, 2, 0.8);
        let theta = DVector::from_vec(vec![0.7, -0.4]);
        let exact = mean_direction_td0(&c, &f, &theta).unwrap();
        // Independent stationary pairs (s, s'): one fresh single-step trajectory each.
        let samples = 1_000_000;
        let k = 2;
        let mut sum = vec![0.0; k];
        let mut sum_sq = vec![0.0; k];
        for seed in 0..samples {
            let tr = sample_trajectory(&c, 1, seed, Start::Stationary).unwrap()[0];
            let phi = f.row(tr.state);
            let phi_next = f.row(tr.next);
            let v: f64 = phi.iter().zip(theta.iter()).map(|(a, b)| a * b).sum();
            let v_next: f64 = phi_next.iter().zip(theta.iter()).map(|(a, b)| a * b).sum();
            let delta = tr.reward + 0.8 * v_next - v;
            for i in 0..k {
                let g = delta * phi[i];
                sum[i] += g;
                sum_sq[i] += g * g;
            }
        }
        for i in 0..k {
            let mean = sum[i] / samples as f64;
            let var = sum_sq[i] / samples as f64 - mean * mean;
            let se = (var / samples as f64).sqrt();
            assert!(
                (mean - exact[i]).abs() <= 3.0 * se + 1e-12,
                "coord {i}: {mean} vs {}",
                exact[i]
            );
        }
    }

    #[test]
    fn t_lambda_reduces_and_fixes_v() {
        let c = damped_cycle(0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let j = random_theta(&mut rng, 3);
        let t0 = t_lambda_apply(&c, &j, 0.0, TLambdaMode::ClosedForm).unwrap();
        assert!((t0 - bellman_apply(&c, &j).unwrap()).amax() < 1e-14);
        let v = true_value(&c).unwrap().vector();
        for lambda in [0.0, 0.4, 0.95] {
            let tv = t_lambda_apply(&c, &v, lambda, TLambdaMode::ClosedForm).unwrap();
            assert!((tv - &v).amax() < 1e-9);
        }
        assert!(t_lambda_apply(&c, &j, 1.0, TLambdaMode::ClosedForm).is_err());
        assert!(t_lambda_apply(&c, &j, -0.1, TLambdaMode::ClosedForm).is_err());
    }

    #[test]
    fn t_lambda_series_within_tail_bound() {
        let c = damped_cycle(0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let j = random_theta(&mut rng, 3) * 10.0;
        let closed = t_lambda_apply(&c, &j, 0.7, TLambdaMode::ClosedForm).unwrap();
        for mode in [
            TLambdaMode::Truncated(200),
            TLambdaMode::Truncated(5),
            TLambdaMode::OuterCut(5),
            TLambdaMode::OuterCut(40),
        ] {
            let trunc = t_lambda_apply(&c, &j, 0.7, mode).unwrap();
            let bound = t_lambda_tail_bound(&c, &j, 0.7, mode);
            assert!((&closed - trunc).amax() <= bound + 1e-12, "{mode:?}");
        }
    }

    #[test]
    fn reversible_chain_certificate_is_symmetric() {
        let c = reference_chain(0.5).unwrap();
        let cert = splitting_certificate_td0(&c, &FeatureMap::identity(2)).unwrap();
        assert!(cert.b_asymmetry < 1e-15);
        assert!((&cert.b - &cert.a).amax() < 1e-12);
        assert!(cert.residual_inf < 1e-12);
    }

    #[test]
    fn nonreversible_certificate_holds() {
        let c = damped_cycle(0.9);
        let cert = splitting_certificate_td0(&c, &FeatureMap::identity(3)).unwrap();
        assert!(cert.b_asymmetry > 1e-3);
        assert!(cert.residual_inf <= 1e-12);
        assert!(cert.holds());
    }

    #[test]
    fn certificate_b_reproduces_mean_direction() {
        let (c, f) = random_instance(21, 6, 3, 0.9);
        let star = td0_fixed_point(&c, &f).unwrap().theta();
        let cert = splitting_certificate_td0(&c, &f).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let theta = random_theta(&mut rng, 3);
            let g = mean_direction_td0(&c, &f, &theta).unwrap();
            assert!((g + &cert.b * (&theta - &star)).amax() < 1e-12);
        }
        let star_l = td_lambda_fixed_point(&c, &f, 0.6).unwrap().theta();
        let cert_l = splitting_certificate_td_lambda(&c, &f, 0.6, None).unwrap();
        for _ in 0..10 {
            let theta = random_theta(&mut rng, 3);
            let x = mean_direction_td_lambda(&c, &f, &theta, 0.6).unwrap();
            assert!((x + &cert_l.b * (&theta - &star_l)).amax() < 1e-9);
        }
    }

    #[test]
    fn lambda_certificate_reduces_to_td0() {
        let (c, f) = random_instance(2, 5, 3, 0.9);
        let c0 = splitting_certificate_td0(&c, &f).unwrap();
        let cl = splitting_certificate_td_lambda(&c, &f, 0.0, None).unwrap();
        assert_eq!(cl.series_truncation_m, Some(0));
        assert!((&c0.b - &cl.b).amax() < 1e-14);
        assert!((&c0.a - &cl.a).amax() < 1e-14);
    }

    #[test]
    fn lambda_certificate_high_discount() {
        let (c, f) = random_instance(8, 6, 3, 0.9);
        let cert = splitting_certificate_td_lambda(&c, &f, 0.9, None).unwrap();
        let m = cert.series_truncation_m.unwrap();
        assert!(tail_budget(0.9, 0.9, m) <= 1e-10);
        assert!(tail_budget(0.9, 0.9, m - 1) > 1e-10);
        assert!(cert.residual_inf <= 1e-10);
        assert!(cert.closed_form_gap <= 1e-9);
    }

    #[test]
    fn lambda_certificate_reversible_identity() {
        let c = reference_chain(0.9).unwrap();
        let cert = splitting_certificate_td_lambda(&c, &FeatureMap::identity(2), 0.7, None).unwrap();
        assert!(cert.b_asymmetry < 1e-14);
        assert!(cert.residual_inf < 1e-10);
    }

    #[test]
    fn short_truncation_is_reported() {
        let (c, f) = random_instance(4, 5, 2, 0.9);
        let err = splitting_certificate_td_lambda(&c, &f, 0.9, Some(3)).unwrap_err();
        let Error::TruncationTooShort { given, required } = err else {
            panic!("{err}")
        };
        assert_eq!(given, 3);
        assert_eq!(required, auto_truncation(0.9, 0.9, TD_LAMBDA_CERT_TOL));
    }

    #[test]
    fn inner_product_identity() {
        let c = reference_chain(0.5).unwrap();
        let f = FeatureMap::identity(2);
        let star = td0_fixed_point(&c, &f).unwrap().theta();
        let at_star = corollary1_gap(&c, &f, &star, &star).unwrap();
        assert!(at_star.lhs.abs() < 1e-12 && at_star.rhs.abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let theta = random_theta(&mut rng, 2);
            let gap = corollary1_gap(&c, &f, &star, &theta).unwrap();
            assert!((gap.lhs - gap.rhs).abs() < 1e-12);
            assert!(gap.rhs >= gap.d_norm_part);
        }
    }

    #[test]
    fn objectives_agree_with_certificate_quadratic() {
        let (c, f) = random_instance(15, 6, 3, 0.8);
        let star = td0_fixed_point(&c, &f).unwrap().theta();
        let q = Quadratic::from_certificate(&splitting_certificate_td0(&c, &f).unwrap(), star.clone());
        let star_l = td_lambda_fixed_point(&c, &f, 0.5).unwrap().theta();
        let cert_l = splitting_certificate_td_lambda(&c, &f, 0.5, None).unwrap();
        let ql = Quadratic::from_certificate(&cert_l, star_l.clone());
        let m = cert_l.series_truncation_m.unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let theta = random_theta(&mut rng, 3);
            let f0 = td0_objective(&c, &f, &star, &theta).unwrap();
            assert!((q.value(&theta) - f0).abs() < 1e-12 * (1.0 + f0));
            let fl = td_lambda_objective(&c, &f, &star_l, &theta, 0.5, m).unwrap();
            assert!((ql.value(&theta) - fl).abs() < 1e-11 * (1.0 + fl));
        }
    }

    #[test]
    fn dirichlet_decomposition_identity() {
        // ||dV||_Dir^2 = ||dV||_D^2 - d^T (Phi^T D P Phi) d.
        let (c, f) = random_instance(31, 7, 3, 0.9);
        let star = td0_fixed_point(&c, &f).unwrap().theta();
        let m = f.phi().transpose() * c.d() * c.p() * f.phi();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let theta = random_theta(&mut rng, 3);
            let d = &theta - &star;
            let dv = f.value_of(&d).unwrap();
            let rhs = d_norm_sq(&c, &dv).unwrap() - d.dot(&(&m * &d));
            assert!((dirichlet_sq(&c, &dv, 1).unwrap() - rhs).abs() < 1e-11);
        }
    }

    #[test]
    fn splitting_inner_products() {
        let (c, f) = random_instance(41, 6, 3, 0.95);
        let star = td0_fixed_point(&c, &f).unwrap().theta();
        let cert = splitting_certificate_td0(&c, &f).unwrap();
        let h = |t: &DVector<f64>| -(&cert.b * (t - &star));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let t1 = random_theta(&mut rng, 3);
            let t2 = random_theta(&mut rng, 3);
            let d = &t1 - &t2;
            let lhs = d.dot(&(h(&t1) - h(&t2)));
            let rhs = -d.dot(&(&cert.a * &d));
            assert!((lhs - rhs).abs() < 1e-11);
        }
    }

    #[test]
    fn finite_difference_gradient() {
        let (c, f) = random_instance(51, 6, 3, 0.9);
        let star = td0_fixed_point(&c, &f).unwrap().theta();
        let q = Quadratic::from_certificate(&splitting_certificate_td0(&c, &f).unwrap(), star.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = 1e-5;
        for _ in 0..20 {
            let theta = random_theta(&mut rng, 3);
            let grad = q.gradient(&theta);
            let scale = 1.0 + grad.amax();
            for i in 0..3 {
                let mut e = DVector::zeros(3);
                e[i] = h;
                let fd = (td0_objective(&c, &f, &star, &(&theta + &e)).unwrap()
                    - td0_objective(&c, &f, &star, &(&theta - &e)).unwrap())
                    / (2.0 * h);
                assert!((fd - grad[i]).abs() <= 1e-6 * scale);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn certificates_hold_on_random_instances(
            seed in 0u64..10_000,
            n in 2usize..8,
            gamma in proptest::sample::select(vec![0.3, 0.9, 0.99]),
            lambda in proptest::sample::select(vec![0.0, 0.5, 0.9]),
        ) {
            let k = n.min(3);
            let (c, f) = random_instance(seed, n, k, gamma);
            let c0 = splitting_certificate_td0(&c, &f).unwrap();
            proptest::prop_assert!(c0.holds(), "td0 residual {}", c0.residual_inf);
            let cl = splitting_certificate_td_lambda(&c, &f, lambda, None).unwrap();
            proptest::prop_assert!(cl.holds(), "td(lambda) residual {}", cl.residual_inf);
        }
    }
}
