//! Norms and spectral objects attached to a chain: the `D`-norm, Dirichlet
//! seminorms, the Dirichlet Laplacian and the additive reversibilization.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{check_len, Error, Result};
use crate::mdp::InducedChain;

/// A function on the state space, stored as a dense vector.
pub type ValueVector = DVector<f64>;

/// Round-off below this magnitude is clamped to zero silently; anything more
/// negative is clamped with a warning.
const CLAMP_WARN: f64 = -1e-12;

fn clamp_nonneg(x: f64, what: &str) -> f64 {
    if x < CLAMP_WARN {
        log::warn!("{what} evaluated to {x:e}; clamping to zero");
    }
    x.max(0.0)
}

/// `||v||_D^2 = sum_s pi_s v(s)^2`.
pub fn d_norm_sq(chain: &InducedChain, v: &ValueVector) -> Result<f64> {
    check_len(chain.n_states(), v.len())?;
    Ok(chain.pi().iter().zip(v.iter()).map(|(p, x)| p * x * x).sum())
}

/// `<u, v>_D`.
pub fn d_inner(chain: &InducedChain, u: &ValueVector, v: &ValueVector) -> Result<f64> {
    check_len(chain.n_states(), u.len())?;
    check_len(chain.n_states(), v.len())?;
    Ok(chain
        .pi()
        .iter()
        .zip(u.iter().zip(v.iter()))
        .map(|(p, (a, b))| p * a * b)
        .sum())
}

/// `k`-step Dirichlet seminorm squared, evaluated as the defining double sum
/// `1/2 sum_{s,s'} pi_s P^k(s,s') (v(s') - v(s))^2`.
pub fn dirichlet_sq(chain: &InducedChain, v: &ValueVector, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Invalid("Dirichlet step count must be at least 1".into()));
    }
    check_len(chain.n_states(), v.len())?;
    Ok(dirichlet_sq_with(chain.pi(), &chain.p_power(k), v))
}

/// Same double sum for a precomputed `P^k`.
pub fn dirichlet_sq_with(pi: &DVector<f64>, pk: &DMatrix<f64>, v: &ValueVector) -> f64 {
    let n = pi.len();
    let mut acc = 0.0;
    for s in 0..n {
        for t in 0..n {
            let diff = v[t] - v[s];
            acc += pi[s] * pk[(s, t)] * diff * diff;
        }
    }
    clamp_nonneg(0.5 * acc, "Dirichlet seminorm")
}

/// Laplacian of the weighted graph with edge weights
/// `(pi_i M(i,j) + pi_j M(j,i)) / 2` for a stochastic `M` with invariant `pi`.
pub fn laplacian_of(pi: &DVector<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = pi.len();
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                l[(i, j)] = -0.5 * (pi[i] * m[(i, j)] + pi[j] * m[(j, i)]);
            }
        }
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| l[(i, j)]).sum();
        l[(i, i)] = -off;
    }
    l
}

/// Dirichlet Laplacian `L` with `x^T L x = ||x||_Dir^2`.
pub fn laplacian(chain: &InducedChain) -> DMatrix<f64> {
    laplacian_of(chain.pi(), chain.p())
}

/// `k`-step Dirichlet Laplacian built from `P^k`.
pub fn laplacian_k(chain: &InducedChain, k: usize) -> DMatrix<f64> {
    laplacian_of(chain.pi(), &chain.p_power(k))
}

/// `v - (pi^T v) 1`, the `D`-orthogonal projection onto the complement of
/// the constants.
pub fn project_onto_ones_complement(chain: &InducedChain, v: &ValueVector) -> Result<ValueVector> {
    check_len(chain.n_states(), v.len())?;
    let mean = chain.pi().dot(v);
    Ok(v.map(|x| x - mean))
}

/// Spectral data of the additive reversibilization `Q = (P + P*) / 2`.
#[derive(Clone, Debug, Serialize)]
pub struct SpectralSummary {
    #[serde(skip)]
    pub laplacian: DMatrix<f64>,
    #[serde(skip)]
    pub p_star: DMatrix<f64>,
    #[serde(skip)]
    pub q: DMatrix<f64>,
    /// Eigenvalues of `D^{-1} L`, ascending.
    pub spectrum: Vec<f64>,
    /// `lambda_{n-1}(D^{-1} L)`, the second smallest eigenvalue.
    pub lambda_second_smallest: f64,
    /// `r(P) = 1 / lambda_{n-1}(D^{-1} L)`.
    pub r_p: f64,
    /// `max |Q - (I - D^{-1} L)|`.
    pub q_identity_residual: f64,
}

/// Tolerance for `Q = I - D^{-1} L`.
pub const Q_IDENTITY_TOL: f64 = 1e-12;

/// Reversed chain, additive reversibilization and `r(P)`.
///
/// The eigenproblem is solved on the symmetric conjugate
/// `D^{-1/2} L D^{-1/2}`, which shares the spectrum of `D^{-1} L`.
/// A one-state chain has no second eigenvalue; `r(P)` is reported as 0 there
/// (every `x` with `<x, 1>_D = 0` is zero).
pub fn reversibilization(chain: &InducedChain) -> Result<SpectralSummary> {
    let n = chain.n_states();
    let pi = chain.pi();
    if pi.iter().any(|x| !(*x > 0.0)) {
        return Err(Error::NotErgodic("zero stationary mass".into()));
    }
    let p = chain.p();
    let p_star = DMatrix::from_fn(n, n, |i, j| pi[j] / pi[i] * p[(j, i)]);
    let q = (p + &p_star) * 0.5;
    let l = laplacian(chain);
    let d_inv_l = DMatrix::from_fn(n, n, |i, j| l[(i, j)] / pi[i]);
    let q_identity_residual = (&q - (DMatrix::identity(n, n) - d_inv_l)).amax();
    if q_identity_residual > Q_IDENTITY_TOL {
        return Err(Error::Invalid(format!(
            "Q = I - D^-1 L fails by {q_identity_residual:e}"
        )));
    }
    let sqrt_pi = pi.map(f64::sqrt);
    let sym = DMatrix::from_fn(n, n, |i, j| l[(i, j)] / (sqrt_pi[i] * sqrt_pi[j]));
    let mut spectrum: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    spectrum.sort_by(f64::total_cmp);
    let (lambda_second_smallest, r_p) = if n >= 2 {
        let lam = spectrum[1];
        if !(lam > 0.0) {
            return Err(Error::NotErgodic(format!("second eigenvalue of D^-1 L is {lam:e}")));
        }
        (lam, 1.0 / lam)
    } else {
        (f64::INFINITY, 0.0)
    };
    Ok(SpectralSummary {
        laplacian: l,
        p_star,
        q,
        spectrum,
        lambda_second_smallest,
        r_p,
        q_identity_residual,
    })
}
