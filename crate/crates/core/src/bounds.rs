//! Finite-time bound evaluators and the constants they depend on.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::bellman::{td0_fixed_point, td_lambda_fixed_point, true_value};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geometry::{d_norm_sq, reversibilization};
use crate::mdp::{InducedChain, MixingProfile, TvCurve, DEFAULT_MIXING_CAP};

/// Cap on the `t0` scan.
pub const DEFAULT_T0_CAP: usize = 1_000_000;

/// Which mixing-time estimate feeds the bounds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauSource {
    /// Exact total-variation mixing time.
    #[default]
    Exact,
    /// Smallest `t >= 1` with `m rho^t <= epsilon` for a fitted envelope.
    Envelope,
}

/// Mixing-time lookups sharing one tabulated TV curve.
#[derive(Clone, Debug)]
pub struct MixingOracle {
    curve: TvCurve,
    source: TauSource,
    envelope: Option<MixingProfile>,
    cap: usize,
}

impl MixingOracle {
    pub fn new(chain: &InducedChain, source: TauSource) -> Self {
        Self {
            curve: TvCurve::new(chain),
            source,
            envelope: None,
            cap: DEFAULT_MIXING_CAP,
        }
    }

    /// `tau_mix(epsilon)`; any `epsilon >= 1` is met at `t = 1`.
    pub fn tau(&mut self, epsilon: f64) -> Result<usize> {
        if epsilon >= 1.0 {
            return Ok(1);
        }
        let exact = self.curve.tau(epsilon, self.cap)?;
        match self.source {
            TauSource::Exact => Ok(exact),
            TauSource::Envelope => {
                if self.envelope.is_none() {
                    self.curve.at(exact + 4);
                    self.envelope = Some(MixingProfile::fit(self.curve.values().to_vec()));
                }
                let env = self.envelope.as_ref().expect("fitted above");
                let t = ((epsilon / env.m).ln() / env.rho.ln()).ceil().max(1.0);
                Ok(if t.is_finite() { t as usize } else { exact })
            }
        }
    }

    /// `d(t)`.
    pub fn tv(&mut self, t: usize) -> f64 {
        self.curve.at(t)
    }
}

/// `tau_Algo(epsilon) = min { t in N_0 : (gamma lambda)^t <= epsilon }`.
pub fn tau_algo(gamma_lambda: f64, epsilon: f64) -> usize {
    if epsilon >= 1.0 || gamma_lambda <= 0.0 {
        return 0;
    }
    let mut t = 0;
    let mut pow = 1.0;
    while pow > epsilon {
        pow *= gamma_lambda;
        t += 1;
    }
    t
}

/// `G = r_max + 2R`.
pub fn g_constant(r_max: f64, radius: f64) -> f64 {
    r_max + 2.0 * radius
}

/// `G_lambda = (r_max + 2R_lambda) / (1 - gamma lambda)`.
pub fn g_lambda_constant(r_max: f64, radius_lambda: f64, gamma: f64, lambda: f64) -> f64 {
    (r_max + 2.0 * radius_lambda) / (1.0 - gamma * lambda)
}

/// Default projection radius `2 ||theta*||`, or 1 when `theta* = 0`.
pub fn default_radius(theta_star: &DVector<f64>) -> f64 {
    let r = 2.0 * theta_star.norm();
    if r > 0.0 {
        r
    } else {
        1.0
    }
}

/// Largest `t >= 1` with `t <= 2 tau_mix(1 / (2(t+1)))`.
pub fn compute_t0(chain: &InducedChain) -> Result<usize> {
    compute_t0_capped(chain, DEFAULT_T0_CAP)
}

/// The scan stops once no larger `t` can qualify. With `d(t1) <= 1/4`,
/// submultiplicativity gives `tau(eps) <= t1 ceil(log2(1/eps))`, so any
/// qualifying `t` satisfies `t <= g(t) = 2 t1 (log2(2(t+1)) + 1)`. Once
/// `t > g(t)` and `g' < 1` the inequality fails for every larger `t`.
pub fn compute_t0_capped(chain: &InducedChain, cap: usize) -> Result<usize> {
    let mut oracle = MixingOracle::new(chain, TauSource::Exact);
    let t1 = oracle.tau(0.25)? as f64;
    let envelope = |t: f64| 2.0 * t1 * ((2.0 * (t + 1.0)).log2() + 1.0);
    let mut best = 0;
    let mut t = 1usize;
    loop {
        let tf = t as f64;
        if tf > envelope(tf) && tf + 1.0 > 2.0 * t1 / std::f64::consts::LN_2 {
            break;
        }
        if t > cap {
            return Err(Error::CapExceeded { what: "t0 scan", cap });
        }
        if t <= 2 * oracle.tau(1.0 / (2.0 * (tf + 1.0)))? {
            best = t;
        }
        t += 1;
    }
    Ok(best)
}

/// Every input the bound formulas need.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub theta0: Vec<f64>,
    /// `theta*` for the TD(0) bounds.
    pub theta_star: Vec<f64>,
    /// `theta*_lambda` for the TD(lambda) bound.
    pub theta_star_lambda: Vec<f64>,
    pub g: f64,
    pub g_lambda: f64,
    pub radius: f64,
    pub radius_lambda: f64,
    pub horizon: usize,
    pub gamma: f64,
    pub lambda: f64,
    /// `tau_mix(1/sqrt(T))`.
    pub tau_mix_at_inv_sqrt_t: usize,
    /// `tau_mix(1/(2(T+1)))`, used by the mean-estimation term.
    pub tau_mix_mean: usize,
    /// `max { tau_MC(1/sqrt(T)), tau_Algo(1/sqrt(T)) }`.
    pub tau_lambda_mix: usize,
    pub t0: usize,
    pub r_p: f64,
    pub r_max: f64,
    /// `||V_theta* - V||_D^2`.
    pub approx_err_d_sq: f64,
}

/// Knobs for [`BoundInputs::from_instance`].
#[derive(Clone, Debug)]
pub struct BoundSetup {
    pub horizon: usize,
    pub lambda: f64,
    /// Defaults to zero.
    pub theta0: Option<DVector<f64>>,
    /// Defaults to `2 ||theta*||`.
    pub radius: Option<f64>,
    /// Defaults to `2 ||theta*_lambda||`.
    pub radius_lambda: Option<f64>,
    pub tau_source: TauSource,
}

impl BoundSetup {
    pub fn new(horizon: usize) -> Self {
        Self {
            horizon,
            lambda: 0.0,
            theta0: None,
            radius: None,
            radius_lambda: None,
            tau_source: TauSource::Exact,
        }
    }
}

impl BoundInputs {
    /// Computes every constant from the chain and features.
    pub fn from_instance(chain: &InducedChain, features: &FeatureMap, setup: &BoundSetup) -> Result<Self> {
        if setup.horizon == 0 {
            return Err(Error::Invalid("horizon T must be positive".into()));
        }
        let gamma = chain.gamma();
        let lambda = setup.lambda;
        let star = td0_fixed_point(chain, features)?.theta();
        let star_l = td_lambda_fixed_point(chain, features, lambda)?.theta();
        let theta0 = setup.theta0.clone().unwrap_or_else(|| DVector::zeros(features.k()));
        crate::error::check_len(features.k(), theta0.len())?;
        let radius = setup.radius.unwrap_or_else(|| default_radius(&star));
        let radius_lambda = setup.radius_lambda.unwrap_or_else(|| default_radius(&star_l));
        let r_max = chain.r_max();

        let mut oracle = MixingOracle::new(chain, setup.tau_source);
        let t = setup.horizon as f64;
        let eps = 1.0 / t.sqrt();
        let tau_mix_at_inv_sqrt_t = oracle.tau(eps)?;
        let tau_mix_mean = oracle.tau(1.0 / (2.0 * (t + 1.0)))?;
        let tau_lambda_mix = tau_mix_at_inv_sqrt_t.max(tau_algo(gamma * lambda, eps));

        let v = true_value(chain)?.vector();
        let approx_err_d_sq = d_norm_sq(chain, &(features.value_of(&star)? - v))?;

        Ok(Self {
            theta0: theta0.iter().copied().collect(),
            theta_star: star.iter().copied().collect(),
            theta_star_lambda: star_l.iter().copied().collect(),
            g: g_constant(r_max, radius),
            g_lambda: g_lambda_constant(r_max, radius_lambda, gamma, lambda),
            radius,
            radius_lambda,
            horizon: setup.horizon,
            gamma,
            lambda,
            tau_mix_at_inv_sqrt_t,
            tau_mix_mean,
            tau_lambda_mix,
            t0: compute_t0(chain)?,
            r_p: reversibilization(chain)?.r_p,
            r_max,
            approx_err_d_sq,
        })
    }

    /// Checks the stored `G` and `G_lambda` against their definitions.
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Invalid("horizon T must be positive".into()));
        }
        if self.theta0.len() != self.theta_star.len() || self.theta0.len() != self.theta_star_lambda.len() {
            return Err(Error::Dimension {
                expected: self.theta0.len(),
                got: self.theta_star.len(),
            });
        }
        let g = g_constant(self.r_max, self.radius);
        if (self.g - g).abs() > 1e-12 * (1.0 + g) {
            return Err(Error::Invalid(format!("G = {} but r_max + 2R = {g}", self.g)));
        }
        let gl = g_lambda_constant(self.r_max, self.radius_lambda, self.gamma, self.lambda);
        if (self.g_lambda - gl).abs() > 1e-12 * (1.0 + gl) {
            return Err(Error::Invalid(format!(
                "G_lambda = {} but (r_max + 2R_lambda)/(1 - gamma lambda) = {gl}",
                self.g_lambda
            )));
        }
        Ok(())
    }

    fn dist_sq(&self, target: &[f64]) -> f64 {
        self.theta0.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    fn sqrt_t(&self) -> f64 {
        (self.horizon as f64).sqrt()
    }

    /// `||theta* - theta0||^2 + G^2 (9 + 12 tau)`.
    fn td0_numerator(&self) -> f64 {
        self.dist_sq(&self.theta_star) + self.g * self.g * (9.0 + 12.0 * self.tau_mix_at_inv_sqrt_t as f64)
    }
}

/// `(||theta* - theta0||^2 + G^2 (9 + 12 tau_mix(1/sqrt T))) / (2 sqrt T)`,
/// a bound on `E f(theta_bar_T)` for projected TD(0).
pub fn corollary2_rhs(inputs: &BoundInputs) -> f64 {
    inputs.td0_numerator() / (2.0 * inputs.sqrt_t())
}

/// The older D-norm bound: [`corollary2_rhs`] divided by `1 - gamma`.
pub fn bhandari_rhs(inputs: &BoundInputs) -> f64 {
    corollary2_rhs(inputs) / (1.0 - inputs.gamma)
}

/// Bound on `E ||V_theta* - V_theta_bar||_Dir^2`: [`corollary2_rhs`] divided
/// by `gamma`.
pub fn dirichlet_only_rhs(inputs: &BoundInputs) -> Result<f64> {
    if inputs.gamma <= 0.0 {
        return Err(Error::Invalid(
            "the Dirichlet-only bound is undefined at gamma = 0".into(),
        ));
    }
    Ok(corollary2_rhs(inputs) / inputs.gamma)
}

/// Constant choice for the mean-adjusted TD(0) bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Corollary3Mode {
    /// Explicit constants from the proof: approximation coefficient 2,
    /// `9 + 12 tau` and `min { r(P)/gamma, 2/(1-gamma) }`, with the
    /// mean-estimation term `max { 4(t0+1), 12 + 16 tau } r_max^2 / ((1-gamma)^2 T)`.
    Exact,
    /// `c_big (a ||V* - V||_D^2 + r^2 tau / ((1-gamma)^2 T)
    /// + (||theta* - theta0||^2 + G^2 (1 + tau)) / sqrt T * min { r(P)/gamma, 1/(1-gamma) })`
    /// with `a = approx_coefficient` (1 or 2).
    Calibrated { c_big: f64, approx_coefficient: f64 },
}

/// Term-by-term breakdown of the mean-adjusted bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corollary3Terms {
    pub approximation: f64,
    pub mean_estimation: f64,
    /// The `r(P)/gamma` branch of the min (absent at `gamma = 0`).
    pub dirichlet_branch: Option<f64>,
    /// The `1/(1-gamma)` branch, including its constant.
    pub d_norm_branch: f64,
    pub total: f64,
}

/// Bound on `E ||V'_T - V||_D^2` for mean-adjusted TD(0). Requires `T >= t0`.
pub fn corollary3_terms(inputs: &BoundInputs, mode: Corollary3Mode) -> Result<Corollary3Terms> {
    if inputs.horizon < inputs.t0 {
        return Err(Error::Invalid(format!(
            "T = {} is below t0 = {}",
            inputs.horizon, inputs.t0
        )));
    }
    let gamma = inputs.gamma;
    let t = inputs.horizon as f64;
    let r2 = inputs.r_max * inputs.r_max / ((1.0 - gamma) * (1.0 - gamma));
    let tau_mean = inputs.tau_mix_mean as f64;
    let dist = inputs.dist_sq(&inputs.theta_star);
    let g2 = inputs.g * inputs.g;
    let dir_factor = (gamma > 0.0).then(|| inputs.r_p / gamma);
    let terms = match mode {
        Corollary3Mode::Exact => {
            let shape = inputs.td0_numerator() / inputs.sqrt_t();
            let mean = (4.0 * (inputs.t0 as f64 + 1.0)).max(12.0 + 16.0 * tau_mean) * r2 / t;
            let dirichlet_branch = dir_factor.map(|f| shape * f);
            let d_norm_branch = shape * 2.0 / (1.0 - gamma);
            let approximation = 2.0 * inputs.approx_err_d_sq;
            Corollary3Terms {
                approximation,
                mean_estimation: mean,
                dirichlet_branch,
                d_norm_branch,
                total: approximation + mean + dirichlet_branch.map_or(d_norm_branch, |b| b.min(d_norm_branch)),
            }
        }
        Corollary3Mode::Calibrated {
            c_big,
            approx_coefficient,
        } => {
            if !(c_big > 0.0) {
                return Err(Error::Invalid(format!(
                    "calibration constant must be positive, got {c_big}"
                )));
            }
            let shape = (dist + g2 * (1.0 + inputs.tau_mix_at_inv_sqrt_t as f64)) / inputs.sqrt_t();
            let approximation = c_big * approx_coefficient * inputs.approx_err_d_sq;
            let mean = c_big * r2 * tau_mean / t;
            let dirichlet_branch = dir_factor.map(|f| c_big * shape * f);
            let d_norm_branch = c_big * shape / (1.0 - gamma);
            Corollary3Terms {
                approximation,
                mean_estimation: mean,
                dirichlet_branch,
                d_norm_branch,
                total: approximation + mean + dirichlet_branch.map_or(d_norm_branch, |b| b.min(d_norm_branch)),
            }
        }
    };
    Ok(terms)
}

pub fn corollary3_rhs(inputs: &BoundInputs, mode: Corollary3Mode) -> Result<f64> {
    corollary3_terms(inputs, mode).map(|t| t.total)
}

/// `(||theta*_lambda - theta0||^2 + G_lambda^2 (14 + 28 tau_lambda)) / (2 sqrt T)`,
/// a bound on `E f^(lambda)(theta_bar_T)` for projected TD(lambda).
pub fn corollary4_rhs(inputs: &BoundInputs) -> f64 {
    let num = inputs.dist_sq(&inputs.theta_star_lambda)
        + inputs.g_lambda * inputs.g_lambda * (14.0 + 28.0 * inputs.tau_lambda_mix as f64);
    num / (2.0 * inputs.sqrt_t())
}

/// All bounds and their constants, as emitted by the `bound` command.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundReport {
    pub corollary2: f64,
    pub bhandari: f64,
    pub dirichlet_only: Option<f64>,
    pub corollary3_exact: Option<f64>,
    pub corollary3_terms: Option<Corollary3Terms>,
    pub corollary4: f64,
    pub constants: BoundConstants,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundConstants {
    #[serde(rename = "G")]
    pub g: f64,
    #[serde(rename = "G_lambda")]
    pub g_lambda: f64,
    pub tau_mix: usize,
    pub tau_mix_mean: usize,
    pub tau_lambda_mix: usize,
    pub t0: usize,
    #[serde(rename = "r_P")]
    pub r_p: f64,
}

impl BoundReport {
    /// Evaluates every bound; those undefined for these inputs are `None`.
    pub fn evaluate(inputs: &BoundInputs) -> Result<Self> {
        inputs.validate()?;
        let terms = corollary3_terms(inputs, Corollary3Mode::Exact).ok();
        Ok(Self {
            corollary2: corollary2_rhs(inputs),
            bhandari: bhandari_rhs(inputs),
            dirichlet_only: dirichlet_only_rhs(inputs).ok(),
            corollary3_exact: terms.map(|t| t.total),
            corollary3_terms: terms,
            corollary4: corollary4_rhs(inputs),
            constants: BoundConstants {
                g: inputs.g,
                g_lambda: inputs.g_lambda,
                tau_mix: inputs.tau_mix_at_inv_sqrt_t,
                tau_mix_mean: inputs.tau_mix_mean,
                tau_lambda_mix: inputs.tau_lambda_mix,
                t0: inputs.t0,
                r_p: inputs.r_p,
            },
        })
    }
}
