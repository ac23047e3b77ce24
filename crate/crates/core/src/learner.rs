//! Stochastic TD learners: projected TD(0), projected TD(lambda) with a
//! finite-start eligibility trace, iterate averaging, and mean-adjusted
//! TD(0), plus a seeded multi-trajectory experiment runner.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bellman::{
    splitting_certificate_td0, splitting_certificate_td_lambda, td0_fixed_point, td_lambda_fixed_point, true_value,
};
use crate::error::{check_len, Error, Result};
use crate::features::FeatureMap;
use crate::geometry::laplacian;
use crate::mdp::{InducedChain, Start, TrajectorySampler, Transition};

/// Slack allowed on `||theta|| <= R` after projection.
pub const PROJECTION_SLACK: f64 = 1e-12;

/// Euclidean ball `{ ||theta||_2 <= radius }`, or no projection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSpec {
    pub radius: f64,
    pub enabled: bool,
}

impl ProjectionSpec {
    pub fn ball(radius: f64) -> Self {
        Self { radius, enabled: true }
    }

    pub fn disabled() -> Self {
        Self {
            radius: f64::INFINITY,
            enabled: false,
        }
    }

    pub fn project(&self, theta: &mut DVector<f64>) {
        if !self.enabled {
            return;
        }
        let norm = theta.norm();
        if norm > self.radius {
            theta.scale_mut(self.radius / norm);
        }
    }

    /// Rejects radii that would exclude `target` from the ball.
    pub fn check_contains(&self, target: &DVector<f64>) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        if !(self.radius > 0.0) {
            return Err(Error::Config(format!(
                "projection radius must be positive, got {}",
                self.radius
            )));
        }
        let norm = target.norm();
        if norm > self.radius {
            return Err(Error::Config(format!(
                "projection radius {} is smaller than the fixed point norm {norm}",
                self.radius
            )));
        }
        Ok(())
    }
}

/// Step-size schedule `alpha_t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSize {
    /// `1/sqrt(T)` for every step; the only schedule the bounds cover.
    InvSqrtHorizon,
    Constant {
        c: f64,
    },
    /// `c / (t + 1)`.
    Decaying {
        c: f64,
    },
}

impl StepSize {
    pub fn alpha(&self, t: usize, horizon: usize) -> f64 {
        match *self {
            StepSize::InvSqrtHorizon => 1.0 / (horizon.max(1) as f64).sqrt(),
            StepSize::Constant { c } => c,
            StepSize::Decaying { c } => c / (t as f64 + 1.0),
        }
    }
}

/// Per-trajectory learner state.
#[derive(Clone, Debug)]
pub struct LearnerState {
    pub theta: DVector<f64>,
    /// Eligibility trace, starting from zero.
    pub z: DVector<f64>,
    /// Mean of `theta_0 .. theta_{t-1}` (`theta_0` while `t = 0`).
    pub theta_bar: DVector<f64>,
    /// Mean of the rewards `r_0 .. r_{t-1}`.
    pub a_bar: f64,
    pub t: usize,
    pub step_size: StepSize,
}

/// What a single step observed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub delta: f64,
    /// `||delta * direction||_2` before the step is taken.
    pub update_norm: f64,
}

impl LearnerState {
    pub fn new(theta0: DVector<f64>, step_size: StepSize) -> Self {
        let k = theta0.len();
        Self {
            theta_bar: theta0.clone(),
            theta: theta0,
            z: DVector::zeros(k),
            a_bar: 0.0,
            t: 0,
            step_size,
        }
    }

    /// Folds the current iterate and reward into the running averages.
    fn record(&mut self, reward: f64) {
        let t = self.t as f64;
        if self.t > 0 {
            self.theta_bar
                .zip_apply(&self.theta, |bar, th| *bar = (t * *bar + th) / (t + 1.0));
        }
        self.a_bar = (t * self.a_bar + reward) / (t + 1.0);
        self.t += 1;
    }

    fn check_finite(&self) -> Result<()> {
        if self.theta.iter().all(|x| x.is_finite()) && self.z.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                step: self.t.saturating_sub(1),
            })
        }
    }
}

fn dot(a: &[f64], b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn td_error(state: &LearnerState, tr: &Transition, features: &FeatureMap, gamma: f64) -> f64 {
    tr.reward + gamma * dot(features.row(tr.next), &state.theta) - dot(features.row(tr.state), &state.theta)
}

/// `theta <- Proj(theta + alpha delta phi(s))`.
pub fn td0_step(
    state: &mut LearnerState,
    tr: &Transition,
    features: &FeatureMap,
    gamma: f64,
    alpha: f64,
    proj: &ProjectionSpec,
) -> Result<StepInfo> {
    check_len(features.k(), state.theta.len())?;
    let delta = td_error(state, tr, features, gamma);
    let phi = features.row(tr.state);
    let update_norm = delta.abs() * phi.iter().map(|x| x * x).sum::<f64>().sqrt();
    state.record(tr.reward);
    for (th, p) in state.theta.iter_mut().zip(phi) {
        *th += alpha * delta * p;
    }
    proj.project(&mut state.theta);
    state.check_finite()?;
    Ok(StepInfo { delta, update_norm })
}

/// `z <- gamma lambda z + phi(s)`, `theta <- Proj(theta + alpha delta z)`.
pub fn td_lambda_step(
    state: &mut LearnerState,
    tr: &Transition,
    features: &FeatureMap,
    gamma: f64,
    alpha: f64,
    lambda: f64,
    proj: &ProjectionSpec,
) -> Result<StepInfo> {
    check_len(features.k(), state.theta.len())?;
    let delta = td_error(state, tr, features, gamma);
    let decay = gamma * lambda;
    for (z, p) in state.z.iter_mut().zip(features.row(tr.state)) {
        *z = decay * *z + p;
    }
    let update_norm = delta.abs() * state.z.norm();
    state.record(tr.reward);
    state.theta.axpy(alpha * delta, &state.z, 1.0);
    proj.project(&mut state.theta);
    state.check_finite()?;
    Ok(StepInfo { delta, update_norm })
}

/// Which learner to run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Algo {
    Td0,
    TdLambda { lambda: f64 },
    MeanAdjusted,
}

impl Algo {
    pub fn lambda(&self) -> f64 {
        match *self {
            Algo::TdLambda { lambda } => lambda,
            _ => 0.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Algo::Td0 => "td0",
            Algo::TdLambda { .. } => "tdlambda",
            Algo::MeanAdjusted => "mean_adjusted",
        }
    }

    /// Parses `td0`, `tdlambda` or `mean_adjusted`.
    pub fn parse(name: &str, lambda: f64) -> Result<Self> {
        match name {
            "td0" => Ok(Algo::Td0),
            "tdlambda" | "td_lambda" => Ok(Algo::TdLambda { lambda }),
            "mean_adjusted" => Ok(Algo::MeanAdjusted),
            other => Err(Error::Config(format!("unknown algorithm `{other}`"))),
        }
    }
}

/// Geometric checkpoint grid `{0, 1, 2, 4, ...} ∪ {T}`.
pub fn checkpoints(horizon: usize) -> Vec<usize> {
    let mut out = vec![0];
    let mut p = 1;
    while p < horizon {
        out.push(p);
        p *= 2;
    }
    if horizon > 0 {
        out.push(horizon);
    }
    out
}

/// Everything the runner needs besides the instance.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub algo: Algo,
    pub horizon: usize,
    pub seeds: Vec<u64>,
    pub projection: ProjectionSpec,
    pub step_size: StepSize,
    /// Defaults to zero.
    pub theta0: Option<DVector<f64>>,
    pub start: Start,
    /// Assert `||update|| <= G` at every projected step.
    pub instrument: bool,
}

impl RunSpec {
    pub fn new(algo: Algo, horizon: usize, seeds: Vec<u64>, projection: ProjectionSpec) -> Self {
        Self {
            algo,
            horizon,
            seeds,
            projection,
            step_size: StepSize::InvSqrtHorizon,
            theta0: None,
            start: Start::Stationary,
            instrument: false,
        }
    }
}

/// Errors at one checkpoint of one seed, evaluated at `theta_bar_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub seed: u64,
    pub t: usize,
    /// `||V_target - V_theta_bar||_D^2`.
    pub err_d_sq: f64,
    /// `||V_target - V_theta_bar||_Dir^2`.
    pub err_dir_sq: f64,
    /// `f(theta_bar)` for TD(0), `f^(lambda)(theta_bar)` for TD(lambda).
    pub f_value: f64,
    /// `||V'_t - V||_D^2` (mean-adjusted only, `t > 0`).
    pub v_prime_err_d_sq: Option<f64>,
    /// `(V_hat_t - V_bar)^2` (mean-adjusted only, `t > 0`).
    pub v_hat_err_sq: Option<f64>,
}

/// Per-seed diagnostics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub max_theta_norm: f64,
    pub max_trace_norm: f64,
    pub max_update_norm: f64,
    pub final_theta_bar: Vec<f64>,
}

/// Mean and standard error of one metric across seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub stderr: f64,
}

impl Stat {
    /// Sequential fold in input order, so the result is scheduling-independent.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                stderr: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return Self { mean, stderr: 0.0 };
        }
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        Self {
            mean,
            stderr: (var / n as f64).sqrt(),
        }
    }

    /// `mean + 3 stderr`.
    pub fn upper(&self) -> f64 {
        self.mean + 3.0 * self.stderr
    }
}

/// Across-seed statistics at one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointAggregate {
    pub t: usize,
    pub err_d_sq: Stat,
    pub err_dir_sq: Stat,
    pub f_value: Stat,
    pub v_prime_err_d_sq: Option<Stat>,
    pub v_hat_err_sq: Option<Stat>,
}

/// Output of [`run_experiment`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub algo: Algo,
    pub horizon: usize,
    pub gamma: f64,
    pub seeds: Vec<u64>,
    pub projection: ProjectionSpec,
    pub step_size: StepSize,
    /// Set when trajectories did not start from `pi`.
    pub fixed_start: Option<usize>,
    pub theta_target: Vec<f64>,
    /// Seed-major, checkpoint-minor.
    pub records: Vec<CheckpointRecord>,
    pub aggregates: Vec<CheckpointAggregate>,
    pub seed_summaries: Vec<SeedSummary>,
}

impl RunResult {
    pub fn final_aggregate(&self) -> &CheckpointAggregate {
        self.aggregates.last().expect("checkpoint grid is never empty")
    }
}

/// Quadratic forms used at every checkpoint.
struct Evaluator {
    target: DVector<f64>,
    gram: DMatrix<f64>,
    dir: DMatrix<f64>,
    f_matrix: DMatrix<f64>,
    phi: DMatrix<f64>,
    pi: DVector<f64>,
    v: DVector<f64>,
    v_bar: f64,
    gamma: f64,
}

fn quad(m: &DMatrix<f64>, d: &DVector<f64>) -> f64 {
    d.dot(&(m * d)).max(0.0)
}

impl Evaluator {
    fn new(chain: &InducedChain, features: &FeatureMap, algo: Algo, target: DVector<f64>) -> Result<Self> {
        let phi = features.phi().clone();
        let gram = phi.transpose() * chain.d() * &phi;
        let dir = phi.transpose() * laplacian(chain) * &phi;
        let f_matrix = match algo {
            Algo::TdLambda { lambda } => splitting_certificate_td_lambda(chain, features, lambda, None)?.a,
            _ => splitting_certificate_td0(chain, features)?.a,
        };
        let tv = true_value(chain)?;
        Ok(Self {
            target,
            gram,
            dir,
            f_matrix,
            phi,
            pi: chain.pi().clone(),
            v: tv.vector(),
            v_bar: tv.mean,
            gamma: chain.gamma(),
        })
    }

    fn record(&self, seed: u64, state: &LearnerState, mean_adjusted: bool) -> CheckpointRecord {
        let d = &state.theta_bar - &self.target;
        let (v_prime_err_d_sq, v_hat_err_sq) = if mean_adjusted && state.t > 0 {
            let v_hat = state.a_bar / (1.0 - self.gamma);
            let v_prime = mean_adjusted_value(&self.phi, &self.pi, &state.theta_bar, v_hat);
            let diff = v_prime - &self.v;
            let err = diff.iter().zip(self.pi.iter()).map(|(x, p)| p * x * x).sum::<f64>();
            (Some(err), Some((v_hat - self.v_bar).powi(2)))
        } else {
            (None, None)
        };
        CheckpointRecord {
            seed,
            t: state.t,
            err_d_sq: quad(&self.gram, &d),
            err_dir_sq: quad(&self.dir, &d),
            f_value: quad(&self.f_matrix, &d),
            v_prime_err_d_sq,
            v_hat_err_sq,
        }
    }
}

/// `V' = Phi theta_bar + (V_hat - pi^T Phi theta_bar) 1`.
fn mean_adjusted_value(phi: &DMatrix<f64>, pi: &DVector<f64>, theta_bar: &DVector<f64>, v_hat: f64) -> DVector<f64> {
    let v = phi * theta_bar;
    let shift = v_hat - pi.dot(&v);
    v.add_scalar(shift)
}

struct SeedOutcome {
    records: Vec<CheckpointRecord>,
    summary: SeedSummary,
}

fn run_seed(
    chain: &InducedChain,
    features: &FeatureMap,
    spec: &RunSpec,
    eval: &Evaluator,
    theta0: &DVector<f64>,
    g_bound: Option<f64>,
    seed: u64,
) -> Result<SeedOutcome> {
    let gamma = chain.gamma();
    let grid = checkpoints(spec.horizon);
    let mut next_cp = grid.iter().peekable();
    let mut state = LearnerState::new(theta0.clone(), spec.step_size);
    let mut records = Vec::with_capacity(grid.len());
    let mean_adjusted = spec.algo == Algo::MeanAdjusted;
    let mut summary = SeedSummary {
        seed,
        max_theta_norm: state.theta.norm(),
        max_trace_norm: 0.0,
        max_update_norm: 0.0,
        final_theta_bar: Vec::new(),
    };
    let mut sampler = TrajectorySampler::new(chain, seed, spec.start)?;
    loop {
        if next_cp.peek() == Some(&&state.t) {
            records.push(eval.record(seed, &state, mean_adjusted));
            next_cp.next();
        }
        if state.t == spec.horizon {
            break;
        }
        let tr = sampler.next().expect("sampler is infinite");
        let alpha = spec.step_size.alpha(state.t, spec.horizon);
        let step = state.t;
        let info = match spec.algo {
            Algo::TdLambda { lambda } => {
                td_lambda_step(&mut state, &tr, features, gamma, alpha, lambda, &spec.projection)?
            }
            _ => td0_step(&mut state, &tr, features, gamma, alpha, &spec.projection)?,
        };
        if let Some(bound) = g_bound {
            if info.update_norm > bound * (1.0 + 1e-12) {
                return Err(Error::GradientBound {
                    step,
                    norm: info.update_norm,
                    bound,
                });
            }
        }
        summary.max_theta_norm = summary.max_theta_norm.max(state.theta.norm());
        summary.max_trace_norm = summary.max_trace_norm.max(state.z.norm());
        summary.max_update_norm = summary.max_update_norm.max(info.update_norm);
    }
    summary.final_theta_bar = state.theta_bar.iter().copied().collect();
    Ok(SeedOutcome { records, summary })
}

fn aggregate(records: &[CheckpointRecord], grid: &[usize]) -> Vec<CheckpointAggregate> {
    let opt_stat = |vals: Vec<Option<f64>>| -> Option<Stat> {
        let vals: Option<Vec<f64>> = vals.into_iter().collect();
        vals.filter(|v| !v.is_empty()).map(|v| Stat::of(&v))
    };
    grid.iter()
        .enumerate()
        .map(|(i, &t)| {
            let at: Vec<&CheckpointRecord> = records.iter().skip(i).step_by(grid.len()).collect();
            let col = |f: fn(&CheckpointRecord) -> f64| Stat::of(&at.iter().map(|r| f(r)).collect::<Vec<_>>());
            CheckpointAggregate {
                t,
                err_d_sq: col(|r| r.err_d_sq),
                err_dir_sq: col(|r| r.err_dir_sq),
                f_value: col(|r| r.f_value),
                v_prime_err_d_sq: opt_stat(at.iter().map(|r| r.v_prime_err_d_sq).collect()),
                v_hat_err_sq: opt_stat(at.iter().map(|r| r.v_hat_err_sq).collect()),
            }
        })
        .collect()
}

/// Runs one trajectory per seed (in parallel) and aggregates the checkpoint
/// errors in seed order.
pub fn run_experiment(chain: &InducedChain, features: &FeatureMap, spec: &RunSpec) -> Result<RunResult> {
    if spec.seeds.is_empty() {
        return Err(Error::Config("seed list is empty".into()));
    }
    if features.n_states() != chain.n_states() {
        return Err(Error::Dimension {
            expected: chain.n_states(),
            got: features.n_states(),
        });
    }
    let lambda = spec.algo.lambda();
    let target = match spec.algo {
        Algo::TdLambda { lambda } => td_lambda_fixed_point(chain, features, lambda)?.theta(),
        _ => td0_fixed_point(chain, features)?.theta(),
    };
    spec.projection.check_contains(&target)?;
    if spec.algo == Algo::MeanAdjusted && !spec.projection.enabled {
        return Err(Error::Config(
            "mean-adjusted TD(0) requires a projection ball containing theta*".into(),
        ));
    }
    let theta0 = spec.theta0.clone().unwrap_or_else(|| DVector::zeros(features.k()));
    check_len(features.k(), theta0.len())?;
    if spec.projection.enabled && theta0.norm() > spec.projection.radius + PROJECTION_SLACK {
        return Err(Error::Config("theta0 lies outside the projection ball".into()));
    }
    // ||delta phi|| <= r_max + 2R and ||delta z|| <= (r_max + 2R)/(1 - gamma lambda) on the ball.
    let g_bound = (spec.instrument && spec.projection.enabled)
        .then(|| (chain.r_max() + 2.0 * spec.projection.radius) / (1.0 - chain.gamma() * lambda));
    let eval = Evaluator::new(chain, features, spec.algo, target.clone())?;

    let outcomes: Vec<Result<SeedOutcome>> = spec
        .seeds
        .par_iter()
        .map(|&seed| run_seed(chain, features, spec, &eval, &theta0, g_bound, seed))
        .collect();
    let mut records = Vec::new();
    let mut seed_summaries = Vec::new();
    for outcome in outcomes {
        let outcome = outcome?;
        records.extend(outcome.records);
        seed_summaries.push(outcome.summary);
    }
    let grid = checkpoints(spec.horizon);
    let aggregates = aggregate(&records, &grid);
    Ok(RunResult {
        algo: spec.algo,
        horizon: spec.horizon,
        gamma: chain.gamma(),
        seeds: spec.seeds.clone(),
        projection: spec.projection,
        step_size: spec.step_size,
        fixed_start: match spec.start {
            Start::Fixed(s) => Some(s),
            Start::Stationary => None,
        },
        theta_target: target.iter().copied().collect(),
        records,
        aggregates,
        seed_summaries,
    })
}

/// Diagnostics from one mean-adjusted run.
#[derive(Clone, Debug, Serialize)]
pub struct MeanAdjustedDiagnostics {
    pub v_hat: f64,
    pub theta_bar: Vec<f64>,
    /// `|pi^T V' - V_hat|`.
    pub mean_residual: f64,
}

/// Projected TD(0) on one trajectory, then recentring along `1` so that
/// `pi^T V'` equals the reward-average estimate `V_hat = A_bar / (1 - gamma)`.
pub fn run_mean_adjusted_td0(
    chain: &InducedChain,
    features: &FeatureMap,
    horizon: usize,
    step_size: StepSize,
    proj: &ProjectionSpec,
    seed: u64,
) -> Result<(DVector<f64>, MeanAdjustedDiagnostics)> {
    if horizon == 0 {
        return Err(Error::Invalid("horizon must be positive".into()));
    }
    let gamma = chain.gamma();
    let mut state = LearnerState::new(DVector::zeros(features.k()), step_size);
    for tr in TrajectorySampler::new(chain, seed, Start::Stationary)?.take(horizon) {
        let alpha = step_size.alpha(state.t, horizon);
        td0_step(&mut state, &tr, features, gamma, alpha, proj)?;
    }
    let v_hat = state.a_bar / (1.0 - gamma);
    let v_prime = mean_adjusted_value(features.phi(), chain.pi(), &state.theta_bar, v_hat);
    let mean_residual = (chain.pi().dot(&v_prime) - v_hat).abs();
    Ok((
        v_prime,
        MeanAdjustedDiagnostics {
            v_hat,
            theta_bar: state.theta_bar.iter().copied().collect(),
            mean_residual,
        },
    ))
}

/// `|| mean_t (delta_t z_t) - x(theta) ||_2` along one trajectory at fixed
/// `theta`, with the trace started from zero. Reported, not bounded.
pub fn trace_bias_estimate(
    chain: &InducedChain,
    features: &FeatureMap,
    theta: &DVector<f64>,
    lambda: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let exact = crate::bellman::mean_direction_td_lambda(chain, features, theta, lambda)?;
    let gamma = chain.gamma();
    let mut state = LearnerState::new(theta.clone(), StepSize::Constant { c: 0.0 });
    let mut sum = DVector::zeros(features.k());
    for tr in TrajectorySampler::new(chain, seed, Start::Stationary)?.take(samples) {
        td_lambda_step(
            &mut state,
            &tr,
            features,
            gamma,
            0.0,
            lambda,
            &ProjectionSpec::disabled(),
        )?;
        sum.axpy(td_error(&state, &tr, features, gamma), &state.z, 1.0);
    }
    Ok((sum / samples.max(1) as f64 - exact).norm())
}
