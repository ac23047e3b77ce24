//! Finite MDPs, fixed policies and the Markov reward chain a policy induces.
//!
//! Everything downstream works on [`InducedChain`]: the row-stochastic matrix
//! `P`, the pairwise rewards `r(s, s')`, their row expectation `R`, and the
//! stationary distribution `pi`. Construction verifies ergodicity (irreducible
//! and aperiodic) instead of assuming it.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Row-sum tolerance for in-memory stochastic objects.
pub const STOCHASTIC_TOL: f64 = 1e-12;
/// Row-sum tolerance applied when reading instance files.
pub const FILE_STOCHASTIC_TOL: f64 = 1e-9;
/// Largest admissible `|pi^T P - pi^T|` entry.
pub const STATIONARY_TOL: f64 = 1e-10;
/// Default cap on matrix powers used by mixing-time searches.
pub const DEFAULT_MIXING_CAP: usize = 1_000_000;

/// A discounted MDP with `transition[(s, a, s')]` and `reward[(s, a, s')]`
/// stored flat in `s`-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Mdp {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    gamma: f64,
    r_max: f64,
}

impl Mdp {
    /// Builds an MDP from flat `(s, a, s')` tensors. `r_max` defaults to the
    /// largest absolute reward.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        gamma: f64,
        r_max: Option<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::Invalid("MDP needs at least one state and one action".into()));
        }
        let len = n_states * n_actions * n_states;
        check_len(len, transition.len())?;
        check_len(len, reward.len())?;
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Invalid(format!("gamma must lie in (0,1), got {gamma}")));
        }
        for (i, row) in transition.chunks(n_states).enumerate() {
            validate_distribution(row, STOCHASTIC_TOL).map_err(|e| {
                Error::Invalid(format!(
                    "transition row (s={}, a={}): {e}",
                    i / n_actions,
                    i % n_actions
                ))
            })?;
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::Invalid("rewards must be finite".into()));
        }
        let observed = reward.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
        let r_max = r_max.unwrap_or(observed);
        if r_max < observed {
            return Err(Error::Invalid(format!("r_max {r_max} is below max |r| = {observed}")));
        }
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            gamma,
            r_max,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    fn idx(&self, s: usize, a: usize, next: usize) -> usize {
        (s * self.n_actions + a) * self.n_states + next
    }

    pub fn transition(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[self.idx(s, a, next)]
    }

    pub fn reward(&self, s: usize, a: usize, next: usize) -> f64 {
        self.reward[self.idx(s, a, next)]
    }
}

/// A stationary randomized policy `mu(s, a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    mu: DMatrix<f64>,
}

impl Policy {
    pub fn new(mu: DMatrix<f64>) -> Result<Self> {
        for s in 0..mu.nrows() {
            let row: Vec<f64> = mu.row(s).iter().copied().collect();
            validate_distribution(&row, STOCHASTIC_TOL).map_err(|e| Error::Invalid(format!("policy row {s}: {e}")))?;
        }
        Ok(Self { mu })
    }

    /// The policy that always plays action 0.
    pub fn deterministic_first(n_states: usize, n_actions: usize) -> Self {
        let mut mu = DMatrix::zeros(n_states, n_actions);
        mu.column_mut(0).fill(1.0);
        Self { mu }
    }

    pub fn mu(&self) -> &DMatrix<f64> {
        &self.mu
    }
}

fn validate_distribution(row: &[f64], tol: f64) -> std::result::Result<(), String> {
    if let Some(p) = row.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(format!("entry {p} is not a probability"));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(format!("row sums to {sum}"));
    }
    Ok(())
}

/// The Markov reward process obtained by fixing a policy.
#[derive(Clone, Debug)]
pub struct InducedChain {
    p: DMatrix<f64>,
    r_pair: DMatrix<f64>,
    reward: DVector<f64>,
    pi: DVector<f64>,
    gamma: f64,
    r_max: f64,
}

/// Marginalizes the policy over actions and solves for the stationary law.
pub fn induce_chain(mdp: &Mdp, policy: &Policy) -> Result<InducedChain> {
    let n = mdp.n_states();
    let mu = policy.mu();
    if mu.nrows() != n {
        return Err(Error::Dimension {
            expected: n,
            got: mu.nrows(),
        });
    }
    if mu.ncols() != mdp.n_actions() {
        return Err(Error::Dimension {
            expected: mdp.n_actions(),
            got: mu.ncols(),
        });
    }
    let mut p = DMatrix::zeros(n, n);
    let mut r_pair = DMatrix::zeros(n, n);
    for s in 0..n {
        for a in 0..mdp.n_actions() {
            let w = mu[(s, a)];
            if w == 0.0 {
                continue;
            }
            for next in 0..n {
                p[(s, next)] += w * mdp.transition(s, a, next);
                r_pair[(s, next)] += w * mdp.reward(s, a, next);
            }
        }
    }
    InducedChain::new(p, r_pair, mdp.gamma(), Some(mdp.r_max()))
}

impl InducedChain {
    /// Builds a chain directly from `P` and `r(s, s')`.
    pub fn new(p: DMatrix<f64>, r_pair: DMatrix<f64>, gamma: f64, r_max: Option<f64>) -> Result<Self> {
        let n = p.nrows();
        if n == 0 || p.ncols() != n {
            return Err(Error::Invalid(format!(
                "transition matrix must be square, got {}x{}",
                p.nrows(),
                p.ncols()
            )));
        }
        if r_pair.nrows() != n || r_pair.ncols() != n {
            return Err(Error::Dimension {
                expected: n,
                got: r_pair.nrows().max(r_pair.ncols()),
            });
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Invalid(format!("gamma must lie in (0,1), got {gamma}")));
        }
        for s in 0..n {
            let row: Vec<f64> = p.row(s).iter().copied().collect();
            validate_distribution(&row, STOCHASTIC_TOL).map_err(|e| Error::Invalid(format!("row {s} of P: {e}")))?;
        }
        check_ergodic(&p)?;
        let pi = stationary_distribution(&p)?;

        let reward = DVector::from_fn(n, |s, _| (0..n).map(|j| p[(s, j)] * r_pair[(s, j)]).sum());
        let observed = r_pair
            .iter()
            .zip(p.iter())
            .filter(|(_, prob)| **prob > 0.0)
            .fold(0.0_f64, |m, (r, _)| m.max(r.abs()));
        let r_max = r_max.unwrap_or(observed);
        if r_max < observed {
            return Err(Error::Invalid(format!("r_max {r_max} is below max |r| = {observed}")));
        }
        Ok(Self {
            p,
            r_pair,
            reward,
            pi,
            gamma,
            r_max,
        })
    }

    /// Same chain, different discount factor.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Invalid(format!("gamma must lie in (0,1), got {gamma}")));
        }
        Ok(Self { gamma, ..self.clone() })
    }

    pub fn n_states(&self) -> usize {
        self.p.nrows()
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn r_pair(&self) -> &DMatrix<f64> {
        &self.r_pair
    }

    /// Expected one-step reward `R(s) = sum_s' P(s,s') r(s,s')`.
    pub fn reward(&self) -> &DVector<f64> {
        &self.reward
    }

    pub fn pi(&self) -> &DVector<f64> {
        &self.pi
    }

    /// `D = diag(pi)`.
    pub fn d(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.pi)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    /// `P^k` by repeated multiplication.
    pub fn p_power(&self, k: usize) -> DMatrix<f64> {
        let n = self.n_states();
        let mut out = DMatrix::identity(n, n);
        for _ in 0..k {
            out = &out * &self.p;
        }
        out
    }

    /// `max_s |(pi^T P - pi^T)_s|`.
    pub fn stationarity_residual(&self) -> f64 {
        let lhs = self.p.transpose() * &self.pi;
        (lhs - &self.pi).amax()
    }
}

/// The 2-state chain `P = [[0.9, 0.1], [0.1, 0.9]]` with rewards `R = (1, 0)`
/// used throughout the experiments.
pub fn reference_chain(gamma: f64) -> Result<InducedChain> {
    let p = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.1, 0.9]);
    let r_pair = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 0.0]);
    InducedChain::new(p, r_pair, gamma, None)
}

/// Irreducible + aperiodic, checked two ways: some power of the support
/// pattern is strictly positive (Wielandt bound `(n-1)^2 + 1`), and exactly
/// one eigenvalue lies on the unit circle.
fn check_ergodic(p: &DMatrix<f64>) -> Result<()> {
    let n = p.nrows();
    let support: Vec<bool> = (0..n * n).map(|i| p[(i / n, i % n)] > 0.0).collect();
    let mul = |a: &[bool], b: &[bool]| -> Vec<bool> {
        let mut out = vec![false; n * n];
        for i in 0..n {
            for k in 0..n {
                if a[i * n + k] {
                    for j in 0..n {
                        out[i * n + j] |= b[k * n + j];
                    }
                }
            }
        }
        out
    };
    let mut exp = (n - 1) * (n - 1) + 1;
    let mut base = support.clone();
    let mut acc: Option<Vec<bool>> = None;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = Some(match acc {
                None => base.clone(),
                Some(a) => mul(&a, &base),
            });
        }
        exp >>= 1;
        if exp > 0 {
            base = mul(&base, &base);
        }
    }
    let power = acc.unwrap_or(support);
    if power.iter().any(|x| !x) {
        return Err(Error::NotErgodic(
            "no power of P is strictly positive (chain is reducible or periodic)".into(),
        ));
    }
    let eig = p.clone().complex_eigenvalues();
    let on_circle = eig.iter().filter(|z| z.norm() > 1.0 - 1e-9).count();
    if on_circle != 1 {
        return Err(Error::NotErgodic(format!("{on_circle} eigenvalues on the unit circle")));
    }
    Ok(())
}

/// Solves `(P^T - I) pi = 0`, `sum pi = 1` with a dense LU factorization.
fn stationary_distribution(p: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = p.nrows();
    let mut a = p.transpose() - DMatrix::identity(n, n);
    a.row_mut(n - 1).fill(1.0);
    let mut b = DVector::zeros(n);
    b[n - 1] = 1.0;
    let pi = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::NotErgodic("stationary system is singular".into()))?;
    if pi.iter().any(|x| !(*x > 0.0)) {
        return Err(Error::NotErgodic("stationary distribution has a zero entry".into()));
    }
    let resid = (p.transpose() * &pi - &pi).amax();
    if resid > STATIONARY_TOL {
        return Err(Error::NotErgodic(format!(
            "stationary residual {resid:e} exceeds tolerance"
        )));
    }
    Ok(pi)
}

/// Total-variation distance between a probability row and `pi`.
fn tv_to(row: impl Iterator<Item = f64>, pi: &DVector<f64>) -> f64 {
    0.5 * row.zip(pi.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Worst-case total variation `d(t) = sup_s d_TV(P^t(s,.), pi)`, tabulated
/// lazily from dense matrix powers.
#[derive(Clone, Debug)]
pub struct TvCurve {
    p: DMatrix<f64>,
    pi: DVector<f64>,
    power: DMatrix<f64>,
    values: Vec<f64>,
}

impl TvCurve {
    pub fn new(chain: &InducedChain) -> Self {
        let n = chain.n_states();
        let d0 = chain.pi().iter().fold(0.0_f64, |m, p| m.max(1.0 - p));
        Self {
            p: chain.p().clone(),
            pi: chain.pi().clone(),
            power: DMatrix::identity(n, n),
            values: vec![d0],
        }
    }

    fn extend(&mut self) {
        self.power = &self.power * &self.p;
        let n = self.p.nrows();
        let d = (0..n)
            .map(|s| tv_to(self.power.row(s).iter().copied(), &self.pi))
            .fold(0.0, f64::max);
        self.values.push(d);
    }

    /// `d(t)`.
    pub fn at(&mut self, t: usize) -> f64 {
        while self.values.len() <= t {
            self.extend();
        }
        self.values[t]
    }

    /// Smallest `t >= 1` with `d(t) <= epsilon`.
    pub fn tau(&mut self, epsilon: f64, cap: usize) -> Result<usize> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::Invalid(format!("epsilon must lie in (0,1), got {epsilon}")));
        }
        // d(t) is nonincreasing, so search the tabulated prefix first.
        if let Some(t) = (1..self.values.len()).find(|&t| self.values[t] <= epsilon) {
            return Ok(t);
        }
        let mut t = self.values.len().max(1);
        loop {
            if t > cap {
                return Err(Error::SlowMixing { epsilon, cap });
            }
            if self.at(t) <= epsilon {
                return Ok(t);
            }
            t += 1;
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Geometric envelope `m rho^t` over a tabulated TV curve.
#[derive(Clone, Debug, Serialize)]
pub struct MixingProfile {
    pub m: f64,
    pub rho: f64,
    pub tv_curve: Vec<f64>,
}

impl MixingProfile {
    /// Fits `rho` from the decay between the last two clearly nonzero points
    /// of the curve, then picks the smallest `m` that dominates every entry.
    pub fn fit(tv_curve: Vec<f64>) -> Self {
        let usable: Vec<(usize, f64)> = tv_curve
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, v)| *v > 1e-13)
            .collect();
        let rho = match usable.as_slice() {
            [.., (ta, va), (tb, vb)] if tb > ta => (vb / va).powf(1.0 / (tb - ta) as f64),
            _ => 1e-3,
        }
        .clamp(1e-12, 1.0 - 1e-12);
        let m = tv_curve
            .iter()
            .enumerate()
            .map(|(t, v)| v / rho.powi(t as i32))
            .filter(|x| x.is_finite())
            .fold(f64::MIN_POSITIVE, f64::max);
        Self { m, rho, tv_curve }
    }
}

/// Exact TV mixing time `tau_mix(epsilon)` with the default power cap.
pub fn mixing_time(chain: &InducedChain, epsilon: f64) -> Result<usize> {
    mixing_time_capped(chain, epsilon, DEFAULT_MIXING_CAP)
}

pub fn mixing_time_capped(chain: &InducedChain, epsilon: f64, cap: usize) -> Result<usize> {
    TvCurve::new(chain).tau(epsilon, cap)
}

/// Mixing time together with a fitted `(m, rho)` envelope for diagnostics.
pub fn mixing_profile(chain: &InducedChain, epsilon: f64) -> Result<(usize, MixingProfile)> {
    let mut curve = TvCurve::new(chain);
    let tau = curve.tau(epsilon, DEFAULT_MIXING_CAP)?;
    // A few extra points past tau give the tail fit something to work with.
    curve.at(tau + 4);
    Ok((tau, MixingProfile::fit(curve.values().to_vec())))
}

/// Where a trajectory starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Start {
    /// `s_0 ~ pi`; the setting every bound in this crate assumes.
    Stationary,
    /// Diagnostic only: no bound covers non-stationary starts.
    Fixed(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub state: usize,
    pub reward: f64,
    pub next: usize,
}

/// Builds the generator for `(seed, stream)`: ChaCha8 keyed by the 64-bit
/// seed (via `seed_from_u64`) with the stream id selecting an independent
/// keystream.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream id reserved for trajectory sampling.
pub const TRAJECTORY_STREAM: u64 = 0;

/// Streaming sampler over a chain's sample path.
#[derive(Clone, Debug)]
pub struct TrajectorySampler<'a> {
    chain: &'a InducedChain,
    cumulative: Vec<f64>,
    rng: ChaCha8Rng,
    state: usize,
}

fn draw(cumulative: &[f64], u: f64) -> usize {
    // Last index absorbs the round-off in the final cumulative entry.
    cumulative.iter().position(|c| u < *c).unwrap_or(cumulative.len() - 1)
}

fn cumulate(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    values
        .map(|v| {
            acc += v;
            acc
        })
        .collect()
}

impl<'a> TrajectorySampler<'a> {
    pub fn new(chain: &'a InducedChain, seed: u64, start: Start) -> Result<Self> {
        let n = chain.n_states();
        let mut rng = seeded_rng(seed, TRAJECTORY_STREAM);
        let state = match start {
            Start::Stationary => draw(&cumulate(chain.pi().iter().copied()), rng.random::<f64>()),
            Start::Fixed(s) if s < n => s,
            Start::Fixed(s) => return Err(Error::Invalid(format!("start state {s} out of range for {n} states"))),
        };
        let cumulative = (0..n)
            .flat_map(|s| cumulate(chain.p().row(s).iter().copied()))
            .collect();
        Ok(Self {
            chain,
            cumulative,
            rng,
            state,
        })
    }

    pub fn state(&self) -> usize {
        self.state
    }
}

impl Iterator for TrajectorySampler<'_> {
    type Item = Transition;

    fn next(&mut self) -> Option<Transition> {
        let n = self.chain.n_states();
        let s = self.state;
        let next = draw(&self.cumulative[s * n..(s + 1) * n], self.rng.random::<f64>());
        self.state = next;
        Some(Transition {
            state: s,
            reward: self.chain.r_pair()[(s, next)],
            next,
        })
    }
}

/// `T` transitions of the chain; deterministic given `seed`.
pub fn sample_trajectory(chain: &InducedChain, len: usize, seed: u64, start: Start) -> Result<Vec<Transition>> {
    if len == 0 {
        return Err(Error::Invalid("trajectory length must be positive".into()));
    }
    Ok(TrajectorySampler::new(chain, seed, start)?.take(len).collect())
}

/// Shape of a Garnet-style random MDP.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GarnetSpec {
    pub n_states: usize,
    pub n_actions: usize,
    /// Number of successor states with nonzero probability per `(s, a)`.
    pub branching: usize,
    pub gamma: f64,
}

/// Random MDP: each `(s, a)` reaches `branching` distinct successors with
/// probabilities from uniform cut points; rewards are uniform in `[-1, 1]`.
/// The policy draws normalized uniform weights per state.
pub fn garnet(spec: &GarnetSpec, seed: u64) -> Result<(Mdp, Policy)> {
    let GarnetSpec {
        n_states: n,
        n_actions: na,
        branching,
        gamma,
    } = *spec;
    if branching == 0 || branching > n {
        return Err(Error::Invalid(format!(
            "branching factor {branching} must lie in 1..={n}"
        )));
    }
    let mut rng = seeded_rng(seed, 1);
    let mut transition = vec![0.0; n * na * n];
    let mut reward = vec![0.0; n * na * n];
    for sa in 0..n * na {
        let targets = rand::seq::index::sample(&mut rng, n, branching);
        let mut cuts: Vec<f64> = (0..branching - 1).map(|_| rng.random::<f64>()).collect();
        cuts.push(0.0);
        cuts.push(1.0);
        cuts.sort_by(f64::total_cmp);
        for (k, target) in targets.iter().enumerate() {
            transition[sa * n + target] = cuts[k + 1] - cuts[k];
        }
        for next in 0..n {
            reward[sa * n + next] = rng.random_range(-1.0..=1.0);
        }
    }
    // Cut-point differences sum to one only up to round-off; renormalize.
    for row in transition.chunks_mut(n) {
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= sum);
    }
    let mu = DMatrix::from_fn(n, na, |_, _| rng.random::<f64>() + 1e-3);
    let mu = DMatrix::from_fn(n, na, |s, a| mu[(s, a)] / mu.row(s).sum());
    let mdp = Mdp::new(n, na, transition, reward, gamma, Some(1.0))?;
    Ok((mdp, Policy::new(mu)?))
}

/// Draws Garnet instances until one induces an ergodic chain.
pub fn random_ergodic_chain(spec: &GarnetSpec, seed: u64, max_tries: usize) -> Result<InducedChain> {
    let mut last = None;
    for attempt in 0..max_tries as u64 {
        let (mdp, policy) = garnet(spec, seed.wrapping_mul(1_000_003).wrapping_add(attempt))?;
        match induce_chain(&mdp, &policy) {
            Ok(chain) => return Ok(chain),
            Err(e @ Error::NotErgodic(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or(Error::CapExceeded {
        what: "ergodic Garnet instance",
        cap: max_tries,
    }))
}

/// On-disk MDP + policy description.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstanceFile {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transition[s][a][s']`.
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `reward[s][a][s']`.
    pub reward: Vec<Vec<Vec<f64>>>,
    pub gamma: f64,
    /// `policy[s][a]`.
    pub policy: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_max: Option<f64>,
}

fn renormalize(row: &[f64], what: &str) -> Result<Vec<f64>> {
    validate_distribution(row, FILE_STOCHASTIC_TOL).map_err(|e| Error::Invalid(format!("{what}: {e}")))?;
    let sum: f64 = row.iter().sum();
    Ok(row.iter().map(|x| x / sum).collect())
}

impl InstanceFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Validates shapes and probabilities (row sums to 1e-9), renormalizing
    /// accepted rows exactly.
    pub fn to_mdp(&self) -> Result<(Mdp, Policy)> {
        let (n, na) = (self.n_states, self.n_actions);
        check_len(n, self.transition.len())?;
        check_len(n, self.reward.len())?;
        check_len(n, self.policy.len())?;
        let mut transition = Vec::with_capacity(n * na * n);
        let mut reward = Vec::with_capacity(n * na * n);
        for s in 0..n {
            check_len(na, self.transition[s].len())?;
            check_len(na, self.reward[s].len())?;
            for a in 0..na {
                check_len(n, self.transition[s][a].len())?;
                check_len(n, self.reward[s][a].len())?;
                transition.extend(renormalize(&self.transition[s][a], &format!("transition[{s}][{a}]"))?);
                reward.extend_from_slice(&self.reward[s][a]);
            }
        }
        let mut mu = DMatrix::zeros(n, na);
        for (s, row) in self.policy.iter().enumerate() {
            check_len(na, row.len())?;
            for (a, w) in renormalize(row, &format!("policy[{s}]"))?.into_iter().enumerate() {
                mu[(s, a)] = w;
            }
        }
        Ok((
            Mdp::new(n, na, transition, reward, self.gamma, self.r_max)?,
            Policy::new(mu)?,
        ))
    }

    pub fn to_chain(&self) -> Result<InducedChain> {
        let (mdp, policy) = self.to_mdp()?;
        induce_chain(&mdp, &policy)
    }

    /// Single-action instance reproducing a given chain.
    pub fn from_chain(chain: &InducedChain) -> Self {
        let n = chain.n_states();
        let rows = |m: &DMatrix<f64>| (0..n).map(|s| vec![m.row(s).iter().copied().collect()]).collect();
        Self {
            n_states: n,
            n_actions: 1,
            transition: rows(chain.p()),
            reward: rows(chain.r_pair()),
            gamma: chain.gamma(),
            policy: vec![vec![1.0]; n],
            r_max: Some(chain.r_max()),
        }
    }
}
