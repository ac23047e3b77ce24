//! Linear value-function approximation `V_theta = Phi theta`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{check_len, Error, Result};
use crate::geometry::ValueVector;

/// Singular values at or below this count as rank deficiency.
pub const RANK_TOL: f64 = 1e-10;
/// Slack on the unit row-norm bound.
pub const ROW_NORM_TOL: f64 = 1e-12;

/// Feature matrix with full column rank and rows of Euclidean norm at most 1.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    phi: DMatrix<f64>,
    // Row-major copy for per-state access in the learners' inner loop.
    rows: Vec<f64>,
}

/// What [`FeatureMap::repair`] changed.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RepairReport {
    /// Factor applied to every row, when the norm bound failed.
    pub row_scale: Option<f64>,
    /// Original indices of columns that were dropped.
    pub dropped_columns: Vec<usize>,
}

impl RepairReport {
    pub fn is_noop(&self) -> bool {
        self.row_scale.is_none() && self.dropped_columns.is_empty()
    }
}

fn smallest_singular_value(m: &DMatrix<f64>) -> f64 {
    if m.ncols() == 0 {
        return f64::INFINITY;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

fn max_row_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows()).map(|s| m.row(s).norm()).fold(0.0, f64::max)
}

impl FeatureMap {
    /// Strict validation: rejects rank-deficient or unnormalized matrices.
    pub fn new(phi: DMatrix<f64>) -> Result<Self> {
        let (n, k) = phi.shape();
        if k == 0 || k > n {
            return Err(Error::Invalid(format!("need 1 <= K <= n, got K={k}, n={n}")));
        }
        if phi.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invalid("feature matrix has non-finite entries".into()));
        }
        let norm = max_row_norm(&phi);
        if norm * norm > 1.0 + ROW_NORM_TOL {
            return Err(Error::Invalid(format!(
                "max squared row norm {} exceeds 1",
                norm * norm
            )));
        }
        let smin = smallest_singular_value(&phi);
        if smin <= RANK_TOL {
            return Err(Error::Invalid(format!(
                "feature matrix is rank deficient (sigma_min = {smin:e})"
            )));
        }
        let rows = (0..n)
            .flat_map(|s| phi.row(s).iter().copied().collect::<Vec<_>>())
            .collect();
        Ok(Self { phi, rows })
    }

    /// Scales rows so the largest has unit norm (when needed) and greedily
    /// drops columns that are dependent on the ones already kept, which
    /// leaves the column span unchanged.
    pub fn repair(phi_raw: DMatrix<f64>) -> Result<(Self, RepairReport)> {
        if phi_raw.iter().all(|x| *x == 0.0) {
            return Err(Error::Invalid("feature matrix is identically zero".into()));
        }
        let mut report = RepairReport::default();
        let mut phi = phi_raw;
        let norm = max_row_norm(&phi);
        if norm * norm > 1.0 + ROW_NORM_TOL {
            phi /= norm;
            report.row_scale = Some(1.0 / norm);
        }
        let mut kept: Vec<usize> = Vec::new();
        for j in 0..phi.ncols() {
            let mut trial = kept.clone();
            trial.push(j);
            if smallest_singular_value(&phi.select_columns(&trial)) > RANK_TOL {
                kept = trial;
            } else {
                report.dropped_columns.push(j);
            }
        }
        let phi = phi.select_columns(&kept);
        Ok((Self::new(phi)?, report))
    }

    /// `Phi = I_n`.
    pub fn identity(n: usize) -> Self {
        Self::new(DMatrix::identity(n, n)).expect("identity features are valid")
    }

    /// Gaussian rows normalized to unit length; full rank almost surely.
    pub fn random_unit_rows(n: usize, k: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..100 {
            let mut phi = DMatrix::from_fn(n, k, |_, _| StandardNormal.sample(&mut rng));
            for mut row in phi.row_iter_mut() {
                let norm = row.norm();
                row /= norm;
            }
            if let Ok(map) = Self::new(phi) {
                return Ok(map);
            }
        }
        Err(Error::Invalid(format!("could not draw full-rank {n}x{k} features")))
    }

    /// First `k` cosine (DCT-II) basis functions over the states, scaled by
    /// `1/sqrt(k)` so every row has norm at most one.
    pub fn fourier(n: usize, k: usize) -> Result<Self> {
        let scale = 1.0 / (k as f64).sqrt();
        let phi = DMatrix::from_fn(n, k, |s, l| {
            scale * (std::f64::consts::PI * l as f64 * (s as f64 + 0.5) / n as f64).cos()
        });
        Self::new(phi)
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn n_states(&self) -> usize {
        self.phi.nrows()
    }

    pub fn k(&self) -> usize {
        self.phi.ncols()
    }

    /// `phi(s)` as a slice.
    pub fn row(&self, s: usize) -> &[f64] {
        let k = self.k();
        &self.rows[s * k..(s + 1) * k]
    }

    /// `V_theta = Phi theta`.
    pub fn value_of(&self, theta: &DVector<f64>) -> Result<ValueVector> {
        check_len(self.k(), theta.len())?;
        Ok(&self.phi * theta)
    }
}

/// How features are specified on the command line or in a config.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureSpec {
    Identity,
    RandomUnitRows { k: usize, seed: u64 },
    Fourier { k: usize },
    File(String),
}

impl std::str::FromStr for FeatureSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let args = |name: &str| -> Option<Vec<String>> {
            let inner = s.strip_prefix(name)?.trim().strip_prefix('(')?.strip_suffix(')')?;
            Some(inner.split(',').map(|a| a.trim().to_string()).collect())
        };
        let bad = || Error::Config(format!("cannot parse feature spec {s:?}"));
        if s == "identity" {
            return Ok(Self::Identity);
        }
        if let Some(a) = args("random_unit_rows") {
            let [k, seed] = a.as_slice() else { return Err(bad()) };
            return Ok(Self::RandomUnitRows {
                k: k.parse().map_err(|_| bad())?,
                seed: seed.parse().map_err(|_| bad())?,
            });
        }
        if let Some(a) = args("fourier") {
            let [k] = a.as_slice() else { return Err(bad()) };
            return Ok(Self::Fourier {
                k: k.parse().map_err(|_| bad())?,
            });
        }
        Ok(Self::File(s.to_string()))
    }
}

impl std::fmt::Display for FeatureSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Identity => write!(f, "identity"),
            Self::RandomUnitRows { k, seed } => write!(f, "random_unit_rows({k}, {seed})"),
            Self::Fourier { k } => write!(f, "fourier({k})"),
            Self::File(p) => write!(f, "{p}"),
        }
    }
}

impl FeatureSpec {
    /// Materializes the features for an `n`-state chain. File-based features
    /// go through [`FeatureMap::repair`] only when `repair` is set.
    pub fn build(&self, n: usize, repair: bool) -> Result<(FeatureMap, RepairReport)> {
        match self {
            Self::Identity => Ok((FeatureMap::identity(n), RepairReport::default())),
            Self::RandomUnitRows { k, seed } => {
                Ok((FeatureMap::random_unit_rows(n, *k, *seed)?, RepairReport::default()))
            }
            Self::Fourier { k } => Ok((FeatureMap::fourier(n, *k)?, RepairReport::default())),
            Self::File(path) => {
                let phi = load_feature_file(path)?;
                check_len(n, phi.nrows())?;
                if repair {
                    FeatureMap::repair(phi)
                } else {
                    Ok((FeatureMap::new(phi)?, RepairReport::default()))
                }
            }
        }
    }
}

/// Reads an `n x K` nested JSON array.
pub fn load_feature_file(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let n = rows.len();
    let k = rows.first().map_or(0, Vec::len);
    if n == 0 || k == 0 {
        return Err(Error::Invalid("feature file is empty".into()));
    }
    for row in &rows {
        check_len(k, row.len())?;
    }
    Ok(DMatrix::from_fn(n, k, |s, l| rows[s][l]))
}
