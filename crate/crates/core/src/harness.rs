//! Experiment orchestration: JSON configs, gamma/horizon sweeps, bound
//! comparisons and result files.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bellman::{td0_fixed_point, td_lambda_fixed_point};
use crate::bounds::{
    bhandari_rhs, corollary2_rhs, corollary3_rhs, corollary4_rhs, default_radius, dirichlet_only_rhs, BoundInputs,
    BoundReport, BoundSetup, Corollary3Mode, TauSource,
};
use crate::error::{Error, Result};
use crate::features::{FeatureMap, FeatureSpec};
use crate::learner::{
    run_experiment, Algo, CheckpointAggregate, CheckpointRecord, ProjectionSpec, RunResult, RunSpec, Stat, StepSize,
};
use crate::mdp::{reference_chain, InducedChain, InstanceFile, Start};

/// Environment variable overriding the output directory.
pub const OUT_DIR_ENV: &str = "TDSPLIT_OUT_DIR";
/// Instance name that selects the built-in two-state chain.
pub const REFERENCE_INSTANCE: &str = "reference";

/// How the projection radius is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum RadiusRule {
    /// `2 ||theta*||` for the algorithm's own fixed point.
    #[default]
    TwiceFixedPoint,
    Fixed {
        value: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputSpec {
    pub dir: PathBuf,
    #[serde(default = "default_csv")]
    pub csv: String,
    #[serde(default = "default_json")]
    pub json: String,
}

fn default_csv() -> String {
    "records.csv".into()
}

fn default_json() -> String {
    "report.json".into()
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            csv: default_csv(),
            json: default_json(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// `k` in `mean + k stderr <= rhs`.
    pub stderr_multiplier: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { stderr_multiplier: 3.0 }
    }
}

/// What a sweep compares against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// Dirichlet error vs the Dirichlet-only bound, D-norm error vs the
    /// `1/(1-gamma)` bound.
    #[default]
    Gamma,
    /// The algorithm's own bound (TD(0), TD(lambda) or mean-adjusted).
    Bound,
}

/// A complete, archivable experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Instance file path, or `"reference"`.
    pub instance: String,
    /// `identity`, `random_unit_rows(k, seed)`, `fourier(k)` or a JSON path.
    #[serde(default = "default_features")]
    pub features: String,
    #[serde(default)]
    pub repair_features: bool,
    pub algo: Algo,
    pub horizons: Vec<usize>,
    /// Discount overrides; empty keeps the instance's own.
    #[serde(default)]
    pub gammas: Vec<f64>,
    /// `a..b` (inclusive), `a..=b`, or a comma list.
    pub seeds: String,
    #[serde(default)]
    pub radius: RadiusRule,
    #[serde(default = "default_step")]
    pub step_size: StepSize,
    #[serde(default)]
    pub kind: SweepKind,
    #[serde(default)]
    pub tau_source: TauSource,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default)]
    pub tolerances: Tolerances,
}

fn default_features() -> String {
    "identity".into()
}

fn default_step() -> StepSize {
    StepSize::InvSqrtHorizon
}

/// Parses `a..b` (both ends included), `a..=b`, a single seed, or `a,b,c`.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("cannot parse seed range {spec:?}"));
    let num = |s: &str| s.trim().parse::<u64>().map_err(|_| bad());
    let seeds = if let Some((a, b)) = spec.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        let (a, b) = (num(a)?, num(b)?);
        if b < a {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        spec.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

impl ExperimentConfig {
    /// Reads a config, resolving relative instance and feature paths against
    /// the config's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &str| -> String {
            let pb = Path::new(p);
            if pb.is_relative() && base.join(pb).exists() {
                base.join(pb).to_string_lossy().into_owned()
            } else {
                p.to_string()
            }
        };
        if cfg.instance != REFERENCE_INSTANCE {
            cfg.instance = resolve(&cfg.instance);
        }
        if let FeatureSpec::File(p) = cfg.features.parse::<FeatureSpec>()? {
            cfg.features = resolve(&p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(Error::Config(
                "horizons must be a nonempty list of positive integers".into(),
            ));
        }
        if let Some(g) = self.gammas.iter().find(|g| !(**g > 0.0 && **g < 1.0)) {
            return Err(Error::Config(format!("gamma override {g} is outside (0,1)")));
        }
        parse_seeds(&self.seeds)?;
        if let RadiusRule::Fixed { value } = self.radius {
            if !(value > 0.0) {
                return Err(Error::Config(format!(
                    "projection radius must be positive, got {value}"
                )));
            }
        }
        if !(self.tolerances.stderr_multiplier >= 0.0) {
            return Err(Error::Config("stderr multiplier must be nonnegative".into()));
        }
        Ok(())
    }

    /// The output directory, honouring the environment override.
    pub fn out_dir(&self) -> PathBuf {
        std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output.dir.clone())
    }

    pub fn base_chain(&self) -> Result<InducedChain> {
        load_instance(&self.instance)
    }

    fn gamma_grid(&self, chain: &InducedChain) -> Vec<f64> {
        if self.gammas.is_empty() {
            vec![chain.gamma()]
        } else {
            self.gammas.clone()
        }
    }
}

/// Loads an instance file, or the built-in reference chain (at gamma 0.5).
pub fn load_instance(source: &str) -> Result<InducedChain> {
    if source == REFERENCE_INSTANCE {
        reference_chain(0.5)
    } else {
        InstanceFile::load(source)?.to_chain()
    }
}

/// One empirical mean compared against one bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub name: String,
    pub lhs: Stat,
    pub stderr_multiplier: f64,
    /// `mean + k stderr`.
    pub upper: f64,
    pub rhs: f64,
    pub passed: bool,
}

impl BoundCheck {
    pub fn new(name: &str, lhs: Stat, rhs: f64, stderr_multiplier: f64) -> Self {
        let upper = lhs.mean + stderr_multiplier * lhs.stderr;
        Self {
            name: name.into(),
            lhs,
            stderr_multiplier,
            upper,
            rhs,
            passed: upper <= rhs,
        }
    }

    /// Recomputes the flag from the stored numbers.
    pub fn recheck(&self) -> bool {
        self.lhs.mean + self.stderr_multiplier * self.lhs.stderr <= self.rhs
    }
}

/// Results for one `(gamma, T)` cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportEntry {
    pub gamma: f64,
    pub horizon: usize,
    pub radius: f64,
    pub fixed_start: Option<usize>,
    pub aggregates: Vec<CheckpointAggregate>,
    pub bounds: BoundReport,
    pub checks: Vec<BoundCheck>,
    pub wall_clock_secs: f64,
}

/// Output of [`sweep_gamma`] and [`compare_bound`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report {
    pub config: ExperimentConfig,
    pub entries: Vec<ReportEntry>,
    /// False when a later cell failed and only earlier cells are stored.
    pub complete: bool,
    pub error: Option<String>,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        self.complete && self.entries.iter().all(|e| e.checks.iter().all(|c| c.passed))
    }

    /// Flags recomputed from stored numbers, in storage order.
    pub fn recheck(&self) -> Vec<bool> {
        self.entries
            .iter()
            .flat_map(|e| e.checks.iter().map(BoundCheck::recheck))
            .collect()
    }

    pub fn stored_flags(&self) -> Vec<bool> {
        self.entries
            .iter()
            .flat_map(|e| e.checks.iter().map(|c| c.passed))
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// One CSV row; `gamma` and `T` are present only for sweeps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    pub seed: u64,
    pub t: usize,
    #[serde(rename = "err_D_sq")]
    pub err_d_sq: f64,
    pub err_dir_sq: f64,
    pub f_value: f64,
    #[serde(rename = "v_prime_err_D_sq")]
    pub v_prime_err_d_sq: Option<f64>,
}

impl CsvRow {
    pub fn from_record(r: &CheckpointRecord, cell: Option<(f64, usize)>) -> Self {
        Self {
            gamma: cell.map(|c| c.0),
            horizon: cell.map(|c| c.1),
            seed: r.seed,
            t: r.t,
            err_d_sq: r.err_d_sq,
            err_dir_sq: r.err_dir_sq,
            f_value: r.f_value,
            v_prime_err_d_sq: r.v_prime_err_d_sq,
        }
    }
}

/// Writes per-seed checkpoint rows. Floats use shortest round-trip text.
pub fn write_csv(path: impl AsRef<Path>, rows: &[CsvRow]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let sweep = rows.first().is_some_and(|r| r.gamma.is_some());
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    if sweep {
        w.write_record([
            "gamma",
            "T",
            "seed",
            "t",
            "err_D_sq",
            "err_dir_sq",
            "f_value",
            "v_prime_err_D_sq",
        ])?;
    } else {
        w.write_record(["seed", "t", "err_D_sq", "err_dir_sq", "f_value", "v_prime_err_D_sq"])?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<CsvRow>, _>>()?)
}

/// Instance, features and run spec for one `(gamma, T)` cell.
struct Cell {
    chain: InducedChain,
    features: FeatureMap,
    spec: RunSpec,
    inputs: BoundInputs,
}

fn build_cell(cfg: &ExperimentConfig, base: &InducedChain, gamma: f64, horizon: usize) -> Result<Cell> {
    let chain = base.with_gamma(gamma)?;
    let spec_f: FeatureSpec = cfg.features.parse()?;
    let (features, repair) = spec_f.build(chain.n_states(), cfg.repair_features)?;
    if !repair.is_noop() {
        log::warn!("features repaired: {repair:?}");
    }
    let lambda = cfg.algo.lambda();
    let target = match cfg.algo {
        Algo::TdLambda { lambda } => td_lambda_fixed_point(&chain, &features, lambda)?.theta(),
        _ => td0_fixed_point(&chain, &features)?.theta(),
    };
    let radius = match cfg.radius {
        RadiusRule::TwiceFixedPoint => default_radius(&target),
        RadiusRule::Fixed { value } => value,
    };
    let mut spec = RunSpec::new(
        cfg.algo,
        horizon,
        parse_seeds(&cfg.seeds)?,
        ProjectionSpec::ball(radius),
    );
    spec.step_size = cfg.step_size;
    spec.start = Start::Stationary;
    let mut setup = BoundSetup::new(horizon);
    setup.lambda = lambda;
    setup.tau_source = cfg.tau_source;
    match cfg.algo {
        Algo::TdLambda { .. } => setup.radius_lambda = Some(radius),
        _ => setup.radius = Some(radius),
    }
    let inputs = BoundInputs::from_instance(&chain, &features, &setup)?;
    Ok(Cell {
        chain,
        features,
        spec,
        inputs,
    })
}

fn gamma_checks(run: &RunResult, inputs: &BoundInputs, k: f64) -> Result<Vec<BoundCheck>> {
    let last = run.final_aggregate();
    Ok(vec![
        BoundCheck::new(
            "dirichlet_error_vs_dirichlet_only",
            last.err_dir_sq,
            dirichlet_only_rhs(inputs)?,
            k,
        ),
        BoundCheck::new("d_norm_error_vs_bhandari", last.err_d_sq, bhandari_rhs(inputs), k),
    ])
}

fn own_bound_checks(run: &RunResult, inputs: &BoundInputs, k: f64) -> Result<Vec<BoundCheck>> {
    let last = run.final_aggregate();
    Ok(match run.algo {
        Algo::Td0 => vec![BoundCheck::new(
            "f_vs_corollary2",
            last.f_value,
            corollary2_rhs(inputs),
            k,
        )],
        Algo::TdLambda { .. } => vec![BoundCheck::new(
            "f_lambda_vs_corollary4",
            last.f_value,
            corollary4_rhs(inputs),
            k,
        )],
        Algo::MeanAdjusted => {
            let lhs = last
                .v_prime_err_d_sq
                .ok_or_else(|| Error::Config("mean-adjusted run recorded no V' errors".into()))?;
            vec![BoundCheck::new(
                "v_prime_vs_corollary3_exact",
                lhs,
                corollary3_rhs(inputs, Corollary3Mode::Exact)?,
                k,
            )]
        }
    })
}

fn run_cells(
    cfg: &ExperimentConfig,
    checks: impl Fn(&RunResult, &BoundInputs, f64) -> Result<Vec<BoundCheck>>,
) -> Result<(Report, Vec<CsvRow>)> {
    cfg.validate()?;
    let base = cfg.base_chain()?;
    let gammas = cfg.gamma_grid(&base);
    if gammas.is_empty() {
        return Err(Error::Config("gamma list is empty".into()));
    }
    let mut report = Report {
        config: cfg.clone(),
        entries: Vec::new(),
        complete: false,
        error: None,
    };
    let mut rows = Vec::new();
    let sweep = gammas.len() > 1 || cfg.horizons.len() > 1;
    for &gamma in &gammas {
        for &horizon in &cfg.horizons {
            let started = Instant::now();
            let outcome = build_cell(cfg, &base, gamma, horizon).and_then(|cell| {
                let run = run_experiment(&cell.chain, &cell.features, &cell.spec)?;
                let checks = checks(&run, &cell.inputs, cfg.tolerances.stderr_multiplier)?;
                Ok((cell, run, checks))
            });
            let (cell, run, checks) = match outcome {
                Ok(v) => v,
                Err(e) => {
                    report.error = Some(e.to_string());
                    return Err(persist_partial(cfg, &report, &rows, e));
                }
            };
            let cell_id = sweep.then_some((gamma, horizon));
            rows.extend(run.records.iter().map(|r| CsvRow::from_record(r, cell_id)));
            report.entries.push(ReportEntry {
                gamma,
                horizon,
                radius: cell.spec.projection.radius,
                fixed_start: run.fixed_start,
                aggregates: run.aggregates.clone(),
                bounds: BoundReport::evaluate(&cell.inputs)?,
                checks,
                wall_clock_secs: started.elapsed().as_secs_f64(),
            });
        }
    }
    report.complete = true;
    Ok((report, rows))
}

fn persist_partial(cfg: &ExperimentConfig, report: &Report, rows: &[CsvRow], err: Error) -> Error {
    let dir = cfg.out_dir();
    let saved = report
        .save(dir.join(&cfg.output.json))
        .and_then(|_| write_csv(dir.join(&cfg.output.csv), rows));
    if let Err(e) = saved {
        log::error!("could not persist partial results: {e}");
    }
    err
}

/// For each gamma (and horizon): Dirichlet error against the Dirichlet-only
/// bound and D-norm error against the `1/(1-gamma)` bound.
pub fn sweep_gamma(cfg: &ExperimentConfig) -> Result<(Report, Vec<CsvRow>)> {
    run_cells(cfg, gamma_checks)
}

/// The algorithm's objective against its own bound. Requires `1/sqrt(T)` steps.
pub fn compare_bound(cfg: &ExperimentConfig) -> Result<(Report, Vec<CsvRow>)> {
    if cfg.step_size != StepSize::InvSqrtHorizon {
        return Err(Error::Config(
            "bound comparisons require the 1/sqrt(T) step size".into(),
        ));
    }
    run_cells(cfg, own_bound_checks)
}

/// Runs every cell; with `check` the algorithm's own bound is compared too.
pub fn run_single(cfg: &ExperimentConfig, check: bool) -> Result<(Report, Vec<CsvRow>)> {
    if check {
        compare_bound(cfg)
    } else {
        run_cells(cfg, |_, _, _| Ok(Vec::new()))
    }
}

/// Runs the configured sweep kind and writes the report and CSV.
pub fn execute(cfg: &ExperimentConfig) -> Result<Report> {
    let (report, rows) = match cfg.kind {
        SweepKind::Gamma => sweep_gamma(cfg)?,
        SweepKind::Bound => compare_bound(cfg)?,
    };
    let dir = cfg.out_dir();
    report.save(dir.join(&cfg.output.json))?;
    write_csv(dir.join(&cfg.output.csv), &rows)?;
    Ok(report)
}

/// Recomputes the final-checkpoint statistics from CSV rows of a single
/// `(gamma, T)` cell, for offline rechecking.
pub fn final_stats_from_rows(rows: &[CsvRow]) -> Option<(Stat, Stat, Stat, Option<Stat>)> {
    let t_max = rows.iter().map(|r| r.t).max()?;
    let last: Vec<&CsvRow> = rows.iter().filter(|r| r.t == t_max).collect();
    let col = |f: fn(&CsvRow) -> f64| Stat::of(&last.iter().map(|r| f(r)).collect::<Vec<_>>());
    let vp: Option<Vec<f64>> = last.iter().map(|r| r.v_prime_err_d_sq).collect();
    Some((
        col(|r| r.err_d_sq),
        col(|r| r.err_dir_sq),
        col(|r| r.f_value),
        vp.map(|v| Stat::of(&v)),
    ))
}
