use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use tdsplit_core::bounds::{default_radius, TauSource};
use tdsplit_core::harness::{self, load_instance, OutputSpec, RadiusRule, SweepKind, Tolerances};
use tdsplit_core::mdp::mixing_profile;
use tdsplit_core::{
    compute_t0, corollary1_gap, reversibilization, splitting_certificate_td0, splitting_certificate_td_lambda,
    td0_fixed_point, td_lambda_fixed_point, true_value, Algo, BoundInputs, BoundReport, BoundSetup, ExperimentConfig,
    FeatureMap, FeatureSpec, InducedChain, StepSize,
};

#[derive(Parser)]
#[command(
    name = "tdsplit",
    version,
    about = "TD learning as gradient splitting: exact checks, simulations and bounds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// True value, fixed points, spectra and mixing constants.
    Solve(SolveArgs),
    /// Splitting certificates and the inner-product identity.
    Verify(VerifyArgs),
    /// One Monte-Carlo experiment, per-seed checkpoints to CSV.
    Run(RunArgs),
    /// A gamma/horizon grid from a JSON config.
    Sweep(SweepArgs),
    /// Evaluate the bound formulas.
    Bound(BoundArgs),
}

#[derive(Args, Clone)]
struct InstanceArgs {
    /// Instance JSON file, or `reference` for the built-in two-state chain.
    #[arg(long, default_value = "reference")]
    instance: String,
    /// `identity`, `random_unit_rows(k, seed)`, `fourier(k)` or a JSON file.
    #[arg(long, default_value = "identity")]
    features: String,
    /// Rescale rows and drop dependent columns of file-based features.
    #[arg(long)]
    repair_features: bool,
    /// Override the instance's discount factor.
    #[arg(long)]
    gamma: Option<f64>,
}

impl InstanceArgs {
    fn load(&self) -> Result<(InducedChain, FeatureMap)> {
        let mut chain = load_instance(&self.instance).with_context(|| format!("loading instance {}", self.instance))?;
        if let Some(g) = self.gamma {
            chain = chain.with_gamma(g)?;
        }
        let spec: FeatureSpec = self.features.parse()?;
        let (features, report) = spec.build(chain.n_states(), self.repair_features)?;
        if !report.is_noop() {
            log::warn!("features repaired: {report:?}");
        }
        Ok((chain, features))
    }
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    instance: InstanceArgs,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    /// Accuracy for the reported mixing time.
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    instance: InstanceArgs,
    #[arg(long, default_values_t = vec![0.0, 0.5, 0.9])]
    lambda: Vec<f64>,
    /// Series truncation index for TD(lambda); chosen automatically if absent.
    #[arg(long)]
    truncation: Option<usize>,
    /// Random parameters for the inner-product identity.
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    instance: InstanceArgs,
    /// td0, tdlambda or mean_adjusted.
    #[arg(long, default_value = "td0")]
    algo: String,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    /// Horizon.
    #[arg(long = "T")]
    horizon: usize,
    /// `a..b` (inclusive), `a..=b`, or a comma list.
    #[arg(long, default_value = "0..99")]
    seeds: String,
    /// Projection radius; defaults to twice the fixed-point norm.
    #[arg(long)]
    radius: Option<f64>,
    /// `inv_sqrt`, `const:c` or `decay:c` (c / (t+1)).
    #[arg(long, default_value = "inv_sqrt")]
    step: String,
    /// CSV output path.
    #[arg(long)]
    out: PathBuf,
    /// Also write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Compare the final error against the algorithm's bound.
    #[arg(long)]
    check: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct BoundArgs {
    #[command(flatten)]
    instance: InstanceArgs,
    #[arg(long = "T")]
    horizon: usize,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    /// Projection radius for TD(0); defaults to `2 ||theta*||`.
    #[arg(long)]
    radius: Option<f64>,
    /// Projection radius for TD(lambda); defaults to `2 ||theta*_lambda||`.
    #[arg(long)]
    radius_lambda: Option<f64>,
    /// Use the fitted geometric envelope instead of the exact mixing time.
    #[arg(long)]
    envelope: bool,
}

fn parse_step(s: &str) -> Result<StepSize> {
    let value = |v: &str| v.parse::<f64>().with_context(|| format!("bad step constant in {s:?}"));
    Ok(match s.split_once(':') {
        None if s == "inv_sqrt" => StepSize::InvSqrtHorizon,
        Some(("const", c)) => StepSize::Constant { c: value(c)? },
        Some(("decay", c)) => StepSize::Decaying { c: value(c)? },
        _ => bail!("unknown step size {s:?}"),
    })
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

#[derive(Serialize)]
struct SolveOutput {
    n_states: usize,
    gamma: f64,
    stationary: Vec<f64>,
    stationarity_residual: f64,
    true_value: tdsplit_core::TrueValue,
    td0: tdsplit_core::FixedPoint,
    td_lambda: tdsplit_core::FixedPoint,
    spectra: tdsplit_core::SpectralSummary,
    epsilon: f64,
    tau_mix: usize,
    mixing_envelope: Envelope,
    t0: usize,
}

#[derive(Serialize)]
struct Envelope {
    m: f64,
    rho: f64,
}

fn solve(args: &SolveArgs) -> Result<bool> {
    let (chain, features) = args.instance.load()?;
    let (tau_mix, profile) = mixing_profile(&chain, args.epsilon)?;
    print_json(&SolveOutput {
        n_states: chain.n_states(),
        gamma: chain.gamma(),
        stationary: chain.pi().iter().copied().collect(),
        stationarity_residual: chain.stationarity_residual(),
        true_value: true_value(&chain)?,
        td0: td0_fixed_point(&chain, &features)?,
        td_lambda: td_lambda_fixed_point(&chain, &features, args.lambda)?,
        spectra: reversibilization(&chain)?,
        epsilon: args.epsilon,
        tau_mix,
        mixing_envelope: Envelope {
            m: profile.m,
            rho: profile.rho,
        },
        t0: compute_t0(&chain)?,
    })?;
    Ok(true)
}

#[derive(Serialize)]
struct VerifyOutput {
    td0: tdsplit_core::SplittingCertificate,
    td_lambda: Vec<tdsplit_core::SplittingCertificate>,
    inner_product_max_gap: f64,
    inner_product_samples: usize,
    passed: bool,
}

fn verify(args: &VerifyArgs) -> Result<bool> {
    let (chain, features) = args.instance.load()?;
    let td0 = splitting_certificate_td0(&chain, &features)?;
    let mut td_lambda = Vec::new();
    for &lambda in &args.lambda {
        match splitting_certificate_td_lambda(&chain, &features, lambda, args.truncation) {
            Ok(cert) => td_lambda.push(cert),
            Err(tdsplit_core::Error::TruncationTooShort { given, required }) => {
                bail!("truncation M = {given} is too short for lambda = {lambda}; use at least {required}")
            }
            Err(e) => return Err(e.into()),
        }
    }
    let star = td0_fixed_point(&chain, &features)?.theta();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let scale = 1.0 + star.amax();
    let mut max_gap: f64 = 0.0;
    let mut identity_ok = true;
    for _ in 0..args.samples {
        let theta = DVector::from_fn(features.k(), |_, _| rng.random_range(-2.0..2.0) * scale);
        let gap = corollary1_gap(&chain, &features, &star, &theta)?;
        max_gap = max_gap.max((gap.lhs - gap.rhs).abs());
        identity_ok &= gap.holds();
    }
    let passed = td0.holds() && td_lambda.iter().all(|c| c.holds()) && identity_ok;
    print_json(&VerifyOutput {
        td0,
        td_lambda,
        inner_product_max_gap: max_gap,
        inner_product_samples: args.samples,
        passed,
    })?;
    Ok(passed)
}

fn run(args: &RunArgs) -> Result<bool> {
    let algo = Algo::parse(&args.algo, args.lambda)?;
    let cfg = ExperimentConfig {
        instance: args.instance.instance.clone(),
        features: args.instance.features.clone(),
        repair_features: args.instance.repair_features,
        algo,
        horizons: vec![args.horizon],
        gammas: args.instance.gamma.into_iter().collect(),
        seeds: args.seeds.clone(),
        radius: args
            .radius
            .map_or(RadiusRule::TwiceFixedPoint, |value| RadiusRule::Fixed { value }),
        step_size: parse_step(&args.step)?,
        kind: SweepKind::Bound,
        tau_source: TauSource::Exact,
        output: OutputSpec::default(),
        tolerances: Tolerances::default(),
    };
    let (report, rows) = harness::run_single(&cfg, args.check)?;
    harness::write_csv(&args.out, &rows)?;
    if let Some(path) = &args.report {
        report.save(path)?;
    }
    for entry in &report.entries {
        if let Some(s) = entry.fixed_start {
            log::warn!("trajectories started from state {s}; no bound covers this");
        }
        for c in &entry.checks {
            eprintln!(
                "{} {}: mean {} + 3 se = {} vs bound {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.lhs.mean,
                c.upper,
                c.rhs
            );
        }
    }
    Ok(report.all_passed())
}

fn sweep(args: &SweepArgs) -> Result<bool> {
    let cfg = ExperimentConfig::load(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let report = harness::execute(&cfg)?;
    for entry in &report.entries {
        for c in &entry.checks {
            eprintln!(
                "{} gamma={} T={} {}: {} vs {}",
                if c.passed { "PASS" } else { "FAIL" },
                entry.gamma,
                entry.horizon,
                c.name,
                c.upper,
                c.rhs
            );
        }
    }
    Ok(report.all_passed())
}

fn bound(args: &BoundArgs) -> Result<bool> {
    let (chain, features) = args.instance.load()?;
    let mut setup = BoundSetup::new(args.horizon);
    setup.lambda = args.lambda;
    setup.radius = args.radius;
    setup.radius_lambda = args.radius_lambda;
    setup.tau_source = if args.envelope {
        TauSource::Envelope
    } else {
        TauSource::Exact
    };
    let inputs = BoundInputs::from_instance(&chain, &features, &setup)?;
    if let Some(r) = args.radius {
        let star = td0_fixed_point(&chain, &features)?.theta();
        if r < star.norm() {
            log::warn!(
                "radius {r} excludes theta* (norm {}); default would be {}",
                star.norm(),
                default_radius(&star)
            );
        }
    }
    print_json(&BoundReport::evaluate(&inputs)?)?;
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Solve(a) => solve(a),
        Command::Verify(a) => verify(a),
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Bound(a) => bound(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
