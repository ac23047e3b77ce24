//! Acceptance suite. Each test prints one PASS/FAIL line and asserts the
//! same condition at its stated tolerance.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use tdsplit_core::bellman::{
    mean_direction_td_lambda, splitting_certificate_td_lambda, t_lambda_apply, t_lambda_tail_bound, td0_objective,
    td_lambda_objective, Quadratic, TLambdaMode,
};
use tdsplit_core::geometry::{
    d_inner, d_norm_sq, dirichlet_sq, laplacian, project_onto_ones_complement, reversibilization,
};
use tdsplit_core::harness::{self, ExperimentConfig};
use tdsplit_core::mdp::{random_ergodic_chain, GarnetSpec};
use tdsplit_core::{
    corollary1_gap, mean_direction_td0, reference_chain, run_experiment, splitting_certificate_td0, td0_fixed_point,
    td_lambda_fixed_point, true_value, Algo, FeatureMap, InducedChain, ProjectionSpec, RunSpec,
};

const GAMMAS: [f64; 3] = [0.3, 0.9, 0.99];
const LAMBDAS: [f64; 3] = [0.0, 0.5, 0.9];

fn verdict(id: u32, what: &str, ok: bool, detail: String) {
    // Written to the raw handle so the line survives libtest's output capture.
    let line = format!("{} [{id}] {what}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    std::io::stdout().lock().write_all(line.as_bytes()).unwrap();
}

/// Instance `i` of the shared random family: `n` in 2..=8, `K` in 1..=min(4, n).
fn instance(i: u64) -> (InducedChain, FeatureMap) {
    let n = 2 + (i % 7) as usize;
    let k = (1 + (i / 7 % 4) as usize).min(n);
    let gamma = GAMMAS[(i % 3) as usize];
    let spec = GarnetSpec {
        n_states: n,
        n_actions: 2,
        branching: n.min(3),
        gamma,
    };
    let chain = random_ergodic_chain(&spec, 1_000 + i, 50).expect("ergodic instance");
    let features = FeatureMap::random_unit_rows(n, k, 5_000 + i).expect("full-rank features");
    (chain, features)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-scale..scale))
}

#[test]
fn c01_splitting_certificates() {
    let started = Instant::now();
    let mut worst_td0 = 0.0f64;
    let mut worst_lambda = 0.0f64;
    let mut failures = 0;
    for i in 0..200 {
        let (chain, features) = instance(i);
        let c0 = splitting_certificate_td0(&chain, &features).unwrap();
        worst_td0 = worst_td0.max(c0.residual_inf);
        failures += usize::from(c0.residual_inf > 1e-10);
        for lambda in LAMBDAS {
            let c = splitting_certificate_td_lambda(&chain, &features, lambda, None).unwrap();
            worst_lambda = worst_lambda.max(c.residual_inf - c.tail_budget);
            failures += usize::from(c.residual_inf > 1e-8 + c.tail_budget);
        }
    }
    let elapsed = started.elapsed();
    let ok = failures == 0 && elapsed < Duration::from_secs(10);
    verdict(
        1,
        "splitting certificates",
        ok,
        format!(
            "TD(0) worst {worst_td0:e}, TD(lambda) worst excess {worst_lambda:e}, {failures} failures, {elapsed:?}"
        ),
    );
    assert!(ok);
}

#[test]
fn c02_inner_product_identity() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for i in 0..200 {
        let (chain, features) = instance(i);
        let star = td0_fixed_point(&chain, &features).unwrap().theta();
        for _ in 0..5 {
            let theta = random_vec(&mut rng, features.k(), 3.0);
            let gap = corollary1_gap(&chain, &features, &star, &theta).unwrap();
            worst = worst.max((gap.lhs - gap.rhs).abs() / (1.0 + gap.rhs.abs()));
            failures += usize::from(!gap.holds());
        }
    }
    let elapsed = started.elapsed();
    let ok = failures == 0 && elapsed < Duration::from_secs(5);
    verdict(
        2,
        "inner-product identity",
        ok,
        format!("1000 pairs, worst scaled gap {worst:e}, {elapsed:?}"),
    );
    assert!(ok);
}

#[test]
fn c03_exactness_oracles() {
    let mut worst = [0.0f64; 4];
    for i in 0..200 {
        let (chain, features) = instance(i);
        let star = td0_fixed_point(&chain, &features).unwrap().theta();
        worst[0] = worst[0].max(mean_direction_td0(&chain, &features, &star).unwrap().norm());
        for lambda in LAMBDAS {
            let star_l = td_lambda_fixed_point(&chain, &features, lambda).unwrap().theta();
            worst[1] = worst[1].max(
                mean_direction_td_lambda(&chain, &features, &star_l, lambda)
                    .unwrap()
                    .norm(),
            );
        }
        // Residual and mean identity recomputed from P and R directly.
        let v = true_value(&chain).unwrap().vector();
        let n = chain.n_states();
        let lhs = (DMatrix::identity(n, n) - chain.p() * chain.gamma()) * &v;
        worst[2] = worst[2].max((lhs - chain.reward()).amax());
        let mean_v = chain.pi().dot(&v);
        let mean_r = chain.pi().dot(chain.reward()) / (1.0 - chain.gamma());
        worst[3] = worst[3].max((mean_v - mean_r).abs());
    }
    let ok = worst[0] <= 1e-9 && worst[1] <= 1e-9 && worst[2] <= 1e-10 && worst[3] <= 1e-10;
    verdict(
        3,
        "exactness oracles",
        ok,
        format!(
            "|g(theta*)| {:e}, |x(theta*_l)| {:e}, Bellman residual {:e}, mean gap {:e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    );
    assert!(ok);
}

#[test]
fn c04_geometry_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_quad = 0.0f64;
    let mut worst_poincare = f64::NEG_INFINITY;
    let mut constants_zero = true;
    for i in 0..100 {
        let (chain, _) = instance(i);
        let l = laplacian(&chain);
        let spectral = reversibilization(&chain).unwrap();
        let n = chain.n_states();
        for _ in 0..10 {
            let x = random_vec(&mut rng, n, 1.0);
            let quad = x.dot(&(&l * &x));
            worst_quad = worst_quad.max((quad - dirichlet_sq(&chain, &x, 1).unwrap()).abs());

            let y = project_onto_ones_complement(&chain, &x).unwrap();
            assert!(d_inner(&chain, &y, &DVector::from_element(n, 1.0)).unwrap().abs() <= 1e-12);
            let excess = d_norm_sq(&chain, &y).unwrap() - spectral.r_p * dirichlet_sq(&chain, &y, 1).unwrap();
            worst_poincare = worst_poincare.max(excess);
        }
        let c = rng.random_range(-50.0..50.0);
        constants_zero &= dirichlet_sq(&chain, &DVector::from_element(n, c), 1).unwrap() == 0.0;
    }
    let ok = worst_quad <= 1e-12 && worst_poincare <= 1e-10 && constants_zero;
    verdict(
        4,
        "geometry identities",
        ok,
        format!("quadratic form gap {worst_quad:e}, max Poincare excess {worst_poincare:e}, constants zero {constants_zero}"),
    );
    assert!(ok);
}

fn central_difference(f: impl Fn(&DVector<f64>) -> f64, theta: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(theta.len(), |j, _| {
        let mut up = theta.clone();
        let mut down = theta.clone();
        up[j] += h;
        down[j] -= h;
        (f(&up) - f(&down)) / (2.0 * h)
    })
}

#[test]
fn c05_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..100 {
        let (chain, features) = instance(i);
        let theta = random_vec(&mut rng, features.k(), 2.0);

        let star = td0_fixed_point(&chain, &features).unwrap().theta();
        let q = Quadratic::from_certificate(&splitting_certificate_td0(&chain, &features).unwrap(), star.clone());
        let fd = central_difference(|t| td0_objective(&chain, &features, &star, t).unwrap(), &theta, h);
        worst = worst.max((&fd - q.gradient(&theta)).norm() / q.gradient(&theta).norm());

        let lambda = LAMBDAS[(i % 3) as usize].max(0.5);
        let cert = splitting_certificate_td_lambda(&chain, &features, lambda, None).unwrap();
        let m = cert.series_truncation_m.unwrap();
        let star_l = td_lambda_fixed_point(&chain, &features, lambda).unwrap().theta();
        let ql = Quadratic::from_certificate(&cert, star_l.clone());
        let fd = central_difference(
            |t| td_lambda_objective(&chain, &features, &star_l, t, lambda, m).unwrap(),
            &theta,
            h,
        );
        worst = worst.max((&fd - ql.gradient(&theta)).norm() / ql.gradient(&theta).norm());
    }
    let ok = worst <= 1e-6;
    verdict(
        5,
        "finite-difference gradients",
        ok,
        format!("100 points, worst relative error {worst:e}"),
    );
    assert!(ok);
}

fn reference_config(algo: serde_json::Value, seeds: &str) -> ExperimentConfig {
    serde_json::from_value(json!({
        "instance": "reference",
        "algo": algo,
        "horizons": [10000],
        "seeds": seeds,
        "kind": "bound",
    }))
    .unwrap()
}

#[test]
fn c06_bound_satisfaction() {
    let started = Instant::now();
    let mut ok = true;
    let mut lines = Vec::new();
    for algo in [
        json!({"kind": "td0"}),
        json!({"kind": "td_lambda", "lambda": 0.5}),
        json!({"kind": "mean_adjusted"}),
    ] {
        let (report, _) = harness::compare_bound(&reference_config(algo, "0..99")).unwrap();
        for c in report.entries.iter().flat_map(|e| &e.checks) {
            ok &= c.passed;
            lines.push(format!("{} {:.4e} <= {:.4e}", c.name, c.upper, c.rhs));
        }
        ok &= report.all_passed();
    }
    let elapsed = started.elapsed();
    ok &= lines.len() == 3 && elapsed < Duration::from_secs(120);
    verdict(
        6,
        "bound satisfaction on the reference chain",
        ok,
        format!("{}; {elapsed:?}", lines.join("; ")),
    );
    assert!(ok);
}

#[test]
fn c07_dirichlet_error_is_gamma_uniform() {
    let cfg: ExperimentConfig = serde_json::from_value(json!({
        "instance": "reference",
        "algo": {"kind": "td0"},
        "horizons": [10000],
        "gammas": [0.9, 0.99, 0.999],
        "seeds": "0..99",
        "kind": "gamma",
    }))
    .unwrap();
    let (report, _) = harness::sweep_gamma(&cfg).unwrap();
    let mut ok = report.complete && report.entries.len() == 3;
    let mut lines = Vec::new();
    for e in &report.entries {
        let c = e
            .checks
            .iter()
            .find(|c| c.name == "dirichlet_error_vs_dirichlet_only")
            .unwrap();
        let d = e.checks.iter().find(|c| c.name == "d_norm_error_vs_bhandari").unwrap();
        ok &= c.passed;
        lines.push(format!(
            "gamma {}: Dir {:.3e} <= {:.3e} (D-norm {:.3e})",
            e.gamma, c.upper, c.rhs, d.lhs.mean
        ));
    }
    verdict(7, "gamma-uniform Dirichlet error", ok, lines.join("; "));
    assert!(ok);
}

#[test]
fn c08_mean_estimation_rate() {
    let chain = reference_chain(0.5).unwrap();
    let features = FeatureMap::identity(2);
    let star = td0_fixed_point(&chain, &features).unwrap().theta();
    let proj = ProjectionSpec::ball(tdsplit_core::bounds::default_radius(&star));
    let mse = |horizon: usize| {
        let spec = RunSpec::new(Algo::MeanAdjusted, horizon, (0..200).collect(), proj);
        run_experiment(&chain, &features, &spec)
            .unwrap()
            .final_aggregate()
            .v_hat_err_sq
            .unwrap()
            .mean
    };
    let (short, long) = (mse(10_000), mse(40_000));
    let ok = long <= 0.6 * short;
    verdict(
        8,
        "mean-estimation rate",
        ok,
        format!("MSE {short:.4e} at 1e4, {long:.4e} at 4e4, ratio {:.3}", long / short),
    );
    assert!(ok);
}

#[test]
fn c09_truncated_lambda_operator() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut failures = 0;
    let mut worst_ratio = 0.0f64;
    for i in 0..100 {
        let (base, _) = instance(i);
        let gamma = rng.random_range(0.05..0.995);
        let chain = base.with_gamma(gamma).unwrap();
        let lambda = rng.random_range(0.0..0.99);
        let m = rng.random_range(0..40usize);
        let j = random_vec(&mut rng, chain.n_states(), 10.0);
        let exact = t_lambda_apply(&chain, &j, lambda, TLambdaMode::ClosedForm).unwrap();
        let cut = t_lambda_apply(&chain, &j, lambda, TLambdaMode::Truncated(m)).unwrap();
        let bound = t_lambda_tail_bound(&chain, &j, lambda, TLambdaMode::Truncated(m));
        // Floating-point slack on the scale of the summed terms.
        let slack = 1e-13 * (chain.reward().amax() / (1.0 - gamma * lambda) + j.amax());
        let diff = (exact - cut).amax();
        failures += usize::from(diff > bound + slack);
        if bound > 0.0 {
            worst_ratio = worst_ratio.max(diff / (bound + slack));
        }
    }
    let ok = failures == 0;
    verdict(
        9,
        "truncated T^(lambda) tail",
        ok,
        format!("100 combos, {failures} failures, max diff/bound {worst_ratio:.3}"),
    );
    assert!(ok);
}

fn tdsplit(args: &[&str], envs: &[(&str, &str)]) -> std::process::Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tdsplit"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn run_to(dir: &Path, name: &str, threads: &str) -> Vec<u8> {
    let out = dir.join(name);
    let status = tdsplit(
        &[
            "run",
            "--algo",
            "mean_adjusted",
            "--T",
            "2000",
            "--seeds",
            "0..19",
            "--out",
            out.to_str().unwrap(),
        ],
        &[("RAYON_NUM_THREADS", threads)],
    );
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    std::fs::read(out).unwrap()
}

fn sweep_to(config: &Path, out_dir: &Path, threads: &str) -> Vec<u8> {
    let status = tdsplit(
        &["sweep", "--config", config.to_str().unwrap()],
        &[
            ("TDSPLIT_OUT_DIR", out_dir.to_str().unwrap()),
            ("RAYON_NUM_THREADS", threads),
        ],
    );
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    std::fs::read(out_dir.join("records.csv")).unwrap()
}

#[test]
fn c10_cli_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let run_a = run_to(dir.path(), "a.csv", "1");
    let run_b = run_to(dir.path(), "b.csv", "4");

    let config = dir.path().join("sweep.json");
    std::fs::write(
        &config,
        json!({
            "instance": "reference",
            "algo": {"kind": "td_lambda", "lambda": 0.5},
            "horizons": [500, 1000],
            "gammas": [0.5, 0.9],
            "seeds": "0..9",
        })
        .to_string(),
    )
    .unwrap();
    let sweep_a = sweep_to(&config, &dir.path().join("s1"), "1");
    let sweep_b = sweep_to(&config, &dir.path().join("s2"), "3");

    let ok = !run_a.is_empty() && run_a == run_b && !sweep_a.is_empty() && sweep_a == sweep_b;
    verdict(
        10,
        "CLI determinism",
        ok,
        format!(
            "run CSV {} bytes, sweep CSV {} bytes, byte-identical across repeats",
            run_a.len(),
            sweep_a.len()
        ),
    );
    assert!(ok);
}
