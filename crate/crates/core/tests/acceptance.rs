//! Acceptance suite. Every criterion runs to completion and prints one
//! `PASS`/`FAIL` line; the process exits nonzero if any criterion fails.
//!
//! Run with `cargo test -p monoflow-core --test acceptance`.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use monoflow_core::experiment::{
    manifest, run_experiment, verify, write_outputs, CellPlan, ExperimentConfig, ExperimentMethod,
    ExperimentOutcome, Plan,
};
use monoflow_core::metrics::Metric;
use monoflow_core::operators::{Matrix, Operator, OperatorSpec, Vector};
use monoflow_core::oracle::{NoiseModel, SeedSpec, Stream};
use monoflow_core::plot::{render_svg, PlotOptions, PlotSeries};
use monoflow_core::sde::{simulate, DiffusionSpec, ParamSchedule, Schedule, SdeOptions};
use monoflow_core::solvers::{
    self, eg_bound, eg_bound_from_distance, ogda_bound, ogda_bound_from_distances, BoundKind,
    BoundParams, Method, SolverConfig,
};
use monoflow_core::BilinearProblem;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

/// Runs one criterion, folding the runtime budget into the verdict.
fn criterion(
    id: u32,
    name: &str,
    budget: Option<Duration>,
    body: impl FnOnce() -> Verdict,
) -> bool {
    let start = Instant::now();
    let result = panic::catch_unwind(AssertUnwindSafe(body));
    let elapsed = start.elapsed();
    let mut verdict = result.unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Verdict::new(false, format!("panicked: {msg}"))
    });
    if let Some(limit) = budget {
        if elapsed > limit {
            verdict.pass = false;
            verdict
                .detail
                .push_str(&format!("; over budget {:.0?}", limit));
        }
    }
    println!(
        "criterion {id:>2} {:<4} {name} [{:.1}s] {}",
        if verdict.pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        verdict.detail
    );
    verdict.pass
}

fn artifact_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    fs::create_dir_all(&dir).expect("artifact directory");
    dir
}

// ---------------------------------------------------------------- operators

fn random_operator(rng: &mut ChaCha8Rng) -> OperatorSpec {
    let n = rng.random_range(1..=8usize);
    let b = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let k = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let linear = b.transpose() * &b + &k - k.transpose();
    let offset = Vector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
    let kappa = if rng.random_bool(0.5) {
        rng.random_range(0.0..1.0)
    } else {
        0.0
    };
    OperatorSpec::shifted(linear, offset, kappa).unwrap()
}

fn random_point(n: usize, rng: &mut ChaCha8Rng) -> Vector {
    Vector::from_fn(n, |_, _| rng.random_range(-10.0..10.0))
}

fn operator_algebra() -> Verdict {
    const CASES: usize = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(0xa1);
    let mut failures: Vec<String> = Vec::new();
    let mut fail = |what: &str, case: usize| failures.push(format!("{what}#{case}"));
    for case in 0..CASES {
        let op = random_operator(&mut rng);
        let n = op.dim();
        let l = op.lipschitz();
        let x = random_point(n, &mut rng);
        let y = random_point(n, &mut rng);
        let d = &x - &y;
        let dm = op.apply(&x) - op.apply(&y);
        if dm.dot(&d) < -1e-10 * d.norm_squared() {
            fail("monotone", case);
        }
        if dm.norm() > (l + 1e-8) * d.norm() {
            fail("lipschitz", case);
        }
        let mu = 10f64.powf(rng.random_range(-3.0..1.0));
        let jx = op.resolvent(mu, &x).unwrap();
        let jy = op.resolvent(mu, &y).unwrap();
        if (&jx - &jy).norm() > d.norm() + 1e-10 {
            fail("nonexpansive", case);
        }
        let yosida = op.yosida(mu, &x).unwrap();
        if (op.apply(&jx) - &yosida).norm() > 1e-10 {
            fail("yosida", case);
        }
        let lambda = 10f64.powf(rng.random_range(-3.0..1.0));
        let jl = op.resolvent(lambda, &x).unwrap();
        let rhs = (lambda - mu).abs() * op.yosida(lambda, &x).unwrap().norm();
        if (&jl - &jx).norm() > rhs + 1e-8 {
            fail("parameter-identity", case);
        }
    }
    let pass = failures.is_empty();
    let detail = if pass {
        format!("{CASES} cases x 5 properties")
    } else {
        format!(
            "{} violations, first {:?}",
            failures.len(),
            &failures[..failures.len().min(5)]
        )
    };
    Verdict::new(pass, detail)
}

fn resolvent_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let op = random_operator(&mut rng);
        let mu = rng.random_range(0.01..=0.9) / op.lipschitz();
        let z = random_point(op.dim(), &mut rng);
        let direct = op.resolvent_direct(mu, &z).unwrap();
        let iterative = op.resolvent_iterative(mu, &z).unwrap();
        worst = worst.max((direct - iterative).norm());
    }
    Verdict::new(
        worst <= 1e-10,
        format!("max |fixed-point - direct| = {worst:.2e} (tol 1e-10)"),
    )
}

// ---------------------------------------------------------- discrete bounds

/// 50 distinct, roughly geometric values of K in `[1, k_max]`.
fn log_spaced(count: usize, k_max: u64) -> Vec<u64> {
    let mut ks = Vec::with_capacity(count);
    for j in 0..count {
        let target = (k_max as f64).powf(j as f64 / (count - 1) as f64).round() as u64;
        let floor = ks.last().map_or(1, |&k: &u64| k + 1);
        ks.push(target.max(floor));
    }
    *ks.last_mut().unwrap() = k_max;
    ks
}

fn deterministic_bound(
    method: Method,
    gamma_times_l: f64,
    extra: impl FnOnce(&solvers::IterateTrace, &BilinearProblem) -> (bool, String),
) -> Verdict {
    const K: u64 = 50_000;
    let p = BilinearProblem::new(10).unwrap();
    let op = &p.operator;
    let l = op.lipschitz();
    let gamma = gamma_times_l / l;
    let x0 = Vector::zeros(20);
    let mut cfg = SolverConfig::new(method, gamma, K, x0.clone());
    cfg.record_stride = 1;
    let trace = solvers::run(
        op,
        &NoiseModel::NONE,
        &cfg,
        &p.zero.x_star,
        SeedSpec::new(0, 0, Stream::Xi),
    )
    .unwrap();
    let params = BoundParams {
        gamma,
        lipschitz: l,
        sigma_star: 0.0,
    };
    let mut violations = Vec::new();
    for k in log_spaced(50, K) {
        let bound = match method {
            Method::Ogda => ogda_bound(
                k,
                &params,
                &x0,
                trace.x1.as_ref().unwrap(),
                &p.zero.x_star,
                BoundKind::SqNorm,
            ),
            _ => eg_bound(k, &params, &x0, &p.zero.x_star, BoundKind::SqNorm),
        }
        .unwrap();
        let emp = trace.ergodic_sqnorm_at(k).unwrap();
        if emp > bound {
            violations.push(k);
        }
    }
    let ratio = trace.ergodic_sqnorm_at(K).unwrap() / trace.ergodic_sqnorm_at(100).unwrap();
    let (extra_ok, extra_detail) = extra(&trace, &p);
    Verdict::new(
        violations.is_empty() && ratio <= 0.01 && extra_ok,
        format!(
            "bound violated at {} of 50 K; ergodic(50000)/ergodic(100) = {ratio:.4} (need <= 0.01){extra_detail}",
            violations.len()
        ),
    )
}

// ------------------------------------------------------------- experiments

fn config(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(text).unwrap()
}

fn run(cfg: &ExperimentConfig, threads: usize) -> (Plan, ExperimentOutcome) {
    let plan = cfg.resolve().unwrap();
    let outcome = run_experiment(&plan, Some(threads)).unwrap();
    assert!(!outcome.has_failures(), "replica failures");
    (plan, outcome)
}

fn stochastic_bound() -> Verdict {
    const K: u64 = 50_000;
    let cfg = config(
        r#"{"name": "iid", "problem": {"kind": "bilinear", "n": 10}, "methods": ["ogda", "eg"],
            "replicas": 100, "master_seed": 5, "noise": {"kind": "iid-gaussian", "sigma_star": 0.1},
            "solver": {"iterations": 50000}}"#,
    );
    let (plan, outcome) = run(&cfg, 8);
    let man = manifest(&plan, &outcome).unwrap();
    let l = plan.problem.operator.lipschitz();
    let sigma = 0.1f64;
    let s2 = sigma * sigma;
    let dist0_sq = plan.problem.distance_to_zero_set(&plan.x0).powi(2);
    let mut pass = true;
    let mut detail = Vec::new();
    for (i, method) in [ExperimentMethod::Ogda, ExperimentMethod::Eg]
        .into_iter()
        .enumerate()
    {
        let CellPlan::Solver(cell) = plan.cell(method).unwrap() else {
            unreachable!()
        };
        let gamma = cell.gamma;
        let params = BoundParams {
            gamma,
            lipschitz: l,
            sigma_star: sigma,
        };
        let summary = outcome.method(method).unwrap().summary.as_ref().unwrap();
        let erg = summary.series(Metric::ErgodicNormMSq);
        let gl2 = (gamma * l).powi(2);
        let (start, bound, floor) = match method {
            ExperimentMethod::Ogda => {
                let m = &man["methods"][i];
                let bound = ogda_bound_from_distances(
                    K,
                    &params,
                    m["mean_dist1_sq"].as_f64().unwrap(),
                    m["mean_step_sq"].as_f64().unwrap(),
                    BoundKind::SqNorm,
                )
                .unwrap();
                (1.0, bound, (16.0 * gl2 + 11.0) / (1.0 - 16.0 * gl2) * s2)
            }
            _ => (
                0.0,
                eg_bound_from_distance(K, &params, dist0_sq, BoundKind::SqNorm).unwrap(),
                gamma * gamma * (2.0 + 3.0 * gl2) / (1.0 - 3.0 * gl2) * s2,
            ),
        };
        let row = summary
            .index
            .iter()
            .position(|&k| k == K as f64 + start)
            .unwrap();
        let (mean, se) = (erg.mean[row], erg.stderr[row]);
        let dominated = mean <= bound + 3.0 * se;
        let within = mean >= floor / 10.0 && mean <= floor * 10.0;
        pass &= dominated && within;
        detail.push(format!(
            "{}: mean {mean:.3e} <= bound {bound:.3e} + 3*{se:.1e}: {dominated}; constant term {floor:.3e}, mean/constant {:.4} (need in [0.1, 10])",
            method.name(),
            mean / floor
        ));
    }
    Verdict::new(pass, detail.join("; "))
}

const DECAYING: &str = r#"{
    "name": "decaying",
    "problem": {"kind": "bilinear", "n": 10},
    "methods": ["ogda", "eg"],
    "replicas": 100,
    "master_seed": 2024,
    "noise": {"kind": "decaying-direction", "decay_std": 10},
    "solver": {"iterations": 50000}
}"#;

fn csv_bytes(plan: &Plan, outcome: &ExperimentOutcome, dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = write_outputs(plan, outcome, dir)
        .unwrap()
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn qualitative(plan: &Plan, outcome: &ExperimentOutcome) -> Verdict {
    let mut pass = true;
    let mut detail = Vec::new();
    let mut finals = Vec::new();
    let mut series = Vec::new();
    for m in [ExperimentMethod::Ogda, ExperimentMethod::Eg] {
        let summary = outcome.method(m).unwrap().summary.clone().unwrap();
        let erg = summary.series(Metric::ErgodicNormMSq);
        let tail_start = summary.index.iter().position(|&k| k >= 500.0).unwrap();
        let rises = (tail_start + 1..erg.mean.len())
            .filter(|&i| erg.mean[i] > erg.mean[i - 1] + 1e-9)
            .count();
        let band_ok =
            (0..erg.mean.len()).all(|i| erg.min[i] <= erg.mean[i] && erg.mean[i] <= erg.max[i]);
        let last = erg.mean.len() - 1;
        let band_open = erg.max[last] > erg.min[last];
        pass &= rises == 0 && band_ok && band_open;
        finals.push(erg.mean[last]);
        detail.push(format!(
            "{}: rises after k=500: {rises}, band ordered {band_ok}, band width at end {:.2e}",
            m.name(),
            erg.max[last] - erg.min[last]
        ));
        series.push(PlotSeries {
            label: m.name().into(),
            summary,
        });
    }
    let ordering = finals[1] <= 10.0 * finals[0];
    pass &= ordering;
    detail.push(format!(
        "final eg {:.3e} vs ogda {:.3e}: {ordering}",
        finals[1], finals[0]
    ));

    let path = artifact_dir().join("decaying_ergodic_norm_M_sq.svg");
    let mut opts = PlotOptions::new(Metric::ErgodicNormMSq);
    opts.title = Some(format!(
        "{}: ergodic ||M||^2, R = {}",
        plan.config.name, plan.config.replicas
    ));
    let svg = render_svg(&series, &opts).unwrap();
    fs::write(&path, &svg).unwrap();
    let plotted = svg.matches("<polyline").count() == 2 && svg.matches("<polygon").count() == 2;
    pass &= plotted;
    detail.push(format!("plot {} ({plotted})", path.display()));
    Verdict::new(pass, detail.join("; "))
}

// ---------------------------------------------------------------------- sde

fn sde_strong() -> Verdict {
    let cfg = config(
        r#"{"name": "strong", "problem": {"kind": "identity-strong", "kappa": 1}, "methods": ["sde"],
            "replicas": 200, "master_seed": 7, "x0": [1, -1],
            "sde": {"horizon": 20, "step": 0.001,
                    "mu": {"kind": "constant", "value": 0.55}, "gamma": {"kind": "constant", "value": 0.55},
                    "diffusion": {"sigma_star": 0.05}},
            "verify": {"checkpoints": 20, "stderr_multiplier": 3}}"#,
    );
    let (plan, outcome) = run(&cfg, 8);
    let report = verify(&plan, &outcome).unwrap();
    let rows: Vec<_> = report
        .rows
        .iter()
        .filter(|r| r.check == "sde-strong")
        .collect();
    let failed = rows.iter().filter(|r| !r.pass).count();
    let worst = rows
        .iter()
        .map(|r| r.empirical / (r.bound + 3.0 * r.stderr + r.allowance))
        .fold(0.0, f64::max);
    Verdict::new(
        rows.len() == 20 && failed == 0,
        format!(
            "{} checkpoints, {failed} failed, max mean/(bound+3se+allow) = {worst:.3}",
            rows.len()
        ),
    )
}

fn sde_ergodic() -> Verdict {
    let cfg = config(
        r#"{"name": "ergodic", "problem": {"kind": "bilinear", "n": 10}, "methods": ["sde"],
            "replicas": 100, "master_seed": 8,
            "sde": {"horizon": 100, "step": 0.01,
                    "mu": {"kind": "constant", "value": 1}, "gamma": {"kind": "constant", "value": 1},
                    "diffusion": {"sigma_star": 0.05}},
            "verify": {"checkpoints": 10, "stderr_multiplier": 3}}"#,
    );
    let (plan, outcome) = run(&cfg, 8);
    let report = verify(&plan, &outcome).unwrap();
    let gap: Vec<_> = report
        .rows
        .iter()
        .filter(|r| r.check == "sde-gap")
        .collect();
    let failed = gap.iter().filter(|r| !r.pass).count();
    let sq_failed = report
        .rows
        .iter()
        .filter(|r| r.check == "sde-sqnorm" && !r.pass)
        .count();
    Verdict::new(
        gap.len() == 10 && failed == 0,
        format!(
            "{} gap checkpoints, {failed} failed (sqnorm rows failing: {sq_failed})",
            gap.len()
        ),
    )
}

fn euler_order() -> Verdict {
    let op = OperatorSpec::rotation();
    let sched = ParamSchedule {
        mu: Schedule::RationalDecay { up: 1.0, low: 0.5 },
        gamma: Schedule::Constant { value: 1.0 },
    };
    let x0 = Vector::from_column_slice(&[1.0, 0.0]);
    let endpoint = |h: f64| {
        let mut opts = SdeOptions::new(10.0, h);
        opts.keep_states = true;
        let traj = simulate(
            &op,
            &sched,
            &DiffusionSpec::none(2),
            &x0,
            &Vector::zeros(2),
            &opts,
            SeedSpec::new(9, 0, Stream::Brownian),
        )
        .unwrap();
        traj.x_states.last().unwrap().clone()
    };
    let steps: Vec<f64> = (0..6).map(|i| 0.1 / 2f64.powi(i)).collect();
    let reference = endpoint(steps[5] / 100.0);
    let errors: Vec<f64> = steps
        .iter()
        .map(|&h| (endpoint(h) - &reference).norm())
        .collect();
    let ratios: Vec<f64> = errors.windows(2).map(|w| w[0] / w[1]).collect();
    let pass = ratios.iter().all(|r| (1.7..=2.3).contains(r));
    Verdict::new(
        pass,
        format!(
            "ratios {:?}",
            ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>()
        ),
    )
}

fn main() -> ExitCode {
    let mut results = Vec::new();
    results.push(criterion(
        1,
        "operator algebra properties",
        Some(Duration::from_secs(10)),
        operator_algebra,
    ));
    results.push(criterion(
        2,
        "contraction resolvent vs direct solve",
        Some(Duration::from_secs(5)),
        resolvent_equivalence,
    ));
    results.push(criterion(
        3,
        "deterministic OGDA bound and decay",
        Some(Duration::from_secs(30)),
        || deterministic_bound(Method::Ogda, 1.0 / 8.0, |_, _| (true, String::new())),
    ));
    results.push(criterion(
        4,
        "deterministic EG bound, decay and last iterate",
        Some(Duration::from_secs(30)),
        || {
            deterministic_bound(Method::Eg, 0.5, |trace, p| {
                let op = &p.operator;
                let start = op.apply(&Vector::zeros(20)).norm();
                let row = trace.metrics.position(50_000.0).unwrap();
                let last = trace.metrics.norm_m_sq[row].sqrt();
                let ok = last <= 1e-6 * start;
                (
                    ok,
                    format!("; |M(x^K)|/|M(x0)| = {:.2e} (need <= 1e-6)", last / start),
                )
            })
        },
    ));
    results.push(criterion(
        5,
        "stochastic bound domination and noise floor",
        Some(Duration::from_secs(600)),
        stochastic_bound,
    ));

    let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let decaying = config(DECAYING);
    let mut serial = None;
    results.push(criterion(6, "decaying-noise reproduction", None, || {
        let (plan, outcome) = run(&decaying, 1);
        let v = qualitative(&plan, &outcome);
        serial = Some((plan, outcome));
        v
    }));
    results.push(criterion(
        7,
        "SDE strongly monotone bound",
        Some(Duration::from_secs(300)),
        sde_strong,
    ));
    results.push(criterion(
        8,
        "SDE ergodic gap bound",
        Some(Duration::from_secs(600)),
        sde_ergodic,
    ));
    results.push(criterion(
        9,
        "Euler first-order convergence",
        Some(Duration::from_secs(60)),
        euler_order,
    ));
    results.push(criterion(10, "bitwise determinism", None, || {
        let (plan, outcome) = serial.take().unwrap_or_else(|| run(&decaying, 1));
        let first = csv_bytes(&plan, &outcome, dirs[0].path());
        drop(outcome);
        let (plan2, again) = run(&decaying, 1);
        let second = csv_bytes(&plan2, &again, dirs[1].path());
        drop(again);
        let (plan8, parallel) = run(&decaying, 8);
        let eight = csv_bytes(&plan8, &parallel, dirs[2].path());
        let rerun = first == second;
        let threads = first == eight;
        Verdict::new(
            !first.is_empty() && rerun && threads,
            format!(
                "{} CSVs; rerun identical {rerun}; 8 workers vs serial identical {threads}",
                first.len()
            ),
        )
    }));

    let failed = results.iter().filter(|p| !**p).count();
    println!(
        "acceptance: {} of {} criteria pass",
        results.len() - failed,
        results.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
