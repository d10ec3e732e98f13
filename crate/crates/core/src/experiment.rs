//! Config-driven Monte-Carlo experiments: problem construction, replica
//! orchestration, CSV/manifest output and bound verification.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::metrics::{EnsembleAccumulator, EnsembleSummary, Metric, RunRecord};
use crate::operators::{BilinearProblem, Matrix, Operator, OperatorSpec, Vector};
use crate::oracle::{NoiseModel, SeedSpec, Stream};
use crate::sde::{
    self, ContinuousBoundKind, ContinuousBoundParams, DiffusionSpec, Envelope, ParamSchedule,
    Schedule, SdeOptions,
};
use crate::solvers::{self, BoundKind, BoundParams, Method, SolverConfig};

/// Built-in test problems.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemSpec {
    /// Bilinear-quadratic saddle problem with `n`-dimensional blocks.
    Bilinear { n: usize },
    /// π/2 rotation of the plane.
    Rotation,
    /// `κI` plus π/2 rotation blocks (`n` even).
    IdentityStrong {
        #[serde(default = "two")]
        n: usize,
        #[serde(default = "unit")]
        kappa: f64,
    },
    /// `M ≡ 0` on `R^n`.
    Zero { n: usize },
}

impl ProblemSpec {
    pub const NAMES: [&'static str; 4] = ["bilinear", "rotation", "identity-strong", "zero"];

    pub fn build(&self) -> Result<Problem> {
        let (operator, bilinear) = match *self {
            ProblemSpec::Bilinear { n } => {
                let p = BilinearProblem::new(n)?;
                (p.operator.clone(), Some(p))
            }
            ProblemSpec::Rotation => (OperatorSpec::rotation(), None),
            ProblemSpec::IdentityStrong { n, kappa } => {
                (OperatorSpec::rotation_shift(n, kappa)?, None)
            }
            ProblemSpec::Zero { n } => (OperatorSpec::zero(n)?, None),
        };
        let cert = operator.zero_certificate()?;
        let row_space = row_space_basis(operator.total_linear());
        Ok(Problem {
            operator,
            x_star: cert.x_star,
            zero_rank: cert.rank,
            zero_residual: cert.residual,
            row_space,
            bilinear,
        })
    }
}

fn two() -> usize {
    2
}

fn unit() -> f64 {
    1.0
}

/// A built problem together with its certified zero.
#[derive(Debug, Clone)]
pub struct Problem {
    pub operator: OperatorSpec,
    /// Minimum-norm zero.
    pub x_star: Vector,
    pub zero_rank: usize,
    pub zero_residual: f64,
    row_space: Matrix,
    pub bilinear: Option<BilinearProblem>,
}

impl Problem {
    /// Distance from `x` to the zero set `x* + ker(J)`.
    pub fn distance_to_zero_set(&self, x: &Vector) -> f64 {
        (self.row_space.transpose() * (x - &self.x_star)).norm()
    }
}

/// Orthonormal basis of the orthogonal complement of `ker(a)`.
fn row_space_basis(a: &Matrix) -> Matrix {
    let n = a.ncols();
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let tol = 1e-12 * svd.singular_values.max().max(1.0);
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > tol)
        .collect();
    Matrix::from_fn(n, keep.len(), |r, c| v_t[(keep[c], r)])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentMethod {
    Ogda,
    Eg,
    Forward,
    Sde,
}

impl ExperimentMethod {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentMethod::Ogda => "ogda",
            ExperimentMethod::Eg => "eg",
            ExperimentMethod::Forward => "forward",
            ExperimentMethod::Sde => "sde",
        }
    }

    pub fn solver(self) -> Option<Method> {
        match self {
            ExperimentMethod::Ogda => Some(Method::Ogda),
            ExperimentMethod::Eg => Some(Method::Eg),
            ExperimentMethod::Forward => Some(Method::Forward),
            ExperimentMethod::Sde => None,
        }
    }

    fn streams(self) -> &'static [&'static str] {
        match self {
            ExperimentMethod::Ogda | ExperimentMethod::Forward => &["xi"],
            ExperimentMethod::Eg => &["xi", "eta"],
            ExperimentMethod::Sde => &["brownian"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    /// Step sizes; `None` picks the method default from `L`.
    #[serde(default)]
    pub ogda_gamma: Option<f64>,
    #[serde(default)]
    pub eg_gamma: Option<f64>,
    #[serde(default)]
    pub forward_gamma: Option<f64>,
    /// OGDA second start point; `None` takes one noisy forward step.
    #[serde(default)]
    pub x1: Option<Vec<f64>>,
}

fn default_iterations() -> u64 {
    1000
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            iterations: default_iterations(),
            ogda_gamma: None,
            eg_gamma: None,
            forward_gamma: None,
            x1: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSection {
    /// Frobenius norm of the constant part `Σ₀ = σ*/√n · I`.
    #[serde(default)]
    pub sigma_star: f64,
    #[serde(default = "constant_envelope")]
    pub envelope: Envelope,
    /// State-coupling strength `c_σ` along the identity direction.
    #[serde(default)]
    pub coupling: f64,
    /// Saturation radius `ρ` of the state coupling.
    #[serde(default = "unit")]
    pub cap: f64,
}

fn constant_envelope() -> Envelope {
    Envelope::Constant
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            sigma_star: 0.0,
            envelope: Envelope::Constant,
            coupling: 0.0,
            cap: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeSection {
    pub horizon: f64,
    pub step: f64,
    pub mu: Schedule,
    pub gamma: Schedule,
    #[serde(default)]
    pub diffusion: DiffusionSection,
    /// Split point of the refined strongly monotone bound.
    #[serde(default = "half")]
    pub lambda: f64,
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default = "default_checkpoints")]
    pub checkpoints: usize,
    #[serde(default = "three")]
    pub stderr_multiplier: f64,
}

fn default_checkpoints() -> usize {
    20
}

fn three() -> f64 {
    3.0
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            checkpoints: default_checkpoints(),
            stderr_multiplier: three(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub problem: ProblemSpec,
    pub methods: Vec<ExperimentMethod>,
    #[serde(default = "one_usize")]
    pub replicas: usize,
    #[serde(default)]
    pub master_seed: u64,
    /// Start point shared by every method; zeros when absent.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default = "no_noise")]
    pub noise: NoiseModel,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub sde: Option<SdeSection>,
    #[serde(default = "one_u64")]
    pub record_stride: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Reject step sizes outside the region where the bounds hold, instead
    /// of only warning.
    #[serde(default = "yes")]
    pub strict_hypotheses: bool,
    #[serde(default)]
    pub verify: VerifySection,
}

fn default_name() -> String {
    "experiment".into()
}

fn one_usize() -> usize {
    1
}

fn one_u64() -> u64 {
    1
}

fn no_noise() -> NoiseModel {
    NoiseModel::NONE
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

fn yes() -> bool {
    true
}

fn field(name: &str, err: impl std::fmt::Display) -> Error {
    Error::Config(format!("{name}: {err}"))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks every parameter and resolves defaults; nothing runs until
    /// this succeeds.
    pub fn resolve(&self) -> Result<Plan> {
        if self.methods.is_empty() {
            return Err(field("methods", "at least one method is required"));
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return Err(field("methods", "methods must be distinct"));
        }
        if self.replicas == 0 {
            return Err(field("replicas", "must be >= 1"));
        }
        if self.record_stride == 0 {
            return Err(field("record_stride", "must be >= 1"));
        }
        if self.verify.checkpoints == 0 {
            return Err(field("verify.checkpoints", "must be >= 1"));
        }
        if !(self.verify.stderr_multiplier.is_finite() && self.verify.stderr_multiplier >= 0.0) {
            return Err(field("verify.stderr_multiplier", "must be finite and >= 0"));
        }
        let problem = self.problem.build().map_err(|e| field("problem", e))?;
        let n = problem.operator.dim();
        let lipschitz = problem.operator.lipschitz();
        let x0 = match &self.x0 {
            Some(v) if v.len() != n => {
                return Err(field(
                    "x0",
                    format!("expected {n} entries, got {}", v.len()),
                ))
            }
            Some(v) => Vector::from_column_slice(v),
            None => Vector::zeros(n),
        };
        self.noise.validate().map_err(|e| field("noise", e))?;

        let mut cells = Vec::new();
        let mut warnings = Vec::new();
        for &method in &self.methods {
            let cell = match method.solver() {
                Some(solver) => {
                    let (key, gamma) = match solver {
                        Method::Ogda => ("solver.ogda_gamma", self.solver.ogda_gamma),
                        Method::Eg => ("solver.eg_gamma", self.solver.eg_gamma),
                        Method::Forward => ("solver.forward_gamma", self.solver.forward_gamma),
                    };
                    let gamma = gamma.unwrap_or_else(|| solver.default_gamma(lipschitz));
                    let mut cfg =
                        SolverConfig::new(solver, gamma, self.solver.iterations, x0.clone());
                    cfg.record_stride = self.record_stride;
                    if solver == Method::Ogda {
                        if let Some(x1) = &self.solver.x1 {
                            cfg.x1 = Some(Vector::from_column_slice(x1));
                        }
                    }
                    let notes = cfg.validate(n, lipschitz).map_err(|e| match e {
                        Error::Dimension { expected, actual } => field(
                            if actual == x0.len() {
                                "x0"
                            } else {
                                "solver.x1"
                            },
                            format!("expected {expected} entries, got {actual}"),
                        ),
                        Error::Parameter {
                            name: "iterations",
                            reason,
                        } => field("solver.iterations", reason),
                        other => field(key, other),
                    })?;
                    if self.strict_hypotheses {
                        if let Some(note) = notes.first() {
                            return Err(field(key, note));
                        }
                    }
                    warnings.extend(notes.into_iter().map(|w| format!("{}: {w}", method.name())));
                    CellPlan::Solver(cfg)
                }
                None => {
                    let s = self.sde.as_ref().ok_or_else(|| {
                        field("sde", "section is required when methods include sde")
                    })?;
                    let schedule = ParamSchedule {
                        mu: s.mu,
                        gamma: s.gamma,
                    };
                    schedule
                        .validate()
                        .map_err(|e| field("sde.mu/sde.gamma", e))?;
                    let d = &s.diffusion;
                    let mut diffusion = DiffusionSpec::isotropic(n, d.sigma_star, d.envelope);
                    if d.coupling != 0.0 {
                        diffusion =
                            diffusion.with_coupling(d.coupling, Matrix::identity(n, n), d.cap);
                    }
                    if !(d.sigma_star.is_finite() && d.sigma_star >= 0.0) {
                        return Err(field("sde.diffusion.sigma_star", "must be finite and >= 0"));
                    }
                    diffusion
                        .validate(n)
                        .map_err(|e| field("sde.diffusion", e))?;
                    let mut opts = SdeOptions::new(s.horizon, s.step);
                    opts.record_stride = self.record_stride;
                    opts.validate(lipschitz).map_err(|e| match e {
                        Error::Parameter {
                            name: "horizon",
                            reason,
                        } => field("sde.horizon", reason),
                        other => field("sde.step", other),
                    })?;
                    if !(s.lambda > 0.0 && s.lambda < 1.0) {
                        return Err(field(
                            "sde.lambda",
                            format!("must lie in (0,1), got {}", s.lambda),
                        ));
                    }
                    let mu_l = schedule.mu.upper() * lipschitz;
                    if mu_l >= 1.0 {
                        warnings.push(format!(
                            "sde: L*mu_up = {mu_l} >= 1, almost-sure convergence is not guaranteed"
                        ));
                    }
                    CellPlan::Sde {
                        schedule,
                        diffusion,
                        opts,
                        lambda: s.lambda,
                    }
                }
            };
            cells.push((method, cell));
        }
        Ok(Plan {
            config: self.clone(),
            problem,
            x0,
            cells,
            warnings,
        })
    }
}

/// What one method runs for every replica.
#[derive(Debug, Clone)]
pub enum CellPlan {
    Solver(SolverConfig),
    Sde {
        schedule: ParamSchedule,
        diffusion: DiffusionSpec,
        opts: SdeOptions,
        lambda: f64,
    },
}

/// A validated config with every default resolved.
#[derive(Debug, Clone)]
pub struct Plan {
    pub config: ExperimentConfig,
    pub problem: Problem,
    pub x0: Vector,
    pub cells: Vec<(ExperimentMethod, CellPlan)>,
    pub warnings: Vec<String>,
}

impl Plan {
    pub fn cell(&self, method: ExperimentMethod) -> Option<&CellPlan> {
        self.cells
            .iter()
            .find(|(m, _)| *m == method)
            .map(|(_, c)| c)
    }

    fn seed(&self, replica: u64) -> SeedSpec {
        SeedSpec::new(self.config.master_seed, replica, Stream::Xi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellFailure {
    pub method: ExperimentMethod,
    pub replica: u64,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub method: ExperimentMethod,
    pub summary: Option<EnsembleSummary>,
    /// Trace of replica 0, if it succeeded.
    pub first_trace: Option<RunRecord>,
    /// OGDA second start point of each successful replica.
    pub starts: Vec<(u64, Vector)>,
    pub failures: Vec<CellFailure>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub methods: Vec<MethodOutcome>,
    pub wall_seconds: f64,
}

impl ExperimentOutcome {
    pub fn failures(&self) -> impl Iterator<Item = &CellFailure> {
        self.methods.iter().flat_map(|m| m.failures.iter())
    }

    pub fn has_failures(&self) -> bool {
        self.failures().next().is_some()
    }

    pub fn method(&self, method: ExperimentMethod) -> Option<&MethodOutcome> {
        self.methods.iter().find(|m| m.method == method)
    }
}

struct CellResult {
    record: RunRecord,
    x1: Option<Vector>,
    warnings: Vec<String>,
}

fn run_cell(plan: &Plan, cell: &CellPlan, replica: u64) -> Result<CellResult> {
    let op = &plan.problem.operator;
    let seed = plan.seed(replica);
    match cell {
        CellPlan::Solver(cfg) => {
            let trace = solvers::run(op, &plan.config.noise, cfg, &plan.problem.x_star, seed)?;
            Ok(CellResult {
                record: trace.metrics,
                x1: trace.x1,
                warnings: trace.warnings,
            })
        }
        CellPlan::Sde {
            schedule,
            diffusion,
            opts,
            ..
        } => {
            let traj = sde::simulate(
                op,
                schedule,
                diffusion,
                &plan.x0,
                &plan.problem.x_star,
                opts,
                seed,
            )?;
            Ok(CellResult {
                record: traj.metrics,
                x1: None,
                warnings: traj.warnings,
            })
        }
    }
}

/// Runs every (method × replica) cell on a pool of `threads` workers
/// (all cores when `None`).
///
/// Replicas are folded into the ensemble in index order, so the output does
/// not depend on the number of workers.
pub fn run_experiment(plan: &Plan, threads: Option<usize>) -> Result<ExperimentOutcome> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        if t == 0 {
            return Err(field("threads", "must be >= 1"));
        }
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| field("threads", e))?;
    let started = Instant::now();
    let replicas = plan.config.replicas as u64;
    let chunk = (4 * pool.current_num_threads()).max(1) as u64;

    let mut methods = Vec::new();
    for (method, cell) in &plan.cells {
        let mut acc: Option<EnsembleAccumulator> = None;
        let mut outcome = MethodOutcome {
            method: *method,
            summary: None,
            first_trace: None,
            starts: Vec::new(),
            failures: Vec::new(),
            warnings: Vec::new(),
        };
        let mut start = 0;
        while start < replicas {
            let end = (start + chunk).min(replicas);
            let results: Vec<Result<CellResult>> = pool.install(|| {
                (start..end)
                    .into_par_iter()
                    .map(|r| run_cell(plan, cell, r))
                    .collect()
            });
            for (r, result) in (start..end).zip(results) {
                match result {
                    Ok(res) => {
                        let acc = acc.get_or_insert_with(|| EnsembleAccumulator::new(&res.record));
                        if let Err(e) = acc.add(&res.record) {
                            outcome.failures.push(CellFailure {
                                method: *method,
                                replica: r,
                                error: e.to_string(),
                            });
                            continue;
                        }
                        if r == 0 {
                            outcome.first_trace = Some(res.record);
                        }
                        if let Some(x1) = res.x1 {
                            outcome.starts.push((r, x1));
                        }
                        for w in res.warnings {
                            if !outcome.warnings.contains(&w) {
                                outcome.warnings.push(w);
                            }
                        }
                    }
                    Err(e) => outcome.failures.push(CellFailure {
                        method: *method,
                        replica: r,
                        error: e.to_string(),
                    }),
                }
            }
            start = end;
        }
        outcome.summary = acc.map(|a| a.finish()).transpose()?;
        methods.push(outcome);
    }
    Ok(ExperimentOutcome {
        methods,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

fn vec_json(v: &Vector) -> Value {
    json!(v.as_slice())
}

fn mean_start_distances(plan: &Plan, starts: &[(u64, Vector)]) -> Option<(f64, f64)> {
    if starts.is_empty() {
        return None;
    }
    let r = starts.len() as f64;
    let d1 = starts
        .iter()
        .map(|(_, x1)| (x1 - &plan.problem.x_star).norm_squared())
        .sum::<f64>()
        / r;
    let step = starts
        .iter()
        .map(|(_, x1)| (x1 - &plan.x0).norm_squared())
        .sum::<f64>()
        / r;
    Some((d1, step))
}

/// Config echo plus every resolved constant the bounds need.
pub fn manifest(plan: &Plan, outcome: &ExperimentOutcome) -> Result<Value> {
    let p = &plan.problem;
    let op = &p.operator;
    let mut methods = Vec::new();
    for (method, cell) in &plan.cells {
        let result = outcome.method(*method);
        let ok = result
            .and_then(|m| m.summary.as_ref())
            .map_or(0, |s| s.replicas);
        let warnings = result.map_or_else(Vec::new, |m| m.warnings.clone());
        let mut entry = json!({
            "method": method.name(),
            "streams": method.streams(),
            "replicas_ok": ok,
            "warnings": warnings,
        });
        match cell {
            CellPlan::Solver(cfg) => {
                entry["gamma"] = json!(cfg.gamma);
                entry["gamma_times_lipschitz"] = json!(cfg.gamma * op.lipschitz());
                entry["iterations"] = json!(cfg.iterations);
                if cfg.method == Method::Ogda {
                    let starts = result.map_or(&[][..], |m| &m.starts[..]);
                    entry["x1"] = Value::Array(
                        starts
                            .iter()
                            .map(|(r, x1)| json!({ "replica": r, "x1": vec_json(x1) }))
                            .collect(),
                    );
                    if let Some((d1, step)) = mean_start_distances(plan, starts) {
                        entry["mean_dist1_sq"] = json!(d1);
                        entry["mean_step_sq"] = json!(step);
                    }
                }
            }
            CellPlan::Sde {
                schedule,
                diffusion,
                opts,
                lambda,
            } => {
                let mu_up = schedule.mu.upper();
                entry["horizon"] = json!(opts.horizon);
                entry["step"] = json!(opts.step);
                entry["steps"] = json!(opts.steps());
                entry["mu_up"] = json!(mu_up);
                entry["mu_low"] = json!(schedule.mu.lower());
                entry["gamma_up"] = json!(schedule.gamma.upper());
                entry["gamma_low"] = json!(schedule.gamma.lower());
                entry["sigma_star"] = json!(diffusion.sigma_star());
                entry["sigma_inf_sq_integral"] = json!(diffusion.sigma_inf_sq_integral());
                entry["lambda"] = json!(lambda);
                entry["g0"] = json!(sde::strong_initial_energy(op, &plan.x0, &p.x_star, mu_up)?);
                entry["discretization_allowance"] = json!(sde_allowance(opts.step, op.lipschitz()));
            }
        }
        methods.push(entry);
    }
    let failures: Vec<&CellFailure> = outcome.failures().collect();
    Ok(json!({
        "config": serde_json::to_value(&plan.config)?,
        "problem": {
            "dim": op.dim(),
            "lipschitz": op.lipschitz(),
            "strong_modulus": op.strong_modulus(),
            "x_star": vec_json(&p.x_star),
            "zero_rank": p.zero_rank,
            "zero_residual": p.zero_residual,
            "dist0_to_zero_set": p.distance_to_zero_set(&plan.x0),
        },
        "x0": vec_json(&plan.x0),
        "noise": {
            "model": serde_json::to_value(plan.config.noise)?,
            "sigma_star_bound": plan.config.noise.variance_bound().sqrt(),
        },
        "seeds": {
            "master_seed": plan.config.master_seed,
            "replica_indices": [0, plan.config.replicas.saturating_sub(1)],
            "addressing": "draw = (master_seed, replica index, stream, counter)",
        },
        "methods": methods,
        "warnings": plan.warnings,
        "failures": failures,
        "wall_seconds": outcome.wall_seconds,
    }))
}

fn create_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Writes `<method>_ensemble.csv`, `<method>_trace.csv` and `manifest.json`
/// into `dir`; returns the written paths.
pub fn write_outputs(plan: &Plan, outcome: &ExperimentOutcome, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for m in &outcome.methods {
        if let Some(summary) = &m.summary {
            let path = dir.join(format!("{}_ensemble.csv", m.method.name()));
            let mut w = create_writer(&path)?;
            summary.write_csv(&mut w)?;
            w.flush()?;
            written.push(path);
        }
        if let Some(trace) = &m.first_trace {
            let path = dir.join(format!("{}_trace.csv", m.method.name()));
            let mut w = create_writer(&path)?;
            trace.write_csv(&mut w)?;
            w.flush()?;
            written.push(path);
        }
    }
    let path = dir.join("manifest.json");
    let mut w = create_writer(&path)?;
    serde_json::to_writer_pretty(&mut w, &manifest(plan, outcome)?)?;
    w.write_all(b"\n")?;
    w.flush()?;
    written.push(path);
    Ok(written)
}

/// One bound-domination check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub check: String,
    /// `K` for the iterative methods, `t` for the SDE.
    pub at: f64,
    pub empirical: f64,
    pub stderr: f64,
    pub allowance: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub rows: Vec<CheckRow>,
    pub notes: Vec<String>,
}

impl VerifyReport {
    /// True when there is at least one row and every row passes.
    pub fn passed(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.pass)
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<12} {:>12} {:>24} {:>12} {:>12} {:>24} {:>6}\n",
            "check", "K_or_t", "empirical", "stderr", "allowance", "bound", "result"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<12} {:>12} {:>24.16e} {:>12.4e} {:>12.4e} {:>24.16e} {:>6}\n",
                r.check,
                r.at,
                r.empirical,
                r.stderr,
                r.allowance,
                r.bound,
                if r.pass { "pass" } else { "FAIL" }
            ));
        }
        for n in &self.notes {
            out.push_str(&format!("note: {n}\n"));
        }
        out
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record([
            "check",
            "at",
            "empirical",
            "stderr",
            "allowance",
            "bound",
            "pass",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.check.clone(),
                crate::metrics::format_float(r.at),
                crate::metrics::format_float(r.empirical),
                crate::metrics::format_float(r.stderr),
                crate::metrics::format_float(r.allowance),
                crate::metrics::format_float(r.bound),
                r.pass.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Allowance for Euler–Maruyama bias in the SDE checks: `10 h (1 + L)`.
pub fn sde_allowance(step: f64, lipschitz: f64) -> f64 {
    10.0 * step * (1.0 + lipschitz)
}

/// Up to `count` row positions whose index is `>= lowest`, spread
/// geometrically (`log`) or uniformly over the recorded range.
pub fn checkpoint_rows(index: &[f64], count: usize, lowest: f64, log: bool) -> Vec<usize> {
    let first = match index.iter().position(|&v| v >= lowest) {
        Some(p) => p,
        None => return Vec::new(),
    };
    let last = index.len() - 1;
    let (lo, hi) = (index[first], index[last]);
    let mut rows = Vec::new();
    for j in 0..count {
        let frac = if count == 1 {
            1.0
        } else {
            j as f64 / (count - 1) as f64
        };
        let target = if log && lo > 0.0 {
            lo * (hi / lo).powf(frac)
        } else if log {
            (1.0 + hi).powf(frac) - 1.0
        } else {
            (index[0] + (hi - index[0]) * (j + 1) as f64 / count as f64).max(lo)
        };
        let pos = first + index[first..].partition_point(|&v| v < target);
        let pos = pos.min(last);
        let pos = if pos > first && (target - index[pos - 1]) < (index[pos] - target) {
            pos - 1
        } else {
            pos
        };
        if rows.last() != Some(&pos) {
            rows.push(pos);
        }
    }
    rows.sort_unstable();
    rows.dedup();
    rows
}

/// Compares ensemble means with the closed-form bounds at checkpoints.
///
/// Discrete rows pass when `mean ≤ bound + m·stderr + 1e-9(1 + bound)`; SDE
/// rows use the allowance [`sde_allowance`] in place of the `1e-9` term.
pub fn verify(plan: &Plan, outcome: &ExperimentOutcome) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    let op = &plan.problem.operator;
    let lipschitz = op.lipschitz();
    let mult = plan.config.verify.stderr_multiplier;
    let count = plan.config.verify.checkpoints;
    let dist0 = plan.problem.distance_to_zero_set(&plan.x0);
    let sigma = plan.config.noise.variance_bound().sqrt();

    for m in &outcome.methods {
        let Some(summary) = &m.summary else {
            report
                .notes
                .push(format!("{}: no successful replicas", m.method.name()));
            continue;
        };
        let cell = plan
            .cell(m.method)
            .expect("outcome methods come from the plan");
        let push = |report: &mut VerifyReport,
                    check: String,
                    at: f64,
                    emp: f64,
                    se: f64,
                    allow: f64,
                    bound: f64| {
            let pass = emp <= bound + mult * se + allow;
            report.rows.push(CheckRow {
                check,
                at,
                empirical: emp,
                stderr: se,
                allowance: allow,
                bound,
                pass,
            });
        };
        match cell {
            CellPlan::Solver(cfg) => {
                let params = BoundParams {
                    gamma: cfg.gamma,
                    lipschitz,
                    sigma_star: sigma,
                };
                let starts = match cfg.method {
                    Method::Forward => {
                        report
                            .notes
                            .push("forward: no ergodic bound, no rows".into());
                        continue;
                    }
                    Method::Ogda => match mean_start_distances(plan, &m.starts) {
                        Some(d) => Some(d),
                        None => continue,
                    },
                    Method::Eg => None,
                };
                let (sq_start, gap_start) = match cfg.method {
                    Method::Ogda => (1.0, 2.0),
                    _ => (0.0, 0.0),
                };
                for (kind, metric, start) in [
                    (BoundKind::SqNorm, Metric::ErgodicNormMSq, sq_start),
                    (BoundKind::Gap, Metric::ErgodicGap, gap_start),
                ] {
                    let label = format!(
                        "{}-{}",
                        m.method.name(),
                        if kind == BoundKind::SqNorm {
                            "sqnorm"
                        } else {
                            "gap"
                        }
                    );
                    let series = summary.series(metric);
                    for pos in checkpoint_rows(&summary.index, count, start + 1.0, true) {
                        let k = (summary.index[pos] - start) as u64;
                        let bound = match starts {
                            Some((d1, step)) => {
                                solvers::ogda_bound_from_distances(k, &params, d1, step, kind)
                            }
                            None => {
                                solvers::eg_bound_from_distance(k, &params, dist0 * dist0, kind)
                            }
                        };
                        let bound = match bound {
                            Ok(b) => b,
                            Err(e) => {
                                report.notes.push(format!("{label}: {e}"));
                                break;
                            }
                        };
                        let allow = 1e-9 * (1.0 + bound.abs());
                        push(
                            &mut report,
                            label.clone(),
                            k as f64,
                            series.mean[pos],
                            series.stderr[pos],
                            allow,
                            bound,
                        );
                    }
                }
            }
            CellPlan::Sde {
                schedule,
                diffusion,
                opts,
                lambda,
            } => {
                let mu_up = schedule.mu.upper();
                let kappa = op.strong_modulus();
                let allow = sde_allowance(opts.step, lipschitz);
                let sig = diffusion.sigma_star();
                let rows = checkpoint_rows(&summary.index, count, f64::MIN_POSITIVE, false);
                if kappa >= 1.0 / (2.0 * mu_up) {
                    let g0 = sde::strong_initial_energy(op, &plan.x0, &plan.problem.x_star, mu_up)?;
                    let dist = summary.series(Metric::DistSq);
                    for pos in rows {
                        let t = summary.index[pos];
                        let mut p = ContinuousBoundParams {
                            lipschitz,
                            sigma_star: sig,
                            mu_up,
                            mu_t: schedule.mu.value(t),
                            gamma: schedule.gamma.lower(),
                            dist0,
                            t,
                            kappa,
                            g0,
                            lambda: *lambda,
                            sigma_inf_at_lambda_t: None,
                        };
                        let mut bound = sde::continuous_bound(ContinuousBoundKind::Strong, &p)?;
                        if diffusion.sigma_inf_sq_integral().is_some() {
                            p.sigma_inf_at_lambda_t = Some(diffusion.sigma_inf(lambda * t));
                            bound =
                                bound.min(sde::continuous_bound(ContinuousBoundKind::Strong, &p)?);
                        }
                        push(
                            &mut report,
                            "sde-strong".into(),
                            t,
                            0.5 * dist.mean[pos],
                            0.5 * dist.stderr[pos],
                            allow,
                            bound,
                        );
                    }
                } else {
                    report.notes.push(format!(
                        "sde: kappa = {kappa} < 1/(2 mu_up) = {}, strong rows skipped",
                        1.0 / (2.0 * mu_up)
                    ));
                    for (kind, metric, label) in [
                        (ContinuousBoundKind::Gap, Metric::ErgodicGap, "sde-gap"),
                        (
                            ContinuousBoundKind::SqNorm,
                            Metric::ErgodicNormMSq,
                            "sde-sqnorm",
                        ),
                    ] {
                        let series = summary.series(metric);
                        for &pos in &rows {
                            let t = summary.index[pos];
                            let p = ContinuousBoundParams {
                                lipschitz,
                                sigma_star: sig,
                                mu_up,
                                mu_t: schedule.mu.value(t),
                                gamma: schedule.gamma.value(t),
                                dist0,
                                t,
                                kappa,
                                ..ContinuousBoundParams::default()
                            };
                            let bound = sde::continuous_bound(kind, &p)?;
                            push(
                                &mut report,
                                label.into(),
                                t,
                                series.mean[pos],
                                series.stderr[pos],
                                allow,
                                bound,
                            );
                        }
                    }
                }
            }
        }
    }
    Ok(report)
}
