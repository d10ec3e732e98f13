//! Stochastic OGDA, stochastic extragradient and the plain forward method with
//! constant step size, plus the closed-form right-hand sides of their ergodic
//! bounds.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::metrics::{point_metrics, ErgodicRule, IndexKind, RunRecord, RunRecorder, VectorMean};
use crate::operators::{Operator, Vector};
use crate::oracle::{noisy_eval, NoiseModel, SeedSpec, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ogda,
    Eg,
    Forward,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ogda => "ogda",
            Method::Eg => "eg",
            Method::Forward => "forward",
        }
    }

    /// Step size strictly inside the region where the ergodic bound holds.
    pub fn default_gamma(self, lipschitz: f64) -> f64 {
        let l = if lipschitz > 0.0 { lipschitz } else { 1.0 };
        match self {
            Method::Ogda => 1.0 / (8.0 * l),
            Method::Eg => 1.0 / (2.0 * l),
            Method::Forward => 0.1 / l,
        }
    }

    /// Bound-window offsets `(sqnorm_start, gap_start)` on the iterate index.
    fn windows(self) -> (u64, u64) {
        match self {
            Method::Ogda => (1, 2),
            Method::Eg | Method::Forward => (0, 0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub method: Method,
    pub gamma: f64,
    /// `K`: the trace covers every window the bounds at `K` need.
    pub iterations: u64,
    pub x0: Vector,
    /// OGDA second start point; defaults to `x0 − γ M(x0, ξ0)`.
    pub x1: Option<Vector>,
    pub record_stride: u64,
    pub keep_iterates: bool,
    /// Keep every oracle draw (in call order) for replay.
    pub keep_draws: bool,
}

impl SolverConfig {
    pub fn new(method: Method, gamma: f64, iterations: u64, x0: Vector) -> Self {
        Self {
            method,
            gamma,
            iterations,
            x0,
            x1: None,
            record_stride: 1,
            keep_iterates: false,
            keep_draws: false,
        }
    }

    /// Checks preconditions against `L`; returns warnings for step sizes
    /// outside a bound's region that still define a valid iteration.
    pub fn validate(&self, dim: usize, lipschitz: f64) -> Result<Vec<String>> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::param(
                "gamma",
                format!("must be positive, got {}", self.gamma),
            ));
        }
        if self.iterations == 0 {
            return Err(Error::param("iterations", "K must be >= 1"));
        }
        check_dim(dim, self.x0.len())?;
        if let Some(x1) = &self.x1 {
            check_dim(dim, x1.len())?;
        }
        let gl = self.gamma * lipschitz;
        let mut warnings = Vec::new();
        match self.method {
            Method::Ogda => {
                if 2.0 * gl >= 1.0 {
                    return Err(Error::Hypothesis(format!(
                        "OGDA needs gamma < 1/(2L); gamma*L = {gl}"
                    )));
                }
                if 4.0 * gl >= 1.0 {
                    warnings.push(format!(
                        "gamma*L = {gl} >= 1/4: the OGDA ergodic bound needs gamma < 1/(4L)"
                    ));
                }
            }
            Method::Eg => {
                if 3f64.sqrt() * gl >= 1.0 {
                    warnings.push(format!(
                        "gamma*L = {gl} >= 1/sqrt(3): the EG ergodic bound needs gamma < 1/(sqrt(3) L)"
                    ));
                }
            }
            Method::Forward => {}
        }
        Ok(warnings)
    }
}

#[derive(Debug, Clone)]
pub struct IterateTrace {
    pub method: Method,
    pub gamma: f64,
    /// The `x1` actually used by OGDA.
    pub x1: Option<Vector>,
    pub x_iterates: Vec<(u64, Vector)>,
    /// Extrapolated points `y^k` (EG only).
    pub y_iterates: Vec<(u64, Vector)>,
    pub metrics: RunRecord,
    /// Streaming mean of the points whose gaps the gap bound averages.
    pub ergodic_point: Vector,
    /// Oracle outputs `M(·, ξ)` in call order, when requested.
    pub draws: Vec<Vector>,
    pub warnings: Vec<String>,
}

impl IterateTrace {
    fn row(&self, iterate: u64) -> Option<usize> {
        self.metrics.position(iterate as f64)
    }

    /// Ergodic squared operator norm over the window the bound at `K` uses.
    pub fn ergodic_sqnorm_at(&self, k: u64) -> Option<f64> {
        let (start, _) = self.method.windows();
        self.row(k + start)
            .map(|i| self.metrics.ergodic_norm_m_sq[i])
    }

    pub fn ergodic_gap_at(&self, k: u64) -> Option<f64> {
        let (_, start) = self.method.windows();
        self.row(k + start).map(|i| self.metrics.ergodic_gap[i])
    }
}

struct Run<'a, O: Operator + ?Sized> {
    op: &'a O,
    noise: &'a NoiseModel,
    cfg: &'a SolverConfig,
    x_star: &'a Vector,
    seed: SeedSpec,
    recorder: RunRecorder,
    trace_x: Vec<(u64, Vector)>,
    trace_y: Vec<(u64, Vector)>,
    draws: Vec<Vector>,
    ergodic_point: VectorMean,
    last: u64,
}

impl<'a, O: Operator + ?Sized> Run<'a, O> {
    fn new(
        op: &'a O,
        noise: &'a NoiseModel,
        cfg: &'a SolverConfig,
        x_star: &'a Vector,
        seed: SeedSpec,
        last: u64,
    ) -> Self {
        let (sqnorm_start, gap_start) = cfg.method.windows();
        Self {
            op,
            noise,
            cfg,
            x_star,
            seed,
            recorder: RunRecorder::new(
                IndexKind::Iteration,
                ErgodicRule::Inclusive {
                    sqnorm_start,
                    gap_start,
                },
                cfg.record_stride,
            ),
            trace_x: Vec::new(),
            trace_y: Vec::new(),
            draws: Vec::new(),
            ergodic_point: VectorMean::new(op.dim()),
            last,
        }
    }

    /// Oracle call at iteration `k` (counter `k`, 1-based noise index `k+1`).
    fn draw(&mut self, x: &Vector, stream: Stream, k: u64) -> Result<Vector> {
        let m = noisy_eval(self.op, x, self.noise, self.seed.with_stream(stream), k + 1)?;
        if self.cfg.keep_draws {
            self.draws.push(m.clone());
        }
        Ok(m)
    }

    fn stored(&self, k: u64) -> bool {
        k.is_multiple_of(self.cfg.record_stride.max(1)) || k == self.last
    }

    /// Records row `k`: norm and distance at `x`, gap at `gap_point`.
    fn record(&mut self, k: u64, x: &Vector, gap_point: &Vector) -> Result<()> {
        if x.iter().any(|v| !v.is_finite()) || gap_point.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: k as usize });
        }
        let (norm_sq, _, dist_sq) = point_metrics(self.op, x, self.x_star);
        let (_, gap, _) = point_metrics(self.op, gap_point, self.x_star);
        let (_, gap_start) = self.cfg.method.windows();
        if k >= gap_start {
            self.ergodic_point.push(gap_point);
        }
        self.recorder
            .push(k, k as f64, norm_sq, gap, dist_sq, k == self.last);
        if self.cfg.keep_iterates && self.stored(k) {
            self.trace_x.push((k, x.clone()));
            if self.cfg.method == Method::Eg {
                self.trace_y.push((k, gap_point.clone()));
            }
        }
        Ok(())
    }

    fn finish(self, x1: Option<Vector>, warnings: Vec<String>) -> IterateTrace {
        let dim = self.op.dim();
        IterateTrace {
            method: self.cfg.method,
            gamma: self.cfg.gamma,
            x1,
            x_iterates: self.trace_x,
            y_iterates: self.trace_y,
            metrics: self.recorder.finish(),
            ergodic_point: self
                .ergodic_point
                .mean()
                .unwrap_or_else(|| Vector::zeros(dim)),
            draws: self.draws,
            warnings,
        }
    }
}

pub fn run<O: Operator + ?Sized>(
    op: &O,
    noise: &NoiseModel,
    cfg: &SolverConfig,
    x_star: &Vector,
    seed: SeedSpec,
) -> Result<IterateTrace> {
    match cfg.method {
        Method::Ogda => run_ogda(op, noise, cfg, x_star, seed),
        Method::Eg => run_eg(op, noise, cfg, x_star, seed),
        Method::Forward => run_forward(op, noise, cfg, x_star, seed),
    }
}

/// `x^{k+1} = x^k − 2γ M(x^k, ξ_k) + γ M(x^{k−1}, ξ_{k−1})` for `k >= 1`.
///
/// Produces `x^0 … x^{K+2}`; the previous oracle output is reused, so each
/// iteration makes exactly one oracle call.
pub fn run_ogda<O: Operator + ?Sized>(
    op: &O,
    noise: &NoiseModel,
    cfg: &SolverConfig,
    x_star: &Vector,
    seed: SeedSpec,
) -> Result<IterateTrace> {
    let warnings = cfg.validate(op.dim(), op.lipschitz())?;
    check_dim(op.dim(), x_star.len())?;
    noise.validate()?;
    let gamma = cfg.gamma;
    let last = cfg.iterations + 2;
    let mut run = Run::new(op, noise, cfg, x_star, seed, last);

    let x0 = cfg.x0.clone();
    let mut m_prev = run.draw(&x0, Stream::Xi, 0)?;
    let x1 = match &cfg.x1 {
        Some(x1) => x1.clone(),
        None => &x0 - &m_prev * gamma,
    };
    run.record(0, &x0, &x0)?;
    run.record(1, &x1, &x1)?;

    let mut x = x1.clone();
    for k in 1..=cfg.iterations + 1 {
        let m = run.draw(&x, Stream::Xi, k)?;
        let next = ogda_step(&x, &m, &m_prev, gamma);
        run.record(k + 1, &next, &next)?;
        m_prev = m;
        x = next;
    }
    Ok(run.finish(Some(x1), warnings))
}

/// One OGDA update from the current point and the two most recent draws.
pub fn ogda_step(x: &Vector, m: &Vector, m_prev: &Vector, gamma: f64) -> Vector {
    x - m * (2.0 * gamma) + m_prev * gamma
}

/// `y^k = x^k − γ M(x^k, ξ_k)`, `x^{k+1} = x^k − γ M(y^k, η_k)` for
/// `k = 0 … K`, with independent `ξ` and `η` streams.
pub fn run_eg<O: Operator + ?Sized>(
    op: &O,
    noise: &NoiseModel,
    cfg: &SolverConfig,
    x_star: &Vector,
    seed: SeedSpec,
) -> Result<IterateTrace> {
    let warnings = cfg.validate(op.dim(), op.lipschitz())?;
    check_dim(op.dim(), x_star.len())?;
    noise.validate()?;
    let gamma = cfg.gamma;
    let mut run = Run::new(op, noise, cfg, x_star, seed, cfg.iterations);
    let mut x = cfg.x0.clone();
    for k in 0..=cfg.iterations {
        let w = run.draw(&x, Stream::Xi, k)?;
        let y = &x - w * gamma;
        run.record(k, &x, &y)?;
        let v = run.draw(&y, Stream::Eta, k)?;
        x = &x - v * gamma;
    }
    Ok(run.finish(None, warnings))
}

/// `x^{k+1} = x^k − γ M(x^k, ξ_k)`, which need not converge for merely
/// monotone operators.
pub fn run_forward<O: Operator + ?Sized>(
    op: &O,
    noise: &NoiseModel,
    cfg: &SolverConfig,
    x_star: &Vector,
    seed: SeedSpec,
) -> Result<IterateTrace> {
    let warnings = cfg.validate(op.dim(), op.lipschitz())?;
    check_dim(op.dim(), x_star.len())?;
    noise.validate()?;
    let mut run = Run::new(op, noise, cfg, x_star, seed, cfg.iterations);
    let mut x = cfg.x0.clone();
    for k in 0..=cfg.iterations {
        run.record(k, &x, &x)?;
        if k == cfg.iterations {
            break;
        }
        let m = run.draw(&x, Stream::Xi, k)?;
        x = &x - m * cfg.gamma;
    }
    Ok(run.finish(None, warnings))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundKind {
    /// Ergodic squared operator norm.
    SqNorm,
    /// Ergodic gap `⟨M(x), x − x*⟩`.
    Gap,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundParams {
    pub gamma: f64,
    pub lipschitz: f64,
    pub sigma_star: f64,
}

impl BoundParams {
    fn check(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::param("gamma", "must be positive"));
        }
        if !(self.lipschitz.is_finite() && self.lipschitz >= 0.0) {
            return Err(Error::param("lipschitz", "must be >= 0"));
        }
        if !(self.sigma_star.is_finite() && self.sigma_star >= 0.0) {
            return Err(Error::param("sigma_star", "must be >= 0"));
        }
        Ok(())
    }
}

/// Stochastic OGDA bound from `‖x¹ − x*‖²` and `‖x¹ − x⁰‖²`.
pub fn ogda_bound_from_distances(
    k: u64,
    p: &BoundParams,
    dist1_sq: f64,
    step_sq: f64,
    which: BoundKind,
) -> Result<f64> {
    p.check()?;
    let g = p.gamma;
    let gl2 = g * g * p.lipschitz * p.lipschitz;
    if 16.0 * gl2 >= 1.0 {
        return Err(Error::Hypothesis(format!(
            "OGDA bound needs gamma < 1/(4L); gamma*L = {}",
            gl2.sqrt()
        )));
    }
    let s2 = p.sigma_star * p.sigma_star;
    let inv_k = 1.0 / (k as f64 + 1.0);
    let a = 1.0 - 4.0 * gl2;
    Ok(match which {
        BoundKind::SqNorm => {
            let lead = 2.0 * a / (g * g * (1.0 - 16.0 * gl2));
            let bracket = 4.0 * dist1_sq + 4.0 * gl2 * (1.0 - gl2) / a * step_sq + 8.0 * g * g * s2;
            inv_k * lead * bracket + (16.0 * gl2 + 11.0) / (1.0 - 16.0 * gl2) * s2
        }
        BoundKind::Gap => {
            let l2 = p.lipschitz * p.lipschitz;
            let bracket =
                2.0 * dist1_sq / g + 2.0 * g * l2 * (1.0 - gl2) / a * step_sq + 4.0 * g * s2;
            inv_k * bracket + g * (16.0 * gl2 + 11.0) / (4.0 * a) * s2
        }
    })
}

pub fn ogda_bound(
    k: u64,
    p: &BoundParams,
    x0: &Vector,
    x1: &Vector,
    x_star: &Vector,
    which: BoundKind,
) -> Result<f64> {
    check_dim(x_star.len(), x0.len())?;
    check_dim(x_star.len(), x1.len())?;
    ogda_bound_from_distances(
        k,
        p,
        (x1 - x_star).norm_squared(),
        (x1 - x0).norm_squared(),
        which,
    )
}

/// Stochastic EG bound from `‖x⁰ − x*‖²`.
pub fn eg_bound_from_distance(
    k: u64,
    p: &BoundParams,
    dist0_sq: f64,
    which: BoundKind,
) -> Result<f64> {
    p.check()?;
    let g = p.gamma;
    let gl2 = g * g * p.lipschitz * p.lipschitz;
    if 3.0 * gl2 >= 1.0 {
        return Err(Error::Hypothesis(format!(
            "EG bound needs gamma < 1/(sqrt(3) L); gamma*L = {}",
            gl2.sqrt()
        )));
    }
    let s2 = p.sigma_star * p.sigma_star;
    let inv_k = 1.0 / (k as f64 + 1.0);
    Ok(match which {
        BoundKind::SqNorm => {
            inv_k * dist0_sq / (2.0 * (1.0 - 3.0 * gl2))
                + g * g * (2.0 + 3.0 * gl2) / (1.0 - 3.0 * gl2) * s2
        }
        BoundKind::Gap => inv_k * dist0_sq / (2.0 * g) + g * (2.0 + 3.0 * gl2) * s2,
    })
}

pub fn eg_bound(
    k: u64,
    p: &BoundParams,
    x0: &Vector,
    x_star: &Vector,
    which: BoundKind,
) -> Result<f64> {
    check_dim(x_star.len(), x0.len())?;
    eg_bound_from_distance(k, p, (x0 - x_star).norm_squared(), which)
}
