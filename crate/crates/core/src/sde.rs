//! Simulation of the corrected SDE
//!
//! ```text
//! d(X + μ(t) M(X)) = −(γ(t) − μ̇(t)) M(X) dt + σ(t, X) dW
//! ```
//!
//! through the auxiliary process `Z = X + μ(t) M(X)`. Since
//! `X = J_{μM}(Z)` and `M(X) = M_μ(Z)`, the `Z`-equation has a globally
//! Lipschitz drift and is stepped with explicit Euler–Maruyama:
//!
//! ```text
//! Z_{i+1} = Z_i + h (μ̇(t_i) − γ(t_i)) M_{μ(t_i)}(Z_i) + √h σ(t_i, X_i) g_i
//! ```
//!
//! with `X_i` recovered by a resolvent solve at every step.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::metrics::{point_metrics, ErgodicRule, IndexKind, RunRecord, RunRecorder};
use crate::operators::{AffineResolvent, Matrix, Operator, OperatorSpec, Vector};
use crate::oracle::{standard_normal_vector, SeedSpec, Stream};

/// A positive, nonincreasing parameter function of time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    Constant {
        value: f64,
    },
    /// `low + (up − low)/(1 + t)`.
    RationalDecay {
        up: f64,
        low: f64,
    },
}

impl Schedule {
    pub fn value(&self, t: f64) -> f64 {
        match *self {
            Schedule::Constant { value } => value,
            Schedule::RationalDecay { up, low } => low + (up - low) / (1.0 + t),
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        match *self {
            Schedule::Constant { .. } => 0.0,
            Schedule::RationalDecay { up, low } => -(up - low) / ((1.0 + t) * (1.0 + t)),
        }
    }

    pub fn upper(&self) -> f64 {
        match *self {
            Schedule::Constant { value } => value,
            Schedule::RationalDecay { up, .. } => up,
        }
    }

    pub fn lower(&self) -> f64 {
        match *self {
            Schedule::Constant { value } => value,
            Schedule::RationalDecay { low, .. } => low,
        }
    }

    fn validate(&self, name: &'static str) -> Result<()> {
        let (up, low) = (self.upper(), self.lower());
        if !(low.is_finite() && up.is_finite() && low > 0.0) {
            return Err(Error::param(
                name,
                format!("bounds must be positive, got [{low}, {up}]"),
            ));
        }
        if low > up {
            return Err(Error::param(
                name,
                format!("lower bound {low} exceeds upper bound {up}"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamSchedule {
    pub mu: Schedule,
    pub gamma: Schedule,
}

impl ParamSchedule {
    pub fn constant(mu: f64, gamma: f64) -> Self {
        Self {
            mu: Schedule::Constant { value: mu },
            gamma: Schedule::Constant { value: gamma },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mu.validate("mu")?;
        self.gamma.validate("gamma")
    }
}

/// Time envelope `s(t) <= 1` multiplying the diffusion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Envelope {
    Constant,
    /// `(1 + t)^{−p}`, square-integrable for `p > 1/2`.
    PowerDecay {
        p: f64,
    },
}

impl Envelope {
    pub fn factor(&self, t: f64) -> f64 {
        match *self {
            Envelope::Constant => 1.0,
            Envelope::PowerDecay { p } => (1.0 + t).powf(-p),
        }
    }
}

/// `σ(t, x) = s(t) · (Σ₀ + c_σ · min(‖x‖, ρ)/‖Σ₁‖_F · Σ₁)`.
///
/// Frobenius norm is at most `‖Σ₀‖_F + c_σ ρ` and `x ↦ σ(t, x)` is
/// `c_σ`-Lipschitz.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSpec {
    pub base: Matrix,
    pub envelope: Envelope,
    pub coupling: f64,
    pub coupling_matrix: Matrix,
    pub cap: f64,
}

impl DiffusionSpec {
    /// `Σ₀ = (σ*/√n) I`, no state coupling.
    pub fn isotropic(n: usize, sigma_star: f64, envelope: Envelope) -> Self {
        Self {
            base: Matrix::identity(n, n) * (sigma_star / (n as f64).sqrt()),
            envelope,
            coupling: 0.0,
            coupling_matrix: Matrix::zeros(n, n),
            cap: 0.0,
        }
    }

    pub fn none(n: usize) -> Self {
        Self::isotropic(n, 0.0, Envelope::Constant)
    }

    pub fn with_coupling(mut self, coupling: f64, coupling_matrix: Matrix, cap: f64) -> Self {
        self.coupling = coupling;
        self.coupling_matrix = coupling_matrix;
        self.cap = cap;
        self
    }

    pub fn state_dim(&self) -> usize {
        self.base.nrows()
    }

    /// Brownian dimension `m`.
    pub fn noise_dim(&self) -> usize {
        self.base.ncols()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        check_dim(n, self.base.nrows())?;
        if let Envelope::PowerDecay { p } = self.envelope {
            if !(p.is_finite() && p > 0.0) {
                return Err(Error::param(
                    "envelope.p",
                    format!("must be positive, got {p}"),
                ));
            }
        }
        if !(self.coupling.is_finite() && self.coupling >= 0.0) {
            return Err(Error::param("coupling", "must be >= 0"));
        }
        if self.coupling > 0.0 {
            if self.coupling_matrix.shape() != self.base.shape() {
                return Err(Error::param(
                    "coupling_matrix",
                    "must have the shape of the base matrix",
                ));
            }
            if self.coupling_matrix.norm() == 0.0 {
                return Err(Error::param("coupling_matrix", "must be nonzero"));
            }
            if !(self.cap.is_finite() && self.cap >= 0.0) {
                return Err(Error::param("cap", "must be finite and >= 0"));
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.sigma_star() == 0.0
    }

    pub fn sigma(&self, t: f64, x: &Vector) -> Matrix {
        let mut s = self.base.clone();
        if self.coupling > 0.0 {
            let w = self.coupling * x.norm().min(self.cap) / self.coupling_matrix.norm();
            s += &self.coupling_matrix * w;
        }
        s * self.envelope.factor(t)
    }

    /// Uniform bound `σ*` on `‖σ(t, x)‖_F`.
    pub fn sigma_star(&self) -> f64 {
        self.base.norm() + self.coupling * self.cap
    }

    /// Bound on `sup_x ‖σ(t, x)‖_F` at time `t`.
    pub fn sigma_inf(&self, t: f64) -> f64 {
        self.envelope.factor(t) * self.sigma_star()
    }

    /// `∫₀^∞ σ_∞(s)² ds` for the envelope bound, `None` when it diverges.
    pub fn sigma_inf_sq_integral(&self) -> Option<f64> {
        let s2 = self.sigma_star().powi(2);
        if s2 == 0.0 {
            return Some(0.0);
        }
        match self.envelope {
            Envelope::Constant => None,
            Envelope::PowerDecay { p } if p > 0.5 => Some(s2 / (2.0 * p - 1.0)),
            Envelope::PowerDecay { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdeOptions {
    pub horizon: f64,
    pub step: f64,
    #[serde(default = "one")]
    pub record_stride: u64,
    #[serde(default)]
    pub keep_states: bool,
}

fn one() -> u64 {
    1
}

impl SdeOptions {
    pub fn new(horizon: f64, step: f64) -> Self {
        Self {
            horizon,
            step,
            record_stride: 1,
            keep_states: false,
        }
    }

    pub fn steps(&self) -> u64 {
        (self.horizon / self.step - 1e-9).ceil().max(1.0) as u64
    }

    /// Largest admissible step: `min(0.1/L, 0.01 T)`.
    pub fn max_step(&self, lipschitz: f64) -> f64 {
        let by_l = if lipschitz > 0.0 {
            0.1 / lipschitz
        } else {
            f64::INFINITY
        };
        by_l.min(0.01 * self.horizon)
    }

    pub fn validate(&self, lipschitz: f64) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::param(
                "horizon",
                format!("must be positive, got {}", self.horizon),
            ));
        }
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(Error::param(
                "step",
                format!("must be positive, got {}", self.step),
            ));
        }
        let max = self.max_step(lipschitz);
        if self.step > max * (1.0 + 1e-12) {
            return Err(Error::param(
                "step",
                format!("h = {} exceeds min(0.1/L, 0.01 T) = {max}", self.step),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SdeTrajectory {
    pub times: Vec<f64>,
    pub x_states: Vec<Vector>,
    pub z_states: Vec<Vector>,
    pub metrics: RunRecord,
    pub warnings: Vec<String>,
}

/// Euler–Maruyama on the `Z`-process; `Z₀ = x₀ + μ(0) M(x₀)`.
///
/// Metrics are measured at `X_i` against `x_star`; the ergodic columns are
/// left-endpoint Riemann averages over the integration grid.
pub fn simulate(
    op: &OperatorSpec,
    sched: &ParamSchedule,
    diff: &DiffusionSpec,
    x0: &Vector,
    x_star: &Vector,
    opts: &SdeOptions,
    seed: SeedSpec,
) -> Result<SdeTrajectory> {
    let n = op.dim();
    check_dim(n, x0.len())?;
    check_dim(n, x_star.len())?;
    sched.validate()?;
    diff.validate(n)?;
    opts.validate(op.lipschitz())?;

    let mut warnings = Vec::new();
    let mu_l = sched.mu.upper() * op.lipschitz();
    if mu_l >= 1.0 {
        warnings.push(format!(
            "L*mu_up = {mu_l} >= 1: almost-sure convergence is not guaranteed"
        ));
    }

    let seed = seed.with_stream(Stream::Brownian);
    let h = opts.step;
    let sqrt_h = h.sqrt();
    let steps = opts.steps();
    let stride = opts.record_stride.max(1);
    let mut recorder = RunRecorder::new(IndexKind::Time, ErgodicRule::LeftEndpoint, stride);
    let mut traj = SdeTrajectory {
        times: Vec::new(),
        x_states: Vec::new(),
        z_states: Vec::new(),
        metrics: RunRecord::new(IndexKind::Time),
        warnings: Vec::new(),
    };

    let mut resolvent = AffineResolvent::new(op, sched.mu.value(0.0))?;
    let mut z = x0 + op.apply(x0) * sched.mu.value(0.0);
    for i in 0..=steps {
        let t = i as f64 * h;
        let mu = sched.mu.value(t);
        if resolvent.mu() != mu {
            resolvent = AffineResolvent::new(op, mu)?;
        }
        let x = resolvent.apply(&z)?;
        if z.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: i as usize });
        }
        let (norm_sq, gap, dist_sq) = point_metrics(op, &x, x_star);
        let last = i == steps;
        recorder.push(i, t, norm_sq, gap, dist_sq, last);
        if opts.keep_states && (i % stride == 0 || last) {
            traj.times.push(t);
            traj.x_states.push(x.clone());
            traj.z_states.push(z.clone());
        }
        if last {
            break;
        }
        let yosida = (&z - &x) / mu;
        let rate = sched.mu.derivative(t) - sched.gamma.value(t);
        z += yosida * (h * rate);
        if !diff.is_zero() {
            let g = standard_normal_vector(diff.noise_dim(), &mut seed.rng(i));
            z += diff.sigma(t, &x) * g * sqrt_h;
        }
    }
    traj.metrics = recorder.finish();
    traj.warnings = warnings;
    Ok(traj)
}

/// `½‖x + μ(t) z_dir − x*‖²`.
pub fn anchor(
    sched: &ParamSchedule,
    t: f64,
    x: &Vector,
    z_dir: &Vector,
    x_star: &Vector,
) -> Result<f64> {
    check_dim(x.len(), z_dir.len())?;
    check_dim(x.len(), x_star.len())?;
    let mu = sched.mu.value(t);
    Ok(0.5 * (x + z_dir * mu - x_star).norm_squared())
}

/// `G(0) = ½‖x₀ − x*‖² + μ_up⟨M(x₀), x₀ − x*⟩ + (μ_up²/2)‖M(x₀)‖²`.
pub fn strong_initial_energy<O: Operator + ?Sized>(
    op: &O,
    x0: &Vector,
    x_star: &Vector,
    mu_up: f64,
) -> Result<f64> {
    let m = op.eval(x0)?;
    check_dim(x0.len(), x_star.len())?;
    let d = x0 - x_star;
    Ok(0.5 * d.norm_squared() + mu_up * m.dot(&d) + 0.5 * mu_up * mu_up * m.norm_squared())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContinuousBoundKind {
    /// Ergodic gap `(1/t)∫⟨X − x*, M(X)⟩`.
    Gap,
    /// Ergodic squared norm `(1/t)∫‖M(X)‖²`.
    SqNorm,
    /// `½‖X(t) − x*‖²` for strongly monotone `M`.
    Strong,
}

/// Inputs for [`continuous_bound`]. `gamma` is `γ(t)` for a nonincreasing
/// `γ`, or `γ_low` for the lower-bounded variants and the strong bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuousBoundParams {
    pub lipschitz: f64,
    pub sigma_star: f64,
    pub mu_up: f64,
    pub mu_t: f64,
    pub gamma: f64,
    pub dist0: f64,
    pub t: f64,
    pub kappa: f64,
    pub g0: f64,
    /// `λ ∈ (0,1)` for the refined strong bound.
    pub lambda: f64,
    /// `σ_∞(λt)`; when set the refined strong bound is used.
    pub sigma_inf_at_lambda_t: Option<f64>,
}

impl Default for ContinuousBoundParams {
    fn default() -> Self {
        Self {
            lipschitz: 0.0,
            sigma_star: 0.0,
            mu_up: 1.0,
            mu_t: 1.0,
            gamma: 1.0,
            dist0: 0.0,
            t: 1.0,
            kappa: 0.0,
            g0: 0.0,
            lambda: 0.5,
            sigma_inf_at_lambda_t: None,
        }
    }
}

pub fn continuous_bound(kind: ContinuousBoundKind, p: &ContinuousBoundParams) -> Result<f64> {
    if !(p.t.is_finite() && p.t > 0.0) {
        return Err(Error::param("t", format!("must be positive, got {}", p.t)));
    }
    for (name, v) in [("mu_up", p.mu_up), ("mu_t", p.mu_t), ("gamma", p.gamma)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::param(name, format!("must be positive, got {v}")));
        }
    }
    let s2 = p.sigma_star * p.sigma_star;
    let mu = p.mu_up;
    let ell = p.lipschitz;
    let constant = mu * mu * ell * ell / 2.0 + mu * ell + 0.5;
    let d2 = p.dist0 * p.dist0;
    Ok(match kind {
        ContinuousBoundKind::Gap => constant * d2 / (p.gamma * p.t) + s2 / (2.0 * p.gamma * p.mu_t),
        ContinuousBoundKind::SqNorm => {
            constant * d2 / (p.gamma * p.mu_t * p.t) + s2 / (2.0 * p.gamma * p.mu_t)
        }
        ContinuousBoundKind::Strong => {
            if p.kappa < 1.0 / (2.0 * mu) {
                return Err(Error::Hypothesis(format!(
                    "strong bound needs kappa >= 1/(2 mu_up) = {}, got kappa = {}",
                    1.0 / (2.0 * mu),
                    p.kappa
                )));
            }
            let rate = p.gamma / (2.0 * mu);
            match p.sigma_inf_at_lambda_t {
                None => p.g0 * (-rate * p.t).exp() + s2 * mu / p.gamma,
                Some(sig) => {
                    if !(p.lambda > 0.0 && p.lambda < 1.0) {
                        return Err(Error::param(
                            "lambda",
                            format!("must lie in (0,1), got {}", p.lambda),
                        ));
                    }
                    p.g0 * (-rate * p.t).exp()
                        + s2 * mu / p.gamma * (-rate * (1.0 - p.lambda) * p.t).exp()
                        + mu / p.gamma * sig * sig
                }
            }
        }
    })
}
