//! Unbiased noisy operator evaluations with keyed, reproducible randomness.
//!
//! Every draw is addressed by `(master_seed, run_index, stream, counter)`.
//! The first three are hashed into a ChaCha key and the counter selects the
//! ChaCha stream, so any draw can be regenerated without replaying earlier
//! ones and replicas never share generator state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::{Operator, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stream {
    /// Oracle draws at `x^k`.
    Xi,
    /// Oracle draws at the extrapolated point `y^k`.
    Eta,
    /// Brownian increments of the SDE.
    Brownian,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Xi => 0x5849,
            Stream::Eta => 0x4554_4100,
            Stream::Brownian => 0x4252_4f57,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub run_index: u64,
    pub stream: Stream,
}

impl SeedSpec {
    pub fn new(master_seed: u64, run_index: u64, stream: Stream) -> Self {
        Self {
            master_seed,
            run_index,
            stream,
        }
    }

    pub fn with_stream(self, stream: Stream) -> Self {
        Self { stream, ..self }
    }

    /// Generator for draw number `counter` of this substream.
    pub fn rng(&self, counter: u64) -> ChaCha8Rng {
        let mut state = self.master_seed
            ^ splitmix64(&mut self.run_index.wrapping_add(0x9e37_79b9))
            ^ self.stream.tag().rotate_left(29);
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(counter);
        rng
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn standard_normal_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vector {
    Vector::from_fn(dim, |_, _| StandardNormal.sample(rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    None,
    /// `W = σ*/√n · g` with `g` standard normal, so `E‖W‖² = σ*²`.
    IidGaussian,
    /// `W = a/(k√n) · (1,…,1)` with `a ~ N(0, decay_std²)`.
    DecayingDirection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    #[serde(default)]
    pub sigma_star: f64,
    #[serde(default)]
    pub decay_std: f64,
}

impl NoiseModel {
    pub const NONE: NoiseModel = NoiseModel {
        kind: NoiseKind::None,
        sigma_star: 0.0,
        decay_std: 0.0,
    };

    pub fn iid_gaussian(sigma_star: f64) -> Self {
        Self {
            kind: NoiseKind::IidGaussian,
            sigma_star,
            decay_std: 0.0,
        }
    }

    pub fn decaying_direction(decay_std: f64) -> Self {
        Self {
            kind: NoiseKind::DecayingDirection,
            sigma_star: 0.0,
            decay_std,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_star.is_finite() && self.sigma_star >= 0.0) {
            return Err(Error::param("sigma_star", "must be finite and >= 0"));
        }
        if !(self.decay_std.is_finite() && self.decay_std >= 0.0) {
            return Err(Error::param("decay_std", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// Bound on `E‖W_k‖²` valid for every `k >= 1`.
    pub fn variance_bound(&self) -> f64 {
        match self.kind {
            NoiseKind::None => 0.0,
            NoiseKind::IidGaussian => self.sigma_star * self.sigma_star,
            NoiseKind::DecayingDirection => self.decay_std * self.decay_std,
        }
    }

    /// One error vector `W` at 1-based iteration `k`.
    pub fn sample<R: Rng + ?Sized>(&self, dim: usize, k: u64, rng: &mut R) -> Result<Vector> {
        match self.kind {
            NoiseKind::None => Ok(Vector::zeros(dim)),
            NoiseKind::IidGaussian => {
                let scale = self.sigma_star / (dim as f64).sqrt();
                Ok(standard_normal_vector(dim, rng) * scale)
            }
            NoiseKind::DecayingDirection => {
                if k == 0 {
                    return Err(Error::param(
                        "k",
                        "decaying-direction noise divides by the iteration index; k starts at 1",
                    ));
                }
                let a: f64 = Normal::new(0.0, self.decay_std)
                    .map_err(|e| Error::param("decay_std", e.to_string()))?
                    .sample(rng);
                Ok(Vector::from_element(
                    dim,
                    a / (k as f64 * (dim as f64).sqrt()),
                ))
            }
        }
    }
}

/// `M(x) + W` with `W` drawn from `seed` at counter `k`.
///
/// `k` is the 1-based iteration index used by the decaying model.
pub fn noisy_eval<O: Operator + ?Sized>(
    op: &O,
    x: &Vector,
    noise: &NoiseModel,
    seed: SeedSpec,
    k: u64,
) -> Result<Vector> {
    let mx = op.eval(x)?;
    if noise.kind == NoiseKind::None {
        return Ok(mx);
    }
    let w = noise.sample(op.dim(), k, &mut seed.rng(k))?;
    Ok(mx + w)
}

/// Unbiased sample estimate of `E‖M(x,ξ) − M(x)‖²` at iteration `k`, from
/// `samples` independent draws (counters `0..samples` of `seed`).
pub fn variance_estimate<O: Operator + ?Sized>(
    op: &O,
    x: &Vector,
    noise: &NoiseModel,
    samples: usize,
    seed: SeedSpec,
    k: u64,
) -> Result<f64> {
    if samples < 2 {
        return Err(Error::param("samples", "need at least 2 samples"));
    }
    let mx = op.eval(x)?;
    let mut sum = 0.0;
    for i in 0..samples as u64 {
        let mut rng = seed.rng(i);
        let w = noise.sample(op.dim(), k, &mut rng)?;
        let noisy = &mx + w;
        sum += (noisy - &mx).norm_squared();
    }
    Ok(sum / samples as f64)
}
