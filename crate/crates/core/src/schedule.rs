//! Diffusion noise schedule, forward noising and timestep policies.
//!
//! Timesteps are 1-indexed: `alpha_bar(t)` is the product of `alpha_1..alpha_t`
//! and a range `(lo, hi]` covers the integers `lo+1..=hi`.

use ndarray::{Array2, Array3, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seeded generator threaded through every sampling operation.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}

/// Mixes a base seed with a stream index (splitmix64 finaliser) so
/// independent consumers get uncorrelated generators.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// beta/alpha/alpha-bar tables for a discrete-time diffusion process.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end`, both inclusive.
    pub fn linear(total: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if total == 0 {
            return Err(Error::InvalidBounds("total timesteps must be >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidBounds(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas = (0..total)
            .map(|i| {
                if total == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (total - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Builds the derived tables from an explicit beta sequence, e.g. one
    /// supplied by an adapter backbone.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidBounds("empty beta sequence".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidBounds(format!("beta {b} outside (0,1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn total_timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.total_timesteps() {
            return Err(Error::TimestepOutOfRange {
                t,
                total: self.total_timesteps(),
            });
        }
        Ok(())
    }

    /// alpha-bar at 1-indexed timestep `t`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_timestep(t)?;
        Ok(self.alpha_bars[t - 1])
    }
}

/// A `channels x height x width` latent.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    values: Array3<f64>,
}

impl Latent {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("latent contains non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            values: Array3::zeros((channels, height, width)),
        }
    }

    /// Standard normal draw of the given shape.
    pub fn standard_normal(shape: (usize, usize, usize), rng: &mut SeededRng) -> Self {
        let values = Array3::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal));
        Self { values }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: &self.values * factor,
        }
    }

    /// Row-major spatial flattening: row `y*W + x`, one column per channel.
    pub fn to_tokens(&self) -> Array2<f64> {
        let (c, h, w) = self.shape();
        let mut out = Array2::zeros((h * w, c));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[[y * w + x, ch]] = self.values[[ch, y, x]];
                }
            }
        }
        out
    }

    pub fn from_tokens(tokens: &Array2<f64>, height: usize, width: usize) -> Result<Self> {
        let (n, c) = tokens.dim();
        if n != height * width {
            return Err(Error::shape(format!("{} tokens", height * width), n));
        }
        let values = Array3::from_shape_fn((c, height, width), |(ch, y, x)| {
            tokens[[y * width + x, ch]]
        });
        Ok(Self { values })
    }

    /// `a*self + b*other`, elementwise.
    pub fn axpby(&self, a: f64, other: &Latent, b: f64) -> Result<Latent> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        let mut values = Array3::zeros(self.shape());
        Zip::from(&mut values)
            .and(&self.values)
            .and(&other.values)
            .for_each(|o, &x, &y| *o = a * x + b * y);
        Ok(Latent { values })
    }
}

/// `sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps`.
pub fn forward_noise(z0: &Latent, t: usize, eps: &Latent, schedule: &NoiseSchedule) -> Result<Latent> {
    let abar = schedule.alpha_bar(t)?;
    z0.axpby(abar.sqrt(), eps, (1.0 - abar).sqrt())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimestepMode {
    UniformRange,
    FixedList(Vec<usize>),
}

/// How inference timesteps are placed inside the range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Spacing {
    Even,
    Random,
}

/// Timestep sampling policy over the half-open range `(lo, hi]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepPolicy {
    pub mode: TimestepMode,
    pub lo: usize,
    pub hi: usize,
    /// Number of timesteps averaged at inference.
    pub count: usize,
    pub spacing: Spacing,
}

impl TimestepPolicy {
    pub fn uniform(lo: usize, hi: usize, count: usize) -> Result<Self> {
        let p = Self {
            mode: TimestepMode::UniformRange,
            lo,
            hi,
            count,
            spacing: Spacing::Even,
        };
        p.validate(usize::MAX)?;
        Ok(p)
    }

    pub fn fixed(list: Vec<usize>) -> Result<Self> {
        let lo = list.iter().copied().min().unwrap_or(1).saturating_sub(1);
        let hi = list.iter().copied().max().unwrap_or(0);
        let p = Self {
            count: list.len(),
            mode: TimestepMode::FixedList(list),
            lo,
            hi,
            spacing: Spacing::Even,
        };
        p.validate(usize::MAX)?;
        Ok(p)
    }

    pub fn with_spacing(mut self, spacing: Spacing) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn validate(&self, total: usize) -> Result<()> {
        if self.lo >= self.hi || self.hi > total {
            return Err(Error::Config(format!(
                "timestep range ({}, {}] invalid for T={total}",
                self.lo, self.hi
            )));
        }
        if self.count == 0 {
            return Err(Error::Config("timestep count must be >= 1".into()));
        }
        if let TimestepMode::FixedList(list) = &self.mode {
            if list.is_empty() || list.iter().any(|&t| t == 0 || t > total) {
                return Err(Error::Config(format!("bad fixed timestep list {list:?}")));
            }
        }
        Ok(())
    }

    /// Copy of this policy whose lower bound is raised so every draw can
    /// start a chain of `steps` steps spaced `delta` apart.
    pub fn for_chain(&self, steps: usize, delta: usize) -> Result<Self> {
        let need = (steps.max(1) - 1) * delta;
        let mut p = self.clone();
        p.lo = p.lo.max(need);
        if p.lo >= p.hi {
            return Err(Error::TimestepUnderflow {
                t_start: self.hi,
                steps,
                delta,
            });
        }
        if let TimestepMode::FixedList(list) = &p.mode {
            if let Some(&t) = list.iter().find(|&&t| t <= need) {
                return Err(Error::TimestepUnderflow {
                    t_start: t,
                    steps,
                    delta,
                });
            }
        }
        Ok(p)
    }
}

/// One training timestep drawn uniformly from the policy.
pub fn sample_timestep(policy: &TimestepPolicy, rng: &mut SeededRng) -> usize {
    match &policy.mode {
        TimestepMode::UniformRange => rng.gen_range(policy.lo + 1..=policy.hi),
        TimestepMode::FixedList(list) => list[rng.gen_range(0..list.len())],
    }
}

/// The `count` timesteps averaged at inference.
///
/// `Spacing::Even` takes the midpoints of `count` equal sub-intervals of the
/// range and consumes no randomness; `Spacing::Random` draws independently.
/// A fixed list is returned as is.
pub fn inference_timesteps(policy: &TimestepPolicy, rng: &mut SeededRng) -> Vec<usize> {
    match (&policy.mode, policy.spacing) {
        (TimestepMode::FixedList(list), _) => list.clone(),
        (TimestepMode::UniformRange, Spacing::Random) => {
            (0..policy.count).map(|_| sample_timestep(policy, rng)).collect()
        }
        (TimestepMode::UniformRange, Spacing::Even) => {
            let width = policy.hi - policy.lo;
            let k = policy.count;
            (0..k)
                .map(|i| policy.lo + 1 + ((2 * i + 1) * width) / (2 * k))
                .map(|t| t.min(policy.hi))
                .collect()
        }
    }
}

/// `[t_start, t_start - delta, ...]` with `steps` entries.
pub fn multi_step_timesteps(t_start: usize, steps: usize, delta: usize) -> Result<Vec<usize>> {
    if steps == 0 || delta == 0 {
        return Err(Error::Config("steps and delta must be >= 1".into()));
    }
    let span = (steps - 1) * delta;
    if t_start < span + 1 {
        return Err(Error::TimestepUnderflow {
            t_start,
            steps,
            delta,
        });
    }
    Ok((0..steps).map(|k| t_start - k * delta).collect())
}
