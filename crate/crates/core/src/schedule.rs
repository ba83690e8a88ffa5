//! Variance schedule, closed-form forward noising and the noise-prediction loss.

use normdiff_autograd::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear β schedule and its cumulative products ᾱ_t = Π_{s≤t}(1 − β_s).
///
/// Timesteps are 1-based: `alpha_bar(t)` for `t` in `1..=steps()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!(
                "noise schedule needs at least 2 steps, got {steps}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Config(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε.
    pub fn forward_noise(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_timestep(t)?;
        mix(x0, eps, self.alpha_bar(t))
    }
}

/// √a·x₀ + √(1−a)·ε for an explicit ᾱ value.
pub fn mix(x0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::Data(format!(
            "noise shape {:?} does not match image shape {:?}",
            eps.shape(),
            x0.shape()
        )));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32)
        .collect();
    Ok(Tensor::new(x0.shape().to_vec(), data)?)
}

/// Mean squared error between predicted and true noise, recorded on `tape`.
pub fn diffusion_loss(tape: &mut Tape<'_>, eps_pred: Var, eps: Var) -> Result<Var> {
    Ok(tape.mse(eps_pred, eps)?)
}

/// Strictly decreasing timesteps visited by the deterministic sampler.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    timesteps: Vec<usize>,
}

impl SamplingPlan {
    /// `count` timesteps spread evenly from `steps` down to 1.
    pub fn evenly_spaced(steps: usize, count: usize) -> Result<Self> {
        if count < 2 || count > steps {
            return Err(Error::Config(format!(
                "sampling plan needs between 2 and {steps} steps, got {count}"
            )));
        }
        let timesteps = (0..count)
            .map(|i| {
                let frac = i as f64 / (count - 1) as f64;
                (steps as f64 - frac * (steps - 1) as f64).round() as usize
            })
            .collect();
        Self::from_timesteps(timesteps, steps)
    }

    pub fn from_timesteps(timesteps: Vec<usize>, steps: usize) -> Result<Self> {
        if timesteps.len() < 2 {
            return Err(Error::Config("sampling plan needs at least 2 timesteps".into()));
        }
        if timesteps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Config(format!(
                "sampling plan must be strictly decreasing: {timesteps:?}"
            )));
        }
        if timesteps[0] > steps || *timesteps.last().unwrap() == 0 {
            return Err(Error::Config(format!(
                "sampling plan {timesteps:?} outside 1..={steps}"
            )));
        }
        Ok(Self { timesteps })
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }
}
