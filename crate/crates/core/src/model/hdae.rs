use normdiff_autograd::{ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::layers::{scalar_embedding, timestep_embedding, Builder};
use super::net::{AgeRegressorNet, Encoder, UNet};
use crate::error::{Error, Result};
use crate::sampler::{deterministic_encode, reverse_sample, NoisePredictor};
use crate::schedule::{NoiseSchedule, SamplingPlan};

/// Healthy-cohort age statistics used to standardise the conditioning variable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgeNorm {
    pub mean: f64,
    pub std: f64,
}

impl AgeNorm {
    /// Mean and population standard deviation of `ages`.
    pub fn from_ages(ages: &[f64]) -> Result<Self> {
        if ages.is_empty() {
            return Err(Error::Data("age statistics need at least one subject".into()));
        }
        if ages.iter().any(|a| !a.is_finite()) {
            return Err(Error::Data("non-finite age in training cohort".into()));
        }
        let n = ages.len() as f64;
        let mean = ages.iter().sum::<f64>() / n;
        let var = ages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, age: f64) -> f64 {
        (age - self.mean) / self.std
    }

    pub fn denormalize(&self, value: f64) -> f64 {
        value * self.std + self.mean
    }
}

pub(crate) fn check_images(cfg: &ModelConfig, x: &Tensor) -> Result<usize> {
    let s = cfg.image_size;
    match x.shape() {
        [n, 1, h, w] if *h == s && *w == s => Ok(*n),
        other => Err(Error::Data(format!(
            "expected images of shape [N, 1, {s}, {s}], got {other:?}"
        ))),
    }
}

fn check_ages(ages: &[f64], n: usize) -> Result<()> {
    if ages.len() != n {
        return Err(Error::Data(format!("{} ages for {n} images", ages.len())));
    }
    if let Some(a) = ages.iter().find(|a| !a.is_finite()) {
        return Err(Error::Data(format!("non-finite age {a}")));
    }
    Ok(())
}

/// Hierarchical diffusion autoencoder: an age-conditioned semantic encoder
/// and a latent-conditioned U-Net noise predictor sharing one parameter store.
pub struct Hdae {
    config: ModelConfig,
    schedule: NoiseSchedule,
    age_norm: AgeNorm,
    params: ParamStore,
    encoder: Encoder,
    unet: UNet,
}

impl Hdae {
    pub fn new(config: ModelConfig, schedule: NoiseSchedule, age_norm: AgeNorm, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let encoder = Encoder::new(&mut b, &config);
        let unet = UNet::new(&mut b, &config);
        Ok(Self {
            config,
            schedule,
            age_norm,
            params,
            encoder,
            unet,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn age_norm(&self) -> AgeNorm {
        self.age_norm
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Scalars whose parameter names start with `prefix` (`enc.` or `unet.`).
    pub fn count_params(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(_, name, _)| name.starts_with(prefix))
            .map(|(_, _, t)| t.numel())
            .sum()
    }

    pub fn age_features(&self, ages: &[f64]) -> Tensor {
        let normed: Vec<f64> = ages.iter().map(|&a| self.age_norm.normalize(a)).collect();
        scalar_embedding(&normed, self.config.age_embed_dim)
    }

    /// Records the encoder on `tape`, returning the `[N, d]` latent.
    pub fn encode_on_tape<'a>(&'a self, tape: &mut Tape<'a>, x0: &Tensor, ages: &[f64]) -> Result<Var> {
        let n = check_images(&self.config, x0)?;
        check_ages(ages, n)?;
        let x = tape.constant(x0.clone());
        let a = tape.constant(self.age_features(ages));
        self.encode_vars(tape, x, a)
    }

    /// Encoder on already-recorded image and age-feature nodes, so callers can
    /// differentiate with respect to either.
    pub fn encode_vars<'a>(&'a self, tape: &mut Tape<'a>, x: Var, age_features: Var) -> Result<Var> {
        self.encoder.forward(tape, &self.params, x, age_features)
    }

    /// Records the noise predictor on `tape` with one timestep per sample.
    pub fn predict_on_tape<'a>(&'a self, tape: &mut Tape<'a>, xt: &Tensor, ts: &[usize], z: Var) -> Result<Var> {
        let n = check_images(&self.config, xt)?;
        if ts.len() != n {
            return Err(Error::Data(format!("{} timesteps for {n} images", ts.len())));
        }
        if let Some(t) = ts.iter().find(|&&t| t == 0 || t > self.schedule.steps()) {
            return Err(Error::Data(format!(
                "timestep {t} outside [1, {}]",
                self.schedule.steps()
            )));
        }
        let x = tape.constant(xt.clone());
        let tf = tape.constant(timestep_embedding(ts, self.config.time_embed_dim));
        self.unet.forward(tape, &self.params, x, tf, z)
    }

    /// Semantic latents `[N, d]` of images `[N,1,H,W]` at the given ages.
    pub fn encode_semantic(&self, x0: &Tensor, ages: &[f64]) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let z = self.encode_on_tape(&mut tape, x0, ages)?;
        Ok(tape.value(z).clone())
    }

    /// Noise prediction with a separate timestep for every sample.
    pub fn predict_noise_batch(&self, xt: &Tensor, ts: &[usize], z: &Tensor) -> Result<Tensor> {
        let n = check_images(&self.config, xt)?;
        if z.shape() != [n, self.config.latent_dim] {
            return Err(Error::Data(format!(
                "latent shape {:?} does not match [{n}, {}]",
                z.shape(),
                self.config.latent_dim
            )));
        }
        let mut tape = Tape::inference();
        let zv = tape.constant(z.clone());
        let out = self.predict_on_tape(&mut tape, xt, ts, zv)?;
        Ok(tape.value(out).clone())
    }

    /// Diffusion loss for one batch with caller-supplied timesteps and noise.
    pub fn loss_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        x0: &Tensor,
        ages: &[f64],
        ts: &[usize],
        eps: &Tensor,
    ) -> Result<Var> {
        let xt = self.noised(x0, ts, eps)?;
        let z = self.encode_on_tape(tape, x0, ages)?;
        let pred = self.predict_on_tape(tape, &xt, ts, z)?;
        let target = tape.constant(eps.clone());
        Ok(tape.mse(pred, target)?)
    }

    fn noised(&self, x0: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Tensor> {
        if eps.shape() != x0.shape() {
            return Err(Error::Data(format!(
                "noise shape {:?} does not match images {:?}",
                eps.shape(),
                x0.shape()
            )));
        }
        let n = check_images(&self.config, x0)?;
        if ts.len() != n {
            return Err(Error::Data(format!("{} timesteps for {n} images", ts.len())));
        }
        let per = x0.numel() / n.max(1);
        let mut data = Vec::with_capacity(x0.numel());
        for (i, &t) in ts.iter().enumerate() {
            if t == 0 || t > self.schedule.steps() {
                return Err(Error::Data(format!("timestep {t} outside [1, {}]", self.schedule.steps())));
            }
            let ab = self.schedule.alpha_bar(t);
            let (s0, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
            let r = i * per..(i + 1) * per;
            data.extend(
                x0.data()[r.clone()]
                    .iter()
                    .zip(&eps.data()[r])
                    .map(|(&x, &e)| (s0 * x as f64 + s1 * e as f64) as f32),
            );
        }
        Ok(Tensor::new(x0.shape().to_vec(), data)?)
    }

    /// Encode with the semantic encoder, invert to `x_T`, then decode.
    pub fn reconstruct(&self, x0: &Tensor, ages: &[f64], plan: &SamplingPlan) -> Result<Tensor> {
        let z = self.encode_semantic(x0, ages)?;
        let xt = deterministic_encode(x0, &z, self, &self.schedule, plan)?;
        reverse_sample(&xt, &z, self, &self.schedule, plan)
    }
}

impl NoisePredictor for Hdae {
    fn predict_noise(&self, xt: &Tensor, t: usize, z: &Tensor) -> Result<Tensor> {
        let n = check_images(&self.config, xt)?;
        self.predict_noise_batch(xt, &vec![t; n], z)
    }
}

/// Age-regression baseline sharing the encoder's downward path.
pub struct AgeRegressor {
    config: ModelConfig,
    age_norm: AgeNorm,
    params: ParamStore,
    net: AgeRegressorNet,
}

impl AgeRegressor {
    pub fn new(config: ModelConfig, age_norm: AgeNorm, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let net = AgeRegressorNet::new(&mut b, &config);
        Ok(Self {
            config,
            age_norm,
            params,
            net,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn age_norm(&self) -> AgeNorm {
        self.age_norm
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Standardised age predictions `[N, 1]`.
    pub fn forward_on_tape<'a>(&'a self, tape: &mut Tape<'a>, x: &Tensor) -> Result<Var> {
        check_images(&self.config, x)?;
        let xv = tape.constant(x.clone());
        self.net.forward(tape, &self.params, xv)
    }

    pub fn loss_on_tape<'a>(&'a self, tape: &mut Tape<'a>, x: &Tensor, ages: &[f64]) -> Result<Var> {
        let n = check_images(&self.config, x)?;
        check_ages(ages, n)?;
        let pred = self.forward_on_tape(tape, x)?;
        let target: Vec<f32> = ages.iter().map(|&a| self.age_norm.normalize(a) as f32).collect();
        let target = tape.constant(Tensor::new([n, 1], target)?);
        Ok(tape.mse(pred, target)?)
    }

    /// Predicted ages in years.
    pub fn predict_ages(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let out = self.forward_on_tape(&mut tape, x)?;
        Ok(tape
            .value(out)
            .data()
            .iter()
            .map(|&v| self.age_norm.denormalize(v as f64))
            .collect())
    }
}

/// Predicted minus chronological age, in years.
pub fn brain_pad(predicted: f64, chronological: f64) -> f64 {
    predicted - chronological
}
