use normdiff_autograd::{Adam, AdamConfig, ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::hdae::{check_images, AgeRegressor, Hdae};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("training: epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "training: learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Copies the listed samples of `[N, ...]` into a new batch tensor.
pub fn select(images: &Tensor, indices: &[usize]) -> Tensor {
    let n = images.shape()[0];
    let per = images.numel() / n.max(1);
    let mut data = Vec::with_capacity(indices.len() * per);
    for &i in indices {
        data.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
    }
    let mut shape = images.shape().to_vec();
    shape[0] = indices.len();
    Tensor::new(shape, data).expect("batch shape")
}

/// A model whose parameters are fit by minibatch Adam.
trait Trainable {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// Loss and parameter gradients for one batch; `rng` supplies any noise.
    fn batch_gradients(&self, x: &Tensor, ages: &[f64], rng: &mut ChaCha8Rng) -> Result<(f64, Vec<Tensor>)>;
}

fn draw_diffusion_noise(model: &Hdae, n: usize, shape: &[usize], rng: &mut ChaCha8Rng) -> (Vec<usize>, Tensor) {
    let steps = model.schedule().steps();
    let ts = (0..n).map(|_| rng.random_range(1..=steps)).collect();
    (ts, Tensor::randn(shape.to_vec(), rng))
}

impl Trainable for Hdae {
    fn store(&self) -> &ParamStore {
        self.params()
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        self.params_mut()
    }

    fn batch_gradients(&self, x: &Tensor, ages: &[f64], rng: &mut ChaCha8Rng) -> Result<(f64, Vec<Tensor>)> {
        let (ts, eps) = draw_diffusion_noise(self, ages.len(), x.shape(), rng);
        let mut tape = Tape::new();
        let loss = self.loss_on_tape(&mut tape, x, ages, &ts, &eps)?;
        let value = tape.value(loss).item() as f64;
        let grads = tape.backward(loss)?.for_params(self.params());
        Ok((value, grads))
    }
}

impl Trainable for AgeRegressor {
    fn store(&self) -> &ParamStore {
        self.params()
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        self.params_mut()
    }

    fn batch_gradients(&self, x: &Tensor, ages: &[f64], _rng: &mut ChaCha8Rng) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let loss = self.loss_on_tape(&mut tape, x, ages)?;
        let value = tape.value(loss).item() as f64;
        let grads = tape.backward(loss)?.for_params(self.params());
        Ok((value, grads))
    }
}

fn fit<M: Trainable>(
    model: &mut M,
    images: &Tensor,
    ages: &[f64],
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = images.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Data("training cohort is empty".into()));
    }
    if ages.len() != n {
        return Err(Error::Data(format!("{} ages for {n} training images", ages.len())));
    }
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.learning_rate as f32,
            ..AdamConfig::default()
        },
        model.store(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = select(images, idx);
            let batch_ages: Vec<f64> = idx.iter().map(|&i| ages[i]).collect();
            let (loss, grads) = model
                .batch_gradients(&x, &batch_ages, &mut rng)
                .map_err(|e| match e {
                    Error::Tensor(inner) => Error::Numeric(format!(
                        "training diverged at epoch {} batch {b}: {inner}",
                        epoch + 1
                    )),
                    other => other,
                })?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged at epoch {} batch {b}: loss {loss}",
                    epoch + 1
                )));
            }
            adam.step(model.store_mut(), &grads)?;
            total += loss * idx.len() as f64;
        }
        let mean = total / n as f64;
        on_epoch(epoch + 1, mean);
        history.push(mean);
    }
    Ok(history)
}

/// Minibatch Adam on the diffusion objective. Returns per-epoch mean losses.
pub fn train_hdae(
    model: &mut Hdae,
    images: &Tensor,
    ages: &[f64],
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    check_images(model.config(), images)?;
    fit(model, images, ages, cfg, seed, on_epoch)
}

/// Minibatch Adam on standardised-age regression. Returns per-epoch mean losses.
pub fn train_age_regressor(
    model: &mut AgeRegressor,
    images: &Tensor,
    ages: &[f64],
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    check_images(model.config(), images)?;
    fit(model, images, ages, cfg, seed, on_epoch)
}

/// Diffusion loss averaged over the cohort with timesteps and noise drawn
/// from `seed`, so different models can be compared on identical draws.
pub fn evaluate_loss(model: &Hdae, images: &Tensor, ages: &[f64], batch_size: usize, seed: u64) -> Result<f64> {
    let n = check_images(model.config(), images)?;
    if n == 0 || ages.len() != n {
        return Err(Error::Data(format!("{} ages for {n} images", ages.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let x = select(images, chunk);
        let a: Vec<f64> = chunk.iter().map(|&i| ages[i]).collect();
        let (ts, eps) = draw_diffusion_noise(model, chunk.len(), x.shape(), &mut rng);
        let mut tape = Tape::inference();
        let loss = model.loss_on_tape(&mut tape, &x, &a, &ts, &eps)?;
        total += tape.value(loss).item() as f64 * chunk.len() as f64;
    }
    Ok(total / n as f64)
}
