//! Healthy latent reference, similarity and deviation scores, standardisation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean semantic latent of the healthy cohort, bound to the model that made it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthyReference {
    pub mu: Vec<f64>,
    pub n: usize,
    pub model_digest: String,
}

/// Mean latent with left-to-right summation in f64.
pub fn compute_reference(latents: &[Vec<f32>], model_digest: &str) -> Result<HealthyReference> {
    let first = latents
        .first()
        .ok_or_else(|| Error::Data("healthy reference needs at least one latent".into()))?;
    let d = first.len();
    let mut sum = vec![0.0f64; d];
    for (i, z) in latents.iter().enumerate() {
        if z.len() != d {
            return Err(Error::Data(format!(
                "latent {i} has dimension {} but the first has {d}",
                z.len()
            )));
        }
        for (s, &v) in sum.iter_mut().zip(z) {
            *s += f64::from(v);
        }
    }
    let n = latents.len();
    Ok(HealthyReference {
        mu: sum.into_iter().map(|s| s / n as f64).collect(),
        n,
        model_digest: model_digest.to_string(),
    })
}

/// `⟨mu, z⟩ / (‖mu‖‖z‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(mu: &[f64], z: &[f64]) -> Result<f64> {
    if mu.len() != z.len() {
        return Err(Error::Data(format!(
            "cosine similarity of vectors with dimensions {} and {}",
            mu.len(),
            z.len()
        )));
    }
    let dot: f64 = mu.iter().zip(z).map(|(a, b)| a * b).sum();
    let na = mu.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = z.iter().map(|b| b * b).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric(
            "cosine similarity is undefined for a zero-norm vector".into(),
        ));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean squared pixel difference between an image and its reconstruction.
pub fn image_deviation(x0: &[f32], reconstruction: &[f32]) -> Result<f64> {
    if x0.len() != reconstruction.len() {
        return Err(Error::Data(format!(
            "image has {} pixels but reconstruction has {}",
            x0.len(),
            reconstruction.len()
        )));
    }
    if x0.is_empty() {
        return Err(Error::Data("image deviation of empty images".into()));
    }
    let sum: f64 = x0
        .iter()
        .zip(reconstruction)
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
        .sum();
    Ok(sum / x0.len() as f64)
}

/// Z-scores using the population (divide-by-n) standard deviation.
pub fn standardize(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.len() < 2 {
        return Err(Error::Data(format!(
            "standardisation needs at least 2 scores, got {}",
            scores.len()
        )));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::Numeric(
            "cannot standardise a distribution with zero variance".into(),
        ));
    }
    let sd = var.sqrt();
    Ok(scores.iter().map(|s| (s - mean) / sd).collect())
}
