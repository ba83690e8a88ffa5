//! Deterministic (η = 0) reverse sampling and its inversion.

use normdiff_autograd::Tensor;

use crate::error::{Error, Result};
use crate::schedule::{mix, NoiseSchedule, SamplingPlan};

/// Anything that predicts the noise in `x_t` given a timestep and a batch of
/// semantic latents `z` (`[N, d]`).
pub trait NoisePredictor {
    fn predict_noise(&self, xt: &Tensor, t: usize, z: &Tensor) -> Result<Tensor>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&Tensor, usize, &Tensor) -> Result<Tensor>,
{
    fn predict_noise(&self, xt: &Tensor, t: usize, z: &Tensor) -> Result<Tensor> {
        self(xt, t, z)
    }
}

fn checked_prediction<P: NoisePredictor + ?Sized>(
    model: &P,
    x: &Tensor,
    t: usize,
    z: &Tensor,
) -> Result<Tensor> {
    let eps = model.predict_noise(x, t, z)?;
    if eps.shape() != x.shape() {
        return Err(Error::Data(format!(
            "noise prediction shape {:?} differs from input {:?}",
            eps.shape(),
            x.shape()
        )));
    }
    if !eps.is_finite() {
        return Err(Error::Numeric(format!(
            "noise predictor returned non-finite values at t={t}"
        )));
    }
    Ok(eps)
}

/// x̂₀ = (x_t − √(1−ᾱ)·ε̂)/√ᾱ.
fn predict_x0(x: &Tensor, eps: &Tensor, alpha_bar: f64, clamp: bool) -> Tensor {
    let (sa, sb) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = x
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&xv, &e)| {
            let v = ((xv as f64 - sb * e as f64) / sa) as f32;
            if clamp {
                v.clamp(0.0, 1.0)
            } else {
                v
            }
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

/// Denoise `x_t` (at the plan's first timestep) down to x̂₀.
///
/// Each step predicts ε̂, forms a clamped x̂₀, and re-noises it to the next
/// plan timestep with the same ε̂. The last step returns x̂₀.
pub fn reverse_sample<P: NoisePredictor + ?Sized>(
    x_t: &Tensor,
    z: &Tensor,
    model: &P,
    schedule: &NoiseSchedule,
    plan: &SamplingPlan,
) -> Result<Tensor> {
    let steps = plan.timesteps();
    if steps[0] > schedule.steps() {
        return Err(Error::Config(format!(
            "plan starts at {} beyond schedule length {}",
            steps[0],
            schedule.steps()
        )));
    }
    let mut x = x_t.clone();
    for (i, &t) in steps.iter().enumerate() {
        let eps = checked_prediction(model, &x, t, z)?;
        let x0 = predict_x0(&x, &eps, schedule.alpha_bar(t), true);
        match steps.get(i + 1) {
            Some(&next) => x = mix(&x0, &eps, schedule.alpha_bar(next))?,
            None => return Ok(x0),
        }
    }
    unreachable!("plans hold at least two timesteps")
}

/// Run the deterministic update forwards over the reversed plan, mapping a
/// clean image to the x_T from which [`reverse_sample`] reproduces it.
pub fn deterministic_encode<P: NoisePredictor + ?Sized>(
    x0: &Tensor,
    z: &Tensor,
    model: &P,
    schedule: &NoiseSchedule,
    plan: &SamplingPlan,
) -> Result<Tensor> {
    let steps: Vec<usize> = plan.timesteps().iter().rev().copied().collect();
    if *steps.last().unwrap() > schedule.steps() {
        return Err(Error::Config("plan exceeds schedule length".into()));
    }
    // Lift x₀ onto the first (least noisy) plan level using ε̂ evaluated at x₀.
    let first = steps[0];
    let eps = checked_prediction(model, x0, first, z)?;
    let mut x = mix(x0, &eps, schedule.alpha_bar(first))?;
    for w in steps.windows(2) {
        let (t, next) = (w[0], w[1]);
        let eps = checked_prediction(model, &x, t, z)?;
        let x0_hat = predict_x0(&x, &eps, schedule.alpha_bar(t), false);
        x = mix(&x0_hat, &eps, schedule.alpha_bar(next))?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (NoiseSchedule, Tensor, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let schedule = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let x0 = Tensor::uniform([2, 1, 6, 6], 0.0, 1.0, &mut rng);
        let eps = Tensor::randn([2, 1, 6, 6], &mut rng);
        let z = Tensor::zeros([2, 4]);
        (schedule, x0, eps, z)
    }

    #[test]
    fn oracle_noise_recovers_x0_with_two_step_plan() {
        let (schedule, x0, eps, z) = setup();
        let plan = SamplingPlan::evenly_spaced(100, 2).unwrap();
        let xt = schedule.forward_noise(&x0, 100, &eps).unwrap();
        let oracle = |_: &Tensor, _: usize, _: &Tensor| Ok(eps.clone());
        let out = reverse_sample(&xt, &z, &oracle, &schedule, &plan).unwrap();
        for (a, b) in out.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-4);
        }
        let again = reverse_sample(&xt, &z, &oracle, &schedule, &plan).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn zero_noise_model_encode_is_closed_form_scaling() {
        let (schedule, x0, _, z) = setup();
        let zero = |x: &Tensor, _: usize, _: &Tensor| Ok(Tensor::zeros(x.shape()));
        for count in [2, 20] {
            let plan = SamplingPlan::evenly_spaced(100, count).unwrap();
            let xt = deterministic_encode(&x0, &z, &zero, &schedule, &plan).unwrap();
            let scale = schedule.alpha_bar(100).sqrt() as f32;
            for (a, b) in xt.data().iter().zip(x0.data()) {
                assert!((a - b * scale).abs() < 1e-6);
            }
            let back = reverse_sample(&xt, &z, &zero, &schedule, &plan).unwrap();
            for (a, b) in back.data().iter().zip(x0.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn non_finite_prediction_is_numeric_error() {
        let (schedule, x0, _, z) = setup();
        let plan = SamplingPlan::evenly_spaced(100, 3).unwrap();
        let bad = |x: &Tensor, _: usize, _: &Tensor| Ok(Tensor::full(x.shape(), f32::NAN));
        assert!(matches!(
            reverse_sample(&x0, &z, &bad, &schedule, &plan),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            deterministic_encode(&x0, &z, &bad, &schedule, &plan),
            Err(Error::Numeric(_))
        ));
    }
}
