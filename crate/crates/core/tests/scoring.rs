use approx::assert_abs_diff_eq;
use normdiff::scoring::{compute_reference, cosine_similarity, image_deviation, standardize};
use normdiff::Error;
use proptest::prelude::*;

#[test]
fn reference_examples() {
    let one = compute_reference(&[vec![0.5, -2.0, 3.0]], "d").unwrap();
    assert_eq!(one.mu, vec![0.5, -2.0, 3.0]);
    assert_eq!((one.n, one.model_digest.as_str()), (1, "d"));
    let sym = compute_reference(&[vec![1.5, -0.25], vec![-1.5, 0.25]], "d").unwrap();
    assert_eq!(sym.mu, vec![0.0, 0.0]);
    let basis = compute_reference(&[vec![1.0, 0.0], vec![0.0, 1.0]], "d").unwrap();
    assert_eq!(basis.mu, vec![0.5, 0.5]);
    assert!(matches!(compute_reference(&[], "d"), Err(Error::Data(_))));
    assert!(matches!(compute_reference(&[vec![1.0], vec![1.0, 2.0]], "d"), Err(Error::Data(_))));
}

#[test]
fn cosine_examples() {
    let v = [0.3, -1.2, 4.0];
    assert_abs_diff_eq!(cosine_similarity(&v, &v).unwrap(), 1.0, epsilon = 1e-15);
    assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    assert_abs_diff_eq!(cosine_similarity(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
    assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Numeric(_))));
    assert!(matches!(cosine_similarity(&[1.0], &[1.0, 0.0]), Err(Error::Data(_))));
}

#[test]
fn image_deviation_examples() {
    let a = [0.5f32, 0.75, 0.625, 1.0];
    assert_eq!(image_deviation(&a, &a).unwrap(), 0.0);
    let b: Vec<f32> = a.iter().map(|v| v - 0.5).collect();
    assert_abs_diff_eq!(image_deviation(&a, &b).unwrap(), 0.25, epsilon = 1e-12);
    assert!(image_deviation(&a, &a[..3]).is_err());
    assert!(image_deviation(&[], &[]).is_err());
}

#[test]
fn standardize_examples() {
    assert_eq!(standardize(&[-1.0, 1.0]).unwrap(), vec![-1.0, 1.0]);
    let z = standardize(&[10.0, 20.0, 30.0]).unwrap();
    let k = 10.0 / (200.0f64 / 3.0).sqrt();
    assert_abs_diff_eq!(z[0], -k, epsilon = 1e-12);
    assert_abs_diff_eq!(z[1], 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(z[2], k, epsilon = 1e-12);
    assert_abs_diff_eq!(k, 1.2247, epsilon = 1e-4);
    assert!(matches!(standardize(&[3.0, 3.0]), Err(Error::Numeric(_))));
    assert!(matches!(standardize(&[3.0]), Err(Error::Data(_))));
}

proptest! {
    #[test]
    fn cosine_is_bounded_and_scale_free(
        v in prop::collection::vec(-10.0f64..10.0, 1..16),
        w in prop::collection::vec(-10.0f64..10.0, 16),
        c in 0.01f64..100.0,
    ) {
        let w = &w[..v.len()];
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3) && w.iter().any(|x| x.abs() > 1e-3));
        let s = cosine_similarity(&v, w).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        let scaled: Vec<f64> = w.iter().map(|x| x * c).collect();
        prop_assert!((cosine_similarity(&v, &scaled).unwrap() - s).abs() < 1e-9);
    }

    #[test]
    fn image_deviation_matches_loop(pairs in prop::collection::vec((0.0f32..1.0, 0.0f32..1.0), 1..64)) {
        let (a, b): (Vec<f32>, Vec<f32>) = pairs.into_iter().unzip();
        let mut acc = 0.0f64;
        for i in 0..a.len() {
            let d = f64::from(a[i]) - f64::from(b[i]);
            acc += d * d;
        }
        prop_assert!((image_deviation(&a, &b).unwrap() - acc / a.len() as f64).abs() < 1e-9);
        prop_assert!(image_deviation(&a, &b).unwrap() >= 0.0);
    }

    #[test]
    fn standardized_scores_have_zero_mean_unit_sd(v in prop::collection::vec(-1e3f64..1e3, 2..50)) {
        prop_assume!(v.iter().any(|x| (x - v[0]).abs() > 1e-6));
        let z = standardize(&v).unwrap();
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let sd = (z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((sd - 1.0).abs() < 1e-9);
    }

    #[test]
    fn reference_is_reproducible(latents in prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 4), 1..20)) {
        let a = compute_reference(&latents, "x").unwrap();
        prop_assert_eq!(&a, &compute_reference(&latents, "x").unwrap());
        prop_assert_eq!(a.mu.len(), 4);
    }
}
