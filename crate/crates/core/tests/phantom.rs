use normdiff::io::{read_cohort, write_cohort, IMAGES_FILE, METADATA_FILE};
use normdiff::phantom::{generate_cohorts, render_phantom, ventricle_pixels, Anatomy, Cohort, PhantomConfig};
use normdiff::Error;
use normdiff_survival::{cox_fit, kendall_tau, SurvivalRecord, Z_95};
use std::collections::BTreeMap;

fn small(n: usize, m: usize) -> PhantomConfig {
    PhantomConfig { image_size: 16, healthy_count: n, patient_count: m, ..PhantomConfig::default() }
}

#[test]
fn rendering_is_deterministic_and_bounded() {
    let cfg = PhantomConfig::default();
    let a = render_phantom(&cfg, 55.0, 1.5, 1, 9).unwrap();
    assert_eq!(a, render_phantom(&cfg, 55.0, 1.5, 1, 9).unwrap());
    assert_eq!(a.len(), 32 * 32);
    assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_ne!(a, render_phantom(&cfg, 55.0, 1.5, 1, 10).unwrap());
}

#[test]
fn zero_disease_effect_reproduces_the_healthy_template() {
    let inert = PhantomConfig {
        anatomy: Anatomy { cortex_severity_loss: 0.0, ventricle_severity_growth: 0.0, ..Anatomy::default() },
        ..PhantomConfig::default()
    };
    let template = render_phantom(&inert, 62.0, 0.0, 0, 4).unwrap();
    assert_eq!(render_phantom(&PhantomConfig::default(), 62.0, 0.0, 0, 4).unwrap(), template);
    assert_eq!(render_phantom(&inert, 62.0, 3.0, 0, 4).unwrap(), template);
}

#[test]
fn ventricles_grow_with_severity() {
    let cfg = PhantomConfig::default();
    for seed in 0..5 {
        let counts: Vec<usize> = [0.0, 1.0, 2.0, 3.0, 4.0]
            .iter()
            .map(|&s| ventricle_pixels(&render_phantom(&cfg, 60.0, s, 0, seed).unwrap(), 32, 0.45))
            .collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "seed {seed}: {counts:?}");
    }
}

#[test]
fn ventricle_area_tracks_severity_across_patients() {
    let (_, patients) = generate_cohorts(&PhantomConfig { healthy_count: 1, patient_count: 200, ..Default::default() }, 3)
        .unwrap();
    let area: Vec<f64> = patients.iter().map(|p| ventricle_pixels(&p.image, 32, 0.45) as f64).collect();
    let severity: Vec<f64> = patients.iter().map(|p| p.severity).collect();
    let tau = kendall_tau(&area, &severity).unwrap().statistic;
    assert!(tau > 0.5, "tau {tau}");
    assert!(severity.iter().sum::<f64>() > 0.0);
}

#[test]
fn invalid_arguments_are_rejected() {
    let cfg = PhantomConfig::default();
    assert!(matches!(render_phantom(&cfg, 10.0, 0.0, 0, 0), Err(Error::Data(_))));
    assert!(matches!(render_phantom(&cfg, 50.0, -1.0, 0, 0), Err(Error::Data(_))));
    assert!(matches!(render_phantom(&cfg, 50.0, 0.0, 2, 0), Err(Error::Data(_))));
    for bad in [
        PhantomConfig { healthy_count: 0, ..small(1, 1) },
        PhantomConfig { age_range: [50.0, 50.0], ..small(1, 1) },
        PhantomConfig { patient_age_range: [10.0, 60.0], ..small(1, 1) },
        PhantomConfig { baseline_hazard: 0.0, ..small(1, 1) },
        PhantomConfig { censoring_rate: 1.0, ..small(1, 1) },
        PhantomConfig { image_size: 4, ..small(1, 1) },
    ] {
        assert!(matches!(generate_cohorts(&bad, 0), Err(Error::Config(_))), "{bad:?}");
    }
}

#[test]
fn cohorts_have_the_documented_shape() {
    let cfg = small(30, 20);
    let (healthy, patients) = generate_cohorts(&cfg, 5).unwrap();
    assert_eq!((healthy.len(), patients.len()), (30, 20));
    for h in &healthy {
        assert_eq!(h.cohort, Cohort::Healthy);
        assert_eq!(h.severity, 0.0);
        assert_eq!((h.duration_days, h.event), (None, None));
        assert!(h.age >= 20.0 && h.age <= 80.0);
    }
    for p in &patients {
        assert_eq!(p.cohort, Cohort::Patient);
        assert!(p.age >= 45.0 && p.age <= 80.0);
        assert!(p.duration_days.unwrap() > 0.0);
        assert!(p.event.is_some());
    }
    let ids: Vec<&str> = healthy.iter().chain(&patients).map(|r| r.id.as_str()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), ids.len());
    assert_eq!(generate_cohorts(&cfg, 5).unwrap(), (healthy, patients));
}

#[test]
fn no_censoring_means_every_death_is_observed() {
    let cfg = PhantomConfig { censoring_rate: 0.0, ..small(1, 100) };
    let (_, patients) = generate_cohorts(&cfg, 2).unwrap();
    assert!(patients.iter().all(|p| p.event == Some(true)));
}

#[test]
fn null_effect_durations_have_the_baseline_mean() {
    let cfg = PhantomConfig { hazard_coef: 0.0, censoring_rate: 0.0, image_size: 8, ..small(1, 2000) };
    let (_, patients) = generate_cohorts(&cfg, 7).unwrap();
    let mean = patients.iter().map(|p| p.duration_days.unwrap()).sum::<f64>() / patients.len() as f64;
    // Durations are rounded up to whole days, adding about half a day.
    let expected = 1.0 / cfg.baseline_hazard + 0.5;
    assert!((mean - expected).abs() < 0.1 * expected, "mean {mean} vs {expected}");
}

#[test]
fn censored_fraction_is_near_target() {
    let cfg = PhantomConfig { image_size: 8, ..small(1, 3000) };
    let (_, patients) = generate_cohorts(&cfg, 8).unwrap();
    let censored = patients.iter().filter(|p| p.event == Some(false)).count() as f64 / 3000.0;
    assert!((censored - 0.3).abs() < 0.03, "censored {censored}");
}

#[test]
fn cox_recovers_the_planted_coefficient() {
    let mut covered = 0;
    for seed in 0..20 {
        let cfg = PhantomConfig { image_size: 8, ..small(1, 500) };
        let (_, patients) = generate_cohorts(&cfg, seed).unwrap();
        let records: Vec<SurvivalRecord> = patients
            .iter()
            .map(|p| SurvivalRecord {
                id: p.id.clone(),
                duration: p.duration_days.unwrap(),
                event: p.event.unwrap(),
                covariates: BTreeMap::from([("severity".to_string(), p.severity)]),
            })
            .collect();
        let fit = cox_fit(&records, &["severity"]).unwrap();
        let (b, se) = (fit.coef[0], fit.se()[0]);
        if (b - 0.8).abs() <= Z_95 * se {
            covered += 1;
        }
    }
    assert!(covered >= 18, "covered in {covered}/20 seeds");
}

#[test]
fn cohort_files_round_trip_losslessly() {
    let cfg = small(4, 2);
    let (healthy, patients) = generate_cohorts(&cfg, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (name, records) in [("h", &healthy), ("p", &patients)] {
        let sub = dir.path().join(name);
        let paths = write_cohort(&sub, records, 16).unwrap();
        assert_eq!(paths, vec![sub.join(IMAGES_FILE), sub.join(METADATA_FILE)]);
        let (back, size) = read_cohort(&sub).unwrap();
        assert_eq!(size, 16);
        assert_eq!(&back, records);
    }
}

#[test]
fn corrupted_cohort_files_are_data_errors() {
    let (healthy, _) = generate_cohorts(&small(3, 1), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_cohort(dir.path(), &healthy, 16).unwrap();
    let img = dir.path().join(IMAGES_FILE);
    let bytes = std::fs::read(&img).unwrap();
    std::fs::write(&img, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(read_cohort(dir.path()), Err(Error::Data(_))));

    std::fs::write(&img, &bytes).unwrap();
    let meta = dir.path().join(METADATA_FILE);
    let text = std::fs::read_to_string(&meta).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    std::fs::write(&meta, lines[..lines.len() - 1].join("\n") + "\n").unwrap();
    assert!(matches!(read_cohort(dir.path()), Err(Error::Data(_))));
}
