use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use normdiff::checkpoint::Checkpoint;
use normdiff::io::{read_csv, MetadataRow};
use normdiff::model::ModelConfig;
use normdiff::phantom::PhantomConfig;
use normdiff::pipeline::{
    self, manifest_path, KmRow, Layout, LossRow, PipelineConfig, RunManifest, ScoreRow, SummaryRow,
};
use normdiff::scoring::HealthyReference;
use normdiff::Error;

fn config(out: &Path, healthy: usize, patients: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.seed = 5;
    cfg.out_dir = out.to_path_buf();
    cfg.phantom = PhantomConfig { image_size: 16, healthy_count: healthy, patient_count: patients, ..PhantomConfig::default() };
    cfg.model = ModelConfig {
        image_size: 16,
        channels: vec![8, 16],
        latent_dim: 8,
        time_embed_dim: 16,
        age_embed_dim: 16,
        groups: 4,
    };
    cfg.training.epochs = 2;
    cfg.training.batch_size = 8;
    cfg.training.holdout = 4;
    cfg.baseline.epochs = 2;
    cfg.baseline.batch_size = 8;
    cfg.diffusion.steps = 20;
    cfg.diffusion.sampling_steps = 4;
    cfg.survival.shuffles = 3;
    cfg
}

fn quiet() -> impl FnMut(&str) {
    |_: &str| {}
}

fn run_all(cfg: &PipelineConfig) -> Vec<RunManifest> {
    let mut log = quiet();
    vec![
        pipeline::generate(cfg, &mut log).unwrap(),
        pipeline::train(cfg, &mut log).unwrap(),
        pipeline::train_age_baseline(cfg, &mut log).unwrap(),
        pipeline::score(cfg, &mut log).unwrap(),
        pipeline::survival(cfg, &mut log).unwrap(),
    ]
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn generate_smoke_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 4, 2);
    cfg.training.holdout = 1;
    let m = pipeline::generate(&cfg, &mut quiet()).unwrap();
    let layout = Layout::new(dir.path());
    let h: Vec<MetadataRow> = read_csv(&layout.healthy_dir().join("metadata.csv")).unwrap();
    let p: Vec<MetadataRow> = read_csv(&layout.patients_dir().join("metadata.csv")).unwrap();
    assert_eq!(h.len() + p.len(), 6);
    assert_eq!(m.metrics["healthy_count"] + m.metrics["patient_count"], 6.0);
    let (healthy, _) = normdiff::io::read_cohort(&layout.healthy_dir()).unwrap();
    let (again, _) = normdiff::phantom::generate_cohorts(&cfg.phantom, cfg.stage_seed("generate")).unwrap();
    assert_eq!(healthy, again);
    m.verify(dir.path()).unwrap();
    assert_eq!(RunManifest::load(&manifest_path(dir.path(), "generate")).unwrap(), m);

    let other = tempfile::tempdir().unwrap();
    let mut cfg2 = cfg.clone();
    cfg2.out_dir = other.path().to_path_buf();
    pipeline::generate(&cfg2, &mut quiet()).unwrap();
    let (a, b) = (files(&dir.path().join("cohort")), files(&other.path().join("cohort")));
    assert_eq!(a, b);
}

#[test]
fn full_pipeline_produces_every_artifact_and_is_deterministic() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg1 = config(d1.path(), 24, 30);
    let cfg2 = config(d2.path(), 24, 30);
    let manifests = run_all(&cfg1);
    run_all(&cfg2);
    for m in &manifests {
        m.verify(d1.path()).unwrap();
        assert!(manifest_path(d1.path(), &m.command).is_file());
    }

    let (a, b) = (files(d1.path()), files(d2.path()));
    let outputs: Vec<&PathBuf> = a.keys().filter(|p| !p.starts_with("manifests")).collect();
    for name in [
        "model/hdae.ckpt",
        "model/age_regressor.ckpt",
        "model/loss_curve.csv",
        "scores/scores.csv",
        "survival/cox.csv",
        "survival/km_split.svg",
        "survival/km_partial.svg",
        "survival/score_distributions.svg",
    ] {
        assert!(a.contains_key(Path::new(name)), "missing {name}");
    }
    for p in outputs {
        assert!(a[p] == b[p], "{} differs between identical runs", p.display());
    }

    let layout = Layout::new(d1.path());
    let losses: Vec<LossRow> = read_csv(&layout.loss_curve()).unwrap();
    assert_eq!(losses.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2]);

    let scores: Vec<ScoreRow> = read_csv(&layout.scores()).unwrap();
    assert_eq!(scores.len(), 30);
    let columns: [fn(&ScoreRow) -> f64; 3] = [
        |r| r.latent_similarity_std,
        |r| r.image_mse_std.unwrap(),
        |r| r.brain_pad_std.unwrap(),
    ];
    for col in columns {
        let v: Vec<f64> = scores.iter().map(col).collect();
        let mean = v.iter().sum::<f64>() / 30.0;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 30.0).sqrt();
        assert!(mean.abs() < 1e-9 && (sd - 1.0).abs() < 1e-9, "mean {mean} sd {sd}");
    }
    assert!(scores.iter().all(|r| (-1.0..=1.0).contains(&r.latent_similarity)));

    let km: Vec<KmRow> = read_csv(&layout.survival_dir().join("km_split.csv")).unwrap();
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in km {
        groups.entry((r.score, r.group)).or_default().push(r.survival);
    }
    assert!(!groups.is_empty());
    for (key, s) in groups {
        assert!(s.windows(2).all(|w| w[1] <= w[0]), "{key:?} increases");
        assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    let svg = std::fs::read_to_string(layout.survival_dir().join("km_split.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("high similarity"));

    // Rescoring the same inputs rewrites identical scores.
    let before = std::fs::read(layout.scores()).unwrap();
    pipeline::score(&cfg1, &mut quiet()).unwrap();
    assert_eq!(std::fs::read(layout.scores()).unwrap(), before);
}

fn replace_in(path: &Path, from: &str, to: &str) {
    let text = std::fs::read_to_string(path).unwrap();
    assert!(text.contains(from));
    std::fs::write(path, text.replacen(from, to, 1)).unwrap();
}

#[test]
fn training_refuses_patients_in_the_healthy_cohort() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 12, 4);
    pipeline::generate(&cfg, &mut quiet()).unwrap();
    let meta = Layout::new(dir.path()).healthy_dir().join("metadata.csv");
    let original = std::fs::read_to_string(&meta).unwrap();

    replace_in(&meta, "H00003", "P00002");
    let err = pipeline::train(&cfg, &mut quiet()).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
    assert!(err.to_string().contains("P00002"), "{err}");

    std::fs::write(&meta, original.replacen("H00003,healthy", "H00003,patient", 1)).unwrap();
    assert!(matches!(pipeline::train(&cfg, &mut quiet()), Err(Error::Data(_))));
    assert!(!Layout::new(dir.path()).checkpoint().exists());
}

#[test]
fn scoring_refuses_patients_seen_in_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 12, 4);
    pipeline::generate(&cfg, &mut quiet()).unwrap();
    pipeline::train(&cfg, &mut quiet()).unwrap();
    let path = Layout::new(dir.path()).checkpoint();
    let mut ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.header.training.subject_ids.len(), 8);
    assert!(ck.header.training.subject_ids.iter().all(|id| id.starts_with('H')));
    ck.header.training.subject_ids.push("P00004".into());
    ck.save(&path).unwrap();
    let err = pipeline::score(&cfg, &mut quiet()).unwrap_err();
    assert!(err.to_string().contains("leakage"), "{err}");
}

#[test]
fn scoring_checks_the_reference_digest() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 12, 4);
    cfg.scoring.image_mse = false;
    pipeline::generate(&cfg, &mut quiet()).unwrap();
    pipeline::train(&cfg, &mut quiet()).unwrap();
    pipeline::score(&cfg, &mut quiet()).unwrap();
    let layout = Layout::new(dir.path());
    let scores: Vec<ScoreRow> = read_csv(&layout.scores()).unwrap();
    assert!(scores.iter().all(|r| r.image_mse.is_none() && r.brain_pad.is_none()));

    let saved = dir.path().join("ref.json");
    std::fs::copy(layout.reference(), &saved).unwrap();
    cfg.scoring.reference = Some(saved.clone());
    pipeline::score(&cfg, &mut quiet()).unwrap();
    assert_eq!(read_csv::<ScoreRow>(&layout.scores()).unwrap(), scores);

    let mut r: HealthyReference = serde_json::from_slice(&std::fs::read(&saved).unwrap()).unwrap();
    r.model_digest = "0".repeat(64);
    std::fs::write(&saved, serde_json::to_vec(&r).unwrap()).unwrap();
    let err = pipeline::score(&cfg, &mut quiet()).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn missing_inputs_name_the_producing_command() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 12, 4);
    for (step, producer) in [
        (pipeline::train as fn(&PipelineConfig, pipeline::Log<'_>) -> normdiff::Result<RunManifest>, "generate"),
        (pipeline::score, "train"),
        (pipeline::survival, "score"),
    ] {
        let err = step(&cfg, &mut quiet()).unwrap_err();
        assert!(err.to_string().contains(producer), "{err}");
        assert_eq!(err.exit_code(), 3);
    }
}

#[test]
fn survival_requires_a_complete_join() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 12, 10);
    cfg.scoring.image_mse = false;
    pipeline::generate(&cfg, &mut quiet()).unwrap();
    pipeline::train(&cfg, &mut quiet()).unwrap();
    pipeline::score(&cfg, &mut quiet()).unwrap();
    pipeline::survival(&cfg, &mut quiet()).unwrap();
    replace_in(&Layout::new(dir.path()).scores(), "P00007", "P00099");
    let err = pipeline::survival(&cfg, &mut quiet()).unwrap_err();
    assert!(err.to_string().contains("P00007"), "{err}");
}

#[test]
fn report_summarises_and_skips_corrupt_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 6, 3);
    let m = pipeline::generate(&cfg, &mut quiet()).unwrap();
    let broken = dir.path().join("manifests").join("broken.json");
    std::fs::write(&broken, "{ not json").unwrap();

    let mut lines = Vec::new();
    let report = pipeline::report(&cfg, &[], &mut |s: &str| lines.push(s.to_string())).unwrap();
    assert_eq!(report.manifests.len(), 1);
    assert_eq!(report.skipped.len(), 1);
    assert!(report.skipped[0].contains("broken.json"));
    assert!(lines.iter().any(|l| l.contains("broken.json")));
    let rows: Vec<SummaryRow> = read_csv(&dir.path().join("report.csv")).unwrap();
    assert_eq!(rows.len(), m.metrics.len());
    for r in &rows {
        assert_eq!(r.command, "generate");
        assert_eq!(r.mean, m.metrics[&r.metric]);
        assert_eq!((r.n, r.sd), (1, 0.0));
    }
    let md = std::fs::read_to_string(dir.path().join("report.md")).unwrap();
    assert!(md.contains("| generate | patient_count | 1 |"));

    // Rerunning ignores the report's own manifest.
    let again = pipeline::report(&cfg, &[], &mut quiet()).unwrap();
    assert_eq!(again.manifests.len(), 1);

    let err = pipeline::report(&cfg, &[broken], &mut quiet()).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn report_aggregates_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let mut inputs = Vec::new();
    for seed in 1..=3 {
        let mut cfg = config(&dir.path().join(format!("s{seed}")), 6, 20);
        cfg.seed = seed;
        pipeline::generate(&cfg, &mut quiet()).unwrap();
        inputs.push(cfg.out_dir.clone());
    }
    let cfg = config(dir.path(), 6, 20);
    let report = pipeline::report(&cfg, &inputs, &mut quiet()).unwrap();
    let row = report.rows.iter().find(|r| r.metric == "patient_events").unwrap();
    assert_eq!(row.n, 3);
    assert!(row.min <= row.mean && row.mean <= row.max);
    assert!(row.sd >= 0.0);
}

#[test]
fn config_rejects_unknown_keys_and_bad_paths() {
    let cfg = PipelineConfig::default();
    let text = cfg.to_toml().unwrap();
    assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
    assert!(matches!(PipelineConfig::from_toml("seeed = 3"), Err(Error::Config(_))));
    assert!(matches!(PipelineConfig::from_toml("[training]\nepoch = 3"), Err(Error::Config(_))));
    let partial = PipelineConfig::from_toml("seed = 9\n[training]\nepochs = 3").unwrap();
    assert_eq!((partial.seed, partial.training.epochs), (9, 3));
    assert_eq!(partial.model, ModelConfig::default());

    let missing = "[scoring]\nreference = \"/definitely/not/here.json\"";
    let err = PipelineConfig::from_toml(missing).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let mismatch = "[model]\nimage_size = 16\nchannels = [8, 16]\ngroups = 4";
    assert!(matches!(PipelineConfig::from_toml(mismatch), Err(Error::Config(_))));

    assert_ne!(cfg.stage_seed("train"), cfg.stage_seed("generate"));
    let other = PipelineConfig { seed: 2, ..cfg.clone() };
    assert_ne!(cfg.stage_seed("train"), other.stage_seed("train"));
    assert_ne!(cfg.digest(), other.digest());
}
