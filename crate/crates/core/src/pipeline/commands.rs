use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use normdiff_autograd::Tensor;
use normdiff_survival::kendall_tau;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::manifest::{ManifestBuilder, RunManifest};
use crate::checkpoint::{Checkpoint, TrainingMeta};
use crate::error::{Error, Result};
use crate::io::{read_cohort, write_atomic, write_cohort, write_csv, IMAGES_FILE, METADATA_FILE};
use crate::model::{brain_pad, evaluate_loss, train_age_regressor, train_hdae, AgeNorm, AgeRegressor, Hdae};
use crate::phantom::{generate_cohorts, Cohort, SubjectRecord};
use crate::scoring::{compute_reference, cosine_similarity, image_deviation, standardize, HealthyReference};

/// Sink for human-readable progress lines.
pub type Log<'a> = &'a mut dyn FnMut(&str);

/// Locations of every artifact inside a run directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn healthy_dir(&self) -> PathBuf {
        self.root.join("cohort").join("healthy")
    }

    pub fn patients_dir(&self) -> PathBuf {
        self.root.join("cohort").join("patients")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("model").join("hdae.ckpt")
    }

    pub fn loss_curve(&self) -> PathBuf {
        self.root.join("model").join("loss_curve.csv")
    }

    pub fn age_checkpoint(&self) -> PathBuf {
        self.root.join("model").join("age_regressor.ckpt")
    }

    pub fn age_loss_curve(&self) -> PathBuf {
        self.root.join("model").join("age_loss_curve.csv")
    }

    pub fn scores(&self) -> PathBuf {
        self.root.join("scores").join("scores.csv")
    }

    pub fn healthy_scores(&self) -> PathBuf {
        self.root.join("scores").join("healthy_scores.csv")
    }

    pub fn reference(&self) -> PathBuf {
        self.root.join("scores").join("reference.json")
    }

    pub fn survival_dir(&self) -> PathBuf {
        self.root.join("survival")
    }
}

pub(crate) fn require(path: &Path, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Data(format!(
            "missing input {}; run `{producer}` first",
            path.display()
        )))
    }
}

fn require_cohort(dir: &Path) -> Result<()> {
    require(&dir.join(IMAGES_FILE), "generate")?;
    require(&dir.join(METADATA_FILE), "generate")
}

pub(crate) fn stack(records: &[&SubjectRecord], size: usize) -> Result<Tensor> {
    let data: Vec<f32> = records.iter().flat_map(|r| r.image.iter().copied()).collect();
    Ok(Tensor::new(vec![records.len(), 1, size, size], data)?)
}

fn check_size(cfg: &PipelineConfig, size: usize) -> Result<()> {
    if size != cfg.model.image_size {
        return Err(Error::Config(format!(
            "cohort images are {size}x{size} but model.image_size is {}",
            cfg.model.image_size
        )));
    }
    Ok(())
}

/// Writes the healthy and patient cohorts.
pub fn generate(cfg: &PipelineConfig, log: Log<'_>) -> Result<RunManifest> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    let mut m = ManifestBuilder::start("generate", cfg);
    let (healthy, patients) = generate_cohorts(&cfg.phantom, cfg.stage_seed("generate"))?;
    let size = cfg.phantom.image_size;
    for path in write_cohort(&layout.healthy_dir(), &healthy, size)? {
        m.artifact(&path)?;
    }
    for path in write_cohort(&layout.patients_dir(), &patients, size)? {
        m.artifact(&path)?;
    }
    let events = patients.iter().filter(|p| p.event == Some(true)).count();
    let ages = |r: &[SubjectRecord]| mean(&r.iter().map(|s| s.age).collect::<Vec<_>>());
    m.metric("healthy_count", healthy.len() as f64);
    m.metric("patient_count", patients.len() as f64);
    m.metric("patient_events", events as f64);
    m.metric("censored_fraction", 1.0 - events as f64 / patients.len() as f64);
    m.metric("mean_healthy_age", ages(&healthy));
    m.metric("mean_patient_age", ages(&patients));
    m.metric("mean_severity", mean(&patients.iter().map(|r| r.severity).collect::<Vec<_>>()));
    log(&format!(
        "generated {} healthy and {} patient phantoms ({events} deaths)",
        healthy.len(),
        patients.len()
    ));
    m.finish()
}

/// Healthy training cohort, after checking that no patient leaked into it.
fn load_training_cohort(cfg: &PipelineConfig, layout: &Layout) -> Result<(Vec<SubjectRecord>, usize)> {
    require_cohort(&layout.healthy_dir())?;
    require_cohort(&layout.patients_dir())?;
    let (healthy, size) = read_cohort(&layout.healthy_dir())?;
    check_size(cfg, size)?;
    let (patients, _) = read_cohort(&layout.patients_dir())?;
    let patient_ids: HashSet<&str> = patients.iter().map(|p| p.id.as_str()).collect();
    for r in &healthy {
        if r.cohort != Cohort::Healthy || r.severity != 0.0 {
            return Err(Error::Data(format!(
                "subject {} in the healthy cohort file is not a healthy control",
                r.id
            )));
        }
        if patient_ids.contains(r.id.as_str()) {
            return Err(Error::Data(format!(
                "subject id {} appears in both the healthy and patient cohorts",
                r.id
            )));
        }
    }
    if healthy.len() <= cfg.training.holdout {
        return Err(Error::Data(format!(
            "{} healthy subjects cannot cover a holdout of {}",
            healthy.len(),
            cfg.training.holdout
        )));
    }
    Ok((healthy, size))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub loss: f64,
}

fn loss_rows(losses: &[f64]) -> Vec<LossRow> {
    losses
        .iter()
        .enumerate()
        .map(|(i, &loss)| LossRow { epoch: i + 1, loss })
        .collect()
}

fn batched<T>(
    records: &[&SubjectRecord],
    size: usize,
    batch: usize,
    mut f: impl FnMut(&Tensor, &[f64]) -> Result<Vec<T>>,
) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch.max(1)) {
        let x = stack(chunk, size)?;
        let ages: Vec<f64> = chunk.iter().map(|r| r.age).collect();
        out.extend(f(&x, &ages)?);
    }
    Ok(out)
}

fn per_subject_mse(x: &Tensor, rec: &Tensor) -> Result<Vec<f64>> {
    let per = x.numel() / x.shape()[0];
    x.data()
        .chunks(per)
        .zip(rec.data().chunks(per))
        .map(|(a, b)| image_deviation(a, b))
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Trains the diffusion autoencoder on the healthy cohort only.
pub fn train(cfg: &PipelineConfig, log: Log<'_>) -> Result<RunManifest> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    let (healthy, size) = load_training_cohort(cfg, &layout)?;
    let mut m = ManifestBuilder::start("train", cfg);
    let split = healthy.len() - cfg.training.holdout;
    let train_set: Vec<&SubjectRecord> = healthy[..split].iter().collect();
    let held: Vec<&SubjectRecord> = healthy[split..].iter().collect();
    let x = stack(&train_set, size)?;
    let ages: Vec<f64> = train_set.iter().map(|r| r.age).collect();

    let schedule = cfg.diffusion.schedule()?;
    let plan = cfg.diffusion.plan()?;
    let seed = cfg.stage_seed("train");
    let mut model = Hdae::new(cfg.model.clone(), schedule, AgeNorm::from_ages(&ages)?, seed)?;
    let eval_seed = cfg.stage_seed("evaluate");
    let batch = cfg.scoring.batch_size;
    let untrained = evaluate_loss(&model, &x, &ages, batch, eval_seed)?;
    let untrained_held = if held.is_empty() {
        None
    } else {
        let mse = batched(&held, size, batch, |x, a| per_subject_mse(x, &model.reconstruct(x, a, &plan)?))?;
        Some(mean(&mse))
    };
    log(&format!(
        "training on {} healthy subjects ({} parameters), untrained loss {untrained:.4}",
        train_set.len(),
        model.params().num_scalars()
    ));

    let started = Instant::now();
    let epochs = cfg.training.epochs;
    let losses = train_hdae(&mut model, &x, &ages, &cfg.training.train_config(), seed, |e, l| {
        log(&format!(
            "epoch {e}/{epochs} loss {l:.5} ({:.0}s)",
            started.elapsed().as_secs_f64()
        ))
    })?;
    let seconds = started.elapsed().as_secs_f64();
    let trained = evaluate_loss(&model, &x, &ages, batch, eval_seed)?;

    let meta = TrainingMeta {
        epochs,
        batch_size: cfg.training.batch_size,
        learning_rate: cfg.training.learning_rate,
        seed,
        final_loss: *losses.last().unwrap(),
        subject_ids: train_set.iter().map(|r| r.id.clone()).collect(),
    };
    let ckpt = Checkpoint::from_hdae(&model, meta);
    ckpt.save(&layout.checkpoint())?;
    write_csv(&layout.loss_curve(), &loss_rows(&losses))?;
    m.artifact(&layout.checkpoint())?;
    m.artifact(&layout.loss_curve())?;

    m.metric("train_subjects", train_set.len() as f64);
    m.metric("parameters", model.params().num_scalars() as f64);
    m.metric("untrained_loss", untrained);
    m.metric("trained_loss", trained);
    m.metric("loss_ratio", trained / untrained);
    m.metric("final_epoch_loss", *losses.last().unwrap());
    m.metric("train_seconds", seconds);
    if let Some(before) = untrained_held {
        let mse = batched(&held, size, batch, |x, a| per_subject_mse(x, &model.reconstruct(x, a, &plan)?))?;
        let after = mean(&mse);
        m.metric("heldout_subjects", held.len() as f64);
        m.metric("untrained_heldout_recon_mse", before);
        m.metric("heldout_recon_mse", after);
        log(&format!("held-out reconstruction MSE {after:.5} (untrained {before:.5})"));
    }
    log(&format!("trained loss {trained:.4} ({:.3} of untrained)", trained / untrained));
    m.finish()
}

/// Trains the age-regression baseline on the same healthy subjects.
pub fn train_age_baseline(cfg: &PipelineConfig, log: Log<'_>) -> Result<RunManifest> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    let (healthy, size) = load_training_cohort(cfg, &layout)?;
    let mut m = ManifestBuilder::start("train-age-baseline", cfg);
    let split = healthy.len() - cfg.training.holdout;
    let train_set: Vec<&SubjectRecord> = healthy[..split].iter().collect();
    let held: Vec<&SubjectRecord> = healthy[split..].iter().collect();
    let x = stack(&train_set, size)?;
    let ages: Vec<f64> = train_set.iter().map(|r| r.age).collect();
    let norm = AgeNorm::from_ages(&ages)?;
    let seed = cfg.stage_seed("train-age-baseline");
    let mut model = AgeRegressor::new(cfg.model.clone(), norm, seed)?;
    let epochs = cfg.baseline.epochs;
    let started = Instant::now();
    let losses = train_age_regressor(&mut model, &x, &ages, &cfg.baseline, seed, |e, l| {
        log(&format!(
            "epoch {e}/{epochs} loss {l:.5} ({:.0}s)",
            started.elapsed().as_secs_f64()
        ))
    })?;
    let meta = TrainingMeta {
        epochs,
        batch_size: cfg.baseline.batch_size,
        learning_rate: cfg.baseline.learning_rate,
        seed,
        final_loss: *losses.last().unwrap(),
        subject_ids: train_set.iter().map(|r| r.id.clone()).collect(),
    };
    Checkpoint::from_regressor(&model, meta).save(&layout.age_checkpoint())?;
    write_csv(&layout.age_loss_curve(), &loss_rows(&losses))?;
    m.artifact(&layout.age_checkpoint())?;
    m.artifact(&layout.age_loss_curve())?;

    let batch = cfg.scoring.batch_size;
    let pred = batched(&train_set, size, batch, |x, _| model.predict_ages(x))?;
    let pads: Vec<f64> = pred.iter().zip(&ages).map(|(&p, &a)| brain_pad(p, a)).collect();
    m.metric("age_sd", norm.std);
    m.metric("final_epoch_loss", *losses.last().unwrap());
    m.metric("train_mean_brain_pad", mean(&pads));
    m.metric("train_seconds", started.elapsed().as_secs_f64());
    if !held.is_empty() {
        let pred = batched(&held, size, batch, |x, _| model.predict_ages(x))?;
        let mae = mean(
            &pred
                .iter()
                .zip(&held)
                .map(|(p, r)| (p - r.age).abs())
                .collect::<Vec<_>>(),
        );
        m.metric("heldout_mae_years", mae);
        m.metric("heldout_mae_over_sd", mae / norm.std);
        log(&format!("held-out age MAE {mae:.2} years (cohort sd {:.2})", norm.std));
    }
    m.finish()
}

/// One patient's normative scores; standardised columns use patient-cohort statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub subject_id: String,
    pub age: f64,
    pub sex: u8,
    pub latent_similarity: f64,
    pub latent_similarity_std: f64,
    pub image_mse: Option<f64>,
    pub image_mse_std: Option<f64>,
    pub brain_pad: Option<f64>,
    pub brain_pad_std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthyScoreRow {
    pub subject_id: String,
    pub age: f64,
    pub sex: u8,
    pub latent_similarity: f64,
}

fn ensure_disjoint(training_ids: &[String], patients: &[SubjectRecord], what: &str) -> Result<()> {
    let trained: HashSet<&str> = training_ids.iter().map(String::as_str).collect();
    if let Some(p) = patients.iter().find(|p| trained.contains(p.id.as_str())) {
        return Err(Error::Data(format!(
            "leakage: patient {} was used to train the {what}",
            p.id
        )));
    }
    Ok(())
}

fn latents_as_rows(z: &Tensor) -> Vec<Vec<f32>> {
    let d = z.shape()[1];
    z.data().chunks(d).map(<[f32]>::to_vec).collect()
}

fn similarities(reference: &HealthyReference, latents: &[Vec<f32>]) -> Result<Vec<f64>> {
    latents
        .iter()
        .map(|z| {
            let z: Vec<f64> = z.iter().map(|&v| f64::from(v)).collect();
            cosine_similarity(&reference.mu, &z)
        })
        .collect()
}

/// Scores every patient against the healthy latent reference.
pub fn score(cfg: &PipelineConfig, log: Log<'_>) -> Result<RunManifest> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    require(&layout.checkpoint(), "train")?;
    require_cohort(&layout.healthy_dir())?;
    require_cohort(&layout.patients_dir())?;
    let mut m = ManifestBuilder::start("score", cfg);
    let ckpt = Checkpoint::load(&layout.checkpoint())?;
    let digest = ckpt.digest()?;
    let model = ckpt.to_hdae()?;
    let (healthy, size) = read_cohort(&layout.healthy_dir())?;
    let (patients, psize) = read_cohort(&layout.patients_dir())?;
    if size != model.config().image_size || psize != size {
        return Err(Error::Data(format!(
            "cohort images ({size} and {psize} pixels wide) do not match the model ({})",
            model.config().image_size
        )));
    }
    let training_ids = &ckpt.header.training.subject_ids;
    ensure_disjoint(training_ids, &patients, "diffusion model")?;
    let wanted: BTreeSet<&str> = training_ids.iter().map(String::as_str).collect();
    let reference_set: Vec<&SubjectRecord> = healthy.iter().filter(|r| wanted.contains(r.id.as_str())).collect();
    if reference_set.len() != wanted.len() {
        return Err(Error::Data(format!(
            "{} training subjects named in the checkpoint are missing from the healthy cohort",
            wanted.len() - reference_set.len()
        )));
    }
    let batch = cfg.scoring.batch_size;

    // Each healthy subject is encoded conditional on its own age.
    let healthy_latents = batched(&reference_set, size, batch, |x, a| {
        Ok(latents_as_rows(&model.encode_semantic(x, a)?))
    })?;
    let reference = match &cfg.scoring.reference {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let r: HealthyReference = serde_json::from_slice(&bytes)
                .map_err(|e| Error::Data(format!("{}: invalid reference: {e}", path.display())))?;
            if r.model_digest != digest {
                return Err(Error::Data(format!(
                    "reference {} was built from model {}, not the current checkpoint {digest}",
                    path.display(),
                    r.model_digest
                )));
            }
            if r.mu.len() != model.config().latent_dim {
                return Err(Error::Data(format!(
                    "reference has dimension {}, model latents have {}",
                    r.mu.len(),
                    model.config().latent_dim
                )));
            }
            r
        }
        None => compute_reference(&healthy_latents, &digest)?,
    };
    let json = serde_json::to_vec_pretty(&reference)
        .map_err(|e| Error::Data(format!("cannot serialise reference: {e}")))?;
    write_atomic(&layout.reference(), &json)?;

    let healthy_sims = similarities(&reference, &healthy_latents)?;
    let healthy_rows: Vec<HealthyScoreRow> = reference_set
        .iter()
        .zip(&healthy_sims)
        .map(|(r, &s)| HealthyScoreRow {
            subject_id: r.id.clone(),
            age: r.age,
            sex: r.sex,
            latent_similarity: s,
        })
        .collect();

    let patient_refs: Vec<&SubjectRecord> = patients.iter().collect();
    let patient_latents = batched(&patient_refs, size, batch, |x, a| {
        Ok(latents_as_rows(&model.encode_semantic(x, a)?))
    })?;
    let sims = similarities(&reference, &patient_latents)?;
    let sims_std = standardize(&sims)?;
    log(&format!("scored {} patients against {} healthy latents", patients.len(), reference.n));

    let plan = cfg.diffusion.plan()?;
    let mse = if cfg.scoring.image_mse {
        let started = Instant::now();
        let v = batched(&patient_refs, size, batch, |x, a| {
            per_subject_mse(x, &model.reconstruct(x, a, &plan)?)
        })?;
        log(&format!("reconstructed patients in {:.0}s", started.elapsed().as_secs_f64()));
        Some(v)
    } else {
        None
    };
    let mse_std = mse.as_deref().map(standardize).transpose()?;

    let pads = if layout.age_checkpoint().exists() {
        let ack = Checkpoint::load(&layout.age_checkpoint())?;
        ensure_disjoint(&ack.header.training.subject_ids, &patients, "age regressor")?;
        let reg = ack.to_regressor()?;
        let pred = batched(&patient_refs, size, batch, |x, _| reg.predict_ages(x))?;
        m.artifact(&layout.age_checkpoint())?;
        Some(pred.iter().zip(&patients).map(|(&p, r)| brain_pad(p, r.age)).collect::<Vec<_>>())
    } else {
        None
    };
    let pads_std = pads.as_deref().map(standardize).transpose()?;

    let rows: Vec<ScoreRow> = patients
        .iter()
        .enumerate()
        .map(|(i, p)| ScoreRow {
            subject_id: p.id.clone(),
            age: p.age,
            sex: p.sex,
            latent_similarity: sims[i],
            latent_similarity_std: sims_std[i],
            image_mse: mse.as_ref().map(|v| v[i]),
            image_mse_std: mse_std.as_ref().map(|v| v[i]),
            brain_pad: pads.as_ref().map(|v| v[i]),
            brain_pad_std: pads_std.as_ref().map(|v| v[i]),
        })
        .collect();
    write_csv(&layout.scores(), &rows)?;
    write_csv(&layout.healthy_scores(), &healthy_rows)?;
    m.artifact(&layout.checkpoint())?;
    m.artifact(&layout.reference())?;
    m.artifact(&layout.scores())?;
    m.artifact(&layout.healthy_scores())?;

    // Ground-truth severity is known for phantoms; report how well each score tracks it.
    let severity: Vec<f64> = patients.iter().map(|p| p.severity).collect();
    let sd = {
        let mu = mean(&severity);
        (severity.iter().map(|s| (s - mu).powi(2)).sum::<f64>() / severity.len() as f64).sqrt()
    };
    let severe: Vec<f64> = sims
        .iter()
        .zip(&severity)
        .filter(|(_, &s)| s > 2.0 * sd)
        .map(|(&v, _)| v)
        .collect();
    m.metric("reference_subjects", reference.n as f64);
    m.metric("healthy_mean_similarity", mean(&healthy_sims));
    m.metric("patient_mean_similarity", mean(&sims));
    if !severe.is_empty() {
        m.metric("severe_patient_mean_similarity", mean(&severe));
    }
    if let Ok(t) = kendall_tau(&sims, &severity) {
        m.metric("similarity_severity_tau", t.statistic);
    }
    if let Some(v) = &mse {
        m.metric("patient_mean_image_mse", mean(v));
        if let Ok(t) = kendall_tau(v, &severity) {
            m.metric("image_mse_severity_tau", t.statistic);
        }
    }
    if let Some(v) = &pads {
        m.metric("patient_mean_brain_pad", mean(v));
    }
    m.finish()
}
