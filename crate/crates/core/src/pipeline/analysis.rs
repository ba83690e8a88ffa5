use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use normdiff_survival::{
    breslow_baseline, cox_fit, default_bins, kendall_tau, km_estimate, ks_two_sample, median_split,
    normalized_mutual_info, pearson, CoxData, HazardRatio, KmCurve, SurvivalRecord,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::commands::{require, HealthyScoreRow, Layout, Log, ScoreRow};
use super::config::PipelineConfig;
use super::manifest::{ManifestBuilder, RunManifest};
use super::svg::{histogram_series, line_chart, step_chart, Series};
use crate::error::{Error, Result};
use crate::io::{read_csv, write_atomic, write_csv, MetadataRow, METADATA_FILE};
use crate::phantom::Cohort;

const COVARIATES: [&str; 3] = ["sex", "age", "score"];

/// A normative score column and the direction in which it signals health.
#[derive(Clone, Copy, Debug, PartialEq)]
struct ScoreKind {
    name: &'static str,
    /// Larger values mean closer to the healthy norm.
    higher_is_healthier: bool,
}

const LATENT: ScoreKind = ScoreKind { name: "latent_similarity", higher_is_healthier: true };
const IMAGE: ScoreKind = ScoreKind { name: "image_mse", higher_is_healthier: false };
const PAD: ScoreKind = ScoreKind { name: "brain_pad", higher_is_healthier: false };

/// A patient with both a score row and an outcome.
#[derive(Clone, Debug)]
struct Joined {
    id: String,
    age: f64,
    sex: u8,
    duration: f64,
    event: bool,
    scores: BTreeMap<&'static str, (f64, f64)>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AssociationRow {
    pub score: String,
    pub n_deceased: usize,
    pub pearson_r: f64,
    pub pearson_p: f64,
    pub kendall_tau: f64,
    pub kendall_p: f64,
    pub nmi: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CoxRow {
    pub score: String,
    pub covariate: String,
    pub coef: f64,
    pub se: f64,
    pub hazard_ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub z: f64,
    pub p: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct KmRow {
    pub score: String,
    pub group: String,
    pub time: f64,
    pub survival: f64,
    pub at_risk: usize,
    pub deaths: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct KsRow {
    pub score: String,
    pub durations: String,
    pub n_high: usize,
    pub n_low: usize,
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PartialRow {
    pub score: String,
    pub quantile: f64,
    pub score_std: f64,
    pub time: f64,
    pub survival: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DistributionRow {
    pub subject_id: String,
    pub group: String,
    pub latent_similarity: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ShuffleRow {
    pub shuffle: usize,
    pub hazard_ratio: f64,
    pub cox_p: f64,
    pub kendall_tau: f64,
}

fn join(scores: Vec<ScoreRow>, meta: Vec<MetadataRow>) -> Result<(Vec<Joined>, Vec<ScoreKind>)> {
    let mut kinds = vec![LATENT];
    if scores.iter().all(|s| s.image_mse.is_some()) && !scores.is_empty() {
        kinds.push(IMAGE);
    }
    if scores.iter().all(|s| s.brain_pad.is_some()) && !scores.is_empty() {
        kinds.push(PAD);
    }
    let mut by_id: HashMap<String, ScoreRow> = HashMap::with_capacity(scores.len());
    for s in scores {
        let id = s.subject_id.clone();
        if by_id.insert(id.clone(), s).is_some() {
            return Err(Error::Data(format!("subject {id} is scored twice")));
        }
    }
    let mut out = Vec::with_capacity(meta.len());
    for m in meta {
        if m.cohort != Cohort::Patient {
            return Err(Error::Data(format!("subject {} in the patient metadata is not a patient", m.subject_id)));
        }
        let s = by_id
            .remove(&m.subject_id)
            .ok_or_else(|| Error::Data(format!("patient {} has no score", m.subject_id)))?;
        let (duration, event) = match (m.duration_days, m.event) {
            (Some(d), Some(e)) => (d, e != 0),
            _ => return Err(Error::Data(format!("patient {} has no survival outcome", m.subject_id))),
        };
        let mut values = BTreeMap::new();
        values.insert(LATENT.name, (s.latent_similarity, s.latent_similarity_std));
        if let (Some(v), Some(z)) = (s.image_mse, s.image_mse_std) {
            values.insert(IMAGE.name, (v, z));
        }
        if let (Some(v), Some(z)) = (s.brain_pad, s.brain_pad_std) {
            values.insert(PAD.name, (v, z));
        }
        out.push(Joined { id: m.subject_id, age: m.age, sex: m.sex, duration, event, scores: values });
    }
    if let Some(id) = by_id.keys().min() {
        return Err(Error::Data(format!("scored subject {id} has no patient metadata")));
    }
    Ok((out, kinds))
}

fn records(patients: &[Joined], kind: ScoreKind, scores: Option<&[f64]>) -> Vec<SurvivalRecord> {
    patients
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let score = scores.map_or(p.scores[kind.name].1, |s| s[i]);
            SurvivalRecord {
                id: p.id.clone(),
                duration: p.duration,
                event: p.event,
                covariates: BTreeMap::from([
                    ("sex".to_string(), f64::from(p.sex)),
                    ("age".to_string(), p.age),
                    ("score".to_string(), score),
                ]),
            }
        })
        .collect()
}

fn km_rows(score: &str, group: &str, curve: &KmCurve) -> Vec<KmRow> {
    curve
        .times
        .iter()
        .enumerate()
        .map(|(i, &t)| KmRow {
            score: score.to_string(),
            group: group.to_string(),
            time: t,
            survival: curve.survival[i],
            at_risk: curve.at_risk[i],
            deaths: curve.deaths[i],
        })
        .collect()
}

/// Event times at which the healthier group's curve lies below the other.
pub fn dominance_violations(healthier: &KmCurve, other: &KmCurve) -> usize {
    let mut times: Vec<f64> = healthier.times.iter().chain(&other.times).copied().collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    times
        .iter()
        .filter(|&&t| healthier.survival_at(t) < other.survival_at(t) - 1e-12)
        .count()
}

fn step_points(curve: &KmCurve) -> Vec<(f64, f64)> {
    let mut pts = vec![(0.0, 1.0)];
    pts.extend(curve.times.iter().copied().zip(curve.survival.iter().copied()));
    pts
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn cox_rows(kind: &str, report: &[HazardRatio]) -> Vec<CoxRow> {
    report
        .iter()
        .map(|h| CoxRow {
            score: kind.to_string(),
            covariate: h.covariate.clone(),
            coef: h.coef,
            se: h.se,
            hazard_ratio: h.hr,
            ci_low: h.ci_low,
            ci_high: h.ci_high,
            z: h.z,
            p: h.p,
        })
        .collect()
}

/// Relates every normative score to patient survival.
pub fn survival(cfg: &PipelineConfig, log: Log<'_>) -> Result<RunManifest> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    let meta_path = layout.patients_dir().join(METADATA_FILE);
    require(&layout.scores(), "score")?;
    require(&meta_path, "generate")?;
    let mut m = ManifestBuilder::start("survival", cfg);
    let scores: Vec<ScoreRow> = read_csv(&layout.scores())?;
    let meta: Vec<MetadataRow> = read_csv(&meta_path)?;
    let (patients, kinds) = join(scores, meta)?;
    let deceased: Vec<&Joined> = patients.iter().filter(|p| p.event).collect();
    m.metric("patients", patients.len() as f64);
    m.metric("deceased", deceased.len() as f64);
    log(&format!("{} patients joined, {} deceased", patients.len(), deceased.len()));

    let mut assoc = Vec::new();
    let mut cox = Vec::new();
    let mut km = Vec::new();
    let mut ks = Vec::new();
    let mut partial = Vec::new();
    let mut km_series = Vec::new();
    let mut partial_series = Vec::new();
    let ids: Vec<String> = patients.iter().map(|p| p.id.clone()).collect();

    for kind in &kinds {
        let name = kind.name;
        let raw: Vec<f64> = patients.iter().map(|p| p.scores[name].0).collect();

        // Correlation with survival time is only meaningful where death was observed.
        let dx: Vec<f64> = deceased.iter().map(|p| p.scores[name].0).collect();
        let dy: Vec<f64> = deceased.iter().map(|p| p.duration).collect();
        let bins = if cfg.survival.nmi_bins == 0 { default_bins(dx.len()) } else { cfg.survival.nmi_bins };
        match (pearson(&dx, &dy), kendall_tau(&dx, &dy), normalized_mutual_info(&dx, &dy, bins)) {
            (Ok(r), Ok(t), Ok(nmi)) => {
                m.metric(&format!("{name}_pearson_r"), r.statistic);
                m.metric(&format!("{name}_kendall_tau"), t.statistic);
                m.metric(&format!("{name}_nmi"), nmi);
                assoc.push(AssociationRow {
                    score: name.to_string(),
                    n_deceased: dx.len(),
                    pearson_r: r.statistic,
                    pearson_p: r.p_value,
                    kendall_tau: t.statistic,
                    kendall_p: t.p_value,
                    nmi,
                });
            }
            (r, t, n) => {
                let why = [r.err(), t.err(), n.err()].into_iter().flatten().next().unwrap();
                m.warn(format!("{name}: association skipped: {why}"));
            }
        }

        let recs = records(&patients, *kind, None);
        match cox_fit(&recs, &COVARIATES) {
            Ok(fit) => {
                let report = fit.report();
                let s = &report[2];
                m.metric(&format!("{name}_cox_hr"), s.hr);
                m.metric(&format!("{name}_cox_p"), s.p);
                log(&format!(
                    "{name}: HR {:.3} [{:.3}, {:.3}] p = {:.4}",
                    s.hr, s.ci_low, s.ci_high, s.p
                ));
                cox.extend(cox_rows(name, &report));

                let data = CoxData::from_records(&recs, &COVARIATES)?;
                let base = breslow_baseline(&data, &fit);
                let mut sorted: Vec<f64> = patients.iter().map(|p| p.scores[name].1).collect();
                sorted.sort_by(f64::total_cmp);
                for &q in &cfg.survival.partial_quantiles {
                    let z = quantile(&sorted, q);
                    let mut row = fit.means.clone();
                    row[2] = z;
                    let curve = base.for_linear_predictor(fit.linear_predictor(&row));
                    if *kind == LATENT {
                        let mut pts = vec![(0.0, 1.0)];
                        pts.extend(base.times.iter().copied().zip(curve.iter().copied()));
                        partial_series.push(Series { label: format!("q = {q}"), points: pts });
                    }
                    partial.extend(base.times.iter().zip(&curve).map(|(&t, &s)| PartialRow {
                        score: name.to_string(),
                        quantile: q,
                        score_std: z,
                        time: t,
                        survival: s,
                    }));
                }
            }
            Err(e) => m.warn(format!("{name}: Cox fit failed: {e}")),
        }

        let pairs: Vec<(String, f64)> = ids.iter().cloned().zip(raw.iter().copied()).collect();
        let split = median_split(&pairs, &ids)?;
        if split.is_degenerate() {
            m.warn(format!("{name}: median split put every patient in one group"));
            continue;
        }
        let group = |idx: &[usize]| -> Result<KmCurve> {
            let d: Vec<f64> = idx.iter().map(|&i| patients[i].duration).collect();
            let e: Vec<bool> = idx.iter().map(|&i| patients[i].event).collect();
            Ok(km_estimate(&d, &e)?)
        };
        let (high, low) = (group(&split.high)?, group(&split.low)?);
        km.extend(km_rows(name, "high", &high));
        km.extend(km_rows(name, "low", &low));
        let violations = if kind.higher_is_healthier {
            dominance_violations(&high, &low)
        } else {
            dominance_violations(&low, &high)
        };
        m.metric(&format!("{name}_km_violations"), violations as f64);
        m.metric(&format!("{name}_km_healthier_dominates"), f64::from(u8::from(violations == 0)));
        if *kind == LATENT {
            km_series.push(Series { label: "high similarity".into(), points: step_points(&high) });
            km_series.push(Series { label: "low similarity".into(), points: step_points(&low) });
        }

        for (variant, only_deaths) in [("all", false), ("deceased", true)] {
            let pick = |idx: &[usize]| -> Vec<f64> {
                idx.iter()
                    .filter(|&&i| !only_deaths || patients[i].event)
                    .map(|&i| patients[i].duration)
                    .collect()
            };
            let (a, b) = (pick(&split.high), pick(&split.low));
            match ks_two_sample(&a, &b) {
                Ok(t) => {
                    m.metric(&format!("{name}_ks_{variant}_p"), t.p_value);
                    ks.push(KsRow {
                        score: name.to_string(),
                        durations: variant.to_string(),
                        n_high: a.len(),
                        n_low: b.len(),
                        statistic: t.statistic,
                        p_value: t.p_value,
                    });
                }
                Err(e) => m.warn(format!("{name}: KS on {variant} durations skipped: {e}")),
            }
        }
    }

    let shuffles = shuffle_control(cfg, &patients, &mut m)?;

    let dir = layout.survival_dir();
    let mut write = |file: &str, bytes: Result<()>| -> Result<()> {
        bytes?;
        m.artifact(&dir.join(file))
    };
    write("association.csv", write_csv(&dir.join("association.csv"), &assoc))?;
    write("cox.csv", write_csv(&dir.join("cox.csv"), &cox))?;
    write("km_split.csv", write_csv(&dir.join("km_split.csv"), &km))?;
    write("ks_split.csv", write_csv(&dir.join("ks_split.csv"), &ks))?;
    write("km_partial.csv", write_csv(&dir.join("km_partial.csv"), &partial))?;
    write("shuffle_control.csv", write_csv(&dir.join("shuffle_control.csv"), &shuffles))?;

    let dist = distributions(&layout, &patients)?;
    write("score_distributions.csv", write_csv(&dir.join("score_distributions.csv"), &dist))?;
    let groups: Vec<(String, Vec<f64>)> = ["healthy", "patient"]
        .iter()
        .map(|g| {
            let v = dist.iter().filter(|r| r.group == *g).map(|r| r.latent_similarity).collect();
            (g.to_string(), v)
        })
        .filter(|(_, v): &(String, Vec<f64>)| !v.is_empty())
        .collect();
    let svgs = [
        ("km_split.svg", step_chart("Survival by median latent similarity", "days", "survival", &km_series)),
        ("km_partial.svg", step_chart("Partial effect of latent similarity", "days", "survival", &partial_series)),
        (
            "score_distributions.svg",
            line_chart("Latent similarity to the healthy mean", "cosine similarity", "density", &histogram_series(&groups, 20)),
        ),
    ];
    for (file, svg) in svgs {
        write(file, write_atomic(&dir.join(file), svg.as_bytes()))?;
    }
    m.finish()
}

fn distributions(layout: &Layout, patients: &[Joined]) -> Result<Vec<DistributionRow>> {
    let mut rows = Vec::new();
    let healthy_path = layout.healthy_scores();
    if Path::new(&healthy_path).exists() {
        let healthy: Vec<HealthyScoreRow> = read_csv(&healthy_path)?;
        rows.extend(healthy.into_iter().map(|h| DistributionRow {
            subject_id: h.subject_id,
            group: "healthy".into(),
            latent_similarity: h.latent_similarity,
        }));
    }
    rows.extend(patients.iter().map(|p| DistributionRow {
        subject_id: p.id.clone(),
        group: "patient".into(),
        latent_similarity: p.scores[LATENT.name].0,
    }));
    Ok(rows)
}

/// Refits the latent-score Cox model and Kendall tau after permuting scores across patients.
fn shuffle_control(cfg: &PipelineConfig, patients: &[Joined], m: &mut ManifestBuilder) -> Result<Vec<ShuffleRow>> {
    let n = cfg.survival.shuffles;
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed("shuffle"));
    let mut scores: Vec<f64> = patients.iter().map(|p| p.scores[LATENT.name].1).collect();
    let mut rows = Vec::with_capacity(n);
    for k in 0..n {
        scores.shuffle(&mut rng);
        let fit = match cox_fit(&records(patients, LATENT, Some(&scores)), &COVARIATES) {
            Ok(f) => f,
            Err(e) => {
                m.warn(format!("shuffle {k}: Cox fit failed: {e}"));
                continue;
            }
        };
        let s = &fit.report()[2];
        let (dx, dy): (Vec<f64>, Vec<f64>) = patients
            .iter()
            .zip(&scores)
            .filter(|(p, _)| p.event)
            .map(|(p, &z)| (z, p.duration))
            .unzip();
        let tau = kendall_tau(&dx, &dy).map_or(f64::NAN, |t| t.statistic);
        rows.push(ShuffleRow { shuffle: k, hazard_ratio: s.hr, cox_p: s.p, kendall_tau: tau });
    }
    if !rows.is_empty() {
        let frac = |f: &dyn Fn(&ShuffleRow) -> bool| rows.iter().filter(|r| f(r)).count() as f64 / rows.len() as f64;
        m.metric("shuffle_count", rows.len() as f64);
        m.metric("shuffle_cox_p_above_005", frac(&|r| r.cox_p > 0.05));
        m.metric("shuffle_abs_tau_below_015", frac(&|r| r.kendall_tau.abs() < 0.15));
    }
    Ok(rows)
}
