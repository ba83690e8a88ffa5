//! Synthetic brain-like phantoms with planted age and disease anatomy, and
//! exponential-hazard survival outcomes for the patient cohort.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Anatomical effect sizes, in units of the half-width of the field of view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Anatomy {
    /// Cortical thickness of a young adult.
    pub cortex_thickness: f64,
    /// Cortical thinning across the full age range.
    pub cortex_age_loss: f64,
    /// Additional local cortical thinning per unit severity.
    pub cortex_severity_loss: f64,
    /// Relative ventricle area growth across the full age range.
    pub ventricle_age_growth: f64,
    /// Relative ventricle area growth per unit severity.
    pub ventricle_severity_growth: f64,
    /// Relative head width increase for sex = 1.
    pub sex_width: f64,
    /// Standard deviation of individual log ventricle-area variation.
    pub ventricle_spread: f64,
    /// Standard deviation of individual cortical thickness variation.
    pub cortex_spread: f64,
    /// Standard deviation of individual relative head-size variation.
    pub head_spread: f64,
}

impl Default for Anatomy {
    fn default() -> Self {
        Self {
            cortex_thickness: 0.16,
            cortex_age_loss: 0.05,
            cortex_severity_loss: 0.03,
            ventricle_age_growth: 1.0,
            ventricle_severity_growth: 1.0,
            sex_width: 0.04,
            ventricle_spread: 0.08,
            cortex_spread: 0.005,
            head_spread: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub image_size: usize,
    pub healthy_count: usize,
    pub patient_count: usize,
    /// Healthy ages are uniform on this range, which bounds every age.
    pub age_range: [f64; 2],
    /// Patient ages are uniform on this sub-range.
    pub patient_age_range: [f64; 2],
    /// Patient severity is uniform on `[0, severity_max]`.
    pub severity_max: f64,
    /// Log-hazard ratio per unit severity.
    pub hazard_coef: f64,
    /// Baseline hazard per day.
    pub baseline_hazard: f64,
    /// Expected fraction of censored patients.
    pub censoring_rate: f64,
    pub noise_sigma: f64,
    pub anatomy: Anatomy,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            healthy_count: 512,
            patient_count: 200,
            age_range: [20.0, 80.0],
            patient_age_range: [45.0, 80.0],
            severity_max: 4.0,
            hazard_coef: 0.8,
            baseline_hazard: 1.0 / 730.0,
            censoring_rate: 0.3,
            noise_sigma: 0.02,
            anatomy: Anatomy::default(),
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("phantom: {m}")));
        if self.image_size < 8 {
            return err(format!("image_size must be at least 8, got {}", self.image_size));
        }
        if self.healthy_count == 0 || self.patient_count == 0 {
            return err("healthy_count and patient_count must be at least 1".into());
        }
        let [lo, hi] = self.age_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return err(format!("age_range {:?} is degenerate", self.age_range));
        }
        let [plo, phi] = self.patient_age_range;
        if !(plo < phi && plo >= lo && phi <= hi) {
            return err(format!(
                "patient_age_range {:?} must be a nondegenerate sub-range of {:?}",
                self.patient_age_range, self.age_range
            ));
        }
        if !(self.severity_max >= 0.0 && self.severity_max.is_finite()) {
            return err(format!("severity_max must be nonnegative, got {}", self.severity_max));
        }
        if !self.hazard_coef.is_finite() {
            return err("hazard_coef must be finite".into());
        }
        if !(self.baseline_hazard > 0.0 && self.baseline_hazard.is_finite()) {
            return err(format!("baseline_hazard must be positive, got {}", self.baseline_hazard));
        }
        if !(0.0..1.0).contains(&self.censoring_rate) {
            return err(format!("censoring_rate must lie in [0, 1), got {}", self.censoring_rate));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return err(format!("noise_sigma must be nonnegative, got {}", self.noise_sigma));
        }
        Ok(())
    }

    fn age_fraction(&self, age: f64) -> f64 {
        let [lo, hi] = self.age_range;
        (age - lo) / (hi - lo)
    }

    /// Rate of the exponential censoring distribution giving the configured
    /// censored fraction in expectation over the severity distribution.
    pub fn censoring_hazard(&self) -> f64 {
        if self.censoring_rate == 0.0 {
            return 0.0;
        }
        let expected = |lc: f64| {
            // Simpson's rule over the uniform severity density.
            let k = 256;
            let h = self.severity_max / k as f64;
            let f = |s: f64| lc / (lc + self.baseline_hazard * (self.hazard_coef * s).exp());
            if h == 0.0 {
                return f(0.0);
            }
            let mut acc = f(0.0) + f(self.severity_max);
            for i in 1..k {
                acc += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            acc * h / 3.0 / self.severity_max
        };
        let (mut lo, mut hi) = (self.baseline_hazard * 1e-9, self.baseline_hazard * 1e9);
        for _ in 0..200 {
            let mid = (lo * hi).sqrt();
            if expected(mid) < self.censoring_rate {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (lo * hi).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cohort {
    Healthy,
    Patient,
}

impl Cohort {
    pub fn as_str(self) -> &'static str {
        match self {
            Cohort::Healthy => "healthy",
            Cohort::Patient => "patient",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub cohort: Cohort,
    pub age: f64,
    pub sex: u8,
    pub severity: f64,
    /// Days from scan to death or censoring; patients only.
    pub duration_days: Option<f64>,
    pub event: Option<bool>,
    /// Row-major `size × size` intensities in `[0, 1]`.
    pub image: Vec<f32>,
}

/// Individual anatomical variation, fixed by the subject's random stream.
#[derive(Clone, Copy, Debug)]
struct Individual {
    head: f64,
    ventricle: f64,
    cortex: f64,
}

impl Individual {
    fn draw(a: &Anatomy, rng: &mut ChaCha8Rng) -> Self {
        let z = |rng: &mut ChaCha8Rng| -> f64 { Normal::new(0.0, 1.0).unwrap().sample(rng) };
        Self {
            head: 1.0 + a.head_spread * z(rng),
            ventricle: (a.ventricle_spread * z(rng)).exp(),
            cortex: a.cortex_spread * z(rng),
        }
    }
}

const SKULL: f64 = 0.95;
const CORTEX: f64 = 0.5;
const WHITE: f64 = 0.8;
const CSF: f64 = 0.1;
const SUPERSAMPLE: usize = 4;

/// Intensity at normalised coordinates `(u, v)` in `[-1, 1]²`.
fn tissue(u: f64, v: f64, cfg: &PhantomConfig, age: f64, severity: f64, sex: u8, ind: Individual) -> f64 {
    let a = &cfg.anatomy;
    let af = cfg.age_fraction(age);
    let width = ind.head * (1.0 + a.sex_width * f64::from(sex));
    let (rx, ry) = (0.78 * width, 0.88 * ind.head);
    let r = ((u / rx).powi(2) + (v / ry).powi(2)).sqrt();
    if r > 1.0 {
        return 0.0;
    }
    let skull = 0.09;
    if r > 1.0 - skull {
        return SKULL;
    }
    // Sulcal CSF widens as the brain shrinks with age.
    let gap = 0.02 + 0.05 * af;
    let brain = 1.0 - skull - gap;
    if r > brain {
        return CSF;
    }
    // Disease thins the cortex over the upper (frontal) arc only.
    let theta = v.atan2(u);
    let local = (theta - std::f64::consts::FRAC_PI_2).cos().max(0.0).powi(2);
    let thickness = (a.cortex_thickness - a.cortex_age_loss * af - a.cortex_severity_loss * severity * local
        + ind.cortex)
        .max(0.02);
    if r > brain - thickness {
        return CORTEX;
    }
    let area = (1.0 + a.ventricle_age_growth * af + a.ventricle_severity_growth * severity) * ind.ventricle;
    let s = area.sqrt();
    let (vx, vy) = (0.055 * s, 0.2 * s);
    for cx in [-0.11 * width, 0.11 * width] {
        if ((u - cx) / vx).powi(2) + ((v + 0.03) / vy).powi(2) <= 1.0 {
            return CSF;
        }
    }
    WHITE
}

fn check_subject(cfg: &PhantomConfig, age: f64, severity: f64, sex: u8) -> Result<()> {
    let [lo, hi] = cfg.age_range;
    if !(age >= lo && age <= hi) {
        return Err(Error::Data(format!("age {age} outside configured range [{lo}, {hi}]")));
    }
    if !(severity >= 0.0 && severity.is_finite()) {
        return Err(Error::Data(format!("severity must be nonnegative, got {severity}")));
    }
    if sex > 1 {
        return Err(Error::Data(format!("sex must be 0 or 1, got {sex}")));
    }
    Ok(())
}

fn render_with(
    cfg: &PhantomConfig,
    age: f64,
    severity: f64,
    sex: u8,
    ind: Individual,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let n = cfg.image_size;
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut image = Vec::with_capacity(n * n);
    let step = 2.0 / n as f64;
    for row in 0..n {
        for col in 0..n {
            let mut acc = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let u = -1.0 + step * (col as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64);
                    // Row 0 is the top of the image.
                    let v = 1.0 - step * (row as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64);
                    acc += tissue(u, v, cfg, age, severity, sex, ind);
                }
            }
            let value = acc / (SUPERSAMPLE * SUPERSAMPLE) as f64 + cfg.noise_sigma * noise.sample(rng);
            image.push(value.clamp(0.0, 1.0) as f32);
        }
    }
    image
}

/// Renders one phantom. The seed fixes the individual anatomy and the pixel
/// noise, so varying only `severity` isolates the disease effect.
pub fn render_phantom(cfg: &PhantomConfig, age: f64, severity: f64, sex: u8, seed: u64) -> Result<Vec<f32>> {
    check_subject(cfg, age, severity, sex)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ind = Individual::draw(&cfg.anatomy, &mut rng);
    Ok(render_with(cfg, age, severity, sex, ind, &mut rng))
}

/// Independent stream for subject `index` of `cohort` under the master seed.
fn subject_rng(seed: u64, cohort: Cohort, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tag = match cohort {
        Cohort::Healthy => 0u64,
        Cohort::Patient => 1u64 << 40,
    };
    rng.set_stream(tag | index as u64);
    rng
}

fn subject(cfg: &PhantomConfig, seed: u64, cohort: Cohort, index: usize, censor_rate: f64) -> SubjectRecord {
    let mut rng = subject_rng(seed, cohort, index);
    let [lo, hi] = match cohort {
        Cohort::Healthy => cfg.age_range,
        Cohort::Patient => cfg.patient_age_range,
    };
    let age = rng.random_range(lo..=hi);
    let sex = u8::from(rng.random_bool(0.5));
    let severity = match cohort {
        Cohort::Healthy => 0.0,
        Cohort::Patient => rng.random_range(0.0..=cfg.severity_max),
    };
    let ind = Individual::draw(&cfg.anatomy, &mut rng);
    let image = render_with(cfg, age, severity, sex, ind, &mut rng);
    let (duration_days, event) = match cohort {
        Cohort::Healthy => (None, None),
        Cohort::Patient => {
            let rate = cfg.baseline_hazard * (cfg.hazard_coef * severity).exp();
            let death: f64 = Exp::new(rate).unwrap().sample(&mut rng);
            let censor = if censor_rate > 0.0 {
                Exp::new(censor_rate).unwrap().sample(&mut rng)
            } else {
                f64::INFINITY
            };
            let observed = death.min(censor);
            // Whole days, so ties occur as they do in registry data.
            (Some(observed.ceil().max(1.0)), Some(death <= censor))
        }
    };
    let prefix = match cohort {
        Cohort::Healthy => "H",
        Cohort::Patient => "P",
    };
    SubjectRecord {
        id: format!("{prefix}{:05}", index + 1),
        cohort,
        age,
        sex,
        severity,
        duration_days,
        event,
        image,
    }
}

/// Healthy and patient cohorts, each ordered by subject id.
pub fn generate_cohorts(cfg: &PhantomConfig, seed: u64) -> Result<(Vec<SubjectRecord>, Vec<SubjectRecord>)> {
    cfg.validate()?;
    let lc = cfg.censoring_hazard();
    let healthy = (0..cfg.healthy_count)
        .map(|i| subject(cfg, seed, Cohort::Healthy, i, lc))
        .collect();
    let patients = (0..cfg.patient_count)
        .map(|i| subject(cfg, seed, Cohort::Patient, i, lc))
        .collect();
    Ok((healthy, patients))
}

/// Dark pixels (below `threshold`) in the central half of the field of view,
/// a proxy for ventricle area.
pub fn ventricle_pixels(image: &[f32], size: usize, threshold: f32) -> usize {
    let (lo, hi) = (size / 4, size - size / 4);
    (lo..hi)
        .flat_map(|r| (lo..hi).map(move |c| (r, c)))
        .filter(|&(r, c)| image[r * size + c] < threshold)
        .count()
}
