//! Cox proportional-hazards regression with Efron's tie correction.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Result, SurvivalError};

/// One subject: time to death or censoring, and named covariates.
#[derive(Clone, Debug, PartialEq)]
pub struct SurvivalRecord {
    pub id: String,
    /// Days from scan to death or censoring; strictly positive.
    pub duration: f64,
    /// `true` when death was observed.
    pub event: bool,
    pub covariates: BTreeMap<String, f64>,
}

/// Durations, events and a row-major design matrix, validated.
#[derive(Clone, Debug)]
pub struct CoxData {
    pub durations: Vec<f64>,
    pub events: Vec<bool>,
    /// `n` rows of `p` covariates.
    pub x: Vec<Vec<f64>>,
    pub names: Vec<String>,
}

impl CoxData {
    pub fn new(durations: Vec<f64>, events: Vec<bool>, x: Vec<Vec<f64>>, names: Vec<String>) -> Result<Self> {
        let n = durations.len();
        if events.len() != n || x.len() != n {
            return Err(SurvivalError::Input(format!(
                "{n} durations, {} events and {} covariate rows",
                events.len(),
                x.len()
            )));
        }
        if names.is_empty() {
            return Err(SurvivalError::Input("at least one covariate is required".into()));
        }
        if let Some(d) = durations.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
            return Err(SurvivalError::Input(format!("durations must be positive, got {d}")));
        }
        for (i, row) in x.iter().enumerate() {
            if row.len() != names.len() {
                return Err(SurvivalError::Input(format!(
                    "row {i} has {} covariates, expected {}",
                    row.len(),
                    names.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(SurvivalError::Input(format!("row {i} has a non-finite covariate")));
            }
        }
        Ok(Self {
            durations,
            events,
            x,
            names,
        })
    }

    pub fn from_records(records: &[SurvivalRecord], names: &[&str]) -> Result<Self> {
        let mut x = Vec::with_capacity(records.len());
        for r in records {
            let row = names
                .iter()
                .map(|&name| {
                    r.covariates.get(name).copied().ok_or_else(|| {
                        SurvivalError::Input(format!("subject {} lacks covariate {name}", r.id))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            x.push(row);
        }
        Self::new(
            records.iter().map(|r| r.duration).collect(),
            records.iter().map(|r| r.event).collect(),
            x,
            names.iter().map(|s| s.to_string()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.durations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.durations.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    fn column_means(&self) -> Vec<f64> {
        let n = self.len() as f64;
        (0..self.dim())
            .map(|j| self.x.iter().map(|r| r[j]).sum::<f64>() / n)
            .collect()
    }
}

/// Partial log-likelihood with gradient and Hessian at `beta`.
struct Evaluation {
    ll: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

/// Subjects grouped by distinct event time, latest first: `(risk_start, deaths)`
/// where the risk set is every subject at sorted position `>= risk_start`.
struct Layout {
    order: Vec<usize>,
    groups: Vec<(usize, Vec<usize>)>,
}

impl Layout {
    fn new(data: &CoxData) -> Self {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.sort_by(|&a, &b| data.durations[a].total_cmp(&data.durations[b]));
        let mut groups = Vec::new();
        let mut i = 0;
        while i < order.len() {
            let t = data.durations[order[i]];
            let mut j = i;
            let mut deaths = Vec::new();
            while j < order.len() && data.durations[order[j]] == t {
                if data.events[order[j]] {
                    deaths.push(order[j]);
                }
                j += 1;
            }
            if !deaths.is_empty() {
                groups.push((i, deaths));
            }
            i = j;
        }
        Self { order, groups }
    }
}

fn evaluate(xc: &[DVector<f64>], layout: &Layout, beta: &DVector<f64>) -> Evaluation {
    let p = beta.len();
    let eta: Vec<f64> = xc.iter().map(|x| x.dot(beta)).collect();
    // Weights are shifted by the largest linear predictor so extreme
    // coefficients underflow gracefully instead of overflowing.
    let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = eta.iter().map(|e| (e - shift).exp()).collect();
    let mut ll = 0.0;
    let mut grad = DVector::zeros(p);
    let mut hess = DMatrix::zeros(p, p);

    // Accumulate risk-set sums from the latest time backwards.
    let mut s0 = 0.0;
    let mut s1 = DVector::zeros(p);
    let mut s2 = DMatrix::zeros(p, p);
    let mut cursor = layout.order.len();
    for (start, deaths) in layout.groups.iter().rev() {
        while cursor > *start {
            cursor -= 1;
            let i = layout.order[cursor];
            s0 += w[i];
            s1.axpy(w[i], &xc[i], 1.0);
            s2.ger(w[i], &xc[i], &xc[i], 1.0);
        }
        let mut t0 = 0.0;
        let mut t1 = DVector::zeros(p);
        let mut t2 = DMatrix::zeros(p, p);
        for &i in deaths {
            ll += eta[i];
            grad += &xc[i];
            t0 += w[i];
            t1.axpy(w[i], &xc[i], 1.0);
            t2.ger(w[i], &xc[i], &xc[i], 1.0);
        }
        let d = deaths.len() as f64;
        for l in 0..deaths.len() {
            let f = l as f64 / d;
            let a0 = s0 - f * t0;
            let a1 = &s1 - &t1 * f;
            let a2 = &s2 - &t2 * f;
            ll -= a0.ln() + shift;
            grad -= &a1 / a0;
            hess -= &a2 / a0 - (&a1 * a1.transpose()) / (a0 * a0);
        }
    }
    Evaluation { ll, grad, hess }
}

/// Efron partial log-likelihood at `beta` (covariates used as given).
pub fn partial_log_likelihood(data: &CoxData, beta: &[f64]) -> f64 {
    let xc: Vec<DVector<f64>> = data.x.iter().map(|r| DVector::from_row_slice(r)).collect();
    evaluate(&xc, &Layout::new(data), &DVector::from_row_slice(beta)).ll
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoxFit {
    pub names: Vec<String>,
    pub coef: Vec<f64>,
    /// Inverse observed information at the optimum.
    pub covariance: Vec<Vec<f64>>,
    pub log_likelihood: f64,
    pub null_log_likelihood: f64,
    pub iterations: usize,
    /// Largest absolute score component at the optimum.
    pub gradient_norm: f64,
    /// Covariate means subtracted before fitting; linear predictors are relative to them.
    pub means: Vec<f64>,
}

impl CoxFit {
    pub fn se(&self) -> Vec<f64> {
        (0..self.coef.len())
            .map(|i| self.covariance[i][i].max(0.0).sqrt())
            .collect()
    }

    /// `b·(x − mean)` for one covariate row.
    pub fn linear_predictor(&self, row: &[f64]) -> f64 {
        row.iter()
            .zip(&self.means)
            .zip(&self.coef)
            .map(|((x, m), b)| (x - m) * b)
            .sum()
    }

    pub fn report(&self) -> Vec<HazardRatio> {
        self.names
            .iter()
            .zip(&self.coef)
            .zip(self.se())
            .map(|((name, &b), se)| HazardRatio::from_coef(name, b, se))
            .collect()
    }
}

/// Hazard ratio with a 95% Wald interval and two-sided Wald p-value.
#[derive(Clone, Debug, PartialEq)]
pub struct HazardRatio {
    pub covariate: String,
    pub coef: f64,
    pub se: f64,
    pub hr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub z: f64,
    pub p: f64,
}

pub const Z_95: f64 = 1.96;

impl HazardRatio {
    pub fn from_coef(covariate: &str, coef: f64, se: f64) -> Self {
        let z = if se > 0.0 {
            coef / se
        } else if coef == 0.0 {
            0.0
        } else {
            coef.signum() * f64::INFINITY
        };
        let normal = Normal::standard();
        let p = (2.0 * normal.sf(z.abs())).clamp(0.0, 1.0);
        Self {
            covariate: covariate.to_string(),
            coef,
            se,
            hr: coef.exp(),
            ci_low: (coef - Z_95 * se).exp(),
            ci_high: (coef + Z_95 * se).exp(),
            z,
            p,
        }
    }
}

pub fn hazard_ratio_report(fit: &CoxFit) -> Vec<HazardRatio> {
    fit.report()
}

/// Names involved in exact linear dependence among centred covariate columns.
fn collinear_columns(data: &CoxData, means: &[f64]) -> Option<Vec<String>> {
    let n = data.len();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut basis_cols: Vec<usize> = Vec::new();
    for j in 0..data.dim() {
        let col = DVector::from_iterator(n, data.x.iter().map(|r| r[j] - means[j]));
        let scale = col.norm();
        if scale == 0.0 || !scale.is_finite() {
            return Some(vec![data.names[j].clone()]);
        }
        let mut resid = col.clone();
        let mut involved = Vec::new();
        for (q, &k) in basis.iter().zip(&basis_cols) {
            let c = resid.dot(q);
            if c.abs() > 1e-12 * scale {
                involved.push(k);
            }
            resid.axpy(-c, q, 1.0);
        }
        let r = resid.norm();
        if r <= 1e-10 * scale {
            let mut names: Vec<String> = involved.iter().map(|&k| data.names[k].clone()).collect();
            names.push(data.names[j].clone());
            return Some(names);
        }
        basis.push(resid / r);
        basis_cols.push(j);
    }
    None
}

pub const MAX_ITERATIONS: usize = 100;
/// Largest coefficient magnitude, in units of linear predictor per covariate
/// standard deviation, accepted as finite.
pub const SEPARATION_BOUND: f64 = 50.0;

/// Newton–Raphson from `b = 0` with step halving.
pub fn cox_fit_data(data: &CoxData) -> Result<CoxFit> {
    let events = data.events.iter().filter(|&&e| e).count();
    if events < 2 {
        return Err(SurvivalError::Input(format!(
            "Cox regression needs at least 2 events, got {events}"
        )));
    }
    let means = data.column_means();
    if let Some(names) = collinear_columns(data, &means) {
        return Err(SurvivalError::Collinear(names));
    }
    let xc: Vec<DVector<f64>> = data
        .x
        .iter()
        .map(|r| DVector::from_iterator(r.len(), r.iter().zip(&means).map(|(x, m)| x - m)))
        .collect();
    let layout = Layout::new(data);
    let p = data.dim();
    // Separation is judged on the linear-predictor scale, so covariates in
    // large units (age in years) are not mistaken for diverging ones.
    let spread: Vec<f64> = (0..p)
        .map(|j| (xc.iter().map(|x| x[j] * x[j]).sum::<f64>() / xc.len() as f64).sqrt())
        .collect();
    let mut beta = DVector::zeros(p);
    let mut cur = evaluate(&xc, &layout, &beta);
    let null_ll = cur.ll;
    let mut trace = vec![cur.ll];
    let mut iterations = 0;
    loop {
        if cur.grad.amax() < 1e-7 {
            break;
        }
        if iterations == MAX_ITERATIONS {
            return Err(SurvivalError::Divergence { iterations, trace });
        }
        iterations += 1;
        let info = -cur.hess.clone();
        let step = match info.clone().cholesky() {
            Some(ch) => ch.solve(&cur.grad),
            None => return Err(SurvivalError::Collinear(data.names.clone())),
        };
        let mut scale = 1.0;
        let mut next_beta = &beta + &step;
        let mut next = evaluate(&xc, &layout, &next_beta);
        let mut halvings = 0;
        while !(next.ll.is_finite() && next.ll >= cur.ll) && halvings < 40 {
            scale *= 0.5;
            halvings += 1;
            next_beta = &beta + &step * scale;
            next = evaluate(&xc, &layout, &next_beta);
        }
        if !next.ll.is_finite() {
            return Err(SurvivalError::Divergence { iterations, trace });
        }
        let delta = next.ll - cur.ll;
        beta = next_beta;
        cur = next;
        trace.push(cur.ll);
        if let Some(j) = (0..p).find(|&j| beta[j].abs() * spread[j] > SEPARATION_BOUND) {
            return Err(SurvivalError::Separation {
                covariate: data.names[j].clone(),
                magnitude: beta[j].abs(),
            });
        }
        if delta.abs() < 1e-9 {
            break;
        }
    }
    // The stopping rules fire long before a diverging coefficient passes the
    // bound, so probe beyond it: an interior optimum loses likelihood there.
    for j in 0..p {
        let mut probe = beta.clone();
        let dir = if beta[j] < 0.0 { -1.0 } else { 1.0 };
        probe[j] += dir * SEPARATION_BOUND / spread[j];
        let far = evaluate(&xc, &layout, &probe).ll;
        if far.is_finite() && far >= cur.ll - 1e-12 {
            return Err(SurvivalError::Separation {
                covariate: data.names[j].clone(),
                magnitude: probe[j].abs(),
            });
        }
    }
    let info = -cur.hess.clone();
    let cov = info
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| SurvivalError::Collinear(data.names.clone()))?;
    Ok(CoxFit {
        names: data.names.clone(),
        coef: beta.iter().copied().collect(),
        covariance: (0..p).map(|i| (0..p).map(|j| cov[(i, j)]).collect()).collect(),
        log_likelihood: cur.ll,
        null_log_likelihood: null_ll,
        iterations,
        gradient_norm: cur.grad.amax(),
        means,
    })
}

/// Fits a Cox model on the named covariates of `records`.
pub fn cox_fit(records: &[SurvivalRecord], covariate_names: &[&str]) -> Result<CoxFit> {
    cox_fit_data(&CoxData::from_records(records, covariate_names)?)
}

/// Breslow estimate of the baseline survival at each distinct event time,
/// for subjects with linear predictor 0 (covariates at the fitted means).
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineSurvival {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
}

impl BaselineSurvival {
    /// `S₀(t)^{exp(lp)}` at every baseline time.
    pub fn for_linear_predictor(&self, lp: f64) -> Vec<f64> {
        let k = lp.exp();
        self.survival.iter().map(|s| s.powf(k)).collect()
    }
}

pub fn breslow_baseline(data: &CoxData, fit: &CoxFit) -> BaselineSurvival {
    let layout = Layout::new(data);
    let w: Vec<f64> = data.x.iter().map(|r| fit.linear_predictor(r).exp()).collect();
    let mut times = Vec::with_capacity(layout.groups.len());
    let mut hazards = Vec::with_capacity(layout.groups.len());
    let mut risk = 0.0;
    let mut cursor = layout.order.len();
    for (start, deaths) in layout.groups.iter().rev() {
        while cursor > *start {
            cursor -= 1;
            risk += w[layout.order[cursor]];
        }
        times.push(data.durations[deaths[0]]);
        hazards.push(deaths.len() as f64 / risk);
    }
    times.reverse();
    hazards.reverse();
    let mut cum = 0.0;
    let survival = hazards
        .iter()
        .map(|h| {
            cum += h;
            (-cum).exp()
        })
        .collect();
    BaselineSurvival { times, survival }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn efron_matches_breslow_without_ties() {
        let data = CoxData::new(
            vec![1.0, 2.0, 3.0],
            vec![true, true, false],
            vec![vec![0.5], vec![-1.0], vec![2.0]],
            vec!["x".into()],
        )
        .unwrap();
        let b = 0.3;
        let e: Vec<f64> = data.x.iter().map(|r| (b * r[0]).exp()).collect();
        let breslow = b * 0.5 - (e[0] + e[1] + e[2]).ln() + b * -1.0 - (e[1] + e[2]).ln();
        approx::assert_relative_eq!(partial_log_likelihood(&data, &[b]), breslow, epsilon = 1e-12);
    }
}
