//! Two-sample and paired association tests.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Result, SurvivalError};

#[derive(Clone, Debug, PartialEq)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    /// Size of the second sample for two-sample tests.
    pub m: Option<usize>,
}

fn check_finite(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(SurvivalError::Input(format!("{name} contains a non-finite value")));
    }
    Ok(())
}

fn check_paired(x: &[f64], y: &[f64], min: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(SurvivalError::Input(format!(
            "paired samples of lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < min {
        return Err(SurvivalError::Input(format!(
            "need at least {min} observations, got {}",
            x.len()
        )));
    }
    check_finite("x", x)?;
    check_finite("y", y)
}

/// Survival function of the Kolmogorov distribution, `P(K > lambda)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.0 {
        // The alternating series converges slowly here; use the Jacobi-theta
        // form of the CDF instead.
        let c = std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let mut cdf = 0.0;
        for k in 1.. {
            let term = (-((2 * k - 1) as f64).powi(2) * c).exp();
            cdf += term;
            if term < 1e-16 {
                break;
            }
        }
        cdf *= (2.0 * std::f64::consts::PI).sqrt() / lambda;
        return (1.0 - cdf).clamp(0.0, 1.0);
    }
    let mut p = 0.0;
    for k in 1.. {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        p += if k % 2 == 1 { term } else { -term };
        if term < 1e-12 {
            break;
        }
    }
    (2.0 * p).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov–Smirnov test with the asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.is_empty() || b.is_empty() {
        return Err(SurvivalError::Input("KS test needs two non-empty samples".into()));
    }
    check_finite("a", a)?;
    check_finite("b", b)?;
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let (n, m) = (sa.len(), sb.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let t = sa[i].min(sb[j]);
        while i < n && sa[i] <= t {
            i += 1;
        }
        while j < m && sb[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    Ok(TestResult {
        statistic: d,
        p_value: kolmogorov_sf(ne.sqrt() * d),
        n,
        m: Some(m),
    })
}

/// Pearson correlation with a two-sided Student-t p-value.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<TestResult> {
    check_paired(x, y, 3)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(SurvivalError::Degenerate(
            "Pearson correlation of a constant sample".into(),
        ));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = n - 2.0;
    let p = if r.abs() == 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0)
    };
    Ok(TestResult {
        statistic: r,
        p_value: p,
        n: x.len(),
        m: None,
    })
}

/// Sizes of runs of equal values.
fn tie_groups(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let mut out = Vec::new();
    let mut i = 0;
    while i < s.len() {
        let mut j = i + 1;
        while j < s.len() && s[j] == s[i] {
            j += 1;
        }
        if j - i > 1 {
            out.push((j - i) as f64);
        }
        i = j;
    }
    out
}

/// Kendall's tau-b with a tie-adjusted normal approximation for the p-value.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<TestResult> {
    check_paired(x, y, 2)?;
    let n = x.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dx = (x[i] - x[j]).partial_cmp(&0.0).unwrap() as i8;
            let dy = (y[i] - y[j]).partial_cmp(&0.0).unwrap() as i8;
            s += f64::from(dx * dy);
        }
    }
    let nf = n as f64;
    let n0 = nf * (nf - 1.0) / 2.0;
    let tx = tie_groups(x);
    let ty = tie_groups(y);
    let n1: f64 = tx.iter().map(|t| t * (t - 1.0) / 2.0).sum();
    let n2: f64 = ty.iter().map(|t| t * (t - 1.0) / 2.0).sum();
    let denom = ((n0 - n1) * (n0 - n2)).sqrt();
    if denom == 0.0 {
        return Err(SurvivalError::Degenerate(
            "Kendall's tau is undefined when a sample is entirely tied".into(),
        ));
    }
    let tau = (s / denom).clamp(-1.0, 1.0);
    let v0 = nf * (nf - 1.0) * (2.0 * nf + 5.0);
    let vt: f64 = tx.iter().map(|t| t * (t - 1.0) * (2.0 * t + 5.0)).sum();
    let vu: f64 = ty.iter().map(|t| t * (t - 1.0) * (2.0 * t + 5.0)).sum();
    let t1: f64 = tx.iter().map(|t| t * (t - 1.0)).sum();
    let u1: f64 = ty.iter().map(|t| t * (t - 1.0)).sum();
    let t2: f64 = tx.iter().map(|t| t * (t - 1.0) * (t - 2.0)).sum();
    let u2: f64 = ty.iter().map(|t| t * (t - 1.0) * (t - 2.0)).sum();
    let mut var = (v0 - vt - vu) / 18.0 + t1 * u1 / (2.0 * nf * (nf - 1.0));
    if n > 2 {
        var += t2 * u2 / (9.0 * nf * (nf - 1.0) * (nf - 2.0));
    }
    let p = if var > 0.0 {
        let z = s / var.sqrt();
        (2.0 * Normal::standard().sf(z.abs())).clamp(0.0, 1.0)
    } else {
        1.0
    };
    Ok(TestResult {
        statistic: tau,
        p_value: p,
        n,
        m: None,
    })
}

/// Equal-frequency bin labels: sorted ranks split into `bins` blocks, with
/// tied values sharing the bin of their first rank.
pub fn equal_frequency_bins(v: &[f64], bins: usize) -> Vec<usize> {
    let n = v.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut labels = vec![0; n];
    let mut first_rank = 0;
    for (rank, &i) in order.iter().enumerate() {
        if rank > 0 && v[i] != v[order[rank - 1]] {
            first_rank = rank;
        }
        labels[i] = first_rank * bins / n;
    }
    labels
}

/// `I(X;Y)/√(H(X)H(Y))` from a contingency table of counts, natural logs.
pub fn nmi_from_counts(counts: &[Vec<usize>]) -> Result<f64> {
    let total: usize = counts.iter().flatten().sum();
    if total == 0 {
        return Err(SurvivalError::Input("contingency table is empty".into()));
    }
    let cols = counts.iter().map(Vec::len).max().unwrap_or(0);
    let nt = total as f64;
    let rows: Vec<f64> = counts.iter().map(|r| r.iter().sum::<usize>() as f64).collect();
    let colsum: Vec<f64> = (0..cols)
        .map(|j| counts.iter().map(|r| r.get(j).copied().unwrap_or(0)).sum::<usize>() as f64)
        .collect();
    let entropy = |m: &[f64]| -> f64 {
        m.iter()
            .filter(|&&c| c > 0.0)
            .map(|&c| -(c / nt) * (c / nt).ln())
            .sum()
    };
    let (hx, hy) = (entropy(&rows), entropy(&colsum));
    if hx == 0.0 || hy == 0.0 {
        return Err(SurvivalError::Degenerate(
            "normalised mutual information needs both variables to vary".into(),
        ));
    }
    let mut mi = 0.0;
    for (i, r) in counts.iter().enumerate() {
        for (j, &c) in r.iter().enumerate() {
            if c > 0 {
                let p = c as f64 / nt;
                mi += p * (p * nt * nt / (rows[i] * colsum[j])).ln();
            }
        }
    }
    Ok((mi / (hx * hy).sqrt()).clamp(0.0, 1.0))
}

/// Normalised mutual information after equal-frequency discretisation.
pub fn normalized_mutual_info(x: &[f64], y: &[f64], bins: usize) -> Result<f64> {
    check_paired(x, y, 1)?;
    if bins == 0 {
        return Err(SurvivalError::Input("bins must be positive".into()));
    }
    if x.len() < bins {
        return Err(SurvivalError::Input(format!(
            "{} observations is fewer than {bins} bins",
            x.len()
        )));
    }
    let bx = equal_frequency_bins(x, bins);
    let by = equal_frequency_bins(y, bins);
    let mut counts = vec![vec![0usize; bins]; bins];
    for (i, j) in bx.into_iter().zip(by) {
        counts[i][j] += 1;
    }
    nmi_from_counts(&counts)
}

/// Default bin count `⌊√n⌋`, at least 1.
pub fn default_bins(n: usize) -> usize {
    ((n as f64).sqrt().floor() as usize).max(1)
}
