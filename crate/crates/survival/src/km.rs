use crate::error::{Result, SurvivalError};

/// Product-limit survival estimate with one step per distinct death time.
#[derive(Clone, Debug, PartialEq)]
pub struct KmCurve {
    pub times: Vec<f64>,
    /// Survival just after each event time.
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub deaths: Vec<usize>,
}

impl KmCurve {
    /// `S(t)`: the survival after the last event time `<= t`, or 1 before the first.
    pub fn survival_at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            1.0
        } else {
            self.survival[k - 1]
        }
    }
}

/// Kaplan–Meier estimator. A death and a censoring at the same time count the
/// censored subject as still at risk for that death.
pub fn km_estimate(durations: &[f64], events: &[bool]) -> Result<KmCurve> {
    if durations.is_empty() {
        return Err(SurvivalError::Input("Kaplan-Meier needs at least one subject".into()));
    }
    if durations.len() != events.len() {
        return Err(SurvivalError::Input(format!(
            "{} durations but {} events",
            durations.len(),
            events.len()
        )));
    }
    if let Some(d) = durations.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
        return Err(SurvivalError::Input(format!("durations must be positive, got {d}")));
    }
    let mut order: Vec<usize> = (0..durations.len()).collect();
    order.sort_by(|&a, &b| durations[a].total_cmp(&durations[b]));
    let mut curve = KmCurve {
        times: Vec::new(),
        survival: Vec::new(),
        at_risk: Vec::new(),
        deaths: Vec::new(),
    };
    let mut s = 1.0;
    let mut at_risk = durations.len();
    let mut i = 0;
    while i < order.len() {
        let t = durations[order[i]];
        let mut j = i;
        let mut d = 0;
        while j < order.len() && durations[order[j]] == t {
            d += usize::from(events[order[j]]);
            j += 1;
        }
        if d > 0 {
            s *= 1.0 - d as f64 / at_risk as f64;
            curve.times.push(t);
            curve.survival.push(s);
            curve.at_risk.push(at_risk);
            curve.deaths.push(d);
        }
        at_risk -= j - i;
        i = j;
    }
    Ok(curve)
}
