use std::collections::HashMap;

use crate::error::{Result, SurvivalError};

/// Record indices on either side of the median score.
#[derive(Clone, Debug, PartialEq)]
pub struct MedianSplit {
    pub median: f64,
    /// Scores `<= median`.
    pub low: Vec<usize>,
    /// Scores `> median`.
    pub high: Vec<usize>,
}

impl MedianSplit {
    /// Every subject landed in one group.
    pub fn is_degenerate(&self) -> bool {
        self.low.is_empty() || self.high.is_empty()
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Splits `record_ids` by the median of their scores, joined on subject id.
pub fn median_split(scores: &[(String, f64)], record_ids: &[String]) -> Result<MedianSplit> {
    if record_ids.len() < 2 {
        return Err(SurvivalError::Input(format!(
            "median split needs at least 2 subjects, got {}",
            record_ids.len()
        )));
    }
    let by_id: HashMap<&str, f64> = scores.iter().map(|(id, s)| (id.as_str(), *s)).collect();
    if by_id.len() != scores.len() {
        return Err(SurvivalError::Input("duplicate subject id among scores".into()));
    }
    if scores.len() != record_ids.len() {
        return Err(SurvivalError::Input(format!(
            "{} scores for {} records",
            scores.len(),
            record_ids.len()
        )));
    }
    let aligned = record_ids
        .iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| SurvivalError::Input(format!("no score for subject {id}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    if aligned.iter().any(|s| !s.is_finite()) {
        return Err(SurvivalError::Input("non-finite score".into()));
    }
    let m = median(&aligned);
    let (low, high) = (0..aligned.len()).partition(|&i| aligned[i] <= m);
    Ok(MedianSplit {
        median: m,
        low,
        high,
    })
}
