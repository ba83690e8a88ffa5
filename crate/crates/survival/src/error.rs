use thiserror::Error;

#[derive(Debug, Error)]
pub enum SurvivalError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("collinear covariates: {}", .0.join(", "))]
    Collinear(Vec<String>),
    #[error("perfect separation on covariate {covariate} (|b| = {magnitude:.1})")]
    Separation { covariate: String, magnitude: f64 },
    #[error("no convergence after {iterations} iterations; log-likelihood trace {trace:?}")]
    Divergence { iterations: usize, trace: Vec<f64> },
    #[error("degenerate data: {0}")]
    Degenerate(String),
}

impl SurvivalError {
    /// Failures of the optimiser or of the numerical conditioning of the data,
    /// as opposed to malformed input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Self::Collinear(_) | Self::Separation { .. } | Self::Divergence { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, SurvivalError>;
