//! End-to-end commands: generate, train, score, survival and report.

mod analysis;
mod commands;
mod config;
mod manifest;
mod report;
mod svg;

pub use analysis::{
    dominance_violations, survival, AssociationRow, CoxRow, DistributionRow, KmRow, KsRow, PartialRow,
    ShuffleRow,
};
pub use commands::{generate, score, train, train_age_baseline, HealthyScoreRow, Layout, Log, LossRow, ScoreRow};
pub use config::{DiffusionSection, PipelineConfig, ScoringSection, SurvivalSection, TrainingSection};
pub use manifest::{manifest_path, Artifact, RunManifest, MANIFEST_DIR};
pub use report::{report, summarize, Report, SummaryRow};
pub use svg::{histogram_series, line_chart, step_chart, Series};
