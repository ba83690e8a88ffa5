use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::commands::Log;
use super::config::PipelineConfig;
use super::manifest::{ManifestBuilder, RunManifest, MANIFEST_DIR};
use crate::error::{Error, Result};
use crate::io::{csv_bytes, write_atomic};

/// Summary of one metric across every manifest that reports it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub command: String,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<SummaryRow>,
    pub manifests: Vec<PathBuf>,
    pub skipped: Vec<String>,
}

/// Manifest files named directly, or found in a run directory.
fn expand(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for input in inputs {
        if !input.is_dir() {
            out.push(input.clone());
            continue;
        }
        let nested = input.join(MANIFEST_DIR);
        let dir = if nested.is_dir() { nested } else { input.clone() };
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut found: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        found.sort();
        out.extend(found);
    }
    Ok(out)
}

pub fn summarize(manifests: &[RunManifest]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
    for m in manifests {
        for (k, &v) in &m.metrics {
            groups.entry((m.command.as_str(), k.as_str())).or_default().push(v);
        }
    }
    groups
        .into_iter()
        .map(|((command, metric), v)| {
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let sd = if n > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            SummaryRow {
                command: command.to_string(),
                metric: metric.to_string(),
                n,
                mean,
                sd,
                min: v.iter().copied().fold(f64::INFINITY, f64::min),
                max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

fn markdown(report: &Report) -> String {
    let mut s = String::from("# Run summary\n\n");
    let _ = writeln!(s, "Manifests read: {}\n", report.manifests.len());
    s.push_str("| command | metric | n | mean | sd | min | max |\n");
    s.push_str("|---|---|---:|---:|---:|---:|---:|\n");
    for r in &report.rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:.6} | {:.6} | {:.6} | {:.6} |",
            r.command, r.metric, r.n, r.mean, r.sd, r.min, r.max
        );
    }
    if !report.skipped.is_empty() {
        s.push_str("\n## Skipped\n\n");
        for w in &report.skipped {
            let _ = writeln!(s, "- {w}");
        }
    }
    s
}

/// Collates manifests into `report.md` and `report.csv` under the output directory.
///
/// Unreadable manifests are skipped with a warning; at least one must be valid.
/// With no inputs the configured output directory is searched.
pub fn report(cfg: &PipelineConfig, inputs: &[PathBuf], log: Log<'_>) -> Result<Report> {
    let inputs = if inputs.is_empty() { vec![cfg.out_dir.clone()] } else { inputs.to_vec() };
    let mut manifests = Vec::new();
    let mut used = Vec::new();
    let mut skipped = Vec::new();
    for path in expand(&inputs)? {
        match RunManifest::load(&path) {
            Ok(m) if m.command == "report" => {}
            Ok(m) => {
                manifests.push(m);
                used.push(path);
            }
            Err(e) => {
                let msg = format!("skipped {}: {e}", path.display());
                log(&msg);
                skipped.push(msg);
            }
        }
    }
    if manifests.is_empty() {
        return Err(Error::Data(format!(
            "no valid manifests among {} input(s)",
            inputs.len()
        )));
    }
    let report = Report { rows: summarize(&manifests), manifests: used, skipped };
    let csv_path = cfg.out_dir.join("report.csv");
    let md_path = cfg.out_dir.join("report.md");
    write_atomic(&csv_path, &csv_bytes(&csv_path, &report.rows)?)?;
    write_atomic(&md_path, markdown(&report).as_bytes())?;

    let mut m = ManifestBuilder::start("report", cfg);
    m.artifact(&csv_path)?;
    m.artifact(&md_path)?;
    m.metric("manifests", report.manifests.len() as f64);
    m.metric("skipped", report.skipped.len() as f64);
    for w in &report.skipped {
        m.warn(w.clone());
    }
    m.finish()?;
    log(&format!(
        "summarised {} manifest(s) into {}",
        report.manifests.len(),
        md_path.display()
    ));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(command: &str, v: f64) -> RunManifest {
        RunManifest {
            command: command.into(),
            tool_version: "0".into(),
            config_digest: String::new(),
            seed: 0,
            started_at: 0,
            finished_at: 0,
            artifacts: vec![],
            metrics: BTreeMap::from([("x".to_string(), v)]),
            warnings: vec![],
        }
    }

    #[test]
    fn single_manifest_summary_equals_metrics() {
        let rows = summarize(&[manifest("train", 0.25)]);
        assert_eq!(rows.len(), 1);
        let r = &rows[0];
        assert_eq!((r.n, r.mean, r.sd, r.min, r.max), (1, 0.25, 0.0, 0.25, 0.25));
    }

    #[test]
    fn spread_over_seeds() {
        let rows = summarize(&[manifest("score", 1.0), manifest("score", 2.0), manifest("score", 3.0)]);
        assert_eq!(rows[0].mean, 2.0);
        assert_eq!(rows[0].sd, 1.0);
        assert_eq!((rows[0].min, rows[0].max), (1.0, 3.0));
    }
}
