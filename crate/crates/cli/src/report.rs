//! Report files: a deterministic body plus a separate timing field.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{CliError, ExperimentConfig, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Mean and sample standard deviation; `std` is absent for one value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: Option<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() > 1)
            .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Some(Self { mean, std })
    }
}

/// Everything that must be identical between reruns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportBody<R> {
    pub command: String,
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub results: R,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report<R> {
    pub body: ReportBody<R>,
    pub timing: Timing,
}

impl<R: Serialize> Report<R> {
    pub fn new(command: &str, config: &ExperimentConfig, results: R, started: Instant) -> Self {
        Self {
            body: ReportBody {
                command: command.to_string(),
                tool_version: TOOL_VERSION.to_string(),
                config: config.clone(),
                results,
            },
            timing: Timing {
                wall_seconds: started.elapsed().as_secs_f64(),
            },
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_text(&dir.join("report.json"), &(text + "\n"))
    }
}

/// The body of a report file, serialized canonically.
pub fn body_of(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path)
        .map_err(CliError::io(format!("reading {}", path.display())))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    Ok(serde_json::to_string(&v["body"])?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(CliError::io(format!("creating {}", parent.display())))?;
    }
    std::fs::write(path, text).map_err(CliError::io(format!("writing {}", path.display())))
}

/// A CSV table built from a header and already-formatted rows.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_uses_sample_std() {
        let s = Summary::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, Some(1.0));
        let one = Summary::of(&[4.0]).unwrap();
        assert_eq!(
            one,
            Summary {
                mean: 4.0,
                std: None
            }
        );
        assert!(Summary::of(&[]).is_none());
    }

    #[test]
    fn body_ignores_timing() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        let mut a = Report::new("x", &cfg, vec![1.5], Instant::now());
        a.timing.wall_seconds = 1.0;
        a.write(dir.path()).unwrap();
        let first = body_of(&dir.path().join("report.json")).unwrap();
        a.timing.wall_seconds = 99.0;
        a.write(dir.path()).unwrap();
        assert_eq!(first, body_of(&dir.path().join("report.json")).unwrap());
        assert!(first.contains("\"tool_version\""));
    }

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.csv");
        write_csv(&p, &["k", "v"], &[vec!["1".into(), "2.5".into()]]).unwrap();
        assert_eq!(std::fs::read_to_string(p).unwrap(), "k,v\n1,2.5\n");
    }
}
