//! Deterministic text and CSV rendering of benchmark tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use super::stats::{summarize, Summary};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no samples to report")]
    Empty,
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sample {
    pub value: String,
    pub series: String,
    pub repetition: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub value: String,
    pub series: String,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Samples of one benchmark, grouped by (value, series) in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Table {
    pub variable: String,
    pub samples: Vec<Sample>,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
}

impl Table {
    pub fn new(variable: impl Into<String>) -> Self {
        Table {
            variable: variable.into(),
            ..Table::default()
        }
    }

    pub fn push(&mut self, value: impl ToString, series: &str, repetition: usize, seconds: f64) {
        self.samples.push(Sample {
            value: value.to_string(),
            series: series.to_string(),
            repetition,
            seconds,
        });
    }

    pub fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn keys(&self) -> Vec<(String, String)> {
        let mut keys: Vec<(String, String)> = Vec::new();
        for s in &self.samples {
            let k = (s.value.clone(), s.series.clone());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys
    }

    pub fn series(&self, value: &str, series: &str) -> Vec<f64> {
        let mut xs: Vec<(usize, f64)> = self
            .samples
            .iter()
            .filter(|s| s.value == value && s.series == series)
            .map(|s| (s.repetition, s.seconds))
            .collect();
        xs.sort_by_key(|(r, _)| *r);
        xs.into_iter().map(|(_, x)| x).collect()
    }

    pub fn rows(&self) -> Vec<Row> {
        self.keys()
            .into_iter()
            .filter_map(|(value, series)| {
                let summary = summarize(&self.series(&value, &series))?;
                Some(Row {
                    value,
                    series,
                    summary,
                })
            })
            .collect()
    }

    pub fn mean(&self, value: &str, series: &str) -> Option<f64> {
        summarize(&self.series(value, series)).map(|s| s.mean)
    }

    pub fn results_csv(&self) -> Result<String, ReportError> {
        let rows = self.rows();
        if rows.is_empty() {
            return Err(ReportError::Empty);
        }
        let mut out = format!("{},series,n,mean_seconds,ci95_low,ci95_high,std_dev\n", self.variable);
        for r in rows {
            let s = r.summary;
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6},{:.6}",
                r.value, r.series, s.n, s.mean, s.ci_low, s.ci_high, s.std_dev
            );
        }
        Ok(out)
    }

    pub fn samples_csv(&self) -> Result<String, ReportError> {
        if self.samples.is_empty() {
            return Err(ReportError::Empty);
        }
        let mut out = format!("{},series,repetition,seconds\n", self.variable);
        for s in &self.samples {
            let _ = writeln!(out, "{},{},{},{:.6}", s.value, s.series, s.repetition, s.seconds);
        }
        Ok(out)
    }

    pub fn text(&self) -> Result<String, ReportError> {
        let rows = self.rows();
        if rows.is_empty() {
            return Err(ReportError::Empty);
        }
        let vw = rows.iter().map(|r| r.value.len()).max().unwrap_or(0).max(self.variable.len());
        let sw = rows.iter().map(|r| r.series.len()).max().unwrap_or(0).max(6);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<vw$}  {:<sw$}  {:>4}  {:>10}  {:>23}",
            self.variable, "series", "n", "mean (s)", "95% CI (s)"
        );
        for r in &rows {
            let s = r.summary;
            let _ = writeln!(
                out,
                "{:<vw$}  {:<sw$}  {:>4}  {:>10.4}  [{:>10.4}, {:>10.4}]",
                r.value, r.series, s.n, s.mean, s.ci_low, s.ci_high
            );
        }
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{} {}: {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            );
        }
        Ok(out)
    }

    /// Write `results.csv`, `samples.csv` and `summary.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
        let files = [
            ("results.csv", self.results_csv()?),
            ("samples.csv", self.samples_csv()?),
            ("summary.txt", self.text()?),
        ];
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| ReportError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let mut written = Vec::new();
        for (name, body) in files {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(io(&p))?;
            written.push(p);
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> Table {
        let mut t = Table::new("ports");
        for (i, x) in [1.0, 2.0, 3.0].into_iter().enumerate() {
            t.push(0, "cold", i, x);
            t.push(10, "cold", i, x + 0.5);
        }
        t
    }

    #[test]
    fn empty_table_is_an_error() {
        let t = Table::new("x");
        assert!(matches!(t.results_csv(), Err(ReportError::Empty)));
        assert!(matches!(t.text(), Err(ReportError::Empty)));
    }

    #[test]
    fn rendering_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = table();
        a.write(&dir.path().join("a")).unwrap();
        table().write(&dir.path().join("b")).unwrap();
        for f in ["results.csv", "samples.csv", "summary.txt"] {
            let x = std::fs::read(dir.path().join("a").join(f)).unwrap();
            let y = std::fs::read(dir.path().join("b").join(f)).unwrap();
            assert_eq!(x, y, "{f}");
        }
        let csv = a.results_csv().unwrap();
        assert!(csv.starts_with("ports,series,n,mean_seconds"));
        assert!(csv.contains("\n0,cold,3,2.000000,"));
        assert!(csv.contains("\n10,cold,3,2.500000,"));
    }
}
