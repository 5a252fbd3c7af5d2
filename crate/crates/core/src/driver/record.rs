//! Per-epoch and per-stage metrics of a run, and their CSV form.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "stage,epoch,loss,grid_error,rel_error,residual_variance,R_k,kl,tau1,tau2,c_hat";

/// One metrics row. Epoch rows carry `loss` (and errors at the evaluation
/// cadence); stage rows leave `loss` empty and carry the stage summary.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricRow {
    pub stage: usize,
    /// Epochs completed since the start of the run.
    pub epoch: usize,
    pub loss: Option<f64>,
    pub grid_error: Option<f64>,
    pub rel_error: Option<f64>,
    pub residual_variance: Option<f64>,
    pub r_k: Option<f64>,
    pub kl: Option<f64>,
    pub tau1: Option<f64>,
    pub tau2: Option<f64>,
    pub c_hat: Option<f64>,
}

impl MetricRow {
    pub fn is_stage(&self) -> bool {
        self.loss.is_none()
    }

    fn reals(&self) -> [Option<f64>; 9] {
        [
            self.loss,
            self.grid_error,
            self.rel_error,
            self.residual_variance,
            self.r_k,
            self.kl,
            self.tau1,
            self.tau2,
            self.c_hat,
        ]
    }
}

/// Time-ordered metrics of one run, plus the interior set size per stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<MetricRow>,
    pub stage_sizes: Vec<usize>,
}

impl RunRecord {
    pub fn epoch_rows(&self) -> impl Iterator<Item = &MetricRow> {
        self.rows.iter().filter(|r| !r.is_stage())
    }

    pub fn stage_rows(&self) -> impl Iterator<Item = &MetricRow> {
        self.rows.iter().filter(|r| r.is_stage())
    }

    /// Last value of a column among rows that have it.
    pub fn last(&self, column: impl Fn(&MetricRow) -> Option<f64>) -> Option<f64> {
        self.rows.iter().rev().find_map(column)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(METRICS_HEADER);
        out.push('\n');
        for row in &self.rows {
            write!(out, "{},{}", row.stage, row.epoch).unwrap();
            for v in row.reals() {
                out.push(',');
                if let Some(v) = v {
                    out.push_str(&fmt_real(v));
                }
            }
            out.push('\n');
        }
        out
    }

    /// Parses a metrics CSV; `path` only labels errors. Stage sizes are not
    /// part of the file and come back empty.
    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Artifact { path: path.to_path_buf(), msg: format!("line {line}: {msg}") };
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end() == METRICS_HEADER => {}
            Some(h) => return Err(bad(1, format!("unexpected header '{h}'"))),
            None => return Err(bad(1, "file is empty".into())),
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let n = i + 2;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 11 {
                return Err(bad(n, format!("expected 11 fields, found {}", f.len())));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|e| bad(n, format!("'{s}': {e}")));
            let mut reals = [None; 9];
            for (slot, s) in reals.iter_mut().zip(&f[2..]) {
                if !s.is_empty() {
                    *slot = Some(s.parse::<f64>().map_err(|e| bad(n, format!("'{s}': {e}")))?);
                }
            }
            let [loss, grid_error, rel_error, residual_variance, r_k, kl, tau1, tau2, c_hat] = reals;
            rows.push(MetricRow {
                stage: int(f[0])?,
                epoch: int(f[1])?,
                loss,
                grid_error,
                rel_error,
                residual_variance,
                r_k,
                kl,
                tau1,
                tau2,
                c_hat,
            });
        }
        Ok(RunRecord { rows, stage_sizes: Vec::new() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Artifact { path: path.to_path_buf(), msg: e.to_string() })?;
        Self::from_csv(&text, path)
    }
}

/// 17 significant digits in scientific notation; `inf`/`NaN` spelled the way
/// `f64::from_str` reads them back.
pub fn fmt_real(v: f64) -> String {
    if v.is_finite() { format!("{v:.16e}") } else { v.to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let rec = RunRecord {
            rows: vec![
                MetricRow { stage: 0, epoch: 1, loss: Some(0.1), ..Default::default() },
                MetricRow { stage: 0, epoch: 1, grid_error: Some(1e-300), r_k: Some(f64::INFINITY), ..Default::default() },
            ],
            stage_sizes: Vec::new(),
        };
        let text = rec.to_csv();
        assert!(text.ends_with('\n') && !text.contains('\r'));
        assert_eq!(text.lines().nth(1).unwrap(), "0,1,1.0000000000000001e-1,,,,,,,,");
        assert_eq!(RunRecord::from_csv(&text, Path::new("m.csv")).unwrap(), rec);
    }
}
