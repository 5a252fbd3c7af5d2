//! Run directories on disk and seed-averaged comparisons across them.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::RunConfig;
use super::record::{fmt_real, RunRecord};
use super::run::RunOutput;
use crate::error::{contract, Error, Result};
use crate::linalg::Mat;

pub const COMPARE_HEADER: &str = "strategy,n_interior,kind,stage,epoch,runs,loss,grid_error,rel_error,residual_variance,R_k";

/// `{problem}_{strategy}_seed{seed}`.
pub fn run_dir_name(cfg: &RunConfig, seed: u64) -> String {
    format!("{}_{}_seed{seed}", cfg.problem.name, cfg.sampling.strategy.name())
}

fn samples_name(stage: usize) -> String {
    format!("samples_stage_{stage}.csv")
}

fn artifact(path: &Path, msg: impl ToString) -> Error {
    Error::Artifact { path: path.to_path_buf(), msg: msg.to_string() }
}

/// Writes `config.json` (with `seeds` narrowed to this run), `metrics.csv`,
/// one `samples_stage_k.csv` per stage, `net.json` and, for flow-based
/// strategies, `flow.json`. The files are staged in a sibling directory and
/// moved into place at the end; an existing `dir` is never touched.
pub fn write_run_dir(dir: &Path, cfg: &RunConfig, out: &RunOutput) -> Result<()> {
    if dir.exists() {
        return Err(artifact(dir, "run directory already exists"));
    }
    let name = dir.file_name().ok_or_else(|| artifact(dir, "run directory needs a final path component"))?;
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let staging = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir(&staging)?;
    let written = (|| -> Result<()> {
        let mut resolved = cfg.clone();
        resolved.seeds = vec![out.seed];
        fs::write(staging.join("config.json"), resolved.to_json()? + "\n")?;
        fs::write(staging.join("metrics.csv"), out.record.to_csv())?;
        for (k, set) in out.stage_sets.iter().enumerate() {
            fs::write(staging.join(samples_name(k)), samples_csv(set))?;
        }
        out.net.save(&staging.join("net.json"))?;
        if let Some(flow) = &out.flow {
            flow.save(&staging.join("flow.json"))?;
        }
        Ok(())
    })();
    if let Err(e) = written {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    if dir.exists() {
        let _ = fs::remove_dir_all(&staging);
        return Err(artifact(dir, "run directory appeared while the run was being written"));
    }
    fs::rename(&staging, dir)?;
    Ok(())
}

/// Header `x1,…,xd` and one row per point.
pub fn samples_csv(points: &Mat) -> String {
    let mut out = (1..=points.cols()).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for row in points.iter_rows() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&fmt_real(*v));
        }
        out.push('\n');
    }
    out
}

pub fn read_samples(path: &Path) -> Result<Mat> {
    let text = fs::read_to_string(path).map_err(|e| artifact(path, e))?;
    let mut lines = text.lines();
    let d = lines.next().ok_or_else(|| artifact(path, "file is empty"))?.split(',').count();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d {
            return Err(artifact(path, format!("line {}: expected {d} fields, found {}", i + 2, fields.len())));
        }
        for f in fields {
            data.push(f.parse::<f64>().map_err(|e| artifact(path, format!("line {}: '{f}': {e}", i + 2)))?);
        }
        rows += 1;
    }
    Ok(Mat::from_vec(rows, d, data))
}

/// A run directory read back from disk.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
    pub config: RunConfig,
    pub record: RunRecord,
}

impl RunDir {
    pub fn seed(&self) -> u64 {
        self.config.seeds[0]
    }

    /// Size of the final interior set.
    pub fn final_size(&self) -> usize {
        self.record.stage_sizes.last().copied().unwrap_or(0)
    }
}

/// Reads `config.json` and `metrics.csv`, and counts the rows of each
/// stage's samples file.
pub fn load_run(path: &Path) -> Result<RunDir> {
    let cfg_path = path.join("config.json");
    let text = fs::read_to_string(&cfg_path).map_err(|e| artifact(&cfg_path, e))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    let config: RunConfig =
        serde_path_to_error::deserialize(&mut de).map_err(|e| artifact(&cfg_path, format!("{}: {}", e.path(), e.inner())))?;
    config.validate().map_err(|e| artifact(&cfg_path, e))?;
    let mut record = RunRecord::load(&path.join("metrics.csv"))?;
    let stages = record.stage_rows().count();
    for k in 0..stages {
        record.stage_sizes.push(read_samples(&path.join(samples_name(k)))?.rows());
    }
    Ok(RunDir { path: path.to_path_buf(), config, record })
}

/// Seed-averaged metrics for one `(strategy, n_interior, kind, stage, epoch)` key.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub strategy: String,
    pub n_interior: usize,
    /// `epoch` or `stage`.
    pub kind: &'static str,
    pub stage: usize,
    pub epoch: usize,
    pub runs: usize,
    pub loss: Option<f64>,
    pub grid_error: Option<f64>,
    pub rel_error: Option<f64>,
    pub residual_variance: Option<f64>,
    pub r_k: Option<f64>,
}

#[derive(Default)]
struct Acc {
    runs: usize,
    sums: [(f64, usize); 5],
}

/// Groups runs by strategy and final interior set size and averages each
/// metric over the runs that report it. Rows keep their order within a
/// group; groups are sorted by strategy, then size.
pub fn compare(runs: &[RunDir]) -> Result<Vec<ComparisonRow>> {
    if runs.len() < 2 {
        return Err(contract("compare needs at least two run directories"));
    }
    type RowKey = (&'static str, usize, usize);
    let mut groups: BTreeMap<(String, usize), (Vec<RowKey>, HashMap<RowKey, Acc>)> = BTreeMap::new();
    for run in runs {
        if run.record.rows.is_empty() {
            return Err(artifact(&run.path, "metrics.csv has no rows"));
        }
        let key = (run.config.sampling.strategy.name().to_string(), run.final_size());
        let (order, accs) = groups.entry(key).or_default();
        for row in &run.record.rows {
            let kind = if row.is_stage() { "stage" } else { "epoch" };
            let rk = (kind, row.stage, row.epoch);
            let acc = accs.entry(rk).or_insert_with(|| {
                order.push(rk);
                Acc::default()
            });
            acc.runs += 1;
            for (slot, v) in acc.sums.iter_mut().zip([row.loss, row.grid_error, row.rel_error, row.residual_variance, row.r_k]) {
                if let Some(v) = v {
                    slot.0 += v;
                    slot.1 += 1;
                }
            }
        }
    }
    let mut out = Vec::new();
    for ((strategy, n_interior), (order, accs)) in groups {
        for rk in order {
            let acc = &accs[&rk];
            let mean = |i: usize| {
                let (s, n) = acc.sums[i];
                (n > 0).then(|| s / n as f64)
            };
            out.push(ComparisonRow {
                strategy: strategy.clone(),
                n_interior,
                kind: rk.0,
                stage: rk.1,
                epoch: rk.2,
                runs: acc.runs,
                loss: mean(0),
                grid_error: mean(1),
                rel_error: mean(2),
                residual_variance: mean(3),
                r_k: mean(4),
            });
        }
    }
    Ok(out)
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from(COMPARE_HEADER);
    out.push('\n');
    for r in rows {
        write!(out, "{},{},{},{},{},{}", r.strategy, r.n_interior, r.kind, r.stage, r.epoch, r.runs).unwrap();
        for v in [r.loss, r.grid_error, r.rel_error, r.residual_variance, r.r_k] {
            out.push(',');
            if let Some(v) = v {
                out.push_str(&fmt_real(v));
            }
        }
        out.push('\n');
    }
    out
}
