//! Run configuration: named presets, JSON files merged onto them, and dotted
//! `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::flow::{BoundedMap, FlowSpec};
use crate::problems::{BoxDomain, Problem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Uniform,
    DasR,
    DasG,
    Rar,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Uniform => "uniform",
            Strategy::DasR => "das_r",
            Strategy::DasG => "das_g",
            Strategy::Rar => "rar",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Strategy::Uniform),
            "das_r" => Ok(Strategy::DasR),
            "das_g" => Ok(Strategy::DasG),
            "rar" => Ok(Strategy::Rar),
            _ => Err(Error::Config(format!("unknown strategy '{s}' (expected uniform, das_r, das_g or rar)"))),
        }
    }
}

/// Which objective fits the flow after each stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowObjective {
    CeIs,
    ReverseKl,
    /// Cross entropy throughout for `das_r`; for `das_g` cross entropy at the
    /// first fit and reverse KL afterwards.
    Auto,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    /// One of `peak2d`, `twopeak2d`, `linear_hd`, `nonlinear_hd`.
    pub name: String,
    /// Peak location `(r_c, r_c)` for `peak2d`.
    pub r_c: f64,
    /// Dimension for the `*_hd` problems.
    pub dim: usize,
    /// Replaces the default `[-1, 1]^d` domain.
    #[serde(rename = "box")]
    pub domain: Option<BoxDomain>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// Number of hidden `tanh` layers.
    pub depth: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub layers: usize,
    pub k_blocks: usize,
    pub width: usize,
    pub delta: f64,
    pub s: f64,
    pub objective: FlowObjective,
    /// Defaults to `train.epochs`.
    pub epochs: Option<usize>,
    /// Defaults to `train.batch`.
    pub batch: Option<usize>,
    /// Defaults to `train.lr`.
    pub lr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Epochs per stage `N_e`.
    pub epochs: usize,
    /// Minibatch size `m`.
    pub batch: usize,
    pub lr: f64,
    /// Boundary weight `γ̂` of the discrete loss.
    pub gamma_hat: f64,
    /// Penalty of the continuous loss; kept for completeness, the discrete
    /// loss only uses `gamma_hat`.
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub strategy: Strategy,
    /// Interior set size `N_r` for `uniform` and `das_r`.
    pub n_interior: usize,
    /// Boundary set size `N_b`.
    pub n_boundary: usize,
    /// Number of training stages `N_adaptive`.
    pub n_adaptive: usize,
    /// Points added per stage for `das_g` and `rar`; entry `k` is used at
    /// stage `k` and the last entry repeats. The stage-0 uniform set has
    /// `n_r[0]` points. Defaults to `n_interior / n_adaptive`.
    pub n_r: Option<Vec<usize>>,
    /// RAR candidate pool size as a multiple of `n_r`.
    pub rar_pool_factor: usize,
    /// Flow draws are made in at most this many rounds per stage.
    pub max_draw_rounds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Grid error cadence in epochs; the last epoch of each stage is always evaluated.
    pub every: usize,
    /// Nodes per axis of the full-domain error grid; 0 disables it.
    pub grid_n: usize,
    /// Nodes per axis of the grid around the origin used for the relative
    /// error and residual variance; 0 disables the relative error. Defaults
    /// to `⌊59049^(1/d)⌋`.
    pub local_n: Option<usize>,
    pub local_half_width: f64,
    /// Quadrature nodes per axis for the flow diagnostics (`d <= 2`); 0 disables them.
    pub kl_grid: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub net: NetConfig,
    pub flow: FlowConfig,
    pub train: TrainConfig,
    pub sampling: SamplingConfig,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
}

pub const PRESETS: [&str; 4] = ["peak2d", "twopeak2d", "linear_hd", "nonlinear_hd"];

/// Full default configuration for a named preset.
pub fn preset(name: &str) -> Result<RunConfig> {
    let two_d = |problem: &str, width: usize, layers: usize, flow_width: usize, epochs: usize, n_adaptive: usize, n_interior: usize| {
        RunConfig {
            problem: ProblemConfig { name: problem.into(), r_c: 0.5, dim: 2, domain: None },
            net: NetConfig { depth: 6, width },
            flow: FlowConfig {
                layers,
                k_blocks: 1,
                width: flow_width,
                delta: 0.01,
                s: 2.0,
                objective: FlowObjective::Auto,
                epochs: None,
                batch: None,
                lr: None,
            },
            train: TrainConfig { epochs, batch: 500, lr: 1e-4, gamma_hat: 1.0, gamma: 1.0 },
            sampling: SamplingConfig {
                strategy: Strategy::DasR,
                n_interior,
                n_boundary: 500,
                n_adaptive,
                n_r: None,
                rar_pool_factor: 10,
                max_draw_rounds: 100,
            },
            eval: EvalConfig { every: 50, grid_n: 256, local_n: Some(0), local_half_width: 0.1, kl_grid: 128 },
            seeds: vec![0, 1, 2],
        }
    };
    let hd = |problem: &str| RunConfig {
        problem: ProblemConfig { name: problem.into(), r_c: 0.5, dim: 10, domain: None },
        net: NetConfig { depth: 6, width: 64 },
        flow: FlowConfig {
            layers: 6,
            k_blocks: 3,
            width: 64,
            delta: 0.01,
            s: 2.0,
            objective: FlowObjective::Auto,
            epochs: None,
            batch: None,
            lr: None,
        },
        train: TrainConfig { epochs: 3000, batch: 5000, lr: 1e-4, gamma_hat: 1.0, gamma: 1.0 },
        sampling: SamplingConfig {
            strategy: Strategy::DasG,
            n_interior: 50_000,
            n_boundary: 5000,
            n_adaptive: 5,
            n_r: None,
            rar_pool_factor: 10,
            max_draw_rounds: 100,
        },
        eval: EvalConfig { every: 50, grid_n: 0, local_n: None, local_half_width: 0.1, kl_grid: 0 },
        seeds: vec![0, 1, 2],
    };
    match name {
        "peak2d" => Ok(two_d("peak2d", 32, 6, 24, 3000, 4, 2000)),
        "twopeak2d" => Ok(two_d("twopeak2d", 64, 8, 48, 5000, 5, 2500)),
        "linear_hd" | "nonlinear_hd" => Ok(hd(name)),
        _ => Err(Error::Config(format!("unknown preset '{name}' (expected one of {})", PRESETS.join(", ")))),
    }
}

impl RunConfig {
    /// Checks cross-field invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::Config(format!("{key}: {msg}")));
        let positive = [
            ("net.depth", self.net.depth),
            ("net.width", self.net.width),
            ("flow.layers", self.flow.layers),
            ("flow.k_blocks", self.flow.k_blocks),
            ("flow.width", self.flow.width),
            ("train.batch", self.train.batch),
            ("sampling.n_interior", self.sampling.n_interior),
            ("sampling.n_boundary", self.sampling.n_boundary),
            ("sampling.n_adaptive", self.sampling.n_adaptive),
            ("sampling.rar_pool_factor", self.sampling.rar_pool_factor),
            ("sampling.max_draw_rounds", self.sampling.max_draw_rounds),
            ("eval.every", self.eval.every),
            ("problem.dim", self.problem.dim),
        ];
        for (key, v) in positive {
            if v == 0 {
                return bad(key, "must be positive");
            }
        }
        if self.flow.batch == Some(0) {
            return bad("flow.batch", "must be positive");
        }
        for (key, v) in [("train.lr", Some(self.train.lr)), ("flow.lr", self.flow.lr), ("train.gamma_hat", Some(self.train.gamma_hat))] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return bad(key, "must be a positive number");
                }
            }
        }
        if !(self.train.gamma > 0.0) {
            return bad("train.gamma", "must be positive");
        }
        if !(self.eval.local_half_width > 0.0) {
            return bad("eval.local_half_width", "must be positive");
        }
        if let Some(n_r) = &self.sampling.n_r {
            if n_r.is_empty() || n_r.contains(&0) {
                return bad("sampling.n_r", "must be a nonempty list of positive counts");
            }
        } else if self.sampling.n_interior < self.sampling.n_adaptive {
            return bad("sampling.n_r", "defaults to n_interior / n_adaptive, which is zero here");
        }
        if self.seeds.is_empty() {
            return bad("seeds", "at least one seed is required");
        }
        let problem = self.build_problem()?;
        BoundedMap::new(self.flow.delta, self.flow.s).map_err(|e| Error::Config(format!("flow: {e}")))?;
        let d = problem.dim();
        if self.flow.k_blocks > d || self.flow.k_blocks > self.flow.layers {
            return bad("flow.k_blocks", &format!("must not exceed the dimension ({d}) or flow.layers"));
        }
        Ok(())
    }

    pub fn build_problem(&self) -> Result<Problem> {
        let p = &self.problem;
        let base = match p.name.as_str() {
            "peak2d" => Problem::peak2d(p.r_c),
            "twopeak2d" => Problem::twopeak2d(),
            "linear_hd" => Problem::linear_hd(p.dim),
            "nonlinear_hd" => Problem::nonlinear_hd(p.dim),
            other => return Err(Error::Config(format!("problem.name: unknown problem '{other}'"))),
        };
        match &p.domain {
            None => Ok(base),
            Some(b) => {
                let dom = BoxDomain::new(b.lo.clone(), b.hi.clone()).map_err(|e| Error::Config(format!("problem.box: {e}")))?;
                base.with_domain(dom)
            }
        }
    }

    pub fn layer_sizes(&self, dim: usize) -> Vec<usize> {
        let mut s = vec![dim];
        s.extend(std::iter::repeat_n(self.net.width, self.net.depth));
        s.push(1);
        s
    }

    pub fn flow_spec(&self) -> FlowSpec {
        FlowSpec {
            layers: self.flow.layers,
            k_blocks: self.flow.k_blocks,
            width: self.flow.width,
            map: BoundedMap { delta: self.flow.delta, scale: self.flow.s },
        }
    }

    pub fn flow_epochs(&self) -> usize {
        self.flow.epochs.unwrap_or(self.train.epochs)
    }

    pub fn flow_batch(&self) -> usize {
        self.flow.batch.unwrap_or(self.train.batch)
    }

    pub fn flow_lr(&self) -> f64 {
        self.flow.lr.unwrap_or(self.train.lr)
    }

    /// Points added at stage `k` (stage 0 is the initial uniform set).
    pub fn n_r(&self, k: usize) -> usize {
        match &self.sampling.n_r {
            Some(list) => list[k.min(list.len() - 1)],
            None => self.sampling.n_interior / self.sampling.n_adaptive,
        }
    }

    pub fn local_n(&self, dim: usize) -> usize {
        self.eval.local_n.unwrap_or_else(|| (59049f64.powf(1.0 / dim as f64) + 1e-9).floor() as usize)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Builds a configuration from an optional preset, an optional JSON document
/// and dotted overrides, in that order.
///
/// The preset is `preset` if given, else the document's `"preset"` key, else
/// the document's `problem.name` when that names a preset. Keys in the
/// document and overrides must exist in the preset; an override value is
/// parsed as JSON and falls back to a plain string.
pub fn resolve_config(preset_name: Option<&str>, document: Option<Value>, overrides: &[String]) -> Result<RunConfig> {
    let mut doc = document.unwrap_or(Value::Object(Default::default()));
    let Value::Object(map) = &mut doc else {
        return Err(Error::Config("configuration document must be a JSON object".into()));
    };
    let file_preset = match map.remove("preset") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s),
        Some(_) => return Err(Error::Config("preset: expected a string".into())),
    };
    let problem_name = map.get("problem").and_then(|p| p.get("name")).and_then(Value::as_str).map(str::to_string);
    let name = preset_name
        .map(str::to_string)
        .or(file_preset)
        .or(problem_name.filter(|n| PRESETS.contains(&n.as_str())));
    let mut merged = match name {
        Some(n) => {
            let mut base = serde_json::to_value(preset(&n)?)?;
            merge(&mut base, doc, "")?;
            base
        }
        None => doc,
    };
    for ov in overrides {
        apply_override(&mut merged, ov)?;
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(merged)
        .map_err(|e| Error::Config(format!("{}: {}", e.path(), e.inner())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a JSON configuration file and resolves it.
pub fn load_config(path: &Path, preset_name: Option<&str>, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| Error::Artifact { path: path.to_path_buf(), msg: e.to_string() })?;
    resolve_config(preset_name, Some(doc), overrides)
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() { key.to_string() } else { format!("{prefix}.{key}") }
}

fn merge(base: &mut Value, over: Value, prefix: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let path = join(prefix, &k);
                let slot = b.get_mut(&k).ok_or_else(|| Error::Config(format!("unknown key '{path}'")))?;
                merge(slot, v, &path)?;
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn apply_override(cfg: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not of the form key=value")))?;
    let key = key.trim();
    let mut slot = &mut *cfg;
    let mut seen = String::new();
    for part in key.split('.') {
        seen = join(&seen, part);
        slot = match slot {
            Value::Object(m) => m.get_mut(part).ok_or_else(|| Error::Config(format!("unknown key '{seen}'")))?,
            _ => return Err(Error::Config(format!("unknown key '{seen}'"))),
        };
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}
