//! The adaptive training loops and the two baselines.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{FlowObjective, RunConfig, Strategy};
use super::eval::{chunked, flow_diagnostic, grid_mse, origin_grid, relative_error, residual_variance};
use super::record::{MetricRow, RunRecord};
use crate::error::{Error, Result};
use crate::flow::{partition_samples, FlowModel};
use crate::linalg::Mat;
use crate::net::SurrogateNet;
use crate::problems::Problem;
use crate::train::{
    ce_weights, mean_square, train_flow, train_surrogate, weighted_mean_square, Adam, FlowData, LossMode, ResidualTarget,
    SurrogateOptions, TrainingSet,
};

/// Independent random streams of one run.
pub mod streams {
    pub const INITIAL_DATA: u64 = 0;
    pub const SURROGATE: u64 = 1;
    pub const FLOW_TRAINING: u64 = 2;
    pub const FLOW_SAMPLING: u64 = 3;
    pub const RAR_POOL: u64 = 4;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub strategy: Strategy,
    pub seed: u64,
    pub record: RunRecord,
    pub net: SurrogateNet,
    /// Last trained flow, for the flow-based strategies.
    pub flow: Option<FlowModel>,
    /// Interior collocation set of each stage.
    pub stage_sets: Vec<Mat>,
}

pub fn run(cfg: &RunConfig, seed: u64) -> Result<RunOutput> {
    run_with_progress(cfg, seed, |_| {})
}

/// Runs the configured strategy, calling `on_row` for every metrics row as
/// it is produced.
pub fn run_with_progress(cfg: &RunConfig, seed: u64, on_row: impl FnMut(&MetricRow)) -> Result<RunOutput> {
    cfg.validate()?;
    let problem = cfg.build_problem()?;
    Runner::new(cfg, &problem, seed, on_row)?.execute()
}

/// Interior points drawn from a flow, with what the next fit and the
/// importance weights need.
struct Draw {
    interior: Mat,
    /// `p̂ |Ω|` at the interior points.
    relative_density: Vec<f64>,
    projected: Mat,
    /// All draws in `B` up to the one that filled the set, and `p̂` there.
    raw: Mat,
    raw_density: Vec<f64>,
}

struct Runner<'a, F: FnMut(&MetricRow)> {
    cfg: &'a RunConfig,
    problem: &'a Problem,
    seed: u64,
    strategy: Strategy,
    net: SurrogateNet,
    opt: Adam,
    flow: Option<FlowModel>,
    origin: Option<Mat>,
    record: RunRecord,
    epoch: usize,
    on_row: F,
}

impl<'a, F: FnMut(&MetricRow)> Runner<'a, F> {
    fn new(cfg: &'a RunConfig, problem: &'a Problem, seed: u64, on_row: F) -> Result<Self> {
        let d = problem.dim();
        let strategy = cfg.sampling.strategy;
        let net = SurrogateNet::new(&cfg.layer_sizes(d), seed)?;
        let opt = Adam::new(net.param_count(), cfg.train.lr);
        let flow = match strategy {
            Strategy::DasR | Strategy::DasG => Some(FlowModel::new(problem.domain().clone(), cfg.flow_spec(), seed)?),
            Strategy::Uniform | Strategy::Rar => None,
        };
        let n = cfg.local_n(d);
        let origin = if n > 0 { Some(origin_grid(d, n, cfg.eval.local_half_width)?) } else { None };
        Ok(Runner { cfg, problem, seed, strategy, net, opt, flow, origin, record: RunRecord::default(), epoch: 0, on_row })
    }

    fn execute(mut self) -> Result<RunOutput> {
        let cfg = self.cfg;
        let dom = self.problem.domain().clone();
        let volume = dom.volume();
        let mut data_rng = stream_rng(self.seed, streams::INITIAL_DATA);
        let mut train_rng = stream_rng(self.seed, streams::SURROGATE);
        let mut flow_rng = stream_rng(self.seed, streams::FLOW_TRAINING);
        let mut draw_rng = stream_rng(self.seed, streams::FLOW_SAMPLING);
        let mut pool_rng = stream_rng(self.seed, streams::RAR_POOL);

        let boundary0 = dom.sample_boundary(cfg.sampling.n_boundary, &mut data_rng);
        let n0 = match self.strategy {
            Strategy::Uniform | Strategy::DasR => cfg.sampling.n_interior,
            Strategy::DasG | Strategy::Rar => cfg.n_r(0),
        };
        let mut interior = dom.sample_uniform(n0, &mut data_rng);
        let mut boundary = boundary0.clone();
        // Relative densities of the DAS-R set, and the newest DAS-G block.
        let mut densities: Option<Vec<f64>> = None;
        let mut newest: (Mat, Option<Vec<f64>>) = (interior.clone(), None);
        let mut proposal: Option<(Mat, Vec<f64>)> = None;

        let (stages, stage_epochs) = match self.strategy {
            Strategy::Uniform => (1, cfg.train.epochs * cfg.sampling.n_adaptive),
            _ => (cfg.sampling.n_adaptive, cfg.train.epochs),
        };
        let mut stage_sets = Vec::with_capacity(stages);

        for k in 0..stages {
            let mut set = TrainingSet::new(interior.clone(), boundary.clone(), k);
            let mode = match (&densities, self.strategy) {
                (Some(d), Strategy::DasR) => {
                    set = set.with_densities(d.clone())?;
                    LossMode::Importance
                }
                _ => LossMode::Plain,
            };
            set.validate(self.problem)?;
            stage_sets.push(interior.clone());
            self.record.stage_sizes.push(interior.rows());
            let last = self.train_stage(&set, mode, stage_epochs, &mut train_rng)?;

            let r_k = match self.strategy {
                Strategy::DasR => self.residual_mean(&interior, densities.as_deref())?,
                Strategy::DasG => self.residual_mean(&newest.0, newest.1.as_deref())?,
                Strategy::Uniform | Strategy::Rar => self.residual_mean(&interior, None)?,
            };
            let variance = match &self.origin {
                Some(g) if g.rows() >= 2 => Some(residual_variance(&self.net, self.problem, g)?),
                _ => None,
            };
            let mut row = MetricRow {
                stage: k,
                epoch: self.epoch,
                grid_error: last.grid_error,
                rel_error: last.rel_error,
                residual_variance: variance,
                r_k: Some(r_k),
                ..Default::default()
            };

            if k + 1 < stages {
                match self.strategy {
                    Strategy::DasR | Strategy::DasG => {
                        let n_new = match self.strategy {
                            Strategy::DasR => cfg.sampling.n_interior,
                            _ => cfg.n_r(k + 1),
                        };
                        self.fit_flow(k, &interior, proposal.as_ref(), n_new, volume, &mut flow_rng)?;
                        let flow = self.flow.as_ref().expect("flow strategies own a flow");
                        if cfg.eval.kl_grid > 0 && self.problem.dim() <= 2 {
                            let diag = flow_diagnostic(flow, &self.net, self.problem, cfg.eval.kl_grid)?;
                            row.kl = diag.kl;
                            row.c_hat = Some(diag.c_hat);
                            row.tau1 = Some(diag.tau1);
                            row.tau2 = Some(diag.tau2);
                        }
                        let draw = draw_interior(flow, n_new, cfg.sampling.max_draw_rounds, volume, &mut draw_rng)
                            .map_err(|e| stage_error(k, e))?;
                        boundary = Mat::vstack(&[&boundary0, &draw.projected]);
                        proposal = Some((draw.raw, draw.raw_density));
                        if self.strategy == Strategy::DasR {
                            interior = draw.interior;
                            densities = Some(draw.relative_density);
                        } else {
                            interior.append_rows(&draw.interior);
                            newest = (draw.interior, Some(draw.relative_density));
                        }
                    }
                    Strategy::Rar => {
                        let added = self.rar_select(cfg.n_r(k + 1), &mut pool_rng)?;
                        interior.append_rows(&added);
                    }
                    Strategy::Uniform => unreachable!("uniform runs a single stage"),
                }
            }
            self.push(row);
        }

        Ok(RunOutput {
            strategy: self.strategy,
            seed: self.seed,
            record: self.record,
            net: self.net,
            flow: self.flow,
            stage_sets,
        })
    }

    fn push(&mut self, row: MetricRow) {
        (self.on_row)(&row);
        self.record.rows.push(row);
    }

    /// Trains the surrogate for one stage and returns the last epoch row.
    fn train_stage(&mut self, set: &TrainingSet, mode: LossMode, epochs: usize, rng: &mut ChaCha8Rng) -> Result<MetricRow> {
        let cfg = self.cfg;
        let opts = SurrogateOptions { epochs, batch: cfg.train.batch, gamma_hat: cfg.train.gamma_hat, mode };
        let problem = self.problem;
        let origin = self.origin.as_ref();
        let start = self.epoch;
        let mut rows = Vec::with_capacity(epochs);
        let on_row = &mut self.on_row;
        train_surrogate(&mut self.net, &mut self.opt, problem, set, &opts, rng, |e, loss, net| {
            let mut row = MetricRow { stage: set.stage, epoch: start + e + 1, loss: Some(loss), ..Default::default() };
            if (e + 1) % cfg.eval.every == 0 || e + 1 == epochs {
                if cfg.eval.grid_n > 0 {
                    row.grid_error = Some(grid_mse(net, problem, cfg.eval.grid_n)?);
                }
                if let Some(g) = origin {
                    row.rel_error = Some(relative_error(net, problem, g)?);
                }
            }
            on_row(&row);
            rows.push(row);
            Ok(())
        })
        .map_err(|e| stage_error(set.stage, e))?;
        self.epoch += epochs;
        let last = rows.last().cloned().unwrap_or_default();
        self.record.rows.extend(rows);
        Ok(last)
    }

    /// `mean(r²)` over `points`, divided by the relative proposal density when given.
    fn residual_mean(&self, points: &Mat, relative_density: Option<&[f64]>) -> Result<f64> {
        let r = chunked(points, |b| self.problem.residual_batch(&self.net, b))?;
        Ok(match relative_density {
            Some(p) => {
                let w: Vec<f64> = p.iter().map(|p| 1.0 / p).collect();
                weighted_mean_square(&r, &w)
            }
            None => mean_square(&r),
        })
    }

    /// Refits the flow to `r² h` of the current network. The first fit uses
    /// the uniform interior set as the importance proposal; later fits use
    /// the previous flow's raw draws, or reverse KL when configured.
    fn fit_flow(
        &mut self,
        k: usize,
        interior: &Mat,
        proposal: Option<&(Mat, Vec<f64>)>,
        samples_per_epoch: usize,
        volume: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let cfg = self.cfg;
        let flow = self.flow.as_mut().expect("flow strategies own a flow");
        let frame = flow.frame().clone();
        let target = ResidualTarget { net: &self.net, problem: self.problem, frame: &frame };
        let reverse_kl = match (proposal, cfg.flow.objective) {
            (None, _) | (_, FlowObjective::CeIs) => false,
            (Some(_), FlowObjective::ReverseKl) => true,
            (Some(_), FlowObjective::Auto) => self.strategy == Strategy::DasG,
        };
        let mut opt = Adam::new(flow.param_count(), cfg.flow_lr());
        let (epochs, batch) = (cfg.flow_epochs(), cfg.flow_batch());
        let result = if reverse_kl {
            train_flow(flow, &mut opt, FlowData::Sampled { target: &target, samples_per_epoch }, epochs, batch, rng, |_, _| Ok(()))
        } else {
            let (points, q) = match proposal {
                Some((p, q)) => (p.clone(), q.clone()),
                None => (interior.clone(), vec![1.0 / volume; interior.rows()]),
            };
            let mut w = ce_weights(&target, &points, &q)?;
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            if !(mean > 0.0 && mean.is_finite()) {
                return Err(Error::Sampling(format!("stage {k}: residual target vanishes on every proposal point")));
            }
            w.iter_mut().for_each(|v| *v /= mean);
            train_flow(flow, &mut opt, FlowData::Weighted { points: &points, weights: &w }, epochs, batch, rng, |_, _| Ok(()))
        };
        result.map(|_| ()).map_err(|e| stage_error(k, e))
    }

    /// Top `n` points of a uniform candidate pool by `|r|`.
    fn rar_select(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Mat> {
        let pool = self.problem.domain().sample_uniform(n * self.cfg.sampling.rar_pool_factor, rng);
        let r = chunked(&pool, |b| self.problem.residual_batch(&self.net, b))?;
        Ok(pool.select_rows(&top_k_by_magnitude(&r, n)))
    }
}

/// Indices of the `n` entries of largest magnitude, largest first; ties keep
/// the lower index first.
pub fn top_k_by_magnitude(values: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

fn stage_error(stage: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("stage {stage}: {m}")),
        Error::Sampling(m) => Error::Sampling(format!("stage {stage}: {m}")),
        other => other,
    }
}

/// Draws from the flow in rounds of `need` until `need` points land in the
/// closed domain. Draws outside it are projected onto the boundary; draws
/// after the one that fills the set are discarded.
fn draw_interior(flow: &FlowModel, need: usize, max_rounds: usize, volume: f64, rng: &mut ChaCha8Rng) -> Result<Draw> {
    let d = flow.dim();
    let dom = flow.domain();
    let mut interior = Vec::with_capacity(need * d);
    let mut relative_density = Vec::with_capacity(need);
    let mut projected = Mat::zeros(0, d);
    let mut raw = Mat::zeros(0, d);
    let mut raw_density = Vec::new();
    for _ in 0..max_rounds {
        let s = flow.sample(need, rng)?;
        if !s.points.is_finite() || s.log_density.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow produced non-finite samples".into()));
        }
        // Rows up to and including the one that completes the set.
        let mut used = s.points.rows();
        let mut have = relative_density.len();
        for (i, p) in s.points.iter_rows().enumerate() {
            if dom.contains(p) {
                have += 1;
                if have == need {
                    used = i + 1;
                    break;
                }
            }
        }
        let idx: Vec<usize> = (0..used).collect();
        let kept = s.points.select_rows(&idx);
        let (inside, outside) = partition_samples(dom, &kept);
        for &i in &inside {
            interior.extend_from_slice(kept.row(i));
            relative_density.push(s.log_density[i].exp() * volume);
        }
        projected.append_rows(&outside);
        // Draws that rounded onto the edge of `B` cannot be mapped back.
        let frame = flow.frame();
        let inner: Vec<usize> = (0..used).filter(|&i| frame.in_padded_box(kept.row(i))).collect();
        raw.append_rows(&kept.select_rows(&inner));
        raw_density.extend(inner.iter().map(|&i| s.log_density[i].exp()));
        if relative_density.len() == need {
            if relative_density.iter().any(|&p| !(p > 0.0)) {
                return Err(Error::NonFinite("flow density underflowed at a drawn point".into()));
            }
            return Ok(Draw { interior: Mat::from_vec(need, d, interior), relative_density, projected, raw, raw_density });
        }
    }
    Err(Error::Sampling(format!(
        "only {} of {need} interior points after {max_rounds} rounds of {need} draws",
        relative_density.len()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_orders_by_magnitude() {
        assert_eq!(top_k_by_magnitude(&[0.5, -3.0, 2.0, 3.0, 0.0], 3), vec![1, 3, 2]);
    }
}
