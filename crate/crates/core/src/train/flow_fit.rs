//! Fitting the flow density to an unnormalized target such as `r² h`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::adam::Adam;
use crate::autodiff::{Tape, Var};
use crate::error::{contract, Error, Result};
use crate::flow::{log_std_normal, FlowModel, Frame};
use crate::linalg::Mat;
use crate::net::SurrogateNet;
use crate::problems::Problem;

/// Added to the target inside logarithms so vanishing residuals stay finite.
pub const TARGET_FLOOR: f64 = 1e-30;

/// Unnormalized nonnegative density on the padded box.
pub trait DensityTarget {
    /// `r̂(x)` at the rows of `x`.
    fn values(&self, x: &Mat) -> Result<Vec<f64>>;

    /// `r̂(x)` and `∇_x log(r̂(x) + TARGET_FLOOR)` at the rows of `x`.
    fn values_and_log_grad(&self, x: &Mat) -> Result<(Vec<f64>, Mat)>;
}

/// `r̂ = r² h`: squared PDE residual of `net` times the cutoff of `frame`.
pub struct ResidualTarget<'a> {
    pub net: &'a SurrogateNet,
    pub problem: &'a Problem,
    pub frame: &'a Frame,
}

impl DensityTarget for ResidualTarget<'_> {
    fn values(&self, x: &Mat) -> Result<Vec<f64>> {
        let r = self.problem.residual_batch(self.net, x)?;
        Ok(x.iter_rows().zip(r).map(|(p, r)| r * r * self.frame.cutoff(p)).collect())
    }

    fn values_and_log_grad(&self, x: &Mat) -> Result<(Vec<f64>, Mat)> {
        let (r, gr) = self.problem.residual_grad_batch(self.net, x)?;
        let mut values = Vec::with_capacity(x.rows());
        let mut g = Mat::zeros(x.rows(), x.cols());
        for (i, p) in x.iter_rows().enumerate() {
            let h = self.frame.cutoff(p);
            let gh = self.frame.cutoff_grad(p);
            let v = r[i] * r[i] * h;
            let denom = v + TARGET_FLOOR;
            for (j, out) in g.row_mut(i).iter_mut().enumerate() {
                *out = (2.0 * r[i] * h * gr.get(i, j) + r[i] * r[i] * gh[j]) / denom;
            }
            values.push(v);
        }
        Ok((values, g))
    }
}

/// Coupling stack applied on the tape to latent-input rows `y`; returns the
/// output and the per-row log-determinant of the couplings.
fn couplings_forward(flow: &FlowModel, tape: &mut Tape, mut y: Var) -> (Var, Option<Var>) {
    let d = flow.dim();
    let mut logdet: Option<Var> = None;
    for (l, layer) in flow.layers().iter().enumerate() {
        let (s, t) = layer.scale_shift_on_tape(tape, flow.params(), flow.layer_offset(l), y);
        let yt = tape.select_cols(y, &layer.transform);
        let es = tape.exp(s);
        let yt = tape.mul(yt, es);
        let yt = tape.add(yt, t);
        let keep = layer.passthrough(d);
        let pass = tape.select_cols(y, &keep);
        y = tape.assemble_cols(d, &[(yt, &layer.transform[..]), (pass, &keep[..])]);
        let ld = tape.row_sum(s);
        logdet = Some(match logdet {
            Some(acc) => tape.add(acc, ld),
            None => ld,
        });
    }
    (y, logdet)
}

/// Inverse coupling stack on the tape; returns latent-input rows and the
/// per-row sum of forward log-scales.
fn couplings_inverse(flow: &FlowModel, tape: &mut Tape, mut y: Var) -> (Var, Option<Var>) {
    let d = flow.dim();
    let mut logdet: Option<Var> = None;
    for (l, layer) in flow.layers().iter().enumerate().rev() {
        let (s, t) = layer.scale_shift_on_tape(tape, flow.params(), flow.layer_offset(l), y);
        let yt = tape.select_cols(y, &layer.transform);
        let yt = tape.sub(yt, t);
        let neg = tape.scale(s, -1.0);
        let es = tape.exp(neg);
        let yt = tape.mul(yt, es);
        let keep = layer.passthrough(d);
        let pass = tape.select_cols(y, &keep);
        y = tape.assemble_cols(d, &[(yt, &layer.transform[..]), (pass, &keep[..])]);
        let ld = tape.row_sum(s);
        logdet = Some(match logdet {
            Some(acc) => tape.add(acc, ld),
            None => ld,
        });
    }
    (y, logdet)
}

fn check_weights(points: &Mat, weights: &[f64]) -> Result<()> {
    if points.rows() == 0 {
        return Err(contract("cross-entropy batch is empty"));
    }
    if weights.len() != points.rows() {
        return Err(contract(format!("{} weights for {} points", weights.len(), points.rows())));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(contract("cross-entropy weights must be finite and nonnegative"));
    }
    Ok(())
}

/// `w_i = r̂(x_i) / q(x_i)` for points drawn from a proposal with density `q`.
pub fn ce_weights(target: &dyn DensityTarget, points: &Mat, proposal_density: &[f64]) -> Result<Vec<f64>> {
    let v = target.values(points)?;
    if proposal_density.len() != v.len() {
        return Err(contract(format!("{} proposal densities for {} points", proposal_density.len(), v.len())));
    }
    v.iter()
        .zip(proposal_density)
        .map(|(r, &q)| if q > 0.0 { Ok(r / q) } else { Err(contract(format!("proposal density {q} is not positive"))) })
        .collect()
}

/// Importance-sampled cross entropy `-(1/N) Σ w_i log p̂(x_i)`.
pub fn cross_entropy_is(flow: &FlowModel, points: &Mat, weights: &[f64]) -> Result<f64> {
    check_weights(points, weights)?;
    let lp = flow.log_density(points)?;
    Ok(-lp.iter().zip(weights).map(|(l, w)| w * l).sum::<f64>() / points.rows() as f64)
}

/// Value and parameter gradient of [`cross_entropy_is`].
pub fn cross_entropy_is_grad(flow: &FlowModel, points: &Mat, weights: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_weights(points, weights)?;
    let n = points.rows() as f64;
    let (y0, ld0) = flow.to_latent_input(points)?;
    let mut tape = Tape::new(flow.param_count());
    let y0 = tape.constant(y0);
    let (y, ld) = couplings_forward(flow, &mut tape, y0);
    let sq = tape.square(y);
    let sq = tape.row_sum(sq);
    let mut lp = tape.scale(sq, -0.5);
    if let Some(ld) = ld {
        lp = tape.add(lp, ld);
    }
    let w = tape.constant(Mat::column(weights.to_vec()));
    let wl = tape.mul(lp, w);
    let total = tape.sum(wl);
    let loss = tape.scale(total, -1.0 / n);
    let grad = tape.grad_params(loss)?;
    let d = flow.dim() as f64;
    let offset: f64 = weights.iter().zip(&ld0).map(|(w, l)| w * (l - 0.918_938_533_204_672_8 * d)).sum::<f64>() / n;
    Ok((tape.value(loss).item() - offset, grad))
}

/// Reverse KL `(1/N) Σ [log p̂(x_i) - log(r̂(x_i) + floor)]` with
/// `x_i = T(z_i)` pushed through the inverse flow.
pub fn reverse_kl(flow: &FlowModel, target: &dyn DensityTarget, z: &Mat) -> Result<f64> {
    let s = flow.inverse(z)?;
    let v = target.values(&s.points)?;
    Ok(s.log_density.iter().zip(v).map(|(lp, r)| lp - (r + TARGET_FLOOR).ln()).sum::<f64>() / z.rows() as f64)
}

/// Value and reparameterized parameter gradient of [`reverse_kl`]. The
/// target enters through `∇_x log r̂` at the sampled points.
pub fn reverse_kl_grad(flow: &FlowModel, target: &dyn DensityTarget, z: &Mat) -> Result<(f64, Vec<f64>)> {
    if z.rows() == 0 || z.cols() != flow.dim() {
        return Err(contract("reverse KL needs a nonempty latent batch of the flow's dimension"));
    }
    let n = z.rows() as f64;
    let frame = flow.frame();
    let map = frame.map;
    let widths = frame.domain.widths();
    let centers: Vec<f64> = frame.domain.lo.iter().zip(&widths).map(|(a, w)| a + 0.5 * w).collect();

    let mut tape = Tape::new(flow.param_count());
    let zv = tape.constant(z.clone());
    let (y, sum_s) = couplings_inverse(flow, &mut tape, zv);
    let u = tape.scale(y, 1.0 / map.scale);
    let th = tape.tanh(u);
    let xr = tape.scale(th, map.half_width());
    let xs = tape.scale_cols(xr, &widths);
    let x = tape.offset_cols(xs, &centers);
    let points = tape.value(x).clone();
    let (values, g) = target.values_and_log_grad(&points)?;

    // -log|det ∂x/∂z| = Σ s + Σ_i [c + 2 log cosh(y_i/s)] + log_rescale
    let lc = tape.log_cosh(u);
    let lc_rows = tape.row_sum(lc);
    let mut neg_logdet = tape.scale(lc_rows, 2.0);
    if let Some(s) = sum_s {
        neg_logdet = tape.add(neg_logdet, s);
    }
    let gv = tape.constant(g);
    let gx = tape.mul(x, gv);
    let gx = tape.row_sum(gx);
    let per_row = tape.sub(neg_logdet, gx);
    let total = tape.sum(per_row);
    let loss = tape.scale(total, 1.0 / n);
    let grad = tape.grad_params(loss)?;

    let c = d_const(flow);
    let nl = tape.value(neg_logdet);
    let value = z
        .iter_rows()
        .enumerate()
        .map(|(i, zr)| log_std_normal(zr) + nl.get(i, 0) + c - (values[i] + TARGET_FLOOR).ln())
        .sum::<f64>()
        / n;
    Ok((value, grad))
}

/// Constant part of `-log|det ∂x/∂z|`: `d log(2s/(1+δ)) + log_rescale`.
fn d_const(flow: &FlowModel) -> f64 {
    let m = flow.frame().map;
    flow.dim() as f64 * (2.0 * m.scale / (1.0 + m.delta)).ln() + flow.frame().log_rescale()
}

/// Training data for [`train_flow`].
pub enum FlowData<'a> {
    /// Cross entropy over fixed points with importance weights.
    Weighted { points: &'a Mat, weights: &'a [f64] },
    /// Reverse KL against a target, drawing fresh latent batches every step;
    /// an epoch is `⌈samples_per_epoch / batch⌉` steps.
    Sampled { target: &'a dyn DensityTarget, samples_per_epoch: usize },
}

/// Runs `epochs` epochs of Adam on the flow and returns the mean batch
/// objective per epoch.
pub fn train_flow(
    flow: &mut FlowModel,
    opt: &mut Adam,
    data: FlowData<'_>,
    epochs: usize,
    batch: usize,
    rng: &mut impl Rng,
    mut on_epoch: impl FnMut(usize, f64) -> Result<()>,
) -> Result<Vec<f64>> {
    if epochs == 0 {
        return Ok(Vec::new());
    }
    if batch == 0 {
        return Err(contract("flow batch size must be positive"));
    }
    let mut trace = Vec::with_capacity(epochs);
    let mut perm: Vec<usize> = match &data {
        FlowData::Weighted { points, weights } => {
            check_weights(points, weights)?;
            (0..points.rows()).collect()
        }
        FlowData::Sampled { samples_per_epoch, .. } => {
            if *samples_per_epoch == 0 {
                return Err(contract("samples per epoch must be positive"));
            }
            Vec::new()
        }
    };
    for epoch in 0..epochs {
        let mut total = 0.0;
        let mut steps = 0;
        match &data {
            FlowData::Weighted { points, weights } => {
                perm.shuffle(rng);
                for idx in perm.chunks(batch) {
                    let x = points.select_rows(idx);
                    let w: Vec<f64> = idx.iter().map(|&i| weights[i]).collect();
                    let (v, g) = cross_entropy_is_grad(flow, &x, &w)?;
                    step(flow, opt, v, &g, epoch)?;
                    total += v;
                    steps += 1;
                }
            }
            FlowData::Sampled { target, samples_per_epoch } => {
                for _ in 0..samples_per_epoch.div_ceil(batch) {
                    let z = Mat::from_fn(batch, flow.dim(), |_, _| rng.sample(StandardNormal));
                    let (v, g) = reverse_kl_grad(flow, *target, &z)?;
                    step(flow, opt, v, &g, epoch)?;
                    total += v;
                    steps += 1;
                }
            }
        }
        let loss = total / steps as f64;
        trace.push(loss);
        on_epoch(epoch, loss)?;
    }
    Ok(trace)
}

fn step(flow: &mut FlowModel, opt: &mut Adam, value: f64, grad: &[f64], epoch: usize) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("flow objective at epoch {epoch}")));
    }
    opt.step(flow.params_mut(), grad).map_err(|e| Error::NonFinite(format!("flow epoch {epoch}: {e}")))
}
