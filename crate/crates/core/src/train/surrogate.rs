use rand::seq::SliceRandom;
use rand::Rng;

use super::adam::Adam;
use super::losses::{inverse_densities, residual_loss_grad};
use crate::error::{contract, Error, Result};
use crate::linalg::Mat;
use crate::net::SurrogateNet;
use crate::problems::Problem;

/// Interior collocation points (optionally tagged with the density they were
/// drawn from) and boundary points for one adaptivity stage.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub interior: Mat,
    pub densities: Option<Vec<f64>>,
    pub boundary: Mat,
    pub stage: usize,
}

impl TrainingSet {
    pub fn new(interior: Mat, boundary: Mat, stage: usize) -> Self {
        TrainingSet { interior, densities: None, boundary, stage }
    }

    pub fn with_densities(mut self, densities: Vec<f64>) -> Result<Self> {
        inverse_densities(&densities, self.interior.rows())?;
        self.densities = Some(densities);
        Ok(self)
    }

    /// Checks that interior points lie in the closed domain and boundary
    /// points on its boundary.
    pub fn validate(&self, problem: &Problem) -> Result<()> {
        let dom = problem.domain();
        if let Some(p) = self.interior.iter_rows().find(|p| !dom.contains(p)) {
            return Err(contract(format!("interior point {p:?} is outside the domain")));
        }
        if let Some(p) = self.boundary.iter_rows().find(|p| !dom.on_boundary(p)) {
            return Err(contract(format!("boundary point {p:?} is not on the boundary")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    /// Plain mean of squared residuals.
    Plain,
    /// Residuals weighted by inverse proposal density.
    Importance,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurrogateOptions {
    pub epochs: usize,
    pub batch: usize,
    pub gamma_hat: f64,
    pub mode: LossMode,
}

/// Endless stream of index batches over `0..n`: each pass is a fresh
/// shuffle, and a batch may straddle two passes.
#[derive(Clone, Debug)]
pub struct Cycler {
    perm: Vec<usize>,
    pos: usize,
}

impl Cycler {
    pub fn new(n: usize) -> Self {
        let perm: Vec<usize> = (0..n).collect();
        Cycler { pos: n, perm }
    }

    pub fn take(&mut self, k: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.perm.len() {
                self.perm.shuffle(rng);
                self.pos = 0;
            }
            let n = (k - out.len()).min(self.perm.len() - self.pos);
            out.extend_from_slice(&self.perm[self.pos..self.pos + n]);
            self.pos += n;
        }
        out
    }
}

/// Runs `opts.epochs` epochs of Adam over minibatches and returns the mean
/// minibatch loss of each epoch. An epoch is `⌈N_r/m⌉` steps over a fresh
/// shuffle of the interior set; boundary batches of `min(m, N_b)` points
/// cycle through their own shuffles. `on_epoch` sees the epoch index, its
/// loss and the updated network.
pub fn train_surrogate(
    net: &mut SurrogateNet,
    opt: &mut Adam,
    problem: &Problem,
    set: &TrainingSet,
    opts: &SurrogateOptions,
    rng: &mut impl Rng,
    mut on_epoch: impl FnMut(usize, f64, &SurrogateNet) -> Result<()>,
) -> Result<Vec<f64>> {
    let n = set.interior.rows();
    let nb = set.boundary.rows();
    if opts.epochs == 0 {
        return Ok(Vec::new());
    }
    if n == 0 || nb == 0 || opts.batch == 0 {
        return Err(contract("training needs interior points, boundary points and a positive batch size"));
    }
    let inv = match (opts.mode, &set.densities) {
        (LossMode::Plain, _) => None,
        (LossMode::Importance, Some(d)) => Some(inverse_densities(d, n)?),
        (LossMode::Importance, None) => return Err(contract("importance mode needs proposal densities")),
    };
    let mut boundary_batches = Cycler::new(nb);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        perm.shuffle(rng);
        let mut total = 0.0;
        let mut steps = 0;
        for idx in perm.chunks(opts.batch) {
            let xi = set.interior.select_rows(idx);
            let w: Option<Vec<f64>> = inv.as_ref().map(|w| idx.iter().map(|&i| w[i]).collect());
            let bidx = boundary_batches.take(opts.batch.min(nb), rng);
            let xb = set.boundary.select_rows(&bidx);
            let (loss, grad) = residual_loss_grad(net, problem, &xi, w.as_deref(), &xb, opts.gamma_hat)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at stage {} epoch {epoch}", set.stage)));
            }
            opt.step(net.params_mut(), &grad)
                .map_err(|e| Error::NonFinite(format!("stage {} epoch {epoch}: {e}", set.stage)))?;
            total += loss;
            steps += 1;
        }
        let loss = total / steps as f64;
        trace.push(loss);
        on_epoch(epoch, loss, net)?;
    }
    Ok(trace)
}
