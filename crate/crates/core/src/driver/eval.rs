//! Error metrics and flow diagnostics evaluated on tensor grids.

use crate::error::{contract, Error, Result};
use crate::flow::FlowModel;
use crate::linalg::Mat;
use crate::net::SurrogateNet;
use crate::problems::{BoxDomain, Problem};

/// Largest tensor grid any metric will build.
pub const MAX_GRID_POINTS: usize = 1 << 22;

const CHUNK: usize = 8192;

/// Nodes of `[lo, hi]` per axis, `n` equispaced nodes including both ends
/// (the midpoint when `n = 1`), in row-major order with the last axis fastest.
pub fn tensor_grid(lo: &[f64], hi: &[f64], n: usize) -> Result<Mat> {
    let d = lo.len();
    let total = grid_size(n, d)?;
    let axes: Vec<Vec<f64>> = lo
        .iter()
        .zip(hi)
        .map(|(&a, &b)| {
            if n == 1 {
                vec![0.5 * (a + b)]
            } else {
                (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
            }
        })
        .collect();
    Ok(fill_grid(&axes, total))
}

/// Cell midpoints of an `n^d` partition of `domain`, and the cell volume.
pub fn midpoint_grid(domain: &BoxDomain, n: usize) -> Result<(Mat, f64)> {
    let d = domain.dim();
    let total = grid_size(n, d)?;
    let axes: Vec<Vec<f64>> = domain
        .lo
        .iter()
        .zip(&domain.hi)
        .map(|(&a, &b)| (0..n).map(|i| a + (b - a) * (i as f64 + 0.5) / n as f64).collect())
        .collect();
    let cell = domain.volume() / total as f64;
    Ok((fill_grid(&axes, total), cell))
}

fn grid_size(n: usize, d: usize) -> Result<usize> {
    if n == 0 || d == 0 {
        return Err(Error::Config("grid needs at least one node and one axis".into()));
    }
    (0..d)
        .try_fold(1usize, |acc, _| acc.checked_mul(n).filter(|&t| t <= MAX_GRID_POINTS))
        .ok_or_else(|| Error::Config(format!("grid of {n}^{d} nodes exceeds the limit of {MAX_GRID_POINTS} points")))
}

fn fill_grid(axes: &[Vec<f64>], total: usize) -> Mat {
    let d = axes.len();
    let mut out = Mat::zeros(total, d);
    let mut idx = vec![0usize; d];
    for r in 0..total {
        for (j, row) in out.row_mut(r).iter_mut().enumerate() {
            *row = axes[j][idx[j]];
        }
        for j in (0..d).rev() {
            idx[j] += 1;
            if idx[j] < axes[j].len() {
                break;
            }
            idx[j] = 0;
        }
    }
    out
}

/// Applies `f` to row blocks of `x` and concatenates the results.
pub fn chunked(x: &Mat, mut f: impl FnMut(&Mat) -> Result<Vec<f64>>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(x.rows());
    let mut start = 0;
    while start < x.rows() {
        let end = (start + CHUNK).min(x.rows());
        out.extend(f(&x.row_block(start, end))?);
        start = end;
    }
    Ok(out)
}

/// Mean of `(u_NN - u)²` over an `n`-per-axis node grid of the whole domain.
pub fn grid_mse(net: &SurrogateNet, problem: &Problem, n: usize) -> Result<f64> {
    if problem.dim() > 3 {
        return Err(Error::Config(format!("full-domain error grid is limited to d <= 3, problem has d = {}", problem.dim())));
    }
    let dom = problem.domain();
    let grid = tensor_grid(&dom.lo, &dom.hi, n)?;
    let u = chunked(&grid, |b| net.eval_batch(b))?;
    let se: f64 = grid.iter_rows().zip(&u).map(|(x, v)| (v - problem.exact(x)).powi(2)).sum();
    Ok(se / grid.rows() as f64)
}

/// Nodes of `[-h, h]^d` with `n` per axis, the grid around the origin used
/// for the relative error and the residual variance.
pub fn origin_grid(dim: usize, n: usize, half_width: f64) -> Result<Mat> {
    tensor_grid(&vec![-half_width; dim], &vec![half_width; dim], n)
}

/// `‖u_NN - u‖₂ / ‖u‖₂` over the rows of `points`.
pub fn relative_error(net: &SurrogateNet, problem: &Problem, points: &Mat) -> Result<f64> {
    let u = chunked(points, |b| net.eval_batch(b))?;
    let (mut num, mut den) = (0.0, 0.0);
    for (x, v) in points.iter_rows().zip(&u) {
        let e = problem.exact(x);
        num += (v - e).powi(2);
        den += e * e;
    }
    if den == 0.0 {
        return Err(contract("exact solution vanishes on the evaluation grid"));
    }
    Ok((num / den).sqrt())
}

/// Unbiased sample variance (denominator `n - 1`).
pub fn sample_variance(v: &[f64]) -> Result<f64> {
    if v.len() < 2 {
        return Err(contract("sample variance needs at least two values"));
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    Ok(v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Unbiased sample variance of the residual over the rows of `points`.
pub fn residual_variance(net: &SurrogateNet, problem: &Problem, points: &Mat) -> Result<f64> {
    let r = chunked(points, |b| problem.residual_batch(net, b))?;
    sample_variance(&r)
}

/// How well a density matches the residual-induced distribution on a grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowDiagnostic {
    /// `KL(p* ‖ p̂)` with `p* = r² / ∫ r²`; `None` when the residual vanishes on the grid.
    pub kl: Option<f64>,
    /// `ĉ = 1 / ∫ r²`; infinite when the residual vanishes.
    pub c_hat: f64,
    /// Smallest and largest `r² / p̂` over the grid.
    pub tau1: f64,
    pub tau2: f64,
}

/// Midpoint-rule diagnostic on an `n^d` grid of `domain`, given batch
/// evaluators for the squared residual and the log-density. Working with
/// `log p̂` keeps the KL finite where the density underflows.
pub fn density_diagnostic(
    domain: &BoxDomain,
    n: usize,
    mut residual_sq: impl FnMut(&Mat) -> Result<Vec<f64>>,
    mut log_density: impl FnMut(&Mat) -> Result<Vec<f64>>,
) -> Result<FlowDiagnostic> {
    let (grid, cell) = midpoint_grid(domain, n)?;
    let r2 = chunked(&grid, &mut residual_sq)?;
    let logp = chunked(&grid, &mut log_density)?;
    let mass: f64 = r2.iter().sum::<f64>() * cell;
    let mut tau1 = f64::INFINITY;
    let mut tau2 = 0.0f64;
    for (&r, &lq) in r2.iter().zip(&logp) {
        let w = if r > 0.0 { (r.ln() - lq).exp() } else { 0.0 };
        tau1 = tau1.min(w);
        tau2 = tau2.max(w);
    }
    if !(mass > 0.0 && mass.is_finite()) {
        return Ok(FlowDiagnostic { kl: None, c_hat: f64::INFINITY, tau1, tau2 });
    }
    let mut kl = 0.0;
    for (&r, &lq) in r2.iter().zip(&logp) {
        if r > 0.0 {
            let ps = r / mass;
            kl += ps * (ps.ln() - lq) * cell;
        }
    }
    Ok(FlowDiagnostic { kl: Some(kl), c_hat: 1.0 / mass, tau1, tau2 })
}

/// Quadrature of `P(|r²/p̂ - μ| > a; p̂)` with `μ = ∫ r²` over an `n^d`
/// midpoint grid of `domain`; the mass of `p̂` outside the domain is not
/// counted.
pub fn tail_probability(
    domain: &BoxDomain,
    n: usize,
    a: f64,
    mut residual_sq: impl FnMut(&Mat) -> Result<Vec<f64>>,
    mut log_density: impl FnMut(&Mat) -> Result<Vec<f64>>,
) -> Result<f64> {
    let (grid, cell) = midpoint_grid(domain, n)?;
    let r2 = chunked(&grid, &mut residual_sq)?;
    let logp = chunked(&grid, &mut log_density)?;
    let mu: f64 = r2.iter().sum::<f64>() * cell;
    Ok(r2
        .iter()
        .zip(&logp)
        .filter(|(&r, &lq)| {
            let w = if r > 0.0 { (r.ln() - lq).exp() } else { 0.0 };
            (w - mu).abs() > a
        })
        .map(|(_, &lq)| lq.exp() * cell)
        .sum())
}

/// [`density_diagnostic`] for a trained flow against the residual of `net`.
pub fn flow_diagnostic(flow: &FlowModel, net: &SurrogateNet, problem: &Problem, n: usize) -> Result<FlowDiagnostic> {
    if problem.dim() > 2 {
        return Err(Error::Config(format!("flow diagnostics are limited to d <= 2, problem has d = {}", problem.dim())));
    }
    density_diagnostic(
        problem.domain(),
        n,
        |x| Ok(problem.residual_batch(net, x)?.into_iter().map(|r| r * r).collect()),
        |x| flow.log_density(x),
    )
}
