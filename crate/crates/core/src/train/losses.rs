//! Residual losses for the surrogate.

use crate::autodiff::Tape;
use crate::error::{contract, Result};
use crate::linalg::Mat;
use crate::net::SurrogateNet;
use crate::problems::Problem;

/// `mean(r²) + γ̂ mean(b²)`.
pub fn empirical_loss(net: &SurrogateNet, problem: &Problem, interior: &Mat, boundary: &Mat, gamma_hat: f64) -> Result<f64> {
    check_nonempty(interior, boundary)?;
    let r = problem.residual_batch(net, interior)?;
    let b = problem.boundary_mismatch_batch(net, boundary)?;
    Ok(mean_square(&r) + gamma_hat * mean_square(&b))
}

/// `mean(r²/p̂) + mean(b²)` for interior points drawn from the density `p̂`.
pub fn is_loss(net: &SurrogateNet, problem: &Problem, interior: &Mat, densities: &[f64], boundary: &Mat) -> Result<f64> {
    check_nonempty(interior, boundary)?;
    let w = inverse_densities(densities, interior.rows())?;
    let r = problem.residual_batch(net, interior)?;
    let b = problem.boundary_mismatch_batch(net, boundary)?;
    Ok(weighted_mean_square(&r, &w) + mean_square(&b))
}

pub fn mean_square(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64
}

pub fn weighted_mean_square(v: &[f64], w: &[f64]) -> f64 {
    v.iter().zip(w).map(|(x, w)| w * x * x).sum::<f64>() / v.len() as f64
}

/// `1/p̂` per point, rejecting non-positive densities.
pub fn inverse_densities(densities: &[f64], n: usize) -> Result<Vec<f64>> {
    if densities.len() != n {
        return Err(contract(format!("{} densities for {n} points", densities.len())));
    }
    densities
        .iter()
        .map(|&p| if p > 0.0 && p.is_finite() { Ok(1.0 / p) } else { Err(contract(format!("proposal density {p} is not positive"))) })
        .collect()
}

fn check_nonempty(interior: &Mat, boundary: &Mat) -> Result<()> {
    if interior.rows() == 0 || boundary.rows() == 0 {
        return Err(contract("loss needs nonempty interior and boundary batches"));
    }
    Ok(())
}

/// Value and parameter gradient of `mean(w r²) + γ̂ mean(b²)` on one batch;
/// `weights = None` means unit weights.
pub fn residual_loss_grad(
    net: &SurrogateNet,
    problem: &Problem,
    interior: &Mat,
    weights: Option<&[f64]>,
    boundary: &Mat,
    gamma_hat: f64,
) -> Result<(f64, Vec<f64>)> {
    check_nonempty(interior, boundary)?;
    let mut tape = Tape::new(net.param_count());
    let x = tape.constant(interior.clone());
    let jet = net.on_tape(&mut tape, x, true)?;
    let r = problem.residual_on_tape(&mut tape, &jet, x)?;
    let mut r2 = tape.square(r);
    if let Some(w) = weights {
        if w.len() != interior.rows() {
            return Err(contract(format!("{} weights for {} interior points", w.len(), interior.rows())));
        }
        let wv = tape.constant(Mat::column(w.to_vec()));
        r2 = tape.mul(r2, wv);
    }
    let interior_term = tape.mean(r2);

    let xb = tape.constant(boundary.clone());
    let ub = net.on_tape(&mut tape, xb, false)?;
    let g = tape.constant(Mat::column(boundary.iter_rows().map(|p| problem.boundary_value(p)).collect()));
    let b = tape.sub(ub.value, g);
    let b2 = tape.square(b);
    let boundary_term = tape.mean(b2);
    let boundary_term = tape.scale(boundary_term, gamma_hat);

    let loss = tape.add(interior_term, boundary_term);
    let value = tape.value(loss).item();
    let grad = tape.grad_params(loss)?;
    Ok((value, grad))
}
