//! Benchmark elliptic problems with manufactured Gaussian solutions on boxes.
//!
//! Every exact solution is a sum of isotropic Gaussians
//! `u(x) = Σ_c exp(-a |x - c|²)`, so value, gradient and Laplacian have closed
//! forms and the source is obtained by applying the operator to them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{forward_gradient, Scalar, Tape, Var};
use crate::error::{contract, Error, Result};
use crate::linalg::Mat;
use crate::net::{SurrogateNet, TapeJet};

/// Axis-aligned box `[lo_1, hi_1] x … x [lo_d, hi_d]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

const FACE_TOL: f64 = 1e-12;

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(Error::Config(format!("box bounds have lengths {} and {}", lo.len(), hi.len())));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a < b) || !a.is_finite() || !b.is_finite()) {
            return Err(Error::Config(format!("box needs finite lo < hi on every axis, got {lo:?} / {hi:?}")));
        }
        Ok(BoxDomain { lo, hi })
    }

    pub fn cube(dim: usize, lo: f64, hi: f64) -> Self {
        BoxDomain { lo: vec![lo; dim], hi: vec![hi; dim] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).collect()
    }

    pub fn volume(&self) -> f64 {
        self.widths().iter().product()
    }

    /// Membership in the closed box.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (a, b))| *a <= *v && *v <= *b)
    }

    /// Inside the closed box with at least one coordinate on a face.
    pub fn on_boundary(&self, x: &[f64]) -> bool {
        self.contains(x)
            && x.iter().zip(self.lo.iter().zip(&self.hi)).any(|(v, (a, b))| {
                let tol = FACE_TOL * (b - a);
                (v - a).abs() <= tol || (b - v).abs() <= tol
            })
    }

    /// Coordinate-wise clamp onto the closed box.
    pub fn clamp(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.lo.iter().zip(&self.hi)).map(|(v, (a, b))| v.clamp(*a, *b)).collect()
    }

    pub fn sample_uniform(&self, n: usize, rng: &mut impl Rng) -> Mat {
        let d = self.dim();
        Mat::from_fn(n, d, |_, j| rng.random_range(self.lo[j]..self.hi[j]))
    }

    /// Uniform on the boundary: a face is picked with probability proportional
    /// to its measure, then a point uniform within it.
    pub fn sample_boundary(&self, n: usize, rng: &mut impl Rng) -> Mat {
        let d = self.dim();
        let w = self.widths();
        let vol = self.volume();
        // Each axis contributes two faces of measure vol / w_axis; for d = 1 the
        // faces are points and are picked evenly.
        let face_measure: Vec<f64> = (0..d).map(|j| if d == 1 { 1.0 } else { vol / w[j] }).collect();
        let total: f64 = 2.0 * face_measure.iter().sum::<f64>();
        let mut out = Mat::zeros(n, d);
        for r in 0..n {
            let mut u = rng.random_range(0.0..total);
            let mut axis = d - 1;
            let mut upper = true;
            for (j, m) in face_measure.iter().enumerate() {
                if u < 2.0 * m {
                    axis = j;
                    upper = u >= *m;
                    break;
                }
                u -= 2.0 * m;
            }
            for j in 0..d {
                let v = if j == axis {
                    if upper { self.hi[j] } else { self.lo[j] }
                } else {
                    rng.random_range(self.lo[j]..self.hi[j])
                };
                out.set(r, j, v);
            }
        }
        out
    }
}

/// Differential operator `L` in `L u = s`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    /// `-Δu`.
    Poisson,
    /// `-∇·(u ∇|x|²) + Δu = Δu - 2 x·∇u - 2d u`.
    DriftDiffusion,
    /// `-Δu + u - u³`.
    NonlinearCubic,
}

impl Operator {
    /// `L u` at `x` given `u`, `∇u` and `Δu` there.
    pub fn apply<S: Scalar>(self, x: &[S], u: S, grad: &[S], lap: S) -> S {
        match self {
            Operator::Poisson => -lap,
            Operator::DriftDiffusion => {
                let two = S::from_f64(2.0);
                let drift = x.iter().zip(grad).fold(S::from_f64(0.0), |acc, (&xi, &gi)| acc + xi * gi);
                lap - two * drift - S::from_f64(2.0 * x.len() as f64) * u
            }
            Operator::NonlinearCubic => -lap + u - u * u * u,
        }
    }
}

/// A Dirichlet problem `L u = s` in a box with `u = g` on the boundary, where
/// `g` is the trace of the exact solution.
#[derive(Clone, Debug, PartialEq)]
pub struct Problem {
    name: String,
    domain: BoxDomain,
    operator: Operator,
    sharpness: f64,
    centers: Vec<Vec<f64>>,
}

impl Problem {
    /// General constructor; `centers` must live in `domain.dim()` dimensions.
    pub fn new(name: &str, domain: BoxDomain, operator: Operator, sharpness: f64, centers: Vec<Vec<f64>>) -> Result<Self> {
        let d = domain.dim();
        if centers.is_empty() || centers.iter().any(|c| c.len() != d) {
            return Err(Error::Config(format!("problem '{name}': solution centers must be {d}-dimensional")));
        }
        if !(sharpness > 0.0) {
            return Err(Error::Config(format!("problem '{name}': sharpness must be positive")));
        }
        Ok(Problem { name: name.to_string(), domain, operator, sharpness, centers })
    }

    /// `-Δu = s` on `[-1,1]²` with a single peak `exp(-1000 |x - (r_c, r_c)|²)`.
    pub fn peak2d(r_c: f64) -> Self {
        Problem::new("peak2d", BoxDomain::cube(2, -1.0, 1.0), Operator::Poisson, 1000.0, vec![vec![r_c, r_c]])
            .expect("valid preset")
    }

    /// Drift-diffusion on `[-1,1]²` with peaks at `±(0.5, 0.5)`.
    pub fn twopeak2d() -> Self {
        Problem::new(
            "twopeak2d",
            BoxDomain::cube(2, -1.0, 1.0),
            Operator::DriftDiffusion,
            1000.0,
            vec![vec![0.5, 0.5], vec![-0.5, -0.5]],
        )
        .expect("valid preset")
    }

    /// `-Δu = s` on `[-1,1]^d` with `u = exp(-10 |x|²)`.
    pub fn linear_hd(dim: usize) -> Self {
        Problem::new("linear_hd", BoxDomain::cube(dim, -1.0, 1.0), Operator::Poisson, 10.0, vec![vec![0.0; dim]])
            .expect("valid preset")
    }

    /// `-Δu + u - u³ = s` on `[-1,1]^d` with `u = exp(-10 |x|²)`.
    pub fn nonlinear_hd(dim: usize) -> Self {
        Problem::new("nonlinear_hd", BoxDomain::cube(dim, -1.0, 1.0), Operator::NonlinearCubic, 10.0, vec![vec![0.0; dim]])
            .expect("valid preset")
    }

    /// Same equation and exact solution on another box of equal dimension.
    pub fn with_domain(self, domain: BoxDomain) -> Result<Self> {
        if domain.dim() != self.dim() {
            return Err(Error::Config(format!(
                "problem '{}': domain has dimension {}, expected {}",
                self.name,
                domain.dim(),
                self.dim()
            )));
        }
        Problem::new(&self.name, domain, self.operator, self.sharpness, self.centers)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn operator(&self) -> Operator {
        self.operator
    }

    pub fn exact(&self, x: &[f64]) -> f64 {
        self.exact_scalar(x)
    }

    fn exact_scalar<S: Scalar>(&self, x: &[S]) -> S {
        let a = S::from_f64(self.sharpness);
        self.centers.iter().fold(S::from_f64(0.0), |acc, c| {
            let rho2 = x.iter().zip(c).fold(S::from_f64(0.0), |s, (&xi, &ci)| s + (xi - S::from_f64(ci)).square());
            acc + (-(a * rho2)).exp()
        })
    }

    /// Closed-form `(u, ∇u, Δu)` of the exact solution.
    pub fn exact_derivatives(&self, x: &[f64]) -> (f64, Vec<f64>, f64) {
        let (u, g, l) = self.exact_derivatives_scalar(x);
        (u, g, l)
    }

    fn exact_derivatives_scalar<S: Scalar>(&self, x: &[S]) -> (S, Vec<S>, S) {
        let a = self.sharpness;
        let d = x.len() as f64;
        let zero = S::from_f64(0.0);
        let mut u = zero;
        let mut grad = vec![zero; x.len()];
        let mut lap = zero;
        for c in &self.centers {
            let diff: Vec<S> = x.iter().zip(c).map(|(&xi, &ci)| xi - S::from_f64(ci)).collect();
            let rho2 = diff.iter().fold(zero, |s, &v| s + v * v);
            let uc = (-(S::from_f64(a) * rho2)).exp();
            u = u + uc;
            for (g, &v) in grad.iter_mut().zip(&diff) {
                *g = *g - S::from_f64(2.0 * a) * v * uc;
            }
            lap = lap + uc * (S::from_f64(4.0 * a * a) * rho2 - S::from_f64(2.0 * a * d));
        }
        (u, grad, lap)
    }

    pub fn source(&self, x: &[f64]) -> f64 {
        self.source_scalar(x)
    }

    fn source_scalar<S: Scalar>(&self, x: &[S]) -> S {
        let (u, g, l) = self.exact_derivatives_scalar(x);
        self.operator.apply(x, u, &g, l)
    }

    /// `∇s` by forward-mode differentiation of the closed-form source.
    pub fn source_grad(&self, x: &[f64]) -> Vec<f64> {
        forward_gradient(x, |y| self.source_scalar(y))
    }

    pub fn boundary_value(&self, x: &[f64]) -> f64 {
        self.exact(x)
    }

    /// `L u(x; Θ) - s(x)` with network derivatives from automatic differentiation.
    pub fn residual(&self, net: &SurrogateNet, x: &[f64]) -> Result<f64> {
        let u = net.eval(x)?;
        let g = net.grad_input(x)?;
        let l = net.laplacian(x)?;
        Ok(self.operator.apply(x, u, &g, l) - self.source(x))
    }

    /// Residual of the exact solution with its closed-form derivatives; zero up
    /// to rounding when source and operator agree.
    pub fn exact_residual(&self, x: &[f64]) -> f64 {
        let (u, g, l) = self.exact_derivatives(x);
        self.operator.apply(x, u, &g, l) - self.source(x)
    }

    /// `u(x; Θ) - g(x)` at a boundary point.
    pub fn boundary_mismatch(&self, net: &SurrogateNet, x: &[f64]) -> Result<f64> {
        if !self.domain.on_boundary(x) {
            return Err(contract(format!("{x:?} is not on the boundary")));
        }
        Ok(net.eval(x)? - self.boundary_value(x))
    }

    /// Residuals at the rows of `x`.
    pub fn residual_batch(&self, net: &SurrogateNet, x: &Mat) -> Result<Vec<f64>> {
        let jet = net.jet_batch(x)?;
        Ok(x.iter_rows()
            .enumerate()
            .map(|(r, row)| self.operator.apply(row, jet.value[r], jet.grad.row(r), jet.laplacian[r]) - self.source(row))
            .collect())
    }

    /// Residuals and their input gradients `∇_x r` at the rows of `x`.
    pub fn residual_grad_batch(&self, net: &SurrogateNet, x: &Mat) -> Result<(Vec<f64>, Mat)> {
        let mut tape = Tape::new(net.param_count());
        let xv = tape.input(x.clone());
        let jet = net.on_tape(&mut tape, xv, true)?;
        let r = self.residual_on_tape(&mut tape, &jet, xv)?;
        let total = tape.sum(r);
        let values = tape.value(r).as_slice().to_vec();
        let grads = tape.backward(total)?;
        let mut g = grads.wrt(xv).cloned().unwrap_or_else(|| Mat::zeros(x.rows(), x.cols()));
        for (i, row) in x.iter_rows().enumerate() {
            for (gv, sv) in g.row_mut(i).iter_mut().zip(self.source_grad(row)) {
                *gv -= sv;
            }
        }
        Ok((values, g))
    }

    /// Boundary mismatches at the rows of `x` (not checked to lie on the boundary).
    pub fn boundary_mismatch_batch(&self, net: &SurrogateNet, x: &Mat) -> Result<Vec<f64>> {
        let u = net.eval_batch(x)?;
        Ok(x.iter_rows().zip(u).map(|(row, v)| v - self.boundary_value(row)).collect())
    }

    /// Residual column `n x 1` on the tape from network outputs at `x`.
    /// The source enters as a constant, so input adjoints through the result
    /// are those of `L u` only.
    pub fn residual_on_tape(&self, tape: &mut Tape, jet: &TapeJet, x: Var) -> Result<Var> {
        let lap = jet.laplacian.ok_or_else(|| contract("residual needs a jet with derivatives"))?;
        let xs = tape.value(x).clone();
        let lu = match self.operator {
            Operator::Poisson => tape.scale(lap, -1.0),
            Operator::DriftDiffusion => {
                let d = xs.cols();
                let mut acc = tape.scale(jet.value, -2.0 * d as f64);
                acc = tape.add(acc, lap);
                for (i, gi) in jet.grad.iter().enumerate() {
                    let xi = tape.select_cols(x, &[i]);
                    let term = tape.mul(*gi, xi);
                    let term = tape.scale(term, -2.0);
                    acc = tape.add(acc, term);
                }
                acc
            }
            Operator::NonlinearCubic => {
                let u2 = tape.square(jet.value);
                let u3 = tape.mul(u2, jet.value);
                let a = tape.sub(jet.value, lap);
                tape.sub(a, u3)
            }
        };
        let s = tape.constant(Mat::column(xs.iter_rows().map(|r| self.source(r)).collect()));
        Ok(tape.sub(lu, s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn peak_values() {
        let p = Problem::peak2d(0.5);
        assert_eq!(p.exact(&[0.5, 0.5]), 1.0);
        assert!((p.source(&[0.5, 0.5]) - 4000.0).abs() < 1e-9);
        assert_eq!(p.boundary_value(&[1.0, 1.0]), (-500.0f64).exp());
        let q = Problem::twopeak2d();
        assert_eq!(q.exact(&[0.5, 0.5]), 1.0 + (-2000.0f64).exp());
        assert_eq!(Problem::linear_hd(7).exact(&[0.0; 7]), 1.0);
    }

    #[test]
    fn zero_net_residual_at_peak_is_minus_source() {
        let p = Problem::peak2d(0.5);
        let mut net = SurrogateNet::new(&[2, 4, 1], 0).unwrap();
        net.params_mut().iter_mut().for_each(|v| *v = 0.0);
        assert!((p.residual(&net, &[0.5, 0.5]).unwrap() + 4000.0).abs() < 1e-9);
        let m = p.boundary_mismatch(&net, &[1.0, 1.0]).unwrap();
        assert_eq!(m, -(-500.0f64).exp());
        assert!(p.boundary_mismatch(&net, &[0.2, 0.1]).is_err());
    }

    #[test]
    fn boundary_samples_lie_on_faces() {
        let b = BoxDomain::new(vec![-1.0, 0.0, 2.0], vec![1.0, 0.5, 3.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = b.sample_boundary(500, &mut rng);
        assert!(pts.iter_rows().all(|x| b.on_boundary(x)));
    }

    #[test]
    fn bad_boxes_are_rejected() {
        assert!(BoxDomain::new(vec![0.0], vec![0.0]).is_err());
        assert!(BoxDomain::new(vec![0.0, 1.0], vec![1.0]).is_err());
    }
}
