//! Maps between a physical box, the reference cube `[-1/2, 1/2]^d` and all
//! of `R^d`, plus the cutoff and projection used around the box.
//!
//! The padded box `B` is the reference cube widened by `δ/2` on every side;
//! the logarithmic map `ℓ` sends `B` onto `R^d` axis by axis.

use serde::{Deserialize, Serialize};

use crate::autodiff::log_cosh;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::problems::BoxDomain;

/// `ℓ(x) = (s/2) log[(2x + 1 + δ) / (1 + δ - 2x)]` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundedMap {
    pub delta: f64,
    pub scale: f64,
}

impl Default for BoundedMap {
    fn default() -> Self {
        BoundedMap { delta: 0.01, scale: 2.0 }
    }
}

impl BoundedMap {
    pub fn new(delta: f64, scale: f64) -> Result<Self> {
        if !(delta > 0.0 && scale > 0.0 && delta.is_finite() && scale.is_finite()) {
            return Err(Error::Config(format!("bounded map needs δ > 0 and s > 0, got δ={delta}, s={scale}")));
        }
        Ok(BoundedMap { delta, scale })
    }

    /// Half-width of the padded reference interval, `(1 + δ)/2`.
    pub fn half_width(&self) -> f64 {
        0.5 * (1.0 + self.delta)
    }

    /// `ℓ` on one coordinate; `x` must lie strictly inside `B`.
    pub fn forward_1d(&self, x: f64) -> Result<f64> {
        let a = 1.0 + self.delta;
        if !(x.abs() < self.half_width()) {
            return Err(Error::Domain(format!("reference coordinate {x} is outside the open interval (-{h}, {h})", h = self.half_width())));
        }
        Ok(0.5 * self.scale * ((a + 2.0 * x) / (a - 2.0 * x)).ln())
    }

    /// `ℓ⁻¹(y) = ((1 + δ)/2) tanh(y/s)`.
    pub fn inverse_1d(&self, y: f64) -> f64 {
        self.half_width() * (y / self.scale).tanh()
    }

    /// `ℓ'(x) = 2 s (1 + δ) / ((1 + δ)² - 4x²)`.
    pub fn derivative_1d(&self, x: f64) -> f64 {
        let a = 1.0 + self.delta;
        2.0 * self.scale * a / (a * a - 4.0 * x * x)
    }

    /// `log ℓ'(ℓ⁻¹(y))`, written in `y` so it stays finite where `ℓ⁻¹`
    /// rounds onto the edge of `B`.
    pub fn log_derivative_at_image(&self, y: f64) -> f64 {
        (2.0 * self.scale / (1.0 + self.delta)).ln() + 2.0 * log_cosh(y / self.scale)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        x.iter().map(|&v| self.forward_1d(v)).collect()
    }

    pub fn inverse(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|&v| self.inverse_1d(v)).collect()
    }

    /// `log |∇_x ℓ|` at a reference point.
    pub fn log_jacobian(&self, x: &[f64]) -> f64 {
        x.iter().map(|&v| self.derivative_1d(v).ln()).sum()
    }
}

/// Affine correspondence between a physical box and the reference cube.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub domain: BoxDomain,
    pub map: BoundedMap,
}

impl Frame {
    pub fn new(domain: BoxDomain, map: BoundedMap) -> Self {
        Frame { domain, map }
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn to_reference(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.domain.lo.iter().zip(&self.domain.hi))
            .map(|(v, (a, b))| (v - a) / (b - a) - 0.5)
            .collect()
    }

    pub fn to_physical(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.domain.lo.iter().zip(&self.domain.hi))
            .map(|(v, (a, b))| a + (b - a) * (v + 0.5))
            .collect()
    }

    /// `log |det|` of the physical-to-reference rescaling, `-Σ log w_i`.
    pub fn log_rescale(&self) -> f64 {
        -self.domain.widths().iter().map(|w| w.ln()).sum::<f64>()
    }

    /// The padded box `B` in physical coordinates.
    pub fn padded_box(&self) -> BoxDomain {
        let pad = 0.5 * self.map.delta;
        let w = self.domain.widths();
        BoxDomain {
            lo: self.domain.lo.iter().zip(&w).map(|(a, w)| a - pad * w).collect(),
            hi: self.domain.hi.iter().zip(&w).map(|(b, w)| b + pad * w).collect(),
        }
    }

    /// Whether a physical point lies strictly inside `B`.
    pub fn in_padded_box(&self, x: &[f64]) -> bool {
        let h = self.map.half_width();
        self.to_reference(x).iter().all(|v| v.abs() < h)
    }

    /// Cutoff `h` at a physical point.
    pub fn cutoff(&self, x: &[f64]) -> f64 {
        Cutoff { delta: self.map.delta }.eval(&self.to_reference(x))
    }

    /// `∇_x h` at a physical point.
    pub fn cutoff_grad(&self, x: &[f64]) -> Vec<f64> {
        let c = Cutoff { delta: self.map.delta };
        let r = self.to_reference(x);
        let g = c.grad(&r);
        g.iter().zip(self.domain.widths()).map(|(gi, w)| gi / w).collect()
    }
}

/// Piecewise-linear taper: 1 on the reference cube, 0 outside `B`, linear
/// in between, multiplied over axes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cutoff {
    pub delta: f64,
}

impl Cutoff {
    fn ramp(&self, x: f64) -> f64 {
        let a = x.abs();
        if a <= 0.5 {
            1.0
        } else if a < 0.5 * (1.0 + self.delta) {
            (1.0 + self.delta - 2.0 * a) / self.delta
        } else {
            0.0
        }
    }

    fn ramp_slope(&self, x: f64) -> f64 {
        let a = x.abs();
        if a > 0.5 && a < 0.5 * (1.0 + self.delta) {
            -2.0 * x.signum() / self.delta
        } else {
            0.0
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        x.iter().map(|&v| self.ramp(v)).product()
    }

    /// Gradient in reference coordinates; one-sided at the kinks.
    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                x.iter()
                    .enumerate()
                    .map(|(j, &v)| if i == j { self.ramp_slope(v) } else { self.ramp(v) })
                    .product()
            })
            .collect()
    }
}

/// Clamps a point onto the closed box.
pub fn project(domain: &BoxDomain, x: &[f64]) -> Vec<f64> {
    domain.clamp(x)
}

/// Splits points into those already in the closed box and the projections of
/// the rest. Returns the indices of interior points and the projected points.
pub fn partition_samples(domain: &BoxDomain, points: &Mat) -> (Vec<usize>, Mat) {
    let mut interior = Vec::new();
    let mut projected = Vec::new();
    for (i, p) in points.iter_rows().enumerate() {
        let q = project(domain, p);
        if q.as_slice() == p {
            interior.push(i);
        } else {
            projected.push(q);
        }
    }
    (interior, Mat::from_rows(&projected, points.cols()))
}
