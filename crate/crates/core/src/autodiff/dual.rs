use std::ops::{Add, Div, Mul, Neg, Sub};

/// Arithmetic shared by plain floats and forward-mode duals, so closed forms
/// and the pointwise network pass can be written once and differentiated.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(v: f64) -> Self;
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;

    fn square(self) -> Self {
        self * self
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// First-order forward-mode number `value + tangent·ε`, `ε² = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualScalar {
    pub value: f64,
    pub tangent: f64,
}

impl DualScalar {
    pub fn new(value: f64, tangent: f64) -> Self {
        DualScalar { value, tangent }
    }

    pub fn constant(value: f64) -> Self {
        DualScalar { value, tangent: 0.0 }
    }

    pub fn variable(value: f64) -> Self {
        DualScalar { value, tangent: 1.0 }
    }

    /// Seeds `x` along coordinate direction `dir`.
    pub fn seed(x: &[f64], dir: usize) -> Vec<DualScalar> {
        x.iter()
            .enumerate()
            .map(|(i, &v)| DualScalar::new(v, if i == dir { 1.0 } else { 0.0 }))
            .collect()
    }
}

impl Add for DualScalar {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        DualScalar::new(self.value + o.value, self.tangent + o.tangent)
    }
}

impl Sub for DualScalar {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        DualScalar::new(self.value - o.value, self.tangent - o.tangent)
    }
}

impl Mul for DualScalar {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        DualScalar::new(self.value * o.value, self.tangent * o.value + self.value * o.tangent)
    }
}

impl Div for DualScalar {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q = self.value / o.value;
        DualScalar::new(q, (self.tangent - q * o.tangent) / o.value)
    }
}

impl Neg for DualScalar {
    type Output = Self;
    fn neg(self) -> Self {
        DualScalar::new(-self.value, -self.tangent)
    }
}

impl Scalar for DualScalar {
    fn from_f64(v: f64) -> Self {
        DualScalar::constant(v)
    }
    fn value(self) -> f64 {
        self.value
    }
    fn exp(self) -> Self {
        let e = self.value.exp();
        DualScalar::new(e, e * self.tangent)
    }
    fn ln(self) -> Self {
        DualScalar::new(self.value.ln(), self.tangent / self.value)
    }
    fn tanh(self) -> Self {
        let t = self.value.tanh();
        DualScalar::new(t, (1.0 - t * t) * self.tangent)
    }
}

/// Gradient of a scalar closed form by `d` forward passes.
pub fn forward_gradient(x: &[f64], f: impl Fn(&[DualScalar]) -> DualScalar) -> Vec<f64> {
    (0..x.len()).map(|i| f(&DualScalar::seed(x, i)).tangent).collect()
}
