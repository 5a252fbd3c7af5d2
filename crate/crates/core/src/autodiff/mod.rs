//! Differentiation machinery: a reverse-mode matrix tape for parameter
//! gradients and forward-mode duals for pointwise input derivatives.

mod dual;
mod tape;

pub use dual::{forward_gradient, DualScalar, Scalar};
pub use tape::{Gradients, Tape, Var};

pub(crate) use tape::{jet_affine_forward, jet_seed, jet_tanh_forward, log_cosh};
