//! Neural PDE surrogates with residual-driven adaptive collocation sampling.
//!
//! A fully connected network `u(x; Θ)` is trained to minimize the squared PDE
//! residual at collocation points. The adaptive strategies fit an invertible
//! flow density to the squared residual and draw new collocation points from
//! it, either replacing the training set each stage (`das_r`, trained with
//! importance weights) or growing it (`das_g`). Uniform sampling and
//! residual-based refinement (`rar`) are included as baselines.

pub mod autodiff;
pub mod driver;
pub mod error;
pub mod flow;
pub mod linalg;
pub mod net;
pub mod problems;
pub mod train;

pub use error::{Error, Result};
pub use linalg::Mat;
pub use net::SurrogateNet;
