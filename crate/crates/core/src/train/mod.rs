//! Objectives and optimization loops for the surrogate and the flow.

mod adam;
mod flow_fit;
mod losses;
mod surrogate;

pub use adam::Adam;
pub use losses::{empirical_loss, inverse_densities, is_loss, mean_square, residual_loss_grad, weighted_mean_square};
pub use surrogate::{train_surrogate, Cycler, LossMode, SurrogateOptions, TrainingSet};
pub use flow_fit::{
    ce_weights, cross_entropy_is, cross_entropy_is_grad, reverse_kl, reverse_kl_grad, train_flow, DensityTarget, FlowData,
    ResidualTarget, TARGET_FLOOR,
};
