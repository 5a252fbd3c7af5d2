//! Invertible density model on a padded box, and the geometry around it.

mod bounded;
mod coupling;
mod model;

pub use bounded::{partition_samples, project, BoundedMap, Cutoff, Frame};
pub use coupling::{kr_masks, CouplingLayer, CONDITIONER, FROZEN, LOG_SCALE_BOUND, TRANSFORMED};
pub use model::{std_normal_pdf, FlowModel, FlowSamples, FlowSpec};

pub(crate) use model::log_std_normal;
