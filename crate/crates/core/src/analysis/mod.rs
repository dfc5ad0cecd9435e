//! Diagnostics and theory: a sharpness probe, a loss-surface plane through
//! three weight vectors, and the MVRML generalization bound with estimators
//! for its data-dependent terms.

mod bound;
mod sharpness;
mod surface;

pub use bound::{
    estimate_bound_terms, theorem1_bound, BoundInputs, BoundReport, BoundTermOptions, BoundTerms, DivergenceMethod,
};
pub use sharpness::{sharpness_of, sharpness_probe, SharpnessConfig, SharpnessPoint, SharpnessRecord};
pub use surface::{surface_grid_losses, surface_loss_at, surface_plane_basis, BnPolicy, SurfacePlane, SurfaceRecord};

/// Version stamped on every analysis JSON record.
pub const ANALYSIS_FORMAT_VERSION: u32 = 1;
