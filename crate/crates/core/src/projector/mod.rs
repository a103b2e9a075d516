//! PAC, RAC and PRAC projection bases, lazy refresh and subspace sharing.

mod basis;
mod cache;
mod compress;
mod mode;

pub(crate) use basis::random_complement;
pub use basis::{
    build_basis, maybe_refresh, ProjectionBasis, RefreshSchedule, BASIS_ORTHOGONALITY_TOL,
};
pub use cache::{DecompositionCounters, SharedSubspaceCache, SubspacePolicy};
pub use compress::{compress, reconstruct, CompressedActivation};
pub use mode::ProjectionMode;
