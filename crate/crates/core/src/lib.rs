pub mod acoustic_inverse;
pub mod coil;
pub mod current_recovery;
pub mod elliptic;
pub mod error;
pub mod experiment;
pub mod forward;
pub mod grid;
pub mod io;
pub mod math;
pub mod phantom;
pub mod pipeline;
pub mod sigma_recovery;
pub mod stability;

pub use acoustic_inverse::{Geometry, InverseSourceConfig, SourceEstimate};
pub use coil::{Coil, CoilFields, CoilShape, CoilSpec};
pub use current_recovery::RecoveredCurrent;
pub use elliptic::{Conductivity, SolverOptions};
pub use error::{Error, Result};
pub use experiment::ExperimentConfig;
pub use forward::{CurrentField, MeasurementSet, PhysicsParams, SourceDistribution, SphereRule};
pub use grid::{DomainMask, Grid3, NormKind, ScalarField, VectorField};
pub use math::Vec3;
pub use phantom::PhantomSpec;
pub use sigma_recovery::{ResistivityConfig, ResistivityEstimate};
pub use stability::StabilityReport;
