//! Energies of discretized SBV fields, cell-formula relaxation, recursive
//! relaxation for hierarchical structured deformations, and approximating
//! sequences.

pub mod approx;
pub mod catalog;
pub mod cellsolver;
pub mod classcheck;
pub mod density;
pub mod error;
pub mod hierarchy;
pub mod linalg;
pub mod oracle;
pub mod quadrature;
pub mod sbvmesh;

pub use catalog::{build_pair, pair_by_names, BulkSpec, PairSpec, SurfaceSpec};
pub use classcheck::{check_density_class, ClassReport, Property, SamplingPlan, Verdict};
pub use density::{BulkDensity, ClassConstants, DensityPair, SurfaceDensity, SurfaceKind};
pub use error::{Error, Result};
pub use linalg::{disarrangement_tensor, JumpDatum, Matrix};
