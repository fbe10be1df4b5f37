//! Hierarchical hard thresholding pursuit (HiHTP) for joint blind
//! deconvolution and demixing of sparse multi-user uplink signals, together
//! with a simulator for a reciprocity-keyed secure access scheme built on
//! top of it.
//!
//! Module map:
//!
//! * [`signal`]: cyclic shifts, circular convolution, circulants, rank-one
//!   factors, the sparse-support rate.
//! * [`operator`]: the lifted measurement operator, matrix-free and dense.
//! * [`hier`]: hierarchical thresholding and supports.
//! * [`solver`]: the HiHTP iteration and factor recovery.
//! * [`protocol`]: instance generation, key derivation, encryption and the
//!   end-to-end two-phase run.
//! * [`experiment`]: phase-diagram sweeps, configuration files and CSV output.

pub mod error;
pub mod experiment;
pub mod hier;
pub mod operator;
pub mod protocol;
pub mod scalar;
pub mod seed;
pub mod signal;
pub mod solver;

pub use error::{Error, Result};
pub use hier::{HierSupport, SparsityProfile, SupportIndex};
pub use operator::{Dims, LiftedVector, LinearMeasurement, MeasurementOperator};
pub use scalar::{Scalar, C64};
pub use solver::{SolverConfig, SolverResult, StopReason};
