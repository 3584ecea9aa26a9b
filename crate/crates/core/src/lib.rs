//! Semi-discrete solver and simulator for the semigeostrophic equations
//! with a free upper boundary.
//!
//! The dual measure is a finite cloud of weighted atoms in the slab
//! `B_D(0) x [-1/delta, -delta]`. For given weights the physical fluid
//! region and its cells are found column by column from the upper envelope
//! of affine functions; the weights are then chosen by concave ascent so
//! that every cell carries its atom's mass. Time stepping moves each atom
//! by the rotated offset to its cell centroid.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod domain;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod io;
pub mod lagrangian;
pub mod oracle;
pub mod solver;

pub use domain::{
    validate_config, ConvexPolygon, DiracCloud, DomainSpec, InitialCondition, QuadratureRule,
    QuadratureSpec, Scheme, SimConfig, Vec3, WeightVector,
};
pub use dynamics::{
    simulate, velocity_field, AnalyticInitialData, BoundsReport, SimState, Simulator,
};
pub use error::{Error, Result};
pub use geometry::{decompose, CellStats, ColumnProfile, QuadratureGrid};
pub use io::{load_config, RunWriter, Snapshot};
pub use lagrangian::{ParticleSet, TrajectoryLog};
pub use solver::{
    residual, solve_weights, InitMode, SolveReport, SolveStatus, SolverMethod, SolverSettings,
};
