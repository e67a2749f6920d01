//! Multiscale simulation of ion transport through periodic multicellular tissue.
//!
//! The crate models three ionic species (Na, K, Cl) moving by diffusion and
//! electric drift through the intracellular and extracellular phases of a
//! periodic tissue, coupled across cell membranes by channel, pump and
//! capacitive currents. Electroneutrality is enforced pointwise, which turns
//! the potential into the solution of an elliptic constraint rather than an
//! evolution variable.
//!
//! Three levels are provided:
//!
//! * [`micro`]: the resolved problem on an `epsilon`-periodic tissue with an
//!   explicit voxelized membrane geometry,
//! * [`cell_problem`]: periodic correctors on the unit cell and the resulting
//!   effective diffusion tensors,
//! * [`macroscale`]: the two homogenized limit systems (extracellular phase
//!   connected with disconnected cells, and both phases connected),
//!
//! together with [`pointmodel`], a space-free ODE reduction used for
//! cross-checking, and the shared [`geometry`], [`params`], [`membrane`] and
//! [`linalg`] building blocks.
//!
//! The intended workflow is: validate a parameter set, voxelize the unit
//! cell, solve cell problems for the effective tensors, then run the micro
//! and macro solvers and compare cell averages (see the `ionhom` CLI).

// Index loops over parallel arrays and negated comparisons (which catch NaN)
// are both deliberate in the numerical kernels.
#![allow(
    clippy::needless_range_loop,
    clippy::neg_cmp_op_on_partial_ord,
    clippy::field_reassign_with_default,
    clippy::manual_is_multiple_of
)]

pub mod cell_problem;
pub mod geometry;
pub mod linalg;
pub mod macroscale;
pub mod membrane;
pub mod micro;
pub mod params;
pub mod pointmodel;

pub use geometry::{CellShape, Compartment, TaggedGrid};
pub use params::{
    ConcentrationBounds, Connectivity, InitialData, ModelSetup, PhysicalParams, PumpParams,
    RunSettings, SpeciesSpec,
};
