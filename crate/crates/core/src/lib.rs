//! Numerical convex integration for the one-dimensional forward-backward
//! parabolic equation `u_t = (sigma(u_x))_x + b u_x + c u + f` with
//! homogeneous Neumann data.
//!
//! The pipeline: validate the flux and the problem, solve the monotone
//! modified problem, build the base subsolution, then repeatedly superpose
//! sawtooth perturbations that push the gradient pair onto the two target
//! arcs, and certify the result.

pub mod config;
pub mod densify;
pub mod expr;
pub mod flux;
pub mod grid;
pub mod inclusion;
pub mod oscillate;
pub mod parabolic;
pub mod problem;
pub mod verify;

pub use flux::{
    build_modified_flux, build_window, validate_flux, Branch, FluxDescription, FluxError, FluxModel,
    KPrime, ModifiedFlux, PhaseWindow, Projection,
};
pub use grid::{CellMask, Field, Grid};
pub use inclusion::{GaugeReport, SubsolutionState};
pub use parabolic::BaseSubsolution;
pub use problem::ProblemSpec;
