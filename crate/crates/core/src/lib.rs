//! Numerical homogenization toolkit for catalyst-layer transport.
//!
//! The crate solves periodic reference-cell corrector problems on voxel
//! geometries, assembles effective transport tensors (oxygen/proton
//! diffusion, proton mobility, electric permittivity), and solves the
//! resulting upscaled nonlinear oxygen/proton/potential system with
//! Butler-Volmer reaction coupling. Built-in oracles cover the
//! thin-double-layer limit, the straight-channel closed forms, and a
//! resolved micro solver for micro/macro convergence studies.

pub mod cell;
pub mod correctors;
pub mod error;
pub mod fem;
pub mod grid;
pub mod limits;
pub mod micro;
pub mod linalg;
pub mod macroscale;
pub mod nondim;
pub mod picard;
pub mod tensors;
pub mod vtk;

pub use cell::{GeometrySpec, Phase, UnitCell};
pub use limits::{
    straight_channel_macro, straight_channel_tensors, thin_double_layer_solve, TdlProblem,
};
pub use correctors::{CorrectorField, CorrectorSet, Species};
pub use error::{Error, Result};
pub use grid::MacroGrid;
pub use micro::{micro_macro_error, solve_micro, ErrorNorms, MicroProblem, MicroState};
pub use macroscale::{
    butler_volmer_rate, check_local_equilibrium, free_energy, oxygen_flux_balance, solve_macro,
    solve_macro_from, BoundaryData, FluxBalance, MacroProblem, MacroState, ReactionSpecies,
    SolveDiagnostics,
};
pub use nondim::{Dimensionless, Nondimensionalization};
pub use picard::PicardControls;
pub use tensors::{assemble_tensors, homogenize_surface_charge, EffectiveCoefficients, SquareMatrix};
