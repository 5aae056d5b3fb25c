//! Boundary-element toolkit for weakly electric fish in two dimensions.
//!
//! The crate simulates the electric field generated by the electric organ
//! discharge (EOD) of one or more fish with thin resistive skins, separates
//! superposed EOD signals after a jamming avoidance response, localizes a
//! conspecific's electric organ with a multi-position MUSIC search, runs a
//! closed-loop fish-follows-fish pursuit, and images a small dielectric
//! target with a multi-frequency MUSIC functional.
//!
//! Module map:
//! - [`geometry`]: discretized fish bodies, receptor arrays, search grids;
//! - [`potential`]: 2D Laplace layer potentials and boundary operators;
//! - [`forward`]: transmission solver for scenes of fish plus an optional
//!   small target, with residual certification;
//! - [`signals`]: time-domain synthesis and wave/pulse signal separation;
//! - [`comm`]: multi-static response matrix and dipole MUSIC search;
//! - [`tracker`]: closed-loop pursuit driven by repeated dipole searches;
//! - [`sensing`]: polarization tensors, post-processing and multi-frequency
//!   target MUSIC;
//! - [`io`]: scene files (JSON) and CSV artifacts.

pub mod comm;
pub mod error;
pub mod forward;
pub mod geometry;
pub mod io;
pub mod potential;
pub mod sensing;
pub mod signals;
pub mod tracker;

pub use error::{Error, Result};
