//! Grid-based finite abstractions of disturbed nonlinear control systems,
//! sound neural compression of their forward/backward transition relations,
//! on-the-fly reach-avoid controller synthesis from the compressed
//! representations, and compression of the synthesized controller for
//! deployment.
//!
//! Every compression stage is *corrected*: trained networks are paired with
//! either inflation vectors or exception lookup tables so that the compressed
//! artifact provably covers the exact one, and exhaustive certification scans
//! enforce this at build time.

pub mod abstraction;
pub mod cellset;
pub mod config;
pub mod deployment;
pub mod error;
pub mod format;
pub mod grid;
pub mod matexp;
pub mod models;
pub mod nn;
pub mod repr;
pub mod synthesis;

pub use cellset::CellSet;
pub use error::{Error, Result};
pub use grid::{CellBox, Grid, HyperRect};
pub use models::{Dynamics, ModelSpec};
