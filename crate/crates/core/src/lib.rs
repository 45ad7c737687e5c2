//! Variational inference of astronomical catalogs from multi-band images.
//!
//! The [`model`] module defines the per-source variational objective with
//! exact derivatives; [`trust`] maximizes it one source at a time;
//! [`coordinator`] schedules those block updates within a sky region, and
//! [`partition`] splits the sky into regions. [`synth`] and [`score`]
//! generate synthetic surveys and evaluate inferred catalogs.

pub mod catalog;
pub mod config;
pub mod coordinator;
pub mod error;
pub mod io;
pub mod jet;
pub mod model;
pub mod partition;
pub mod score;
pub mod synth;
pub mod trust;
pub mod verify;

pub use error::{Error, Result};
