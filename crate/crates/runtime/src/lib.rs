//! Distributed execution of inference tasks.
//!
//! Processes form a scheduling tree ([`dtree`]) and pull tasks from it
//! stage by stage. Source parameters live in a [`store::ParamStore`] of
//! versioned blocks. Each process runs [`exec::process_loop`], which
//! prefetches the images of its next task while the current one runs. A run
//! can be driven in-process ([`driver::run_inprocess`]) or over TCP with the
//! message format in [`wire`]. [`metrics::account`] turns the run trace into
//! per-process time components and a flop estimate; [`sim`] replays the
//! scheduler in virtual time.

pub mod audit;
pub mod driver;
pub mod dtree;
pub mod error;
pub mod exec;
pub mod hub;
pub mod images;
pub mod metrics;
pub mod net;
pub mod sim;
pub mod store;
pub mod wire;

pub use error::{Error, Result};
