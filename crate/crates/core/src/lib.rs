//! Mixture-of-Modules language models.
//!
//! A model is a stack of ordinary transformer layers and *chunks*. A chunk
//! owns a pool of attention and FFN modules (optionally plus SKIP) and, for
//! routed policies, two routers. At each of its `H` assembly steps every
//! token selects `K` modules per sub-round, and the selected modules are
//! assembled into that step's operator.

pub mod analysis;
pub mod assembly;
pub mod cli;
pub mod config;
mod error;
pub mod io;
pub mod model;
pub mod modules;
pub mod profiler;
pub mod routing;
pub mod training;

pub use error::{MomError, Result};
