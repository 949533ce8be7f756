//! File formats, the session store, the HTTP service and the command line
//! for controllable intent discovery. The algorithms live in `cdi_core`.

pub mod cli;
mod error;
pub mod formats;
pub mod service;
pub mod store;

pub use error::{Error, Result};
