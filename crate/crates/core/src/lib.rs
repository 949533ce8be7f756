//! Core algorithms for controllable intent discovery.
//!
//! Everything in this crate is a pure function of its inputs and an explicit
//! seed: the projection-head encoder and its three training objectives, K-means
//! with confidence scoring, Hungarian assignment, clustering metrics, the
//! three-stage training pipeline and the incremental human-in-the-loop
//! discovery state machine. File formats, persistence, the HTTP service and the
//! command line live in the `cdi` companion crate.
//!
//! The crate is `no_std` (with `alloc`) when the default `std` feature is
//! disabled; the only thing `std` adds is wall-clock timing of pipeline stages.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod clustering;
pub mod corpus;
pub mod discovery;
pub mod encoder;
mod error;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
