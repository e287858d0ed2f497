//! Simulation and analysis of two-node entanglement distribution experiments.
//!
//! The pipeline runs from a multi-channel SFWM pair source ([`source`]), over
//! fiber links into detectors with independently drifting clocks ([`link`]),
//! to time-tag streams ([`tagstream`], [`ptag`]). Streams are then aligned by
//! the photon-correlation clock synchronization of [`sync`], counted by the
//! [`coincidence`] engine, and reduced to CHSH statistics ([`bell`]) or
//! pump-power rate fits ([`rate`]). [`pipeline`] wires the stages together
//! from a [`config::RunConfig`].

pub mod bell;
pub mod coincidence;
pub mod config;
pub mod error;
pub mod link;
pub mod peak;
pub mod pipeline;
pub mod ptag;
pub mod rate;
pub mod rng;
pub mod source;
pub mod sync;
pub mod tagstream;

pub use error::{Error, Result};
pub use tagstream::{TagBlock, TagStream, TimeTag};
