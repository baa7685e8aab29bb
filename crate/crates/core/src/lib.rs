//! Online surgical workflow recognition with blocking-effectiveness
//! detection for the Pringle maneuver, trained and evaluated on synthetic
//! endoscopic-like procedures.

pub mod csm;
pub mod engine;
pub mod encoder;
pub mod error;
pub mod model;
pub mod mte;
pub mod nn;
pub mod objectives;
pub mod synthgen;

pub use error::{Error, Result};
