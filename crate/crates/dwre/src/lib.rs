//! Dynamical walks in random environment.
//!
//! A walker carries an internal state `x` on the circle. At site `z` the
//! state is updated by an expanding map `T_z` and the walker moves one step
//! left or right depending on whether `x` fell in the site's gate interval.
//! When the gates are small and their forward images avoid later gates, the
//! walk is ballistic and its hitting times and positions satisfy central
//! limit theorems; this crate simulates such walks, discretizes the
//! associated transfer operators, and turns both into quantitative verdicts.

pub mod circle_map;
pub mod environment;
pub mod error;
pub mod presets;
pub mod rng;
pub mod stats;
pub mod transfer;
pub mod util;
pub mod walk;

pub use error::Error;

/// Crate-wide result type.
pub type Result<T> = std::result::Result<T, Error>;
