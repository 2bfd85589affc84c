//! Version-age-optimal stationary randomized scheduling for uplink NOMA and
//! TDMA under average power and distortion constraints.

pub mod analytics;
pub mod config;
pub mod convex;
pub mod dual;
pub mod error;
pub mod experiments;
pub mod model;
pub mod oracle;
pub mod par;
pub mod policies;
pub mod sic;
pub mod simulator;

pub use error::{Error, Result};
