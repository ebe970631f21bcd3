pub mod assignment;
pub mod config;
pub mod currents;
pub mod error;
pub mod feller;
pub mod hilbert;
pub mod kinetics;
pub mod modal;
pub mod sampler;
pub mod scenario;
pub mod spectral;

pub use config::Tolerances;
pub use error::{Error, Result};
