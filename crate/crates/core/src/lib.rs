pub mod benchmarking;
pub mod channels;
pub mod clifford;
pub mod error;
pub mod fitting;
pub mod gst;
pub mod lindblad;
mod optim;
pub mod pulses;

pub use error::{Error, Result};

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
