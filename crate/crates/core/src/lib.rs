//! Frosty: a sampling-based consensus protocol with a quorum fallback, and a
//! deterministic simulator for it.

pub mod adversary;
pub mod binomial;
pub mod certs;
pub mod chainstr;
pub mod digest;
pub mod error;
pub mod node;
pub mod params;
pub mod simnet;
pub mod simplex_odd;
pub mod snowman_even;
pub mod types;

pub use digest::Digest;
pub use error::{Error, Result};
pub use params::ProtocolParams;
pub use types::{Epoch, ProcessId, Round, Timeslot};
