//! Small identifiers shared by every module.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Discrete simulation time.
pub type Timeslot = u64;

/// Protocol epoch; even epochs run the sampling protocol, odd epochs the quorum fallback.
pub type Epoch = u64;

/// Sampling round within an even epoch.
pub type Round = u64;

/// Index of a process in `0..n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProcessId(pub usize);

impl ProcessId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

pub fn is_odd(epoch: Epoch) -> bool {
    epoch % 2 == 1
}
