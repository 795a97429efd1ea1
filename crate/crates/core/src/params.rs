//! Protocol parameters shared by both epoch machines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolParams {
    pub n: usize,
    pub f: usize,
    pub k: usize,
    pub alpha1: usize,
    pub alpha2: usize,
    pub alpha3: usize,
    pub beta: u64,
    pub gamma: u64,
    pub mu: usize,
    /// Post-GST delivery bound, in timeslots.
    pub delta: u64,
    pub hash_bits: u32,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        ProtocolParams {
            n: 25,
            f: 4,
            k: 80,
            alpha1: 41,
            alpha2: 72,
            alpha3: 48,
            beta: 14,
            gamma: 300,
            mu: 3,
            delta: 1,
            hash_bits: 32,
        }
    }
}

impl ProtocolParams {
    pub fn validate(&self) -> Result<()> {
        self.validate_inner(false)
    }

    /// As [`validate`](Self::validate), but permits `f ≥ n/5` for negative controls.
    pub fn validate_allowing_excess_faults(&self) -> Result<()> {
        self.validate_inner(true)
    }

    fn validate_inner(&self, allow_excess_faults: bool) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if !allow_excess_faults && 5 * self.f >= self.n {
            return bad(format!("f={} violates f < n/5 for n={}", self.f, self.n));
        }
        if self.f >= self.n {
            return bad(format!("f={} must be below n={}", self.f, self.n));
        }
        if !(self.k >= self.alpha2 && self.alpha2 >= self.alpha1 && 2 * self.alpha1 > self.k) {
            return bad(format!(
                "need k >= alpha2 >= alpha1 > k/2, got k={} alpha1={} alpha2={}",
                self.k, self.alpha1, self.alpha2
            ));
        }
        if self.alpha3 > self.k || self.alpha3 == 0 {
            return bad(format!("alpha3={} must be in 1..=k", self.alpha3));
        }
        if self.beta == 0 || self.gamma == 0 || self.mu == 0 || self.delta == 0 {
            return bad("beta, gamma, mu and delta must all be at least 1".into());
        }
        if self.hash_bits == 0 || self.hash_bits > 64 {
            return bad(format!("hash_bits={} must be in 1..=64", self.hash_bits));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ProtocolParams::default().validate().unwrap();
    }

    #[test]
    fn fault_bound_is_strict() {
        let p = ProtocolParams { n: 25, f: 5, ..Default::default() };
        assert!(p.validate().is_err());
        p.validate_allowing_excess_faults().unwrap();
        let p = ProtocolParams { n: 26, f: 5, ..Default::default() };
        p.validate().unwrap();
    }

    #[test]
    fn thresholds_checked() {
        let p = ProtocolParams { alpha1: 40, ..Default::default() };
        assert!(p.validate().is_err());
        let p = ProtocolParams { alpha2: 81, ..Default::default() };
        assert!(p.validate().is_err());
    }
}
