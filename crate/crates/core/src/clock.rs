//! Simulated wall clock, in whole seconds.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SimClock {
    now: u64,
}

impl SimClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn at(now: u64) -> Self {
        Self { now }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn advance(&mut self, secs: u64) -> u64 {
        self.now += secs;
        self.now
    }

    /// Moves the clock forward to `t`. Never moves it backwards.
    pub fn advance_to(&mut self, t: u64) {
        self.now = self.now.max(t);
    }
}
