//! Millisecond monotonic clock, either wall-clock or virtual.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    Real,
    Virtual,
}

impl ClockMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ClockMode::Real => "real",
            ClockMode::Virtual => "virtual",
        }
    }
}

/// Shared handle to the run clock. Cloning shares the underlying time.
///
/// In virtual mode time only moves when someone calls [`Clock::advance_to`]
/// or [`Clock::charge`]; in real mode both are no-ops and time is measured
/// from the moment the clock was created.
#[derive(Debug, Clone)]
pub enum Clock {
    Real(Instant),
    Virtual(Arc<AtomicU64>),
}

impl Clock {
    pub fn real() -> Self {
        Clock::Real(Instant::now())
    }

    pub fn virtual_at(start_ms: u64) -> Self {
        Clock::Virtual(Arc::new(AtomicU64::new(start_ms)))
    }

    pub fn new(mode: ClockMode) -> Self {
        match mode {
            ClockMode::Real => Clock::real(),
            ClockMode::Virtual => Clock::virtual_at(0),
        }
    }

    pub fn mode(&self) -> ClockMode {
        match self {
            Clock::Real(_) => ClockMode::Real,
            Clock::Virtual(_) => ClockMode::Virtual,
        }
    }

    pub fn is_virtual(&self) -> bool {
        matches!(self, Clock::Virtual(_))
    }

    pub fn now_ms(&self) -> u64 {
        match self {
            Clock::Real(origin) => origin.elapsed().as_millis() as u64,
            Clock::Virtual(t) => t.load(Ordering::SeqCst),
        }
    }

    /// Moves virtual time forward to `ms`; never moves it backwards.
    pub fn advance_to(&self, ms: u64) {
        if let Clock::Virtual(t) = self {
            t.fetch_max(ms, Ordering::SeqCst);
        }
    }

    /// Accounts for a modeled cost. Virtual time jumps by `ms`; real time
    /// already includes whatever the work actually took.
    pub fn charge(&self, ms: u64) {
        if let Clock::Virtual(t) = self {
            t.fetch_add(ms, Ordering::SeqCst);
        }
    }

    /// Time until `deadline_ms`, saturating at zero.
    pub fn until(&self, deadline_ms: u64) -> Duration {
        Duration::from_millis(deadline_ms.saturating_sub(self.now_ms()))
    }
}
