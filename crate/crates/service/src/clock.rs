//! Service clock: wall time, or a simulated clock that only moves when told.

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

/// Seconds since the Unix epoch, UTC.
pub type Timestamp = f64;

pub const MICROS: i64 = 1_000_000;

pub fn micros_to_secs(us: i64) -> f64 {
    us as f64 / MICROS as f64
}

pub fn secs_to_micros(s: f64) -> i64 {
    (s * MICROS as f64).round() as i64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    #[default]
    Wall,
    Simulated,
}

#[derive(Debug, Clone)]
pub enum Clock {
    Wall,
    Simulated { start: Timestamp, elapsed_us: Arc<AtomicI64> },
}

impl Clock {
    pub fn simulated(start: Timestamp) -> Self {
        Clock::Simulated { start, elapsed_us: Arc::new(AtomicI64::new(0)) }
    }

    pub fn mode(&self) -> ClockMode {
        match self {
            Clock::Wall => ClockMode::Wall,
            Clock::Simulated { .. } => ClockMode::Simulated,
        }
    }

    pub fn now(&self) -> Timestamp {
        match self {
            Clock::Wall => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0),
            Clock::Simulated { start, elapsed_us } => start + micros_to_secs(elapsed_us.load(Ordering::SeqCst)),
        }
    }

    /// Moves a simulated clock forward; no-op on wall time.
    pub fn advance_us(&self, dt_us: i64) {
        if let Clock::Simulated { elapsed_us, .. } = self {
            elapsed_us.fetch_add(dt_us.max(0), Ordering::SeqCst);
        }
    }
}
