//! Virtual time.
//!
//! Simulated costs are kept as integer picoseconds so that sums and
//! differences of event costs are exact. A picosecond `u64` covers roughly
//! 213 days of virtual time.

use core::fmt;
use core::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Serialize};

const PICOS_PER_SEC: f64 = 1e12;

/// A span of virtual time in picoseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimDuration(u64);

impl SimDuration {
    pub const ZERO: SimDuration = SimDuration(0);

    pub const fn from_picos(ps: u64) -> Self {
        SimDuration(ps)
    }

    pub const fn as_picos(self) -> u64 {
        self.0
    }

    /// Rounds `secs` to the nearest picosecond. Negative and NaN inputs map
    /// to zero; values past the representable range saturate.
    pub fn from_secs_f64(secs: f64) -> Self {
        let ps = secs * PICOS_PER_SEC;
        if ps.is_nan() || ps <= 0.0 {
            SimDuration(0)
        } else if ps >= u64::MAX as f64 {
            SimDuration(u64::MAX)
        } else {
            // `as` truncates; add one half for round-to-nearest.
            SimDuration((ps + 0.5) as u64)
        }
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / PICOS_PER_SEC
    }

    pub fn saturating_sub(self, rhs: SimDuration) -> SimDuration {
        SimDuration(self.0.saturating_sub(rhs.0))
    }
}

impl Add for SimDuration {
    type Output = SimDuration;

    fn add(self, rhs: SimDuration) -> SimDuration {
        SimDuration(self.0.saturating_add(rhs.0))
    }
}

impl AddAssign for SimDuration {
    fn add_assign(&mut self, rhs: SimDuration) {
        *self = *self + rhs;
    }
}

impl Sub for SimDuration {
    type Output = SimDuration;

    fn sub(self, rhs: SimDuration) -> SimDuration {
        self.saturating_sub(rhs)
    }
}

impl core::iter::Sum for SimDuration {
    fn sum<I: Iterator<Item = SimDuration>>(iter: I) -> SimDuration {
        iter.fold(SimDuration::ZERO, Add::add)
    }
}

impl fmt::Display for SimDuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.9}s", self.as_secs_f64())
    }
}

/// Monotonic clock advanced only by explicit accounting, never by the host.
#[derive(Debug, Clone, Default)]
pub struct VirtualClock {
    now: SimDuration,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    /// Time elapsed since the clock was created.
    pub fn now(&self) -> SimDuration {
        self.now
    }

    pub fn advance(&mut self, by: SimDuration) -> SimDuration {
        self.now += by;
        self.now
    }

    /// Moves the clock forward to `t` if `t` is in the future.
    pub fn advance_to(&mut self, t: SimDuration) -> SimDuration {
        if t > self.now {
            self.now = t;
        }
        self.now
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rounds_to_nearest_picosecond() {
        assert_eq!(SimDuration::from_secs_f64(1e-3).as_picos(), 1_000_000_000);
        assert_eq!(SimDuration::from_secs_f64(0.4e-12).as_picos(), 0);
        assert_eq!(SimDuration::from_secs_f64(0.6e-12).as_picos(), 1);
        assert_eq!(SimDuration::from_secs_f64(-1.0), SimDuration::ZERO);
        assert_eq!(SimDuration::from_secs_f64(f64::NAN), SimDuration::ZERO);
    }

    proptest! {
        #[test]
        fn clock_never_decreases(steps in proptest::collection::vec((any::<bool>(), 0u64..1_000_000), 0..64)) {
            let mut clock = VirtualClock::new();
            let mut last = clock.now();
            for (jump, ps) in steps {
                let d = SimDuration::from_picos(ps);
                if jump { clock.advance_to(d); } else { clock.advance(d); }
                prop_assert!(clock.now() >= last);
                last = clock.now();
            }
        }
    }
}
