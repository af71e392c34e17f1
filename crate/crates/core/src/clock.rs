//! Time sources.
//!
//! Every latency in the runtime (network transit, clone resume, compute) is
//! either observed on the wall clock or produced by a cost model and
//! accounted on a virtual clock. The virtual clock never sleeps, which makes
//! whole runs reproducible bit for bit.

use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

/// Which notion of time the runtime runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ClockMode {
    /// Real sleeps and measured elapsed times.
    Wall,
    /// Cost-model times on a virtual timeline; nothing sleeps.
    #[default]
    Deterministic,
}

impl std::str::FromStr for ClockMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wall" => Ok(ClockMode::Wall),
            "deterministic" | "virtual" => Ok(ClockMode::Deterministic),
            other => Err(format!("unknown clock mode '{other}'")),
        }
    }
}

pub trait Clock: Send + Sync {
    /// Milliseconds since the clock was created.
    fn now_ms(&self) -> f64;

    /// Wall clocks block the calling thread; virtual clocks advance.
    fn sleep_ms(&self, ms: f64);

    fn mode(&self) -> ClockMode;
}

#[derive(Debug)]
pub struct WallClock {
    origin: Instant,
}

impl WallClock {
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now_ms(&self) -> f64 {
        self.origin.elapsed().as_secs_f64() * 1000.0
    }

    fn sleep_ms(&self, ms: f64) {
        if ms > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(ms / 1000.0));
        }
    }

    fn mode(&self) -> ClockMode {
        ClockMode::Wall
    }
}

/// A manually advanced timeline.
#[derive(Debug, Default)]
pub struct VirtualClock {
    now: Mutex<f64>,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, ms: f64) {
        if ms > 0.0 {
            *self.now.lock().unwrap() += ms;
        }
    }
}

impl Clock for VirtualClock {
    fn now_ms(&self) -> f64 {
        *self.now.lock().unwrap()
    }

    fn sleep_ms(&self, ms: f64) {
        self.advance(ms);
    }

    fn mode(&self) -> ClockMode {
        ClockMode::Deterministic
    }
}

pub fn clock_for(mode: ClockMode) -> Arc<dyn Clock> {
    match mode {
        ClockMode::Wall => Arc::new(WallClock::new()),
        ClockMode::Deterministic => Arc::new(VirtualClock::new()),
    }
}

/// One-shot shutdown signal that interrupts wall-clock waits.
#[derive(Debug, Default)]
pub struct ShutdownSignal {
    flag: Mutex<bool>,
    cv: Condvar,
}

impl ShutdownSignal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn trigger(&self) {
        *self.flag.lock().unwrap() = true;
        self.cv.notify_all();
    }

    pub fn is_triggered(&self) -> bool {
        *self.flag.lock().unwrap()
    }

    /// Waits up to `ms` on `clock`. Returns true if shutdown was signalled.
    pub fn wait_ms(&self, clock: &dyn Clock, ms: f64) -> bool {
        match clock.mode() {
            ClockMode::Deterministic => {
                clock.sleep_ms(ms);
                self.is_triggered()
            }
            ClockMode::Wall => {
                let deadline = Instant::now() + Duration::from_secs_f64(ms.max(0.0) / 1000.0);
                let mut flag = self.flag.lock().unwrap();
                while !*flag {
                    let now = Instant::now();
                    if now >= deadline {
                        break;
                    }
                    flag = self.cv.wait_timeout(flag, deadline - now).unwrap().0;
                }
                *flag
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn virtual_clock_advances_without_sleeping() {
        let clock = VirtualClock::new();
        let start = Instant::now();
        clock.sleep_ms(60_000.0);
        assert_eq!(clock.now_ms(), 60_000.0);
        assert!(start.elapsed() < Duration::from_secs(1));
    }

    #[test]
    fn shutdown_interrupts_wall_wait() {
        let signal = Arc::new(ShutdownSignal::new());
        let clock = WallClock::new();
        let s2 = signal.clone();
        let h = std::thread::spawn(move || {
            std::thread::sleep(Duration::from_millis(20));
            s2.trigger();
        });
        let start = Instant::now();
        assert!(signal.wait_ms(&clock, 10_000.0));
        assert!(start.elapsed() < Duration::from_secs(5));
        h.join().unwrap();
    }
}
