//! Wall-clock source for sample timestamps and poll deadlines.
//!
//! [`Clock::scaled`] runs virtual time faster than real time so hour-long
//! measurement scenarios can be replayed in a minute. The simulator and the
//! collector must share the same clock for waveforms to line up.

use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

#[derive(Debug, Clone, Copy)]
pub struct Clock {
    origin_real: Instant,
    origin_ms: i64,
    factor: f64,
}

fn system_now_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

impl Clock {
    pub fn system() -> Self {
        Clock {
            origin_real: Instant::now(),
            origin_ms: system_now_ms(),
            factor: 1.0,
        }
    }

    /// Virtual clock starting at `origin_ms` that advances `factor` times
    /// faster than real time.
    pub fn scaled(origin_ms: i64, factor: f64) -> Self {
        assert!(factor > 0.0 && factor.is_finite(), "time scale must be positive");
        Clock {
            origin_real: Instant::now(),
            origin_ms,
            factor,
        }
    }

    pub fn factor(&self) -> f64 {
        self.factor
    }

    pub fn now_ms(&self) -> i64 {
        if self.factor == 1.0 {
            // Track the OS clock so long runs follow NTP adjustments.
            return system_now_ms();
        }
        let elapsed = self.origin_real.elapsed().as_secs_f64() * 1000.0 * self.factor;
        self.origin_ms + elapsed as i64
    }

    /// Real duration corresponding to `virtual_ms` of clock time.
    pub fn real_duration(&self, virtual_ms: i64) -> Duration {
        Duration::from_secs_f64((virtual_ms.max(0) as f64 / 1000.0) / self.factor)
    }

    pub async fn sleep_until(&self, deadline_ms: i64) {
        let remaining = deadline_ms - self.now_ms();
        if remaining > 0 {
            tokio::time::sleep(self.real_duration(remaining)).await;
        }
    }

    pub async fn sleep(&self, virtual_ms: i64) {
        tokio::time::sleep(self.real_duration(virtual_ms)).await;
    }
}

impl Default for Clock {
    fn default() -> Self {
        Clock::system()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_clock_runs_faster() {
        let c = Clock::scaled(0, 1000.0);
        std::thread::sleep(Duration::from_millis(20));
        let now = c.now_ms();
        assert!(now >= 20_000, "{now}");
        assert_eq!(c.real_duration(1000), Duration::from_millis(1));
    }

    #[test]
    fn system_clock_is_epoch_ms() {
        let now = Clock::system().now_ms();
        assert!(now > 1_600_000_000_000);
    }
}
