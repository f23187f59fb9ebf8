//! Retry backoff for transient transport failures. The delay schedule is
//! deterministic given a seed so tests can assert exact retry timing.

use std::time::Duration;

use rand::rngs::StdRng;
use rand::{RngExt, SeedableRng};

#[derive(Debug, Clone)]
pub struct BackoffPolicy {
    pub initial: Duration,
    pub factor: f64,
    pub max_delay: Duration,
    /// Total attempts including the first; 0 is rejected at validation.
    pub max_attempts: u32,
    /// Fraction of the delay used as +/- jitter range.
    pub jitter: f64,
}

impl Default for BackoffPolicy {
    fn default() -> Self {
        Self {
            initial: Duration::from_millis(500),
            factor: 2.0,
            max_delay: Duration::from_secs(30),
            max_attempts: 5,
            jitter: 0.2,
        }
    }
}

impl BackoffPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_attempts == 0 {
            return Err("max_attempts must be at least 1".into());
        }
        if self.factor < 1.0 {
            return Err(format!("backoff factor must be >= 1.0, got {}", self.factor));
        }
        if !(0.0..=1.0).contains(&self.jitter) {
            return Err(format!("jitter must be in [0, 1], got {}", self.jitter));
        }
        Ok(())
    }

    /// Delay before retry number `attempt` (0-based: the delay after the
    /// first failed attempt is `delay(0)`).
    pub fn delay(&self, attempt: u32, rng: &mut StdRng) -> Duration {
        let base = self.initial.as_secs_f64() * self.factor.powi(attempt as i32);
        let capped = base.min(self.max_delay.as_secs_f64());
        let jittered = if self.jitter > 0.0 {
            let spread = capped * self.jitter;
            capped + rng.random_range(-spread..=spread)
        } else {
            capped
        };
        Duration::from_secs_f64(jittered.max(0.0))
    }

    pub fn rng(seed: u64) -> StdRng {
        StdRng::seed_from_u64(seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delays_grow_and_cap() {
        let policy = BackoffPolicy {
            jitter: 0.0,
            ..BackoffPolicy::default()
        };
        let mut rng = BackoffPolicy::rng(0);
        assert_eq!(policy.delay(0, &mut rng), Duration::from_millis(500));
        assert_eq!(policy.delay(1, &mut rng), Duration::from_millis(1000));
        assert_eq!(policy.delay(2, &mut rng), Duration::from_millis(2000));
        assert_eq!(policy.delay(10, &mut rng), Duration::from_secs(30));
    }

    #[test]
    fn jitter_stays_within_spread() {
        let policy = BackoffPolicy::default();
        let mut rng = BackoffPolicy::rng(42);
        for attempt in 0..6 {
            let base = (0.5 * 2.0_f64.powi(attempt)).min(30.0);
            let d = policy.delay(attempt as u32, &mut rng).as_secs_f64();
            assert!(d >= base * 0.8 - 1e-9 && d <= base * 1.2 + 1e-9, "{d} vs {base}");
        }
    }

    #[test]
    fn validation_rejects_bad_settings() {
        let mut p = BackoffPolicy::default();
        p.max_attempts = 0;
        assert!(p.validate().is_err());
        p = BackoffPolicy::default();
        p.factor = 0.5;
        assert!(p.validate().is_err());
        p = BackoffPolicy::default();
        p.jitter = 1.5;
        assert!(p.validate().is_err());
    }
}
