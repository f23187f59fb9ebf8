//! Global request rate limiter shared by every call the client makes.
//!
//! Two constraints are enforced together:
//!
//! * a token bucket (capacity `burst`, refill `max_requests_per_second`),
//!   which allows an idle process to start a small burst immediately, and
//! * a sliding-window guard that caps how many grants may land inside any
//!   window of `quota / rate` seconds plus a safety margin.
//!
//! A bucket alone is not enough: after a pause the bucket refills, and the
//! recovery burst plus the steady refill can put `burst + rate` sends inside
//! a single observed second. The window guard spaces grants so that no
//! second-long span on the server side ever sees more than the configured
//! rate, even with timer wake-up jitter (that is what the margin absorbs).
//!
//! Grants are handed out reservation-style: the earliest instant satisfying
//! both constraints is computed and committed under the lock, then the caller
//! sleeps until its slot without holding the lock.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::clock::Clock;

/// Request budget against the remote service.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateBudget {
    pub max_requests_per_second: f64,
    pub burst: u32,
}

impl Default for RateBudget {
    fn default() -> Self {
        Self {
            max_requests_per_second: 5.0,
            burst: 5,
        }
    }
}

impl RateBudget {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.max_requests_per_second > 0.0) {
            return Err(format!(
                "max_requests_per_second must be positive, got {}",
                self.max_requests_per_second
            ));
        }
        if self.burst == 0 {
            return Err("burst must be at least 1".into());
        }
        Ok(())
    }
}

/// Extra width added to the guard window so that grants scheduled exactly
/// `window` apart still land outside each other's second even when timers
/// fire a little late. Sized for loaded hosts: a send can lag its grant by
/// a whole scheduler hiccup, and only the spacing between *sends* is
/// visible to the server.
const DEFAULT_WINDOW_MARGIN: Duration = Duration::from_millis(150);

pub struct RateLimiter {
    clock: Arc<dyn Clock>,
    rate: f64,
    burst: f64,
    /// Max grants allowed inside one guard window.
    quota: usize,
    window: Duration,
    state: std::sync::Mutex<LimiterState>,
}

struct LimiterState {
    /// Tokens available at `settled`. May go fractional, never negative.
    credit: f64,
    /// Instant of the most recently assigned grant (or creation time).
    settled: Instant,
    /// The last `quota` grant instants, oldest first.
    recent: VecDeque<Instant>,
}

impl RateLimiter {
    pub fn new(budget: RateBudget, clock: Arc<dyn Clock>) -> Self {
        Self::with_margin(budget, clock, DEFAULT_WINDOW_MARGIN)
    }

    pub fn with_margin(budget: RateBudget, clock: Arc<dyn Clock>, margin: Duration) -> Self {
        budget.validate().expect("invalid rate budget");
        let rate = budget.max_requests_per_second;
        let quota = (rate.floor() as usize).max(1);
        let window = Duration::from_secs_f64(quota as f64 / rate) + margin;
        let now = clock.now();
        Self {
            clock,
            rate,
            burst: f64::from(budget.burst),
            quota,
            window,
            state: std::sync::Mutex::new(LimiterState {
                credit: f64::from(budget.burst),
                settled: now,
                recent: VecDeque::with_capacity(quota),
            }),
        }
    }

    /// Blocks until a request slot is granted. Grants are FIFO in lock
    /// acquisition order and never starve: each reservation is committed
    /// immediately, so later callers queue strictly behind it.
    pub async fn acquire(&self) {
        let grant = self
            .reserve(None)
            .expect("reservation without deadline cannot fail");
        self.clock.sleep_until(grant).await;
    }

    /// Like `acquire`, but declines (without consuming a slot) when the
    /// assigned grant would be further away than `deadline`.
    pub async fn acquire_within(&self, deadline: Duration) -> Result<(), WouldExceedDeadline> {
        let grant = self.reserve(Some(deadline))?;
        self.clock.sleep_until(grant).await;
        Ok(())
    }

    fn reserve(&self, deadline: Option<Duration>) -> Result<Instant, WouldExceedDeadline> {
        let now = self.clock.now();
        let mut state = self.state.lock().unwrap();
        let grant = self.peek_grant(&state, now);
        if let Some(deadline) = deadline {
            let wait = grant.saturating_duration_since(now);
            if wait > deadline {
                return Err(WouldExceedDeadline { wait });
            }
        }

        let credit_at_grant = self.credit_at(&state, grant);
        state.credit = (credit_at_grant - 1.0).max(0.0);
        state.settled = grant;
        state.recent.push_back(grant);
        while state.recent.len() > self.quota {
            state.recent.pop_front();
        }
        Ok(grant)
    }

    fn peek_grant(&self, state: &LimiterState, now: Instant) -> Instant {
        // Grants are monotone: nothing may be scheduled before the last one.
        let base = now.max(state.settled);

        let credit = self.credit_at(state, base);
        let token_ready = if credit >= 1.0 {
            base
        } else {
            base + Duration::from_secs_f64((1.0 - credit) / self.rate)
        };

        let window_ready = if state.recent.len() < self.quota {
            base
        } else {
            let anchor = state.recent[state.recent.len() - self.quota];
            base.max(anchor + self.window)
        };

        token_ready.max(window_ready)
    }

    fn credit_at(&self, state: &LimiterState, at: Instant) -> f64 {
        let elapsed = at.saturating_duration_since(state.settled).as_secs_f64();
        (state.credit + elapsed * self.rate).min(self.burst)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("rate limiter wait of {wait:?} exceeds the caller's deadline")]
pub struct WouldExceedDeadline {
    pub wait: Duration,
}
