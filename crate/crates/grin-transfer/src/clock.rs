//! Clock abstraction so rate limiting, backoff, and polling can run against
//! virtual time in tests.

use std::sync::Arc;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use async_trait::async_trait;

#[async_trait]
pub trait Clock: Send + Sync {
    fn now(&self) -> Instant;

    async fn sleep(&self, dur: Duration);

    async fn sleep_until(&self, deadline: Instant) {
        let now = self.now();
        if deadline > now {
            self.sleep(deadline - now).await;
        }
    }
}

/// Wall-clock time backed by tokio timers.
#[derive(Debug, Default, Clone)]
pub struct SystemClock;

#[async_trait]
impl Clock for SystemClock {
    fn now(&self) -> Instant {
        Instant::now()
    }

    async fn sleep(&self, dur: Duration) {
        tokio::time::sleep(dur).await;
    }
}

/// Manually advanced clock. `sleep` only returns once `advance` has moved
/// time past the deadline, which makes timing-sensitive tests deterministic.
pub struct VirtualClock {
    base: Instant,
    offset: Mutex<Duration>,
    tick: tokio::sync::Notify,
}

impl VirtualClock {
    pub fn new() -> Arc<Self> {
        Arc::new(Self {
            base: Instant::now(),
            offset: Mutex::new(Duration::ZERO),
            tick: tokio::sync::Notify::new(),
        })
    }

    pub fn advance(&self, dur: Duration) {
        {
            let mut offset = self.offset.lock().unwrap();
            *offset += dur;
        }
        self.tick.notify_waiters();
    }

    pub fn elapsed(&self) -> Duration {
        *self.offset.lock().unwrap()
    }
}

#[async_trait]
impl Clock for VirtualClock {
    fn now(&self) -> Instant {
        self.base + *self.offset.lock().unwrap()
    }

    async fn sleep(&self, dur: Duration) {
        let deadline = self.now() + dur;
        loop {
            let notified = self.tick.notified();
            if self.now() >= deadline {
                return;
            }
            notified.await;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn virtual_sleep_waits_for_advance() {
        let clock = VirtualClock::new();
        let c = clock.clone();
        let task = tokio::spawn(async move {
            c.sleep(Duration::from_secs(5)).await;
            c.elapsed()
        });
        tokio::task::yield_now().await;
        clock.advance(Duration::from_secs(2));
        tokio::task::yield_now().await;
        assert!(!task.is_finished());
        clock.advance(Duration::from_secs(3));
        let woke_at = task.await.unwrap();
        assert_eq!(woke_at, Duration::from_secs(5));
    }
}
