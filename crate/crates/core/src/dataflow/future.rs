use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::task::TaskResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FutureState {
    Pending,
    Resolved,
    Failed,
}

#[derive(Debug)]
struct Slot {
    state: FutureState,
    result: Option<TaskResult>,
    /// Every completion attempt, accepted or not.
    attempts: u32,
}

/// Write-once result handle. Clones share the same slot.
#[derive(Debug, Clone)]
pub struct Future {
    uid: Arc<str>,
    inner: Arc<(Mutex<Slot>, Condvar)>,
}

impl Future {
    pub fn new(uid: &str) -> Self {
        Future {
            uid: uid.into(),
            inner: Arc::new((
                Mutex::new(Slot {
                    state: FutureState::Pending,
                    result: None,
                    attempts: 0,
                }),
                Condvar::new(),
            )),
        }
    }

    pub fn uid(&self) -> &str {
        &self.uid
    }

    pub fn state(&self) -> FutureState {
        self.inner.0.lock().unwrap().state
    }

    pub fn is_done(&self) -> bool {
        self.state() != FutureState::Pending
    }

    /// Completes the future: resolved for an ok result, failed otherwise.
    /// Only the first call has any effect; returns whether this call won.
    pub fn complete(&self, result: TaskResult) -> bool {
        let (lock, cv) = &*self.inner;
        let mut slot = lock.lock().unwrap();
        slot.attempts += 1;
        if slot.state != FutureState::Pending {
            return false;
        }
        slot.state = if result.is_ok() {
            FutureState::Resolved
        } else {
            FutureState::Failed
        };
        slot.result = Some(result);
        cv.notify_all();
        true
    }

    /// Number of times anyone tried to complete this future.
    pub fn completion_attempts(&self) -> u32 {
        self.inner.0.lock().unwrap().attempts
    }

    pub fn result(&self) -> Option<TaskResult> {
        self.inner.0.lock().unwrap().result.clone()
    }

    /// Blocks until the future completes.
    pub fn wait(&self) -> TaskResult {
        let (lock, cv) = &*self.inner;
        let slot = cv
            .wait_while(lock.lock().unwrap(), |s| s.state == FutureState::Pending)
            .unwrap();
        slot.result.clone().expect("completed future has a result")
    }

    /// Blocks for at most `timeout`; `None` if still pending.
    pub fn wait_timeout(&self, timeout: Duration) -> Option<TaskResult> {
        let (lock, cv) = &*self.inner;
        let deadline = Instant::now() + timeout;
        let mut slot = lock.lock().unwrap();
        while slot.state == FutureState::Pending {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return None;
            }
            slot = cv.wait_timeout(slot, left).unwrap().0;
        }
        slot.result.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    #[test]
    fn first_completion_wins() {
        let f = Future::new("a");
        assert_eq!(f.state(), FutureState::Pending);
        assert!(f.result().is_none());
        assert!(f.complete(TaskResult::ok("a", "1")));
        assert!(!f.complete(TaskResult::error("a", "late")));
        assert_eq!(f.state(), FutureState::Resolved);
        assert_eq!(f.wait().value(), Some("1"));
        assert_eq!(f.wait(), f.wait());
        assert_eq!(f.completion_attempts(), 2);
    }

    #[test]
    fn error_result_fails_the_future() {
        let f = Future::new("a");
        f.complete(TaskResult::error("a", "boom"));
        assert_eq!(f.state(), FutureState::Failed);
        assert_eq!(f.wait().error_message(), Some("boom"));
    }

    #[test]
    fn readers_block_until_resolution() {
        let f = Future::new("a");
        let g = f.clone();
        let reader = thread::spawn(move || g.wait());
        assert!(f.wait_timeout(Duration::from_millis(10)).is_none());
        f.complete(TaskResult::ok("a", "x"));
        assert_eq!(reader.join().unwrap().value(), Some("x"));
    }
}
