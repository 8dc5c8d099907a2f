use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WorkerStatus {
    Active,
    Paused,
    Stopped,
}

#[derive(Debug)]
struct Inner {
    concurrency: u32,
    stopped: bool,
}

/// Status array shared by the controller (single writer) and the worker pool.
///
/// Setting concurrency `n` makes workers `0..n` active and the rest paused;
/// `0` stops every worker for good. Workers read their own status between
/// chunks, so a change takes effect at chunk boundaries.
#[derive(Debug)]
pub struct WorkerStatuses {
    workers: u32,
    inner: Mutex<Inner>,
    changed: Condvar,
}

impl WorkerStatuses {
    /// All workers start paused.
    pub fn new(workers: u32) -> Self {
        Self { workers, inner: Mutex::new(Inner { concurrency: 0, stopped: false }), changed: Condvar::new() }
    }

    pub fn workers(&self) -> u32 {
        self.workers
    }

    pub fn set(&self, concurrency: u32) {
        let mut inner = self.inner.lock().unwrap();
        if concurrency == 0 {
            inner.stopped = true;
        } else {
            inner.concurrency = concurrency.min(self.workers);
        }
        self.changed.notify_all();
    }

    pub fn concurrency(&self) -> u32 {
        let inner = self.inner.lock().unwrap();
        if inner.stopped {
            0
        } else {
            inner.concurrency
        }
    }

    pub fn is_stopped(&self) -> bool {
        self.inner.lock().unwrap().stopped
    }

    fn status_of(inner: &Inner, id: u32) -> WorkerStatus {
        if inner.stopped {
            WorkerStatus::Stopped
        } else if id < inner.concurrency {
            WorkerStatus::Active
        } else {
            WorkerStatus::Paused
        }
    }

    pub fn status(&self, id: u32) -> WorkerStatus {
        Self::status_of(&self.inner.lock().unwrap(), id)
    }

    pub fn snapshot(&self) -> Vec<WorkerStatus> {
        let inner = self.inner.lock().unwrap();
        (0..self.workers).map(|id| Self::status_of(&inner, id)).collect()
    }

    /// Blocks while worker `id` is paused, up to `timeout`.
    pub fn wait_runnable(&self, id: u32, timeout: Duration) -> WorkerStatus {
        let inner = self.inner.lock().unwrap();
        let (inner, _) = self
            .changed
            .wait_timeout_while(inner, timeout, |i| Self::status_of(i, id) == WorkerStatus::Paused)
            .unwrap();
        Self::status_of(&inner, id)
    }

    /// Wakes every waiting worker so it can re-check shared state.
    pub fn poke(&self) {
        self.changed.notify_all();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use WorkerStatus::*;

    #[test]
    fn setting_concurrency_partitions_workers() {
        let s = WorkerStatuses::new(4);
        assert_eq!(s.snapshot(), vec![Paused; 4]);
        s.set(2);
        assert_eq!(s.snapshot(), vec![Active, Active, Paused, Paused]);
        s.set(9);
        assert_eq!(s.concurrency(), 4);
        s.set(0);
        assert_eq!(s.snapshot(), vec![Stopped; 4]);
        s.set(3);
        assert!(s.is_stopped(), "stop is terminal");
    }

    #[test]
    fn paused_worker_wakes_on_change() {
        let s = WorkerStatuses::new(2);
        std::thread::scope(|scope| {
            let h = scope.spawn(|| s.wait_runnable(1, Duration::from_secs(5)));
            std::thread::sleep(Duration::from_millis(20));
            s.set(2);
            assert_eq!(h.join().unwrap(), Active);
        });
        s.set(1);
        assert_eq!(s.wait_runnable(1, Duration::from_millis(10)), Paused);
    }
}
