use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChunkState {
    Pending,
    InFlight,
    Done,
}

/// One byte range of a job. `length: None` is an open-ended range covering a
/// file of unknown size, fetched by a single stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkRange {
    pub job_id: usize,
    pub offset: u64,
    pub length: Option<u64>,
    pub state: ChunkState,
}

impl ChunkRange {
    /// Exclusive end offset, when bounded.
    pub fn end(&self) -> Option<u64> {
        self.length.map(|len| self.offset + len)
    }

    /// `Range` header value (inclusive end).
    pub fn range_header(&self) -> Option<String> {
        let end = self.end()?;
        (end > self.offset).then(|| format!("bytes={}-{}", self.offset, end - 1))
    }
}

/// Splits `[0, total_bytes)` into `chunk_bytes`-sized ranges; the last may be
/// short. An unknown size yields one open-ended range.
pub fn plan_chunks(job_id: usize, total_bytes: Option<u64>, chunk_bytes: u64) -> Vec<ChunkRange> {
    assert!(chunk_bytes > 0, "chunk size must be positive");
    let Some(total) = total_bytes else {
        return vec![ChunkRange { job_id, offset: 0, length: None, state: ChunkState::Pending }];
    };
    (0..total.div_ceil(chunk_bytes))
        .map(|i| {
            let offset = i * chunk_bytes;
            ChunkRange { job_id, offset, length: Some(chunk_bytes.min(total - offset)), state: ChunkState::Pending }
        })
        .collect()
}

/// A unit of work in the shared queue.
#[derive(Debug, Clone)]
pub(crate) struct Task {
    pub range: ChunkRange,
    pub failures: u32,
    pub ready_at: Option<Instant>,
}

/// Multi-consumer queue spanning all jobs; each task is handed out once.
#[derive(Debug, Default)]
pub(crate) struct ChunkQueue {
    tasks: Mutex<VecDeque<Task>>,
    ready: Condvar,
}

impl ChunkQueue {
    pub fn push(&self, task: Task) {
        self.tasks.lock().unwrap().push_back(task);
        self.ready.notify_one();
    }

    /// Returns a task to the head of the queue, keeping its place in line.
    pub fn push_front(&self, task: Task) {
        self.tasks.lock().unwrap().push_front(task);
        self.ready.notify_one();
    }

    pub fn extend(&self, tasks: impl IntoIterator<Item = Task>) {
        self.tasks.lock().unwrap().extend(tasks);
        self.ready.notify_all();
    }

    pub fn len(&self) -> usize {
        self.tasks.lock().unwrap().len()
    }

    /// First task whose backoff has elapsed, waiting up to `timeout`.
    pub fn pop(&self, timeout: Duration) -> Option<Task> {
        let deadline = Instant::now() + timeout;
        let mut tasks = self.tasks.lock().unwrap();
        loop {
            let now = Instant::now();
            if let Some(i) = tasks.iter().position(|t| t.ready_at.is_none_or(|r| r <= now)) {
                return tasks.remove(i);
            }
            if now >= deadline {
                return None;
            }
            let earliest = tasks.iter().filter_map(|t| t.ready_at).min().unwrap_or(deadline);
            let wait = earliest.min(deadline).saturating_duration_since(now).max(Duration::from_millis(1));
            tasks = self.ready.wait_timeout(tasks, wait).unwrap().0;
        }
    }

    pub fn wake_all(&self) {
        self.ready.notify_all();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn plan_examples() {
        assert!(plan_chunks(0, Some(0), 40).is_empty());
        let chunks = plan_chunks(0, Some(100), 40);
        let spans: Vec<(u64, Option<u64>)> = chunks.iter().map(|c| (c.offset, c.end())).collect();
        assert_eq!(spans, vec![(0, Some(40)), (40, Some(80)), (80, Some(100))]);
        let big = plan_chunks(3, Some(8_000_000_000), 64_000_000);
        assert_eq!(big.len(), 125);
        assert!(big.iter().all(|c| c.length == Some(64_000_000) && c.job_id == 3));
    }

    #[test]
    fn unknown_size_is_one_open_range() {
        let chunks = plan_chunks(1, None, 40);
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].length, None);
        assert_eq!(chunks[0].range_header(), None);
    }

    #[test]
    fn range_header_is_inclusive() {
        let c = ChunkRange { job_id: 0, offset: 40, length: Some(40), state: ChunkState::Pending };
        assert_eq!(c.range_header().unwrap(), "bytes=40-79");
    }

    #[test]
    fn queue_dispatches_each_task_once() {
        let queue = ChunkQueue::default();
        queue.extend(plan_chunks(0, Some(10_000), 7).into_iter().map(|range| Task { range, failures: 0, ready_at: None }));
        let taken = Mutex::new(Vec::new());
        std::thread::scope(|s| {
            for _ in 0..16 {
                s.spawn(|| {
                    while let Some(t) = queue.pop(Duration::from_millis(5)) {
                        taken.lock().unwrap().push(t.range.offset);
                    }
                });
            }
        });
        let mut taken = taken.into_inner().unwrap();
        taken.sort_unstable();
        let expected: Vec<u64> = (0..10_000u64.div_ceil(7)).map(|i| i * 7).collect();
        assert_eq!(taken, expected);
    }

    #[test]
    fn backoff_delays_dispatch() {
        let queue = ChunkQueue::default();
        let range = plan_chunks(0, Some(1), 1)[0];
        queue.push(Task { range, failures: 1, ready_at: Some(Instant::now() + Duration::from_millis(60)) });
        assert!(queue.pop(Duration::from_millis(10)).is_none());
        assert!(queue.pop(Duration::from_millis(200)).is_some());
    }

    proptest! {
        #[test]
        fn chunks_cover_exactly(total in 0u64..1_000_000, chunk in 1u64..100_000) {
            let chunks = plan_chunks(0, Some(total), chunk);
            prop_assert_eq!(chunks.len() as u64, total.div_ceil(chunk));
            let mut next = 0;
            for c in &chunks {
                prop_assert_eq!(c.offset, next);
                let len = c.length.unwrap();
                prop_assert!(len > 0 && len <= chunk);
                next += len;
            }
            prop_assert_eq!(next, total);
        }
    }
}
