/// Linear-refill token bucket holding at most one second of `rate`.
///
/// Time is passed in explicitly (seconds on any monotonic clock) so the
/// arithmetic can be tested without sleeping.
#[derive(Debug, Clone)]
pub struct TokenBucket {
    rate: f64,
    tokens: f64,
    last: f64,
}

impl TokenBucket {
    /// A full bucket at time `now`.
    pub fn new(rate_bytes_per_sec: u64, now: f64) -> Self {
        assert!(rate_bytes_per_sec > 0, "rate must be positive");
        let rate = rate_bytes_per_sec as f64;
        Self { rate, tokens: rate, last: now }
    }

    /// An empty bucket at time `now`.
    pub fn empty(rate_bytes_per_sec: u64, now: f64) -> Self {
        Self { tokens: 0.0, ..Self::new(rate_bytes_per_sec, now) }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn capacity(&self) -> f64 {
        self.rate
    }

    fn refill(&mut self, now: f64) {
        if now > self.last {
            self.tokens = (self.tokens + (now - self.last) * self.rate).min(self.capacity());
            self.last = now;
        }
    }

    /// Whole bytes available at `now`.
    pub fn available(&mut self, now: f64) -> u64 {
        self.refill(now);
        self.tokens.max(0.0).floor() as u64
    }

    /// Grants `min(available, n_bytes)` and removes it from the bucket.
    pub fn take(&mut self, n_bytes: u64, now: f64) -> u64 {
        let granted = self.available(now).min(n_bytes);
        self.tokens -= granted as f64;
        granted
    }

    /// Seconds until `n_bytes` (capped at capacity) will be available.
    pub fn wait_for(&mut self, n_bytes: u64, now: f64) -> f64 {
        self.refill(now);
        let want = (n_bytes as f64).min(self.capacity());
        ((want - self.tokens) / self.rate).max(0.0)
    }
}
