use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

const BUCKETS: usize = 64;

/// Lock-free histogram with power-of-two buckets; bucket `i` counts values in
/// `[2^(i-1), 2^i)` (bucket 0 holds zero).
#[derive(Debug)]
pub struct Histogram {
    buckets: [AtomicU64; BUCKETS],
    count: AtomicU64,
    sum: AtomicU64,
    min: AtomicU64,
    max: AtomicU64,
}

impl Default for Histogram {
    fn default() -> Self {
        Self {
            buckets: std::array::from_fn(|_| AtomicU64::new(0)),
            count: AtomicU64::new(0),
            sum: AtomicU64::new(0),
            min: AtomicU64::new(u64::MAX),
            max: AtomicU64::new(0),
        }
    }
}

fn bucket_of(v: u64) -> usize {
    ((64 - v.leading_zeros()) as usize).min(BUCKETS - 1)
}

impl Histogram {
    pub fn record(&self, v: u64) {
        self.buckets[bucket_of(v)].fetch_add(1, Ordering::Relaxed);
        self.count.fetch_add(1, Ordering::Relaxed);
        self.sum.fetch_add(v, Ordering::Relaxed);
        self.min.fetch_min(v, Ordering::Relaxed);
        self.max.fetch_max(v, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> HistogramSnapshot {
        let count = self.count.load(Ordering::Relaxed);
        let buckets: Vec<u64> = self.buckets.iter().map(|b| b.load(Ordering::Relaxed)).collect();
        let last = buckets.iter().rposition(|&c| c > 0).map_or(0, |i| i + 1);
        HistogramSnapshot {
            count,
            sum: self.sum.load(Ordering::Relaxed),
            min: if count == 0 { 0 } else { self.min.load(Ordering::Relaxed) },
            max: self.max.load(Ordering::Relaxed),
            buckets: buckets[..last].to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HistogramSnapshot {
    pub count: u64,
    pub sum: u64,
    pub min: u64,
    pub max: u64,
    /// Power-of-two bucket counts, trailing empty buckets trimmed.
    pub buckets: Vec<u64>,
}

impl HistogramSnapshot {
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum as f64 / self.count as f64
        }
    }

    /// Upper edge of the bucket holding quantile `q`.
    pub fn quantile_upper(&self, q: f64) -> u64 {
        if self.count == 0 {
            return 0;
        }
        let rank = ((q.clamp(0.0, 1.0) * self.count as f64).ceil() as u64).max(1);
        let mut seen = 0;
        for (i, &c) in self.buckets.iter().enumerate() {
            seen += c;
            if seen >= rank {
                let edge = if i == 0 { 0 } else { 1u64.checked_shl(i as u32).map_or(u64::MAX, |e| e - 1) };
                return edge.min(self.max);
            }
        }
        self.max
    }
}

#[derive(Debug, Default)]
pub(crate) struct GroupCounters {
    pub dropped: AtomicU64,
    pub timed_out: AtomicU64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: String,
    pub consumers: usize,
    pub enqueued: u64,
    pub consumed: u64,
    pub dropped: u64,
    pub timed_out: u64,
    pub in_queue: u64,
}

impl GroupMetrics {
    pub fn lag(&self) -> u64 {
        self.enqueued.saturating_sub(self.consumed + self.dropped)
    }
}

/// Point-in-time view of one pipe.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipeMetrics {
    pub pipe: String,
    pub produced: u64,
    pub consumed: u64,
    /// Frames lost to the drop policy or to consumers leaving with queued frames.
    pub dropped: u64,
    /// Deliveries abandoned after a backpressure deadline.
    pub timed_out: u64,
    pub queue_latency_ns: HistogramSnapshot,
    pub transfer_ns: HistogramSnapshot,
    pub groups: Vec<GroupMetrics>,
    pub stall_window: u64,
    /// Some group lags more than `stall_window` frames behind what it was sent.
    pub stall_alarm: bool,
}
