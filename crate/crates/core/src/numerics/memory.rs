//! Allocation accounting for tensor buffers.
//!
//! Every [`Buffer`] reports its size on creation and drop to a per-thread
//! counter. Benchmarks read the high-water mark instead of process RSS, which
//! keeps the numbers independent of the system allocator.

use std::cell::Cell;
use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicUsize, Ordering};

thread_local! {
    static LIVE: Cell<i64> = const { Cell::new(0) };
    static PEAK: Cell<i64> = const { Cell::new(0) };
}

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Number of worker threads the pipeline may fan out to.
pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

fn record_alloc(bytes: usize) {
    LIVE.with(|live| {
        let now = live.get() + bytes as i64;
        live.set(now);
        PEAK.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

fn record_free(bytes: usize) {
    LIVE.with(|live| live.set(live.get() - bytes as i64));
}

/// Bytes of tensor storage currently alive on this thread.
pub fn live_bytes() -> i64 {
    LIVE.with(Cell::get)
}

/// High-water mark since the last [`reset_peak`].
pub fn peak_bytes() -> i64 {
    PEAK.with(Cell::get)
}

pub fn reset_peak() {
    let live = live_bytes();
    PEAK.with(|p| p.set(live));
}

/// Measures the peak tensor storage allocated above the level at creation.
#[derive(Debug)]
pub struct PeakProbe {
    baseline: i64,
}

impl PeakProbe {
    pub fn start() -> Self {
        reset_peak();
        PeakProbe {
            baseline: live_bytes(),
        }
    }

    pub fn peak_above_baseline(&self) -> u64 {
        (peak_bytes() - self.baseline).max(0) as u64
    }
}

/// Instrumented `f64` storage used by every tensor and gradient.
#[derive(Debug, PartialEq)]
pub struct Buffer(Vec<f64>);

impl Buffer {
    pub fn zeros(len: usize) -> Self {
        Self::from_vec(vec![0.0; len])
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        record_alloc(data.len() * std::mem::size_of::<f64>());
        Buffer(data)
    }

    pub fn into_vec(mut self) -> Vec<f64> {
        record_free(self.0.len() * std::mem::size_of::<f64>());
        std::mem::take(&mut self.0)
    }
}

impl Clone for Buffer {
    fn clone(&self) -> Self {
        Buffer::from_vec(self.0.clone())
    }
}

impl Drop for Buffer {
    fn drop(&mut self) {
        record_free(self.0.len() * std::mem::size_of::<f64>());
    }
}

impl Deref for Buffer {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Buffer {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}
