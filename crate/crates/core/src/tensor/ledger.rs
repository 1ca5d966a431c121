//! Byte-accurate accounting of tensor payload allocations.
//!
//! Every [`Buffer`] registers its payload size with the ledger of the thread
//! that created it and releases it on drop. Allocator overhead, shapes and
//! graph bookkeeping are not counted; the unit is payload bytes.
//!
//! Counters are per thread so that concurrently running workloads (for
//! example parallel unit tests) do not contaminate each other's peaks. A
//! buffer dropped on another thread still credits the ledger it was charged
//! to.

use std::cell::RefCell;
use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

#[derive(Debug, Default)]
struct Counters {
    live: AtomicU64,
    peak: AtomicU64,
    logging: AtomicBool,
    log: Mutex<Option<Vec<LedgerEvent>>>,
}

/// One allocation (`delta > 0`) or release (`delta < 0`) in the event log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEvent {
    pub tag: &'static str,
    pub delta: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LedgerSnapshot {
    pub live_bytes: u64,
    pub peak_bytes: u64,
}

thread_local! {
    static LEDGER: Arc<Counters> = Arc::new(Counters::default());
    static TAG: RefCell<&'static str> = const { RefCell::new("untagged") };
}

impl Counters {
    fn charge(&self, bytes: u64) {
        if bytes == 0 {
            return;
        }
        let live = self.live.fetch_add(bytes, Ordering::Relaxed) + bytes;
        self.peak.fetch_max(live, Ordering::Relaxed);
        self.record(bytes as i64);
    }

    fn credit(&self, bytes: u64) {
        if bytes == 0 {
            return;
        }
        self.live.fetch_sub(bytes, Ordering::Relaxed);
        self.record(-(bytes as i64));
    }

    fn record(&self, delta: i64) {
        if !self.logging.load(Ordering::Relaxed) {
            return;
        }
        let mut log = self.log.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(events) = log.as_mut() {
            let tag = TAG.with(|t| *t.borrow());
            events.push(LedgerEvent { tag, delta });
        }
    }
}

/// Current live and peak byte counts for this thread.
pub fn snapshot() -> LedgerSnapshot {
    LEDGER.with(|l| LedgerSnapshot {
        live_bytes: l.live.load(Ordering::Relaxed),
        peak_bytes: l.peak.load(Ordering::Relaxed),
    })
}

/// Lowers the peak to the current live count, starting a new measurement scope.
pub fn reset_peak() {
    LEDGER.with(|l| {
        let live = l.live.load(Ordering::Relaxed);
        l.peak.store(live, Ordering::Relaxed);
    });
}

/// Sets the tag attached to subsequent events and returns the previous one.
pub fn set_tag(tag: &'static str) -> &'static str {
    TAG.with(|t| std::mem::replace(&mut *t.borrow_mut(), tag))
}

/// Runs `f` with the event log enabled and returns the events it produced.
pub fn with_event_log<T>(f: impl FnOnce() -> T) -> (T, Vec<LedgerEvent>) {
    LEDGER.with(|l| {
        *l.log.lock().unwrap_or_else(|e| e.into_inner()) = Some(Vec::new());
        l.logging.store(true, Ordering::Relaxed);
    });
    let out = f();
    let events = LEDGER.with(|l| {
        l.logging.store(false, Ordering::Relaxed);
        l.log
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .take()
            .unwrap_or_default()
    });
    (out, events)
}

/// Contiguous `f32` payload charged to the creating thread's ledger.
pub struct Buffer {
    data: Vec<f32>,
    owner: Arc<Counters>,
}

impl Buffer {
    pub fn from_vec(data: Vec<f32>) -> Self {
        let owner = LEDGER.with(Arc::clone);
        owner.charge(byte_len(data.len()));
        Buffer { data, owner }
    }

    pub fn zeros(len: usize) -> Self {
        Self::from_vec(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f32) -> Self {
        Self::from_vec(vec![value; len])
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(mut self) -> Vec<f32> {
        self.owner.credit(byte_len(self.data.len()));
        std::mem::take(&mut self.data)
    }

    pub fn byte_len(&self) -> u64 {
        byte_len(self.data.len())
    }
}

fn byte_len(len: usize) -> u64 {
    (len * std::mem::size_of::<f32>()) as u64
}

impl Drop for Buffer {
    fn drop(&mut self) {
        self.owner.credit(byte_len(self.data.len()));
    }
}

impl Clone for Buffer {
    fn clone(&self) -> Self {
        Buffer::from_vec(self.data.clone())
    }
}

impl Deref for Buffer {
    type Target = [f32];
    fn deref(&self) -> &[f32] {
        &self.data
    }
}

impl DerefMut for Buffer {
    fn deref_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

impl std::fmt::Debug for Buffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Buffer").field("len", &self.data.len()).finish()
    }
}
