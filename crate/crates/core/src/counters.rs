//! Operation counters used to verify instantiation cost structurally.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

/// Live instrumentation counters. Cheap relaxed atomics so that read paths
/// can record work without taking a write lock.
#[derive(Debug, Default)]
pub struct Counters {
    entry_reads: AtomicU64,
    entry_copies: AtomicU64,
    bytes_copied: AtomicU64,
    definition_bytes_read: AtomicU64,
}

/// A point-in-time reading of [`Counters`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterReading {
    pub entry_reads: u64,
    pub entry_copies: u64,
    pub bytes_copied: u64,
    pub definition_bytes_read: u64,
}

impl Counters {
    pub fn entry_read(&self) {
        self.entry_reads.fetch_add(1, Ordering::Relaxed);
    }

    pub fn entry_copied(&self, bytes: u64) {
        self.entry_copies.fetch_add(1, Ordering::Relaxed);
        self.bytes_copied.fetch_add(bytes, Ordering::Relaxed);
    }

    pub fn definition_read(&self, bytes: u64) {
        self.definition_bytes_read.fetch_add(bytes, Ordering::Relaxed);
    }

    pub fn bytes_copied(&self, bytes: u64) {
        self.bytes_copied.fetch_add(bytes, Ordering::Relaxed);
    }

    pub fn read(&self) -> CounterReading {
        CounterReading {
            entry_reads: self.entry_reads.load(Ordering::Relaxed),
            entry_copies: self.entry_copies.load(Ordering::Relaxed),
            bytes_copied: self.bytes_copied.load(Ordering::Relaxed),
            definition_bytes_read: self.definition_bytes_read.load(Ordering::Relaxed),
        }
    }
}

impl CounterReading {
    /// Counter deltas since `earlier`.
    pub fn since(&self, earlier: &CounterReading) -> CounterReading {
        CounterReading {
            entry_reads: self.entry_reads - earlier.entry_reads,
            entry_copies: self.entry_copies - earlier.entry_copies,
            bytes_copied: self.bytes_copied - earlier.bytes_copied,
            definition_bytes_read: self.definition_bytes_read - earlier.definition_bytes_read,
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == CounterReading::default()
    }
}
