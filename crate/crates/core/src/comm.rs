//! Analytic communication cost model.
//!
//! Nothing is sent over a network. Every transfer is charged to a
//! [`TransferLedger`] by volume: host to worker, worker to host, and
//! worker to worker (all-reduce, ring model).

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

/// Bytes per stored parameter element (float32 accounting).
pub const PARAM_BYTES: u64 = 4;

/// An embedding travels with its Adam momentum and velocity.
pub const OPTIMIZER_COPIES: u64 = 3;

/// Per-worker traffic of a ring all-reduce over `payload_bytes`:
/// `2 (W - 1) / W * payload`, rounded down.
pub fn allreduce_bytes(payload_bytes: u64, workers: usize) -> u64 {
    assert!(workers >= 1, "all-reduce needs at least one worker");
    let w = workers as u128;
    (2 * (w - 1) * payload_bytes as u128 / w) as u64
}

/// Bytes moved for `features` embedding rows of width `dim` together with
/// their optimizer state.
pub fn param_state_bytes(features: u64, dim: usize) -> u64 {
    features * dim as u64 * PARAM_BYTES * OPTIMIZER_COPIES
}

/// Bytes for `elements` bare parameters (no optimizer state).
pub fn plain_bytes(elements: u64) -> u64 {
    elements * PARAM_BYTES
}

/// Traffic of one step (or any other span), as plain counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub host_to_worker_bytes: u64,
    pub worker_to_host_bytes: u64,
    pub interworker_bytes: u64,
    pub swap_events: u64,
}

impl LedgerSnapshot {
    pub fn total_bytes(&self) -> u64 {
        self.host_to_worker_bytes + self.worker_to_host_bytes + self.interworker_bytes
    }

    pub fn host_worker_bytes(&self) -> u64 {
        self.host_to_worker_bytes + self.worker_to_host_bytes
    }
}

impl std::ops::AddAssign for LedgerSnapshot {
    fn add_assign(&mut self, rhs: Self) {
        self.host_to_worker_bytes += rhs.host_to_worker_bytes;
        self.worker_to_host_bytes += rhs.worker_to_host_bytes;
        self.interworker_bytes += rhs.interworker_bytes;
        self.swap_events += rhs.swap_events;
    }
}

/// Run-wide byte counters. Safe to charge from several lanes at once; the
/// totals do not depend on the order of additions.
#[derive(Debug, Default)]
pub struct TransferLedger {
    host_to_worker: AtomicU64,
    worker_to_host: AtomicU64,
    interworker: AtomicU64,
    swaps: AtomicU64,
}

impl TransferLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn charge(&self, delta: &LedgerSnapshot) {
        self.host_to_worker
            .fetch_add(delta.host_to_worker_bytes, Ordering::Relaxed);
        self.worker_to_host
            .fetch_add(delta.worker_to_host_bytes, Ordering::Relaxed);
        self.interworker
            .fetch_add(delta.interworker_bytes, Ordering::Relaxed);
        self.swaps.fetch_add(delta.swap_events, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            host_to_worker_bytes: self.host_to_worker.load(Ordering::Relaxed),
            worker_to_host_bytes: self.worker_to_host.load(Ordering::Relaxed),
            interworker_bytes: self.interworker.load(Ordering::Relaxed),
            swap_events: self.swaps.load(Ordering::Relaxed),
        }
    }
}
