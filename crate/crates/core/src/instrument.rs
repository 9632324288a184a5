//! Per-thread operation counters.
//!
//! Kernels bump these as they run so tests can compare the analytical cost
//! model against what a forward pass actually executed. MACs are counted at
//! the nominal size of each operation (a fused kernel reports the
//! multiply-accumulates of the unfused computation it replaces).

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
    static KNN_CALLS: Cell<u64> = const { Cell::new(0) };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counters {
    pub macs: u64,
    pub knn_calls: u64,
}

pub fn reset() {
    MACS.with(|c| c.set(0));
    KNN_CALLS.with(|c| c.set(0));
}

pub fn snapshot() -> Counters {
    Counters {
        macs: MACS.with(Cell::get),
        knn_calls: KNN_CALLS.with(Cell::get),
    }
}

pub(crate) fn add_macs(n: usize) {
    MACS.with(|c| c.set(c.get() + n as u64));
}

pub(crate) fn count_knn() {
    KNN_CALLS.with(|c| c.set(c.get() + 1));
}
