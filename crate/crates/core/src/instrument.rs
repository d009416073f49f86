//! Process-wide evaluation counters.
//!
//! Used by tests to prove that inference never touches the teacher, the
//! distillation head, or the pooling layer.

use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Counter {
    TeacherEvals,
    KdHeadEvals,
    PoolEvals,
}

static TEACHER_EVALS: AtomicU64 = AtomicU64::new(0);
static KD_HEAD_EVALS: AtomicU64 = AtomicU64::new(0);
static POOL_EVALS: AtomicU64 = AtomicU64::new(0);

fn cell(counter: Counter) -> &'static AtomicU64 {
    match counter {
        Counter::TeacherEvals => &TEACHER_EVALS,
        Counter::KdHeadEvals => &KD_HEAD_EVALS,
        Counter::PoolEvals => &POOL_EVALS,
    }
}

pub fn count(counter: Counter) {
    cell(counter).fetch_add(1, Ordering::Relaxed);
}

pub fn read(counter: Counter) -> u64 {
    cell(counter).load(Ordering::Relaxed)
}

/// Snapshot all counters; compare two snapshots around a code region.
pub fn snapshot() -> [u64; 3] {
    [
        read(Counter::TeacherEvals),
        read(Counter::KdHeadEvals),
        read(Counter::PoolEvals),
    ]
}
