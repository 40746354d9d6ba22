//! Per-thread call counters, so tests can check which stages a code path
//! touched without racing against other tests.

use std::cell::Cell;

thread_local! {
    static SAMPLER_RUNS: Cell<usize> = const { Cell::new(0) };
    static DEFORM_PASSES: Cell<usize> = const { Cell::new(0) };
}

/// Guided sampling runs started on this thread.
pub fn sampler_runs() -> usize {
    SAMPLER_RUNS.with(Cell::get)
}

/// Deformable transfers evaluated on this thread.
pub fn deform_passes() -> usize {
    DEFORM_PASSES.with(Cell::get)
}

pub(crate) fn count_sampler_run() {
    SAMPLER_RUNS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn count_deform_pass() {
    DEFORM_PASSES.with(|c| c.set(c.get() + 1));
}
