//! Elementary-operation counting for cost assertions in tests.
//!
//! The sampler's contract is that drawing all `n` tokens costs O(n·r·V) work
//! on the distribution (no re-invocation of the encoder). The CP operations
//! bump this thread-local counter by the size of each inner loop so tests can
//! assert the bound directly.

use std::cell::Cell;

thread_local! {
    static OPS: Cell<u64> = const { Cell::new(0) };
}

pub fn reset() {
    OPS.with(|c| c.set(0));
}

pub fn count() -> u64 {
    OPS.with(|c| c.get())
}

#[inline]
pub(crate) fn add(n: u64) {
    OPS.with(|c| c.set(c.get() + n));
}
