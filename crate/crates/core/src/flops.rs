//! Multiply-add instrumentation.
//!
//! Forward kernels bump a thread-local counter by the number of multiply-adds
//! they actually execute. Only contractions are counted (matrix products and
//! the attention score/value sums); elementwise work, normalisation and
//! backward passes are not. The closed-form models in
//! [`crate::attention::cost`] and [`crate::backbone::cost`] use the same
//! convention so instrumented and analytic counts can be compared exactly.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub(crate) fn add(n: u64) {
    MACS.with(|c| c.set(c.get() + n));
}

/// Current count on this thread.
pub fn read() -> u64 {
    MACS.with(Cell::get)
}

pub fn reset() {
    MACS.with(|c| c.set(0));
}

/// Runs `f` and returns its result with the multiply-adds it executed.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = read();
    let out = f();
    (out, read() - before)
}
