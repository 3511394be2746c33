//! Test-harness hook that corrupts one backward rule, used to confirm the
//! gradient-check suites actually detect a broken rule.

use std::cell::Cell;

use crate::tape::OpKind;

thread_local! {
    static FLIPPED: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Negates the gradients emitted by every op of `kind` on this thread until
/// the returned guard is dropped.
pub fn flip_backward_sign(kind: OpKind) -> FaultGuard {
    FLIPPED.with(|f| f.set(Some(kind)));
    FaultGuard(())
}

pub(crate) fn active() -> Option<OpKind> {
    FLIPPED.with(|f| f.get())
}

#[must_use = "the fault is cleared when the guard drops"]
pub struct FaultGuard(());

impl Drop for FaultGuard {
    fn drop(&mut self) {
        FLIPPED.with(|f| f.set(None));
    }
}
