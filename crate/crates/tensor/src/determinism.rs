use std::sync::atomic::{AtomicBool, Ordering};

static DETERMINISTIC: AtomicBool = AtomicBool::new(true);

/// When enabled (the default), reductions that combine per-batch partial
/// results are summed sequentially in batch order, so outputs and gradients
/// are bit-identical across runs regardless of thread count.
pub fn set_deterministic_reductions(on: bool) {
    DETERMINISTIC.store(on, Ordering::SeqCst);
}

pub fn deterministic_reductions() -> bool {
    DETERMINISTIC.load(Ordering::SeqCst)
}
