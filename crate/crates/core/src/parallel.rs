//! Runtime switch for the rayon data-parallel kernels.
//!
//! The `parallel` cargo feature compiles the rayon paths in; this flag
//! selects between them and the sequential fallback at runtime so the
//! bench suite can compare both in one process. All parallel loops write
//! disjoint output slices with per-thread deterministic accumulation
//! order, so results are bit-identical either way.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL_ENABLED: AtomicBool = AtomicBool::new(true);

/// Enable or disable the data-parallel kernel paths at runtime.
pub fn set_parallel(enabled: bool) {
    PARALLEL_ENABLED.store(enabled, Ordering::Relaxed);
}

/// True when the crate was built with the `parallel` feature and the
/// runtime switch is on.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL_ENABLED.load(Ordering::Relaxed)
}
