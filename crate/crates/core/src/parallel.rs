//! Kernel thread-pool control.
//!
//! `GASMS_THREADS` caps internal kernel parallelism; `0` forces the
//! sequential path. Parallel kernels split work by output cell, so results
//! are bit-identical to the sequential loop order either way.

use std::sync::OnceLock;

static THREADS: OnceLock<usize> = OnceLock::new();

/// Effective kernel thread count (0 means sequential).
pub fn kernel_threads() -> usize {
    *THREADS.get_or_init(|| {
        tune_allocator();
        let n = std::env::var("GASMS_THREADS")
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .unwrap_or_else(|| {
                std::thread::available_parallelism().map_or(1, |n| n.get())
            });
        if n > 1 {
            // Ignore failure: the global pool may already be initialized.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        n
    })
}

/// Keep large blocks on the heap instead of mmap-per-allocation. Tensor ops
/// allocate and free multi-megabyte buffers every step; with glibc defaults
/// each one round-trips through mmap and refaults every page.
#[cfg(target_os = "linux")]
fn tune_allocator() {
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(-1 /* M_TRIM_THRESHOLD */, 1 << 30);
    }
}

#[cfg(not(target_os = "linux"))]
fn tune_allocator() {}

/// Whether kernels should take their parallel path for `work` units.
pub fn parallel_over(work: usize) -> bool {
    kernel_threads() > 1 && work > 1
}
