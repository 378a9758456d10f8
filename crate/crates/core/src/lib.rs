//! Few-shot audio classification toolkit.
//!
//! Audio clips are normalized and turned into standardized log-mel
//! spectrograms, embedded by a small convolutional network, and classified
//! against per-class prototypes learned through episodic training. The
//! [`stats`] module compares run results with paired tests and equivalence
//! tests; [`tsne`] projects embeddings for inspection.

// `!(x > 0.0)` guards are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio;
pub mod autodiff;
pub mod backbone;
pub mod dataset;
pub mod experiment;
pub mod features;
pub mod fewshot;
pub mod seed;
pub mod stats;
pub mod synth;
pub mod tsne;

/// Keeps freed heap memory inside the process. Training allocates and
/// drops tens of megabytes of activations per episode; with glibc's default
/// mmap-backed large allocations every episode pays for fresh zeroed pages.
/// Call once at startup; a no-op on other platforms.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tuning parameters.
    unsafe {
        libc::mallopt(libc::M_MMAP_MAX, 0);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}
