use std::sync::Once;

/// Asks the system allocator to keep freed blocks instead of returning them to
/// the OS. Training allocates and drops multi-megabyte activations every step,
/// and refaulting those pages costs more than the arithmetic on them.
///
/// Process-wide and idempotent. A no-op outside glibc.
pub fn retain_freed_memory() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 64 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
            libc::mallopt(libc::M_TOP_PAD, 256 << 20);
        }
    });
}
