//! Backing storage for local heaps and global chunks.
//!
//! Each arena is one anonymous mapping reserved up front; pages are only
//! committed when touched. All heap words are accessed as `AtomicU64` so
//! the parallel global collection can race on header words soundly.

use std::ptr::NonNull;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{GcError, Result};
use crate::object::WORD_BYTES;

pub const PAGE_BYTES: usize = 4096;

pub struct Arena {
    base: NonNull<u8>,
    len: usize,
}

// The mapping is owned by the arena and only accessed through atomics.
unsafe impl Send for Arena {}
unsafe impl Sync for Arena {}

impl Arena {
    /// Reserves `len` bytes (rounded up to a page) of zeroed address space.
    pub fn reserve(len: usize) -> Result<Self> {
        let len = round_up(len.max(PAGE_BYTES), PAGE_BYTES);
        // SAFETY: anonymous private mapping with no fixed address.
        let ptr = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                len,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | libc::MAP_NORESERVE,
                -1,
                0,
            )
        };
        if ptr == libc::MAP_FAILED {
            return Err(GcError::HostMemory(format!(
                "mmap of {len} bytes failed: {}",
                std::io::Error::last_os_error()
            )));
        }
        Ok(Arena {
            base: NonNull::new(ptr.cast()).expect("mmap returned null"),
            len,
        })
    }

    #[inline]
    pub fn base(&self) -> usize {
        self.base.as_ptr() as usize
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn end(&self) -> usize {
        self.base() + self.len
    }

    #[inline]
    pub fn contains(&self, addr: usize) -> bool {
        addr >= self.base() && addr < self.end()
    }

    #[inline]
    fn word(&self, addr: usize) -> &AtomicU64 {
        assert!(
            self.contains(addr) && addr.is_multiple_of(WORD_BYTES),
            "wild heap access at {addr:#x}"
        );
        // SAFETY: in bounds, aligned, and the mapping lives as long as self.
        unsafe { &*(addr as *const AtomicU64) }
    }
}

impl Drop for Arena {
    fn drop(&mut self) {
        // SAFETY: unmapping exactly what reserve() mapped.
        unsafe {
            libc::munmap(self.base.as_ptr().cast(), self.len);
        }
    }
}

impl std::fmt::Debug for Arena {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Arena({:#x}..{:#x})", self.base(), self.end())
    }
}

/// The two arenas of a runtime: local heaps and the global chunk pool.
#[derive(Debug)]
pub struct Memory {
    pub local: Arena,
    pub global: Arena,
}

impl Memory {
    pub fn new(local_bytes: usize, global_bytes: usize) -> Result<Self> {
        Ok(Memory {
            local: Arena::reserve(local_bytes)?,
            global: Arena::reserve(global_bytes)?,
        })
    }

    #[inline]
    fn word(&self, addr: usize) -> &AtomicU64 {
        if self.local.contains(addr) {
            self.local.word(addr)
        } else {
            self.global.word(addr)
        }
    }

    #[inline]
    pub fn load(&self, addr: usize) -> u64 {
        self.word(addr).load(Ordering::Relaxed)
    }

    #[inline]
    pub fn store(&self, addr: usize, value: u64) {
        self.word(addr).store(value, Ordering::Relaxed)
    }

    #[inline]
    pub fn load_acquire(&self, addr: usize) -> u64 {
        self.word(addr).load(Ordering::Acquire)
    }

    /// Installs `new` over `current`; returns the observed word on failure.
    #[inline]
    pub fn compare_exchange(&self, addr: usize, current: u64, new: u64) -> Result<u64, u64> {
        self.word(addr)
            .compare_exchange(current, new, Ordering::AcqRel, Ordering::Acquire)
    }

    /// Word-by-word copy; regions may overlap only if `dst <= src`.
    pub fn copy_words(&self, src: usize, dst: usize, words: usize) {
        for i in 0..words {
            let v = self.load(src + i * WORD_BYTES);
            self.store(dst + i * WORD_BYTES, v);
        }
    }

    pub fn fill_zero(&self, start: usize, end: usize) {
        let mut a = start;
        while a < end {
            self.store(a, 0);
            a += WORD_BYTES;
        }
    }

    #[inline]
    pub fn is_mapped(&self, addr: usize) -> bool {
        self.local.contains(addr) || self.global.contains(addr)
    }
}

#[inline]
pub const fn round_up(value: usize, align: usize) -> usize {
    value.div_ceil(align) * align
}

#[inline]
pub const fn round_down(value: usize, align: usize) -> usize {
    value / align * align
}
