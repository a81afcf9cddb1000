//! Page-aligned host buffers with a guard page, per-line versions and a
//! writer lock.

use std::alloc::{alloc_zeroed, dealloc, Layout};
use std::ops::Range;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};

use crate::error::{usage, Error, Result};
use crate::probe::{SharedBuffer, LINE_SIZE, PAGE_SIZE};

pub struct HwBuffer {
    ptr: *mut u8,
    layout: Layout,
    shared: SharedBuffer,
    // Seqlock per line: odd while a store is in progress.
    versions: Vec<AtomicU64>,
    locked: AtomicBool,
}

// SAFETY: the bytes are only accessed as AtomicU8 or through volatile loads
// used for timing, and the allocation lives as long as the buffer.
unsafe impl Send for HwBuffer {}
unsafe impl Sync for HwBuffer {}

fn wait() {
    std::hint::spin_loop();
    if super::available_cpus() == 1 {
        std::thread::yield_now();
    }
}

impl HwBuffer {
    pub fn new(init: &[u8]) -> Result<Self> {
        if init.is_empty() {
            return Err(usage("shared buffer size must be at least one byte"));
        }
        let pages = init.len().div_ceil(PAGE_SIZE);
        let layout = Layout::from_size_align((pages + 1) * PAGE_SIZE, PAGE_SIZE)
            .map_err(|e| Error::Resource(format!("buffer layout: {e}")))?;
        // SAFETY: layout has non-zero size.
        let ptr = unsafe { alloc_zeroed(layout) };
        if ptr.is_null() {
            return Err(Error::Resource(format!("could not allocate {} bytes", layout.size())));
        }
        // SAFETY: init fits in the allocation.
        unsafe { std::ptr::copy_nonoverlapping(init.as_ptr(), ptr, init.len()) };
        let shared = SharedBuffer::new(ptr as u64, init.len())?;
        let versions = (0..shared.line_ids().len()).map(|_| AtomicU64::new(0)).collect();
        Ok(HwBuffer { ptr, layout, shared, versions, locked: AtomicBool::new(false) })
    }

    pub fn shared(&self) -> &SharedBuffer {
        &self.shared
    }

    pub fn len(&self) -> usize {
        self.shared.size_bytes()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn line_ptr(&self, line: usize) -> *const u8 {
        assert!(line < self.versions.len(), "line {line} out of range");
        // SAFETY: in bounds per the assert.
        unsafe { self.ptr.add(line * LINE_SIZE) }
    }

    fn byte(&self, i: usize) -> &AtomicU8 {
        assert!(i < self.len(), "offset {i} out of range");
        // SAFETY: in bounds; AtomicU8 has the layout of u8.
        unsafe { &*(self.ptr.add(i) as *const AtomicU8) }
    }

    pub fn line_range(&self, offset: usize, len: usize) -> Range<usize> {
        if len == 0 || offset >= self.len() {
            return 0..0;
        }
        let end = (offset + len).min(self.len());
        offset / LINE_SIZE..(end - 1) / LINE_SIZE + 1
    }

    /// Bytes `offset..offset + len`, clamped to the buffer.
    pub fn load(&self, offset: usize, len: usize) -> Vec<u8> {
        let end = (offset + len).min(self.len());
        (offset.min(end)..end).map(|i| self.byte(i).load(Ordering::Acquire)).collect()
    }

    pub fn version(&self, line: usize) -> u64 {
        self.versions[line].load(Ordering::Acquire)
    }

    /// Version of `line` once no store is in progress.
    pub fn stable_version(&self, line: usize) -> u64 {
        loop {
            let v = self.version(line);
            if v & 1 == 0 {
                return v;
            }
            wait();
        }
    }

    pub fn lock(&self) {
        while self.locked.compare_exchange_weak(false, true, Ordering::Acquire, Ordering::Relaxed).is_err() {
            wait();
        }
    }

    pub fn unlock(&self) {
        self.locked.store(false, Ordering::Release);
    }

    /// Stores under the writer lock.
    pub fn store(&self, offset: usize, bytes: &[u8]) {
        self.lock();
        self.store_locked(offset, bytes);
        self.unlock();
    }

    /// Stores with the writer lock already held by the caller.
    pub fn store_locked(&self, offset: usize, bytes: &[u8]) {
        let lines = self.line_range(offset, bytes.len());
        for l in lines.clone() {
            self.versions[l].fetch_add(1, Ordering::AcqRel);
        }
        for (i, &b) in bytes.iter().enumerate() {
            if offset + i < self.len() {
                self.byte(offset + i).store(b, Ordering::Release);
            }
        }
        for l in lines {
            self.versions[l].fetch_add(1, Ordering::AcqRel);
        }
    }
}

impl Drop for HwBuffer {
    fn drop(&mut self) {
        // SAFETY: allocated in new() with this layout.
        unsafe { dealloc(self.ptr, self.layout) };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn page_aligned_with_versions() {
        let b = HwBuffer::new(&[7; 100]).unwrap();
        assert_eq!(b.shared().base_address() % PAGE_SIZE as u64, 0);
        assert_eq!(b.line_range(60, 8), 0..2);
        b.store(60, &[1; 8]);
        assert_eq!(b.version(0), 2);
        assert_eq!(b.version(1), 2);
        assert_eq!(b.load(58, 4), vec![7, 7, 1, 1]);
        assert_eq!(b.load(98, 10), vec![7, 7]);
    }
}
