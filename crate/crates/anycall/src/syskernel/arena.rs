//! The simulated user-memory arena and page-pinning bookkeeping.
//!
//! The arena is the application's user memory: a contiguous byte store at
//! a fixed virtual base address. Aggregation programs never touch it
//! directly; they pin fixed-size windows with `map`, which yields a
//! tagged region handle, or go through the copy helpers.

use std::collections::BTreeMap;

/// Virtual base address of the arena. Chosen to look like a user-space
/// address so traces clearly separate user addresses from handles.
pub const ARENA_BASE: u64 = 0x0000_7000_0000_0000;
/// Default arena size: 16 MiB.
pub const DEFAULT_ARENA_SIZE: usize = 16 * 1024 * 1024;

/// Tag bit distinguishing region-handle values from addresses.
pub const REGION_TAG: u64 = 1 << 63;

/// Pack a region id and in-region offset into a runtime handle value.
pub fn encode_region_handle(id: u32, offset: u64) -> u64 {
    debug_assert!(offset < (1 << 32));
    REGION_TAG | (u64::from(id) << 32) | offset
}

/// Unpack a runtime handle value. Returns `None` for untagged values.
pub fn decode_region_handle(value: u64) -> Option<(u32, u64)> {
    if value & REGION_TAG == 0 {
        return None;
    }
    Some((((value >> 32) & 0x7fff_ffff) as u32, value & 0xffff_ffff))
}

/// A pinned window of the arena: `size` bytes starting `offset` bytes
/// into the arena store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PinnedRegion {
    pub offset: u64,
    pub size: u64,
}

#[derive(Debug)]
pub struct UserArena {
    base: u64,
    bytes: Vec<u8>,
    pinned: BTreeMap<u32, PinnedRegion>,
    next_region: u32,
}

impl UserArena {
    pub fn new(size: usize) -> Self {
        UserArena {
            base: ARENA_BASE,
            bytes: vec![0; size],
            pinned: BTreeMap::new(),
            next_region: 1,
        }
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn size(&self) -> u64 {
        self.bytes.len() as u64
    }

    /// Translate a virtual user address range to an arena offset, or
    /// `None` when any byte falls outside the arena.
    pub fn offset_of(&self, addr: u64, len: u64) -> Option<u64> {
        let off = addr.checked_sub(self.base)?;
        if off.checked_add(len)? <= self.size() {
            Some(off)
        } else {
            None
        }
    }

    pub fn read(&self, addr: u64, len: u64) -> Option<&[u8]> {
        let off = self.offset_of(addr, len)? as usize;
        Some(&self.bytes[off..off + len as usize])
    }

    pub fn write(&mut self, addr: u64, data: &[u8]) -> Option<()> {
        let off = self.offset_of(addr, data.len() as u64)? as usize;
        self.bytes[off..off + data.len()].copy_from_slice(data);
        Some(())
    }

    pub fn slice(&self, offset: u64, len: u64) -> &[u8] {
        &self.bytes[offset as usize..(offset + len) as usize]
    }

    pub fn slice_mut(&mut self, offset: u64, len: u64) -> &mut [u8] {
        &mut self.bytes[offset as usize..(offset + len) as usize]
    }

    /// Read a NUL-terminated string starting at `addr`, bounded by
    /// `max_len` and the arena end.
    pub fn read_cstr(&self, addr: u64, max_len: u64) -> Option<&[u8]> {
        let off = addr.checked_sub(self.base)?;
        if off >= self.size() {
            return None;
        }
        let end = (off + max_len).min(self.size()) as usize;
        let window = &self.bytes[off as usize..end];
        let nul = window.iter().position(|b| *b == 0)?;
        Some(&window[..nul])
    }

    /// Pin `[addr, addr + size)`. Returns a fresh handle, or 0 (null)
    /// when the range is out of bounds, empty, or overlaps a live pin.
    pub fn map(&mut self, addr: u64, size: u64) -> u64 {
        if size == 0 {
            return 0;
        }
        let Some(offset) = self.offset_of(addr, size) else {
            return 0;
        };
        let overlaps = self
            .pinned
            .values()
            .any(|r| offset < r.offset + r.size && r.offset < offset + size);
        if overlaps {
            return 0;
        }
        let id = self.next_region;
        self.next_region += 1;
        self.pinned.insert(id, PinnedRegion { offset, size });
        encode_region_handle(id, 0)
    }

    /// Unpin a live region. Returns false when the id is not live.
    pub fn unmap(&mut self, id: u32) -> bool {
        self.pinned.remove(&id).is_some()
    }

    pub fn region(&self, id: u32) -> Option<PinnedRegion> {
        self.pinned.get(&id).copied()
    }

    pub fn live_regions(&self) -> impl Iterator<Item = u32> + '_ {
        self.pinned.keys().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_fresh_range() {
        let mut a = UserArena::new(64);
        let h = a.map(ARENA_BASE, 4);
        assert_ne!(h, 0);
        let (id, off) = decode_region_handle(h).unwrap();
        assert_eq!(off, 0);
        assert_eq!(a.region(id).unwrap().size, 4);
    }

    #[test]
    fn map_straddling_end_is_null() {
        let mut a = UserArena::new(64);
        assert_eq!(a.map(ARENA_BASE + 62, 4), 0);
        assert_eq!(a.map(ARENA_BASE + 64, 1), 0);
        assert_eq!(a.map(ARENA_BASE, 0), 0);
    }

    #[test]
    fn overlapping_pins_rejected_exhaustively() {
        // Oracle: brute-force interval intersection over a small arena.
        for (a_off, a_len) in (0..16u64).flat_map(|o| (1..=8u64).map(move |l| (o, l))) {
            for (b_off, b_len) in (0..16u64).flat_map(|o| (1..=8u64).map(move |l| (o, l))) {
                let mut arena = UserArena::new(64);
                assert_ne!(arena.map(ARENA_BASE + a_off, a_len), 0);
                let second = arena.map(ARENA_BASE + b_off, b_len);
                let intersects = b_off < a_off + a_len && a_off < b_off + b_len;
                assert_eq!(
                    second == 0,
                    intersects,
                    "a=({a_off},{a_len}) b=({b_off},{b_len})"
                );
            }
        }
    }

    #[test]
    fn unmap_frees_the_range() {
        let mut a = UserArena::new(64);
        let h = a.map(ARENA_BASE, 8);
        let (id, _) = decode_region_handle(h).unwrap();
        assert!(a.unmap(id));
        assert!(!a.unmap(id));
        assert_ne!(a.map(ARENA_BASE, 8), 0);
    }

    #[test]
    fn cstr_reading() {
        let mut a = UserArena::new(64);
        a.write(ARENA_BASE, b"hello\0junk").unwrap();
        assert_eq!(a.read_cstr(ARENA_BASE, 32).unwrap(), b"hello");
        // Unterminated within bounds.
        let mut b = UserArena::new(8);
        b.write(ARENA_BASE, b"xxxxxxxx").unwrap();
        assert!(b.read_cstr(ARENA_BASE, 32).is_none());
    }
}
