//! Partitioned device memory.
//!
//! The whole simulated device is reserved up front and carved into
//! power-of-two, size-aligned partitions by a buddy allocator, one partition
//! per application. Size alignment is what makes bitwise fencing sound:
//! every partition satisfies `(base AND (size-1)) == 0`. Within a partition,
//! a first-fit free list hands out 256-byte-aligned allocations.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

/// Server-assigned client identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AppId(pub u64);

impl std::fmt::Display for AppId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "app{}", self.0)
    }
}

/// Smallest partition handed out; keeps masks clear of the sub-allocator's
/// 256-byte alignment.
pub const MIN_PARTITION: u64 = 4096;

/// Sub-allocation granule and alignment.
pub const ALLOC_ALIGN: u64 = 256;

pub const DEFAULT_DEVICE_BASE: u64 = 0x7fa2_c000_0000;
pub const DEFAULT_DEVICE_SIZE: u64 = 256 * 1024 * 1024;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AllocError {
    #[error("device out of memory: no free block for {requested} bytes")]
    DeviceOom { requested: u64 },
    #[error("{app} already has a partition")]
    DuplicateApp { app: AppId },
    #[error("{app} has no partition")]
    UnknownApp { app: AppId },
    #[error("partition out of memory: no free extent for {requested} bytes")]
    PartitionOom { requested: u64 },
    #[error("no allocation starts at {addr:#x}")]
    UnknownAlloc { addr: u64 },
    #[error("allocation size must be at least one byte")]
    InvalidSize,
    #[error("bad device geometry: {reason}")]
    BadDeviceGeometry { reason: String },
}

/// Result of validating a transfer range against a partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RangeCheck {
    InBounds,
    Violation,
}

impl RangeCheck {
    pub fn is_ok(&self) -> bool {
        matches!(self, RangeCheck::InBounds)
    }
}

/// One application's contiguous device region and its sub-allocation state.
#[derive(Debug, Clone)]
pub struct PartitionRecord {
    pub app_id: AppId,
    pub base: u64,
    pub size: u64,
    pub mask: u64,
    /// Free extents as partition-relative (offset -> length), coalesced.
    free_list: BTreeMap<u64, u64>,
    /// Live allocations (device address -> length, in granules).
    live_allocs: BTreeMap<u64, u64>,
}

impl PartitionRecord {
    fn new(app_id: AppId, base: u64, size: u64) -> Self {
        let mut free_list = BTreeMap::new();
        free_list.insert(0, size);
        PartitionRecord {
            app_id,
            base,
            size,
            mask: size - 1,
            free_list,
            live_allocs: BTreeMap::new(),
        }
    }

    pub fn end(&self) -> u64 {
        self.base + self.size
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.base && addr < self.end()
    }

    pub fn live_allocations(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.live_allocs.iter().map(|(a, l)| (*a, *l))
    }

    pub fn free_extents(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.free_list.iter().map(|(o, l)| (*o, *l))
    }

    fn malloc(&mut self, size: u64) -> Result<u64, AllocError> {
        if size == 0 {
            return Err(AllocError::InvalidSize);
        }
        let rounded = size.div_ceil(ALLOC_ALIGN) * ALLOC_ALIGN;
        // First fit, lowest offset.
        let slot = self
            .free_list
            .iter()
            .find(|(_, len)| **len >= rounded)
            .map(|(off, len)| (*off, *len));
        let Some((off, len)) = slot else {
            return Err(AllocError::PartitionOom { requested: size });
        };
        self.free_list.remove(&off);
        if len > rounded {
            self.free_list.insert(off + rounded, len - rounded);
        }
        let addr = self.base + off;
        self.live_allocs.insert(addr, rounded);
        Ok(addr)
    }

    fn free(&mut self, addr: u64) -> Result<(), AllocError> {
        let Some(len) = self.live_allocs.remove(&addr) else {
            return Err(AllocError::UnknownAlloc { addr });
        };
        let mut off = addr - self.base;
        let mut len = len;
        // Coalesce with the following extent.
        if let Some(next_len) = self.free_list.remove(&(off + len)) {
            len += next_len;
        }
        // Coalesce with the preceding extent.
        if let Some((&prev_off, &prev_len)) = self.free_list.range(..off).next_back() {
            if prev_off + prev_len == off {
                self.free_list.remove(&prev_off);
                off = prev_off;
                len += prev_len;
            }
        }
        self.free_list.insert(off, len);
        Ok(())
    }

    /// `[addr, addr+len)` must sit inside the partition; zero-length ranges
    /// are accepted anywhere in `[base, base+size]`.
    pub fn check_range(&self, addr: u64, len: u64) -> RangeCheck {
        let end = self.base + self.size;
        let ok = if len == 0 {
            addr >= self.base && addr <= end
        } else {
            match addr.checked_add(len) {
                Some(range_end) => addr >= self.base && range_end <= end,
                None => false,
            }
        };
        if ok {
            RangeCheck::InBounds
        } else {
            RangeCheck::Violation
        }
    }

    fn assert_invariants(&self) {
        assert!(self.size.is_power_of_two());
        assert_eq!(
            self.base & self.mask,
            0,
            "partition base must be size-aligned"
        );
        assert_eq!(self.mask, self.size - 1);
        // Free extents and live allocations tile [0, size) exactly.
        let mut marks: Vec<(u64, u64, bool)> = self
            .free_list
            .iter()
            .map(|(o, l)| (*o, *l, true))
            .chain(
                self.live_allocs
                    .iter()
                    .map(|(a, l)| (a - self.base, *l, false)),
            )
            .collect();
        marks.sort_unstable();
        let mut cursor = 0u64;
        let mut prev_free = false;
        for (off, len, is_free) in marks {
            assert_eq!(off, cursor, "gap or overlap in partition tiling");
            assert!(len > 0);
            assert!(!(prev_free && is_free), "free list not coalesced");
            if !is_free {
                assert_eq!(
                    (self.base + off) % ALLOC_ALIGN,
                    0,
                    "allocation not 256-byte aligned"
                );
            }
            cursor = off + len;
            prev_free = is_free;
        }
        assert_eq!(cursor, self.size, "tiling does not cover the partition");
    }
}

/// The manager's per-application record of every partition, plus the buddy
/// state for the unassigned remainder of the device.
#[derive(Debug, Clone)]
pub struct PartitionBoundsTable {
    device_base: u64,
    device_size: u64,
    records: BTreeMap<AppId, PartitionRecord>,
    /// Free blocks per order, as device-relative offsets.
    free_blocks: Vec<BTreeSet<u64>>,
    min_order: u32,
}

impl PartitionBoundsTable {
    pub fn new(device_base: u64, device_size: u64) -> Result<Self, AllocError> {
        if !device_size.is_power_of_two() || device_size < MIN_PARTITION {
            return Err(AllocError::BadDeviceGeometry {
                reason: format!(
                    "device size {device_size:#x} must be a power of two >= {MIN_PARTITION:#x}"
                ),
            });
        }
        if !device_base.is_multiple_of(device_size) {
            return Err(AllocError::BadDeviceGeometry {
                reason: format!("device base {device_base:#x} must be aligned to its size"),
            });
        }
        if device_base.checked_add(device_size).is_none() {
            return Err(AllocError::BadDeviceGeometry {
                reason: "device end overflows the address space".into(),
            });
        }
        let min_order = MIN_PARTITION.trailing_zeros();
        let max_order = device_size.trailing_zeros();
        let mut free_blocks = vec![BTreeSet::new(); (max_order - min_order + 1) as usize];
        free_blocks
            .last_mut()
            .expect("at least one order")
            .insert(0);
        Ok(PartitionBoundsTable {
            device_base,
            device_size,
            records: BTreeMap::new(),
            free_blocks,
            min_order,
        })
    }

    pub fn device_base(&self) -> u64 {
        self.device_base
    }

    pub fn device_size(&self) -> u64 {
        self.device_size
    }

    pub fn record(&self, app: AppId) -> Option<&PartitionRecord> {
        self.records.get(&app)
    }

    pub fn records(&self) -> impl Iterator<Item = &PartitionRecord> {
        self.records.values()
    }

    pub fn partition_count(&self) -> usize {
        self.records.len()
    }

    /// Rounds the request up to a power of two (at least [`MIN_PARTITION`])
    /// and places it by buddy allocation, which guarantees size alignment.
    pub fn create_partition(
        &mut self,
        app: AppId,
        requested_bytes: u64,
    ) -> Result<&PartitionRecord, AllocError> {
        if requested_bytes == 0 {
            return Err(AllocError::InvalidSize);
        }
        if self.records.contains_key(&app) {
            return Err(AllocError::DuplicateApp { app });
        }
        let size = requested_bytes.max(MIN_PARTITION).next_power_of_two();
        if size > self.device_size {
            return Err(AllocError::DeviceOom {
                requested: requested_bytes,
            });
        }
        let order = size.trailing_zeros() - self.min_order;
        let offset = self.buddy_alloc(order).ok_or(AllocError::DeviceOom {
            requested: requested_bytes,
        })?;
        let record = PartitionRecord::new(app, self.device_base + offset, size);
        self.records.insert(app, record);
        debug_assert!(self.invariants_hold());
        Ok(self.records.get(&app).expect("just inserted"))
    }

    pub fn destroy_partition(&mut self, app: AppId) -> Result<(), AllocError> {
        let record = self
            .records
            .remove(&app)
            .ok_or(AllocError::UnknownApp { app })?;
        let order = record.size.trailing_zeros() - self.min_order;
        self.buddy_free(record.base - self.device_base, order);
        debug_assert!(self.invariants_hold());
        Ok(())
    }

    pub fn device_malloc(&mut self, app: AppId, size: u64) -> Result<u64, AllocError> {
        let record = self
            .records
            .get_mut(&app)
            .ok_or(AllocError::UnknownApp { app })?;
        let addr = record.malloc(size)?;
        debug_assert!(self.invariants_hold());
        Ok(addr)
    }

    pub fn device_free(&mut self, app: AppId, addr: u64) -> Result<(), AllocError> {
        let record = self
            .records
            .get_mut(&app)
            .ok_or(AllocError::UnknownApp { app })?;
        record.free(addr)?;
        debug_assert!(self.invariants_hold());
        Ok(())
    }

    pub fn check_range(&self, app: AppId, addr: u64, len: u64) -> Result<RangeCheck, AllocError> {
        let record = self
            .records
            .get(&app)
            .ok_or(AllocError::UnknownApp { app })?;
        Ok(record.check_range(addr, len))
    }

    fn buddy_alloc(&mut self, order: u32) -> Option<u64> {
        // Smallest adequate order, lowest offset within it.
        let mut found = None;
        for k in order..self.free_blocks.len() as u32 {
            if let Some(&off) = self.free_blocks[k as usize].iter().next() {
                found = Some((k, off));
                break;
            }
        }
        let (mut k, off) = found?;
        self.free_blocks[k as usize].remove(&off);
        while k > order {
            k -= 1;
            let half = 1u64 << (k + self.min_order);
            // Keep the low half, release the high half.
            self.free_blocks[k as usize].insert(off + half);
        }
        Some(off)
    }

    fn buddy_free(&mut self, mut offset: u64, mut order: u32) {
        loop {
            if order as usize + 1 >= self.free_blocks.len() {
                break;
            }
            let size = 1u64 << (order + self.min_order);
            let buddy = offset ^ size;
            if !self.free_blocks[order as usize].remove(&buddy) {
                break;
            }
            offset = offset.min(buddy);
            order += 1;
        }
        self.free_blocks[order as usize].insert(offset);
    }

    /// Full structural check: per-partition tiling, pairwise disjointness,
    /// and agreement between buddy free blocks and partition placement.
    pub fn invariants_hold(&self) -> bool {
        for r in self.records.values() {
            r.assert_invariants();
            assert!(r.base >= self.device_base);
            assert!(r.end() <= self.device_base + self.device_size);
        }
        // Disjointness: partitions and free buddy blocks tile the device
        // without overlap.
        let mut spans: Vec<(u64, u64)> = self
            .records
            .values()
            .map(|r| (r.base - self.device_base, r.size))
            .collect();
        for (k, blocks) in self.free_blocks.iter().enumerate() {
            let size = 1u64 << (k as u32 + self.min_order);
            for &off in blocks {
                assert_eq!(off % size, 0, "buddy block misaligned");
                spans.push((off, size));
            }
        }
        spans.sort_unstable();
        let mut cursor = 0u64;
        for (off, len) in spans {
            assert_eq!(off, cursor, "device tiling has a gap or overlap");
            cursor = off + len;
        }
        assert_eq!(cursor, self.device_size);
        true
    }
}
