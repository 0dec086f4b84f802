//! Simulated byte-addressable persistent memory.
//!
//! The arena keeps two byte images: the volatile `shadow` that loads and
//! stores operate on, and the `persistent` image that survives a crash.
//! Stores mark 8-byte words dirty; `flush_line` copies a cache line's dirty
//! words to the persistent image. A crash keeps the persistent image and lets
//! an adversary choose which still-dirty words made it out of the cache.
//!
//! Two adversaries are available through [`PersistOrder`]. `Unordered`
//! persists any subset of dirty words. `LineOrdered` persists, per cache
//! line, any program-order prefix of the stores issued since that line was
//! last flushed, which is what a write-back of a whole line under TSO can
//! expose.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::PmError;

pub const WORD: u64 = 8;

thread_local! {
    static THREAD_FLUSHES: Cell<u64> = const { Cell::new(0) };
}

/// Number of `flush_line` calls issued by the current thread, across all arenas.
pub fn thread_flush_count() -> u64 {
    THREAD_FLUSHES.with(|c| c.get())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PersistOrder {
    Unordered,
    LineOrdered,
}

#[derive(Clone, Debug)]
pub struct ArenaConfig {
    pub capacity: u64,
    pub line_size: u64,
    pub flush_latency_ns: u64,
    pub persist_order: PersistOrder,
    pub max_enum_dirty: usize,
    pub record_events: bool,
}

impl Default for ArenaConfig {
    fn default() -> Self {
        Self {
            capacity: 1 << 20,
            line_size: 64,
            flush_latency_ns: 300,
            persist_order: PersistOrder::Unordered,
            max_enum_dirty: 20,
            record_events: false,
        }
    }
}

impl ArenaConfig {
    pub fn with_capacity(capacity: u64) -> Self {
        Self {
            capacity,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), PmError> {
        if self.line_size < WORD || !self.line_size.is_power_of_two() {
            return Err(PmError::Config(format!(
                "line size {} must be a power of two >= 8",
                self.line_size
            )));
        }
        if self.capacity == 0 || !self.capacity.is_multiple_of(self.line_size) {
            return Err(PmError::Config(format!(
                "capacity {} must be a non-zero multiple of the line size {}",
                self.capacity, self.line_size
            )));
        }
        Ok(())
    }
}

/// A region handed out by [`PmArena::alloc`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Handle {
    pub offset: u64,
    pub size: u64,
}

impl Handle {
    fn check(&self, off: u64, len: u64) -> Result<u64, PmError> {
        match off.checked_add(len) {
            Some(end) if end <= self.size => Ok(self.offset + off),
            _ => Err(PmError::OutOfRange {
                offset: off,
                len,
                size: self.size,
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Event {
    /// An 8-byte word store; `addr` is word aligned.
    Store { addr: u64, value: u64 },
    Flush { line: u64 },
    Fence,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stats {
    pub flush_count: u64,
    pub fence_count: u64,
    pub bytes_flushed: u64,
    pub virtual_clock_ns: u64,
    pub shift_count: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrashPolicy {
    AllDropped,
    AllPersisted,
    Random(u64),
    Enumerate,
}

/// One survivable durable state.
#[derive(Clone, Debug)]
pub struct CrashImage {
    pub bytes: Vec<u8>,
    /// Word addresses whose shadow value was chosen to persist.
    pub persisted: Vec<u64>,
    pub alloc_cursor: u64,
}

/// Everything a crash at one instant can depend on: the durable image and
/// the stores still sitting in the cache.
#[derive(Clone, Debug)]
pub struct CrashPoint {
    /// Index of the event after which this point was taken (`None` before any).
    pub after_event: Option<usize>,
    persistent: Vec<u8>,
    pending: BTreeMap<u64, Vec<(u64, u64)>>,
    alloc_cursor: u64,
    order: PersistOrder,
    max_enum_dirty: usize,
}

impl CrashPoint {
    pub fn dirty_words(&self) -> Vec<u64> {
        let mut words: Vec<u64> = self
            .pending
            .values()
            .flat_map(|stores| stores.iter().map(|&(addr, _)| addr))
            .collect();
        words.sort_unstable();
        words.dedup();
        words
    }

    pub fn order(&self) -> PersistOrder {
        self.order
    }

    fn apply(bytes: &mut [u8], addr: u64, value: u64) {
        let a = addr as usize;
        bytes[a..a + 8].copy_from_slice(&value.to_le_bytes());
    }

    fn latest(&self) -> BTreeMap<u64, u64> {
        let mut last = BTreeMap::new();
        for stores in self.pending.values() {
            for &(addr, value) in stores {
                last.insert(addr, value);
            }
        }
        last
    }

    fn image_from_words(&self, chosen: &[(u64, u64)]) -> CrashImage {
        let mut bytes = self.persistent.clone();
        let mut persisted = Vec::with_capacity(chosen.len());
        for &(addr, value) in chosen {
            Self::apply(&mut bytes, addr, value);
            persisted.push(addr);
        }
        persisted.sort_unstable();
        persisted.dedup();
        CrashImage {
            bytes,
            persisted,
            alloc_cursor: self.alloc_cursor,
        }
    }

    /// Per line, the stores of a chosen prefix length.
    fn image_from_prefixes(&self, prefixes: &[usize]) -> CrashImage {
        let mut chosen = Vec::new();
        for (stores, &len) in self.pending.values().zip(prefixes) {
            chosen.extend_from_slice(&stores[..len]);
        }
        self.image_from_words(&chosen)
    }

    pub fn images(&self, policy: CrashPolicy) -> Result<Vec<CrashImage>, PmError> {
        match policy {
            CrashPolicy::AllDropped => Ok(vec![self.image_from_words(&[])]),
            CrashPolicy::AllPersisted => {
                let all: Vec<(u64, u64)> = self.latest().into_iter().collect();
                Ok(vec![self.image_from_words(&all)])
            }
            CrashPolicy::Random(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let image = match self.order {
                    PersistOrder::Unordered => {
                        let chosen: Vec<(u64, u64)> = self
                            .latest()
                            .into_iter()
                            .filter(|_| rng.random_bool(0.5))
                            .collect();
                        self.image_from_words(&chosen)
                    }
                    PersistOrder::LineOrdered => {
                        let prefixes: Vec<usize> = self
                            .pending
                            .values()
                            .map(|s| rng.random_range(0..=s.len()))
                            .collect();
                        self.image_from_prefixes(&prefixes)
                    }
                };
                Ok(vec![image])
            }
            CrashPolicy::Enumerate => {
                let dirty = self.dirty_words().len();
                if dirty > self.max_enum_dirty {
                    return Err(PmError::EnumerationExplosion {
                        dirty,
                        max: self.max_enum_dirty,
                    });
                }
                match self.order {
                    PersistOrder::Unordered => {
                        let words: Vec<(u64, u64)> = self.latest().into_iter().collect();
                        let mut out = Vec::with_capacity(1 << words.len());
                        for mask in 0u64..(1u64 << words.len()) {
                            let chosen: Vec<(u64, u64)> = words
                                .iter()
                                .enumerate()
                                .filter(|(i, _)| mask & (1 << i) != 0)
                                .map(|(_, w)| *w)
                                .collect();
                            out.push(self.image_from_words(&chosen));
                        }
                        Ok(out)
                    }
                    PersistOrder::LineOrdered => {
                        let lens: Vec<usize> = self.pending.values().map(Vec::len).collect();
                        let mut prefixes = vec![0usize; lens.len()];
                        let mut out = Vec::new();
                        loop {
                            out.push(self.image_from_prefixes(&prefixes));
                            // odometer over prefix lengths
                            let mut i = 0;
                            loop {
                                if i == lens.len() {
                                    return Ok(out);
                                }
                                if prefixes[i] < lens[i] {
                                    prefixes[i] += 1;
                                    break;
                                }
                                prefixes[i] = 0;
                                i += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Inner {
    shadow: Vec<u8>,
    persistent: Vec<u8>,
    /// line index -> stores since the last flush of that line, in program order
    pending: BTreeMap<u64, Vec<(u64, u64)>>,
    cursor: u64,
    events: Vec<Event>,
    record_events: bool,
    capture: Option<Vec<CrashPoint>>,
}

/// Simulated persistent memory. All mutation is serialized behind one lock;
/// counters are atomics so `stats()` never blocks.
pub struct PmArena {
    config: ArenaConfig,
    inner: Mutex<Inner>,
    flush_count: AtomicU64,
    fence_count: AtomicU64,
    bytes_flushed: AtomicU64,
    clock: AtomicU64,
    shifts: AtomicU64,
}

impl std::fmt::Debug for PmArena {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PmArena")
            .field("config", &self.config)
            .field("stats", &self.stats())
            .finish()
    }
}

impl PmArena {
    pub fn new(config: ArenaConfig) -> Result<Self, PmError> {
        config.validate()?;
        let cap = config.capacity as usize;
        Ok(Self::build(config, vec![0; cap], vec![0; cap], 0))
    }

    /// Rebuild an arena whose shadow and durable images both equal `bytes`,
    /// e.g. a crash image being reopened. The image is zero-padded up to the
    /// configured capacity.
    pub fn from_image(
        mut config: ArenaConfig,
        bytes: &[u8],
        alloc_cursor: u64,
    ) -> Result<Self, PmError> {
        let line = config.line_size.max(WORD);
        let need = (bytes.len() as u64).div_ceil(line) * line;
        config.capacity = config.capacity.max(need);
        config.validate()?;
        let mut image = vec![0u8; config.capacity as usize];
        image[..bytes.len()].copy_from_slice(bytes);
        let cursor = alloc_cursor.min(config.capacity);
        Ok(Self::build(config, image.clone(), image, cursor))
    }

    pub fn from_crash_image(config: ArenaConfig, image: &CrashImage) -> Result<Self, PmError> {
        Self::from_image(config, &image.bytes, image.alloc_cursor)
    }

    fn build(config: ArenaConfig, shadow: Vec<u8>, persistent: Vec<u8>, cursor: u64) -> Self {
        let record_events = config.record_events;
        Self {
            config,
            inner: Mutex::new(Inner {
                shadow,
                persistent,
                pending: BTreeMap::new(),
                cursor,
                events: Vec::new(),
                record_events,
                capture: None,
            }),
            flush_count: AtomicU64::new(0),
            fence_count: AtomicU64::new(0),
            bytes_flushed: AtomicU64::new(0),
            clock: AtomicU64::new(0),
            shifts: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> &ArenaConfig {
        &self.config
    }

    pub fn capacity(&self) -> u64 {
        self.config.capacity
    }

    pub fn line_size(&self) -> u64 {
        self.config.line_size
    }

    pub fn alloc_cursor(&self) -> u64 {
        self.inner.lock().cursor
    }

    /// Bump allocation. The returned bytes are zero in both images.
    pub fn alloc(&self, size: u64, align: u64) -> Result<Handle, PmError> {
        if size == 0 {
            return Err(PmError::Config("allocation size must be positive".into()));
        }
        if align == 0 || !align.is_power_of_two() {
            return Err(PmError::Config(format!("alignment {align} is not a power of two")));
        }
        let mut inner = self.inner.lock();
        let start = inner.cursor.div_ceil(align) * align;
        let end = start.checked_add(size).filter(|&e| e <= self.config.capacity);
        let Some(end) = end else {
            return Err(PmError::OutOfSpace {
                requested: size,
                cursor: inner.cursor,
                capacity: self.config.capacity,
            });
        };
        let (s, e) = (start as usize, end as usize);
        inner.shadow[s..e].fill(0);
        inner.persistent[s..e].fill(0);
        // a reopened image may carry stale pending stores only if the caller
        // allocated over them; drop any that fall in the fresh region
        let line = self.config.line_size;
        for l in (start / line)..end.div_ceil(line) {
            if let Some(stores) = inner.pending.get_mut(&l) {
                stores.retain(|&(a, _)| a < start || a >= end);
                if stores.is_empty() {
                    inner.pending.remove(&l);
                }
            }
        }
        inner.cursor = end;
        Ok(Handle {
            offset: start,
            size,
        })
    }

    fn check_abs(&self, addr: u64, len: u64) -> Result<(), PmError> {
        match addr.checked_add(len) {
            Some(end) if end <= self.config.capacity => Ok(()),
            _ => Err(PmError::OutOfRange {
                offset: addr,
                len,
                size: self.config.capacity,
            }),
        }
    }

    pub fn write(&self, h: &Handle, off: u64, data: &[u8]) -> Result<(), PmError> {
        let addr = h.check(off, data.len() as u64)?;
        self.write_abs(addr, data)
    }

    pub fn write_atomic8(&self, h: &Handle, off: u64, word: u64) -> Result<(), PmError> {
        if !off.is_multiple_of(WORD) {
            return Err(PmError::Misaligned(off));
        }
        let addr = h.check(off, WORD)?;
        self.store(addr, word)
    }

    pub fn read(&self, h: &Handle, off: u64, buf: &mut [u8]) -> Result<(), PmError> {
        let addr = h.check(off, buf.len() as u64)?;
        self.read_abs(addr, buf)
    }

    pub fn flush_line(&self, h: &Handle, off: u64) -> Result<(), PmError> {
        let addr = h.check(off, 1)?;
        self.flush(addr)
    }

    /// Byte store at an absolute address; every touched word is marked dirty.
    pub fn write_abs(&self, addr: u64, data: &[u8]) -> Result<(), PmError> {
        self.check_abs(addr, data.len() as u64)?;
        if data.is_empty() {
            return Ok(());
        }
        let mut inner = self.inner.lock();
        let a = addr as usize;
        inner.shadow[a..a + data.len()].copy_from_slice(data);
        let first = addr / WORD * WORD;
        let last = (addr + data.len() as u64 - 1) / WORD * WORD;
        let mut w = first;
        while w <= last {
            let value = read_word(&inner.shadow, w);
            self.push_store(&mut inner, w, value);
            w += WORD;
        }
        Ok(())
    }

    /// 8-byte atomic store at an absolute, aligned address.
    pub fn store(&self, addr: u64, value: u64) -> Result<(), PmError> {
        if !addr.is_multiple_of(WORD) {
            return Err(PmError::Misaligned(addr));
        }
        self.check_abs(addr, WORD)?;
        let mut inner = self.inner.lock();
        let a = addr as usize;
        inner.shadow[a..a + 8].copy_from_slice(&value.to_le_bytes());
        self.push_store(&mut inner, addr, value);
        Ok(())
    }

    fn push_store(&self, inner: &mut Inner, addr: u64, value: u64) {
        let line = addr / self.config.line_size;
        inner.pending.entry(line).or_default().push((addr, value));
        self.record(inner, Event::Store { addr, value });
    }

    fn record(&self, inner: &mut Inner, event: Event) {
        if inner.record_events {
            inner.events.push(event);
        }
        if inner.capture.is_some() && !matches!(event, Event::Fence) {
            let point = self.point_of(inner, Some(inner.events.len().saturating_sub(1)));
            if let Some(points) = inner.capture.as_mut() {
                points.push(point);
            }
        }
    }

    fn point_of(&self, inner: &Inner, after_event: Option<usize>) -> CrashPoint {
        CrashPoint {
            after_event,
            persistent: inner.persistent.clone(),
            pending: inner.pending.clone(),
            alloc_cursor: inner.cursor,
            order: self.config.persist_order,
            max_enum_dirty: self.config.max_enum_dirty,
        }
    }

    pub fn load(&self, addr: u64) -> Result<u64, PmError> {
        if !addr.is_multiple_of(WORD) {
            return Err(PmError::Misaligned(addr));
        }
        self.check_abs(addr, WORD)?;
        Ok(read_word(&self.inner.lock().shadow, addr))
    }

    pub fn read_abs(&self, addr: u64, buf: &mut [u8]) -> Result<(), PmError> {
        self.check_abs(addr, buf.len() as u64)?;
        let inner = self.inner.lock();
        let a = addr as usize;
        buf.copy_from_slice(&inner.shadow[a..a + buf.len()]);
        Ok(())
    }

    /// Run `f` over a read-only view of `len` shadow bytes at `addr`.
    pub fn with_bytes<R>(&self, addr: u64, len: u64, f: impl FnOnce(&[u8]) -> R) -> Result<R, PmError> {
        self.check_abs(addr, len)?;
        let inner = self.inner.lock();
        let a = addr as usize;
        Ok(f(&inner.shadow[a..a + len as usize]))
    }

    /// Write back the cache line containing `addr`. Counts even when clean.
    pub fn flush(&self, addr: u64) -> Result<(), PmError> {
        self.check_abs(addr, 1)?;
        let line_size = self.config.line_size;
        let line = addr / line_size;
        let mut inner = self.inner.lock();
        if let Some(stores) = inner.pending.remove(&line) {
            let mut words: Vec<u64> = stores.iter().map(|&(a, _)| a).collect();
            words.sort_unstable();
            words.dedup();
            for w in words {
                let a = w as usize;
                let bytes: [u8; 8] = inner.shadow[a..a + 8].try_into().unwrap();
                inner.persistent[a..a + 8].copy_from_slice(&bytes);
            }
        }
        self.flush_count.fetch_add(1, Ordering::Relaxed);
        self.bytes_flushed.fetch_add(line_size, Ordering::Relaxed);
        self.clock
            .fetch_add(self.config.flush_latency_ns, Ordering::Relaxed);
        THREAD_FLUSHES.with(|c| c.set(c.get() + 1));
        self.record(&mut inner, Event::Flush { line });
        Ok(())
    }

    pub fn fence(&self) {
        let mut inner = self.inner.lock();
        self.fence_count.fetch_add(1, Ordering::Relaxed);
        self.record(&mut inner, Event::Fence);
    }

    /// `flush` followed by `fence`.
    pub fn persist(&self, addr: u64) -> Result<(), PmError> {
        self.flush(addr)?;
        self.fence();
        Ok(())
    }

    /// Compare-and-set on a word with volatile semantics: both images change
    /// together, no dirty mark and no persistence event. Used for lock words.
    pub fn cas_volatile(&self, addr: u64, expected: u64, new: u64) -> Result<bool, PmError> {
        if !addr.is_multiple_of(WORD) {
            return Err(PmError::Misaligned(addr));
        }
        self.check_abs(addr, WORD)?;
        let mut inner = self.inner.lock();
        if read_word(&inner.shadow, addr) != expected {
            return Ok(false);
        }
        let a = addr as usize;
        inner.shadow[a..a + 8].copy_from_slice(&new.to_le_bytes());
        inner.persistent[a..a + 8].copy_from_slice(&new.to_le_bytes());
        Ok(true)
    }

    pub fn set_volatile(&self, addr: u64, value: u64) -> Result<(), PmError> {
        if !addr.is_multiple_of(WORD) {
            return Err(PmError::Misaligned(addr));
        }
        self.check_abs(addr, WORD)?;
        let mut inner = self.inner.lock();
        if inner
            .pending
            .get(&(addr / self.config.line_size))
            .is_some_and(|s| s.iter().any(|&(a, _)| a == addr))
        {
            // a pending durable store to the same word would be resurrected
            // by a later flush; keep it but make it agree with the new value
            let line = addr / self.config.line_size;
            for s in inner.pending.get_mut(&line).unwrap().iter_mut() {
                if s.0 == addr {
                    s.1 = value;
                }
            }
        }
        let a = addr as usize;
        inner.shadow[a..a + 8].copy_from_slice(&value.to_le_bytes());
        inner.persistent[a..a + 8].copy_from_slice(&value.to_le_bytes());
        Ok(())
    }

    pub fn count_shifts(&self, n: u64) {
        if n > 0 {
            self.shifts.fetch_add(n, Ordering::Relaxed);
        }
    }

    pub fn advance_clock(&self, ns: u64) {
        self.clock.fetch_add(ns, Ordering::Relaxed);
    }

    pub fn stats(&self) -> Stats {
        Stats {
            flush_count: self.flush_count.load(Ordering::Relaxed),
            fence_count: self.fence_count.load(Ordering::Relaxed),
            bytes_flushed: self.bytes_flushed.load(Ordering::Relaxed),
            virtual_clock_ns: self.clock.load(Ordering::Relaxed),
            shift_count: self.shifts.load(Ordering::Relaxed),
        }
    }

    pub fn dirty_words(&self) -> Vec<u64> {
        self.crash_point().dirty_words()
    }

    pub fn shadow_snapshot(&self) -> Vec<u8> {
        self.inner.lock().shadow.clone()
    }

    pub fn persistent_snapshot(&self) -> Vec<u8> {
        self.inner.lock().persistent.clone()
    }

    pub fn set_record_events(&self, on: bool) {
        self.inner.lock().record_events = on;
    }

    pub fn events(&self) -> Vec<Event> {
        self.inner.lock().events.clone()
    }

    pub fn take_events(&self) -> Vec<Event> {
        std::mem::take(&mut self.inner.lock().events)
    }

    pub fn crash_point(&self) -> CrashPoint {
        let inner = self.inner.lock();
        self.point_of(&inner, inner.events.len().checked_sub(1))
    }

    pub fn crash(&self, policy: CrashPolicy) -> Result<Vec<CrashImage>, PmError> {
        self.crash_point().images(policy)
    }

    /// Start recording a [`CrashPoint`] after every store and flush. The
    /// current state is recorded as the first point.
    pub fn begin_capture(&self) {
        let mut inner = self.inner.lock();
        let first = self.point_of(&inner, None);
        inner.capture = Some(vec![first]);
    }

    pub fn end_capture(&self) -> Vec<CrashPoint> {
        self.inner.lock().capture.take().unwrap_or_default()
    }
}

fn read_word(bytes: &[u8], addr: u64) -> u64 {
    let a = addr as usize;
    u64::from_le_bytes(bytes[a..a + 8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arena() -> PmArena {
        PmArena::new(ArenaConfig::with_capacity(1 << 16)).unwrap()
    }

    fn word_at(bytes: &[u8], addr: u64) -> u64 {
        read_word(bytes, addr)
    }

    #[test]
    fn alloc_is_aligned_zeroed_and_disjoint() {
        let a = arena();
        a.alloc(8, 8).unwrap();
        let h = a.alloc(4096, 64).unwrap();
        assert_eq!(h.offset % 64, 0);
        let mut buf = vec![1u8; 4096];
        a.read(&h, 0, &mut buf).unwrap();
        assert!(buf.iter().all(|&b| b == 0));
        assert!(a.persistent_snapshot()[h.offset as usize..][..4096]
            .iter()
            .all(|&b| b == 0));

        let x = a.alloc(64, 64).unwrap();
        let y = a.alloc(64, 64).unwrap();
        assert!(x.offset + x.size <= y.offset || y.offset + y.size <= x.offset);
    }

    #[test]
    fn alloc_out_of_space() {
        let a = arena();
        assert!(matches!(
            a.alloc(a.capacity() + 1, 64),
            Err(PmError::OutOfSpace { .. })
        ));
    }

    #[test]
    fn write_marks_words_dirty_and_leaves_durable_image() {
        let a = arena();
        let h = a.alloc(64, 64).unwrap();
        let before = a.persistent_snapshot();
        a.write(&h, 0, &[7u8; 16]).unwrap();
        assert_eq!(a.dirty_words().len(), 2);
        let mut buf = [0u8; 16];
        a.read(&h, 0, &mut buf).unwrap();
        assert_eq!(buf, [7u8; 16]);
        let img = a.crash(CrashPolicy::AllDropped).unwrap().remove(0);
        assert_eq!(img.bytes, before);
        assert!(matches!(
            a.write(&h, 60, &[0u8; 8]),
            Err(PmError::OutOfRange { .. })
        ));
    }

    #[test]
    fn atomic_write_is_old_or_new_never_torn() {
        let a = arena();
        let h = a.alloc(64, 64).unwrap();
        a.write_atomic8(&h, 8, 0x1111_1111_1111_1111).unwrap();
        a.flush_line(&h, 0).unwrap();
        a.write_atomic8(&h, 8, 0x2222_2222_2222_2222).unwrap();
        let images = a.crash(CrashPolicy::Enumerate).unwrap();
        assert_eq!(images.len(), 2);
        let seen: Vec<u64> = images
            .iter()
            .map(|i| word_at(&i.bytes, h.offset + 8))
            .collect();
        assert!(seen.contains(&0x1111_1111_1111_1111));
        assert!(seen.contains(&0x2222_2222_2222_2222));
        assert_eq!(a.write_atomic8(&h, 4, 1), Err(PmError::Misaligned(4)));

        a.flush_line(&h, 0).unwrap();
        a.fence();
        for img in a.crash(CrashPolicy::Enumerate).unwrap() {
            assert_eq!(word_at(&img.bytes, h.offset + 8), 0x2222_2222_2222_2222);
        }
    }

    #[test]
    fn flush_counts_and_clock() {
        let a = arena();
        let h = a.alloc(128, 64).unwrap();
        for off in [0, 8, 16] {
            a.write_atomic8(&h, off, 5).unwrap();
        }
        a.flush_line(&h, 0).unwrap();
        assert!(a.dirty_words().is_empty());
        let s = a.stats();
        assert_eq!((s.flush_count, s.bytes_flushed, s.virtual_clock_ns), (1, 64, 300));
        // clean line still counts
        a.flush_line(&h, 64).unwrap();
        assert_eq!(a.stats().flush_count, 2);
        for _ in 0..3 {
            a.flush_line(&h, 64).unwrap();
        }
        assert_eq!(a.stats().bytes_flushed, 320);
        assert!(a.flush_line(&h, 128).is_err());
    }

    #[test]
    fn fence_orders_prior_flushes() {
        let a = arena();
        let h = a.alloc(128, 64).unwrap();
        a.write_atomic8(&h, 0, 0xA).unwrap();
        a.flush_line(&h, 0).unwrap();
        a.fence();
        a.write_atomic8(&h, 64, 0xB).unwrap();
        let images = a.crash(CrashPolicy::Enumerate).unwrap();
        assert_eq!(images.len(), 2);
        for img in &images {
            assert_eq!(word_at(&img.bytes, h.offset), 0xA);
        }
        assert!(images.iter().any(|i| word_at(&i.bytes, h.offset + 64) == 0xB));
        assert!(images.iter().any(|i| word_at(&i.bytes, h.offset + 64) == 0));
        a.fence();
        assert_eq!(a.stats().fence_count, 2);
    }

    #[test]
    fn enumeration_sizes_and_bound() {
        let a = arena();
        assert_eq!(a.crash(CrashPolicy::Enumerate).unwrap().len(), 1);
        let h = a.alloc(4096, 64).unwrap();
        a.write_atomic8(&h, 0, 1).unwrap();
        a.write_atomic8(&h, 64, 2).unwrap();
        assert_eq!(a.crash(CrashPolicy::Enumerate).unwrap().len(), 4);
        for i in 0..21 {
            a.write_atomic8(&h, 128 + 8 * i, 3).unwrap();
        }
        assert!(matches!(
            a.crash(CrashPolicy::Enumerate),
            Err(PmError::EnumerationExplosion { max: 20, .. })
        ));
    }

    #[test]
    fn random_policy_is_reproducible() {
        let a = arena();
        let h = a.alloc(256, 64).unwrap();
        for i in 0..16 {
            a.write_atomic8(&h, 8 * i, i + 1).unwrap();
        }
        let x = a.crash(CrashPolicy::Random(9)).unwrap();
        let y = a.crash(CrashPolicy::Random(9)).unwrap();
        assert_eq!(x[0].bytes, y[0].bytes);
        assert_eq!(x[0].persisted, y[0].persisted);
    }

    #[test]
    fn line_ordered_images_are_store_prefixes() {
        let mut cfg = ArenaConfig::with_capacity(1 << 12);
        cfg.persist_order = PersistOrder::LineOrdered;
        let a = PmArena::new(cfg).unwrap();
        let h = a.alloc(64, 64).unwrap();
        a.write_atomic8(&h, 0, 1).unwrap();
        a.write_atomic8(&h, 8, 2).unwrap();
        let images = a.crash(CrashPolicy::Enumerate).unwrap();
        // {}, {w0}, {w0, w1}; never w1 without w0
        assert_eq!(images.len(), 3);
        for img in &images {
            let (w0, w1) = (word_at(&img.bytes, h.offset), word_at(&img.bytes, h.offset + 8));
            assert!(!(w1 == 2 && w0 == 0));
        }
    }

    #[test]
    fn zero_shred_survives_every_image() {
        let a = arena();
        let h0 = a.alloc(64, 64).unwrap();
        a.write_atomic8(&h0, 0, 42).unwrap();
        let h = a.alloc(256, 64).unwrap();
        for img in a.crash(CrashPolicy::Enumerate).unwrap() {
            assert!(img.bytes[h.offset as usize..(h.offset + h.size) as usize]
                .iter()
                .all(|&b| b == 0));
        }
    }

    #[test]
    fn capture_records_points_after_stores_and_flushes() {
        let a = arena();
        let h = a.alloc(64, 64).unwrap();
        a.begin_capture();
        a.write_atomic8(&h, 0, 1).unwrap();
        a.flush_line(&h, 0).unwrap();
        a.fence();
        let points = a.end_capture();
        assert_eq!(points.len(), 3);
        assert_eq!(points[1].dirty_words(), vec![h.offset]);
        assert!(points[2].dirty_words().is_empty());
    }

    #[test]
    fn volatile_cas_touches_both_images_without_events() {
        let a = arena();
        let h = a.alloc(64, 64).unwrap();
        assert!(a.cas_volatile(h.offset + 16, 0, 1).unwrap());
        assert!(!a.cas_volatile(h.offset + 16, 0, 1).unwrap());
        assert!(a.dirty_words().is_empty());
        assert_eq!(word_at(&a.persistent_snapshot(), h.offset + 16), 1);
        assert_eq!(a.stats(), Stats::default());
    }

    #[test]
    fn from_image_pads_and_keeps_cursor() {
        let a = PmArena::from_image(ArenaConfig::with_capacity(128), &[9u8; 100], 100).unwrap();
        assert_eq!(a.capacity(), 128);
        assert_eq!(a.alloc_cursor(), 100);
        assert!(a.alloc(64, 64).is_err());
        let h = a.alloc(28, 4).unwrap();
        assert_eq!(h.offset, 100);
    }
}
