//! Circular nodes: a power-of-two array of 16-byte key/value slots addressed
//! relative to a movable base, plus a header line that lives apart from the
//! array.
//!
//! Header line words:
//!
//! | word | contents |
//! |------|----------|
//! | 0 | array handle (absolute offset) |
//! | 1 | `base << 32 \| nkeys` |
//! | 2 | lock |
//! | 3 | right sibling header offset, 0 if none |
//! | 4 | leftmost child (internal nodes) |
//! | 5 | `MAGIC << 32 \| level`, level 0 for leaves |
//! | 6 | low fence key |
//!
//! A slot stores the key in its first word and the value in the second. A
//! slot whose value is 0 is empty.

use crate::error::{Result, TreeError};
use crate::pmem::PmArena;

pub const SLOT_BYTES: u64 = 16;
pub const HEADER_WORDS: u64 = 7;
pub const MAGIC: u32 = 0xC1C7_7EE5;

pub const W_ARRAY: u64 = 0;
pub const W_BN: u64 = 8;
pub const W_LOCK: u64 = 16;
pub const W_SIBLING: u64 = 24;
pub const W_LEFTMOST: u64 = 32;
pub const W_META: u64 = 40;
pub const W_LOW: u64 = 48;

/// `(b + i) mod n` for a power-of-two `n`.
pub fn circ_index(b: u64, i: u64, n: u64) -> Result<u64> {
    if n < 2 || !n.is_power_of_two() {
        return Err(TreeError::NotPowerOfTwo(n));
    }
    Ok(b.wrapping_add(i) & (n - 1))
}

pub fn pack_bn(base: u32, nkeys: u32) -> u64 {
    (u64::from(base) << 32) | u64::from(nkeys)
}

pub fn unpack_bn(word: u64) -> (u32, u32) {
    ((word >> 32) as u32, word as u32)
}

/// Header-line size for a given cache-line size.
pub fn header_bytes(line_size: u64) -> u64 {
    (HEADER_WORDS * 8).div_ceil(line_size) * line_size
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KvPair {
    pub key: u64,
    pub value: u64,
}

impl KvPair {
    pub const NULL: KvPair = KvPair { key: 0, value: 0 };

    pub fn new(key: u64, value: u64) -> Self {
        Self { key, value }
    }

    pub fn is_null(&self) -> bool {
        self.value == 0
    }
}

/// Decoded header line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeHeader {
    pub array: u64,
    pub base: u32,
    pub nkeys: u32,
    pub lock: u64,
    pub sibling: u64,
    pub leftmost: u64,
    pub level: u32,
    pub low: u64,
}

impl NodeHeader {
    pub fn encode(&self) -> [u8; (HEADER_WORDS * 8) as usize] {
        let words = [
            self.array,
            pack_bn(self.base, self.nkeys),
            self.lock,
            self.sibling,
            self.leftmost,
            (u64::from(MAGIC) << 32) | u64::from(self.level),
            self.low,
        ];
        let mut out = [0u8; (HEADER_WORDS * 8) as usize];
        for (chunk, w) in out.chunks_exact_mut(8).zip(words) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        out
    }

    /// Decode a header line, checking only the magic tag.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < (HEADER_WORDS * 8) as usize {
            return Err(TreeError::Corruption(format!(
                "header needs {} bytes, got {}",
                HEADER_WORDS * 8,
                bytes.len()
            )));
        }
        let w = |i: usize| u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap());
        let meta = w(5);
        if (meta >> 32) as u32 != MAGIC {
            return Err(TreeError::Corruption(format!("bad node magic {:#x}", meta >> 32)));
        }
        let (base, nkeys) = unpack_bn(w(1));
        Ok(Self {
            array: w(0),
            base,
            nkeys,
            lock: w(2),
            sibling: w(3),
            leftmost: w(4),
            level: meta as u32,
            low: w(6),
        })
    }

    /// Check the header against a capacity and an arena size.
    pub fn validate(&self, cap: u64, arena_bytes: u64) -> Result<()> {
        if u64::from(self.base) >= cap || u64::from(self.nkeys) > cap {
            return Err(TreeError::Corruption(format!(
                "base {} / nkeys {} out of range for capacity {cap}",
                self.base, self.nkeys
            )));
        }
        let end = self.array.checked_add(cap * SLOT_BYTES);
        if self.array == 0 || end.is_none_or(|e| e > arena_bytes) {
            return Err(TreeError::Corruption(format!(
                "array handle {:#x} out of bounds",
                self.array
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Search {
    Found { pos: u64, value: u64 },
    NotFound { pos: u64 },
}

/// How `search` walks the valid range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SearchMode {
    /// Pick one physically contiguous segment, then scan it.
    #[default]
    Segment,
    /// Scan logically from the base to the last valid pair.
    Logical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct OpInfo {
    pub shifts: u64,
    pub left: bool,
}

/// A node located by the absolute offset of its header line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CircNode {
    pub hdr: u64,
    pub array: u64,
    pub cap: u64,
}

impl CircNode {
    /// Allocate a zeroed node. The array handle and level are written and
    /// flushed; publishing the node is up to the caller.
    pub fn alloc(arena: &PmArena, cap: u64, level: u32) -> Result<Self> {
        if cap < 2 || !cap.is_power_of_two() {
            return Err(TreeError::NotPowerOfTwo(cap));
        }
        let line = arena.line_size();
        let h = arena.alloc(header_bytes(line), line)?;
        let a = arena.alloc(cap * SLOT_BYTES, line)?;
        arena.store(h.offset + W_ARRAY, a.offset)?;
        arena.store(h.offset + W_META, (u64::from(MAGIC) << 32) | u64::from(level))?;
        let node = Self {
            hdr: h.offset,
            array: a.offset,
            cap,
        };
        node.flush_header(arena)?;
        Ok(node)
    }

    /// Attach to an existing header, validating what can be validated.
    pub fn open(arena: &PmArena, hdr: u64, cap: u64) -> Result<Self> {
        let bytes = header_bytes(arena.line_size());
        if hdr == 0 || !hdr.is_multiple_of(8) || hdr.checked_add(bytes).is_none_or(|e| e > arena.capacity()) {
            return Err(TreeError::Corruption(format!("node handle {hdr:#x} out of bounds")));
        }
        let raw = arena.with_bytes(hdr, HEADER_WORDS * 8, |b| b.to_vec())?;
        let h = NodeHeader::decode(&raw)?;
        h.validate(cap, arena.capacity())?;
        if h.array % 8 != 0 {
            return Err(TreeError::Corruption(format!("array handle {:#x} misaligned", h.array)));
        }
        Ok(Self {
            hdr,
            array: h.array,
            cap,
        })
    }

    pub fn header(&self, arena: &PmArena) -> Result<NodeHeader> {
        let raw = arena.with_bytes(self.hdr, HEADER_WORDS * 8, |b| b.to_vec())?;
        NodeHeader::decode(&raw)
    }

    pub fn flush_header(&self, arena: &PmArena) -> Result<()> {
        let line = arena.line_size();
        let mut off = 0;
        while off < HEADER_WORDS * 8 {
            arena.flush(self.hdr + off)?;
            off += line;
        }
        Ok(())
    }

    fn mask(&self) -> u64 {
        self.cap - 1
    }

    /// Physical slot of logical position `i` under base `b`; `i` may be negative.
    pub fn slot_of(&self, b: u64, i: i64) -> u64 {
        (b as i64).wrapping_add(i) as u64 & self.mask()
    }

    pub fn slot_addr(&self, slot: u64) -> u64 {
        self.array + slot * SLOT_BYTES
    }

    pub fn bn(&self, arena: &PmArena) -> Result<(u64, u64)> {
        let (b, n) = unpack_bn(arena.load(self.hdr + W_BN)?);
        Ok((u64::from(b), u64::from(n)))
    }

    pub fn set_bn(&self, arena: &PmArena, b: u64, n: u64) -> Result<()> {
        arena.store(self.hdr + W_BN, pack_bn(b as u32, n as u32))?;
        arena.persist(self.hdr + W_BN)?;
        Ok(())
    }

    pub fn word(&self, arena: &PmArena, w: u64) -> Result<u64> {
        Ok(arena.load(self.hdr + w)?)
    }

    /// Atomic store of a header word followed by a persist.
    pub fn set_word(&self, arena: &PmArena, w: u64, value: u64) -> Result<()> {
        arena.store(self.hdr + w, value)?;
        arena.persist(self.hdr + w)?;
        Ok(())
    }

    pub fn sibling(&self, arena: &PmArena) -> Result<u64> {
        self.word(arena, W_SIBLING)
    }

    pub fn leftmost(&self, arena: &PmArena) -> Result<u64> {
        self.word(arena, W_LEFTMOST)
    }

    pub fn low(&self, arena: &PmArena) -> Result<u64> {
        self.word(arena, W_LOW)
    }

    pub fn level(&self, arena: &PmArena) -> Result<u32> {
        Ok(self.word(arena, W_META)? as u32)
    }

    pub fn key_at(&self, arena: &PmArena, slot: u64) -> Result<u64> {
        Ok(arena.load(self.slot_addr(slot))?)
    }

    pub fn slot(&self, arena: &PmArena, slot: u64) -> Result<KvPair> {
        let a = self.slot_addr(slot);
        Ok(KvPair::new(arena.load(a)?, arena.load(a + 8)?))
    }

    /// All physical slots in one read.
    pub fn raw_slots(&self, arena: &PmArena) -> Result<Vec<KvPair>> {
        Ok(arena.with_bytes(self.array, self.cap * SLOT_BYTES, |b| {
            b.chunks_exact(16)
                .map(|c| {
                    KvPair::new(
                        u64::from_le_bytes(c[..8].try_into().unwrap()),
                        u64::from_le_bytes(c[8..].try_into().unwrap()),
                    )
                })
                .collect()
        })?)
    }

    /// Copy a pair into a slot, value first.
    pub fn move_pair(&self, arena: &PmArena, to: u64, p: KvPair) -> Result<()> {
        let a = self.slot_addr(to);
        arena.store(a + 8, p.value)?;
        arena.store(a, p.key)?;
        Ok(())
    }

    /// Write a fresh pair, key first.
    pub fn put_pair(&self, arena: &PmArena, to: u64, p: KvPair) -> Result<()> {
        let a = self.slot_addr(to);
        arena.store(a, p.key)?;
        arena.store(a + 8, p.value)?;
        Ok(())
    }

    /// Clear a slot, value first.
    pub fn null_slot(&self, arena: &PmArena, slot: u64) -> Result<()> {
        self.move_pair(arena, slot, KvPair::NULL)
    }

    pub fn flush_slot(&self, arena: &PmArena, slot: u64) -> Result<()> {
        Ok(arena.flush(self.slot_addr(slot))?)
    }

    pub fn persist_slot(&self, arena: &PmArena, slot: u64) -> Result<()> {
        Ok(arena.persist(self.slot_addr(slot))?)
    }

    fn line_start(&self, arena: &PmArena, slot: u64) -> bool {
        self.slot_addr(slot).is_multiple_of(arena.line_size())
    }

    pub fn logical_view(&self, arena: &PmArena) -> Result<Vec<KvPair>> {
        let (b, n) = self.bn(arena)?;
        let raw = self.raw_slots(arena)?;
        Ok((0..n).map(|i| raw[self.slot_of(b, i as i64) as usize]).collect())
    }

    pub fn search(&self, arena: &PmArena, k: u64) -> Result<Search> {
        self.search_with(arena, k, SearchMode::Segment, None)
    }

    /// Search, optionally recording every physical slot whose key was read.
    pub fn search_with(
        &self,
        arena: &PmArena,
        k: u64,
        mode: SearchMode,
        mut probes: Option<&mut Vec<u64>>,
    ) -> Result<Search> {
        let (b, n) = self.bn(arena)?;
        if n == 0 {
            return Ok(Search::NotFound { pos: 0 });
        }
        let mut probe = |slot: u64| -> Result<u64> {
            if let Some(p) = probes.as_deref_mut() {
                p.push(slot);
            }
            self.key_at(arena, slot)
        };
        // logical range [lo, hi) to scan, and the physical slot of lo
        let (lo, hi) = if mode == SearchMode::Segment && b + n > self.cap {
            let first_len = self.cap - b;
            if k < probe(0)? {
                (0, first_len)
            } else {
                (first_len, n)
            }
        } else {
            (0, n)
        };
        for i in lo..hi {
            let slot = (b + i) & self.mask();
            let key = probe(slot)?;
            if key == k {
                let value = arena.load(self.slot_addr(slot) + 8)?;
                return Ok(Search::Found { pos: i, value });
            }
            if key > k {
                return Ok(Search::NotFound { pos: i });
            }
        }
        Ok(Search::NotFound { pos: hi })
    }

    /// Insert into a non-full node, shifting the smaller side.
    pub fn insert(&self, arena: &PmArena, k: u64, v: u64) -> Result<OpInfo> {
        self.insert_with(arena, k, v, SearchMode::Segment)
    }

    pub fn insert_with(&self, arena: &PmArena, k: u64, v: u64, mode: SearchMode) -> Result<OpInfo> {
        if v == 0 {
            return Err(TreeError::NullValue);
        }
        let (b, n) = self.bn(arena)?;
        if n >= self.cap {
            return Err(TreeError::MustSplit);
        }
        if let Search::Found { .. } = self.search_with(arena, k, mode, None)? {
            return Err(TreeError::Duplicate(k));
        }
        let new = KvPair::new(k, v);
        if n == 0 {
            self.put_pair(arena, b, new)?;
            self.persist_slot(arena, b)?;
            self.set_bn(arena, b, 1)?;
            return Ok(OpInfo::default());
        }
        let mid = self.key_at(arena, self.slot_of(b, (n / 2) as i64))?;
        let mut shifts = 0;
        if k < mid {
            let mut j = 0i64;
            while (j as u64) < n {
                let from = self.slot_of(b, j);
                let p = self.slot(arena, from)?;
                if p.key >= k {
                    break;
                }
                let to = self.slot_of(b, j - 1);
                self.move_pair(arena, to, p)?;
                shifts += 1;
                if self.line_start(arena, from) {
                    self.persist_slot(arena, to)?;
                }
                j += 1;
            }
            let at = self.slot_of(b, j - 1);
            self.put_pair(arena, at, new)?;
            self.persist_slot(arena, at)?;
            arena.count_shifts(shifts);
            self.set_bn(arena, self.slot_of(b, -1), n + 1)?;
            Ok(OpInfo { shifts, left: true })
        } else {
            let mut j = n as i64 - 1;
            while j >= 0 {
                let from = self.slot_of(b, j);
                let p = self.slot(arena, from)?;
                if p.key < k {
                    break;
                }
                let to = self.slot_of(b, j + 1);
                self.move_pair(arena, to, p)?;
                shifts += 1;
                if self.line_start(arena, to) {
                    self.persist_slot(arena, to)?;
                }
                j -= 1;
            }
            let at = self.slot_of(b, j + 1);
            self.put_pair(arena, at, new)?;
            self.persist_slot(arena, at)?;
            arena.count_shifts(shifts);
            self.set_bn(arena, b, n + 1)?;
            Ok(OpInfo {
                shifts,
                left: false,
            })
        }
    }

    pub fn delete(&self, arena: &PmArena, k: u64) -> Result<OpInfo> {
        self.delete_with(arena, k, SearchMode::Segment)
    }

    pub fn delete_with(&self, arena: &PmArena, k: u64, mode: SearchMode) -> Result<OpInfo> {
        let pos = match self.search_with(arena, k, mode, None)? {
            Search::Found { pos, .. } => pos,
            Search::NotFound { .. } => return Err(TreeError::NotFound(k)),
        };
        self.delete_at(arena, pos)
    }

    /// Remove the pair at logical position `pos`.
    pub fn delete_at(&self, arena: &PmArena, pos: u64) -> Result<OpInfo> {
        let (b, n) = self.bn(arena)?;
        if pos >= n {
            return Err(TreeError::Contract(format!("delete position {pos} >= nkeys {n}")));
        }
        let pos = pos as i64;
        let n_i = n as i64;
        if pos == 0 {
            self.null_slot(arena, b)?;
            self.persist_slot(arena, b)?;
            self.set_bn(arena, self.slot_of(b, 1), n - 1)?;
            return Ok(OpInfo {
                shifts: 0,
                left: false,
            });
        }
        if pos == n_i - 1 {
            let tail = self.slot_of(b, pos);
            self.null_slot(arena, tail)?;
            self.persist_slot(arena, tail)?;
            self.set_bn(arena, b, n - 1)?;
            return Ok(OpInfo {
                shifts: 0,
                left: true,
            });
        }
        let mut shifts = 0;
        if pos >= n_i / 2 {
            for j in pos + 1..n_i {
                let from = self.slot_of(b, j);
                let to = self.slot_of(b, j - 1);
                let p = self.slot(arena, from)?;
                self.move_pair(arena, to, p)?;
                shifts += 1;
                if self.line_start(arena, from) {
                    self.persist_slot(arena, to)?;
                }
            }
            let tail = self.slot_of(b, n_i - 1);
            self.null_slot(arena, tail)?;
            self.persist_slot(arena, tail)?;
            arena.count_shifts(shifts);
            self.set_bn(arena, b, n - 1)?;
            Ok(OpInfo { shifts, left: true })
        } else {
            for j in (0..pos).rev() {
                let from = self.slot_of(b, j);
                let to = self.slot_of(b, j + 1);
                let p = self.slot(arena, from)?;
                self.move_pair(arena, to, p)?;
                shifts += 1;
                if self.line_start(arena, to) {
                    self.persist_slot(arena, to)?;
                }
            }
            self.null_slot(arena, b)?;
            self.persist_slot(arena, b)?;
            arena.count_shifts(shifts);
            self.set_bn(arena, self.slot_of(b, 1), n - 1)?;
            Ok(OpInfo {
                shifts,
                left: false,
            })
        }
    }

    /// Overwrite the value at logical position `pos` in place.
    pub fn update_at(&self, arena: &PmArena, pos: u64, v: u64) -> Result<u64> {
        if v == 0 {
            return Err(TreeError::NullValue);
        }
        let (b, n) = self.bn(arena)?;
        if pos >= n {
            return Err(TreeError::Contract(format!("update position {pos} >= nkeys {n}")));
        }
        let slot = self.slot_of(b, pos as i64);
        let addr = self.slot_addr(slot) + 8;
        let old = arena.load(addr)?;
        arena.store(addr, v)?;
        arena.persist(addr)?;
        Ok(old)
    }

    /// Child covering `k` in an internal node: the value of the greatest
    /// separator `<= k`, or the leftmost child.
    pub fn child_for(&self, arena: &PmArena, k: u64, mode: SearchMode) -> Result<u64> {
        match self.search_with(arena, k, mode, None)? {
            Search::Found { value, .. } => Ok(value),
            Search::NotFound { pos: 0 } => self.leftmost(arena),
            Search::NotFound { pos } => {
                let (b, _) = self.bn(arena)?;
                Ok(self.slot(arena, self.slot_of(b, pos as i64 - 1))?.value)
            }
        }
    }

    /// Children in key order, leftmost first (internal nodes).
    pub fn children(&self, arena: &PmArena) -> Result<Vec<u64>> {
        let mut out = vec![self.leftmost(arena)?];
        out.extend(self.logical_view(arena)?.into_iter().map(|p| p.value));
        Ok(out)
    }
}
