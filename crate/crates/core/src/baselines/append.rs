//! Unsorted append-only leaf: every mutation appends a flagged entry and the
//! logical state is the replay of all entries.

use std::collections::BTreeMap;

use crate::error::{Result, TreeError};
use crate::node::{header_bytes, KvPair};
use crate::pmem::PmArena;

use super::{LeafOps, SplitResult};

pub const ENTRY_BYTES: u64 = 24;

const W_COUNT: u64 = 0;
const W_SIBLING: u64 = 1;
const W_LOCK: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum EntryFlag {
    Insert = 1,
    Delete = 2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Entry {
    pub flag: EntryFlag,
    pub key: u64,
    pub value: u64,
}

/// Header `(entry_count, sibling, lock)` followed by `cap` 24-byte entries
/// laid out as `(flag, key, value)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AppendNode {
    hdr: u64,
    entries: u64,
    cap: u64,
}

impl AppendNode {
    pub fn alloc(arena: &PmArena, cap: u64) -> Result<Self> {
        let line = arena.line_size();
        let h = arena.alloc(header_bytes(line) + cap * ENTRY_BYTES, line)?;
        Ok(Self::open(arena, h.offset, cap))
    }

    pub fn open(arena: &PmArena, hdr: u64, cap: u64) -> Self {
        Self {
            hdr,
            entries: hdr + header_bytes(arena.line_size()),
            cap,
        }
    }

    pub fn cap(&self) -> u64 {
        self.cap
    }

    pub fn lock_word(&self) -> u64 {
        self.hdr + W_LOCK * 8
    }

    pub fn entry_addr(&self, i: u64) -> u64 {
        self.entries + i * ENTRY_BYTES
    }

    pub fn count(&self, arena: &PmArena) -> Result<u64> {
        Ok(arena.load(self.hdr + W_COUNT * 8)?)
    }

    pub fn entry(&self, arena: &PmArena, i: u64) -> Result<Entry> {
        let a = self.entry_addr(i);
        let flag = match arena.load(a)? {
            1 => EntryFlag::Insert,
            2 => EntryFlag::Delete,
            f => return Err(TreeError::Corruption(format!("entry {i} has flag {f}"))),
        };
        Ok(Entry {
            flag,
            key: arena.load(a + 8)?,
            value: arena.load(a + 16)?,
        })
    }

    /// Key and value first, flag last, then every touched line is flushed.
    pub fn append(&self, arena: &PmArena, e: Entry) -> Result<()> {
        let n = self.count(arena)?;
        if n >= self.cap {
            return Err(TreeError::MustSplit);
        }
        let a = self.entry_addr(n);
        arena.store(a + 8, e.key)?;
        arena.store(a + 16, e.value)?;
        arena.store(a, e.flag as u64)?;
        let line = arena.line_size();
        for l in a / line..=(a + ENTRY_BYTES - 1) / line {
            arena.flush(l * line)?;
        }
        arena.fence();
        arena.set_volatile(self.hdr + W_COUNT * 8, n + 1)?;
        Ok(())
    }

    /// Latest entry for `k`, scanning from the tail.
    pub fn lookup(&self, arena: &PmArena, k: u64) -> Result<Option<Entry>> {
        for i in (0..self.count(arena)?).rev() {
            let e = self.entry(arena, i)?;
            if e.key == k {
                return Ok(Some(e));
            }
        }
        Ok(None)
    }

    /// Replay of every entry, in key order.
    pub fn live(&self, arena: &PmArena) -> Result<Vec<KvPair>> {
        let mut m = BTreeMap::new();
        for i in 0..self.count(arena)? {
            let e = self.entry(arena, i)?;
            match e.flag {
                EntryFlag::Insert => m.insert(e.key, e.value),
                EntryFlag::Delete => m.remove(&e.key),
            };
        }
        Ok(m.into_iter().map(|(k, v)| KvPair::new(k, v)).collect())
    }

    /// Write `pairs` as insert entries into a fresh node, one flush per line.
    pub fn fill(&self, arena: &PmArena, pairs: &[KvPair]) -> Result<()> {
        let line = arena.line_size();
        let mut dirty = None;
        for (i, p) in pairs.iter().enumerate() {
            let a = self.entry_addr(i as u64);
            arena.store(a + 8, p.key)?;
            arena.store(a + 16, p.value)?;
            arena.store(a, EntryFlag::Insert as u64)?;
            for l in a / line..=(a + ENTRY_BYTES - 1) / line {
                if dirty.is_some_and(|d| d != l) {
                    arena.flush(dirty.unwrap() * line)?;
                }
                dirty = Some(l);
            }
        }
        if let Some(d) = dirty {
            arena.flush(d * line)?;
        }
        arena.fence();
        arena.set_volatile(self.hdr + W_COUNT * 8, pairs.len() as u64)?;
        Ok(())
    }

    fn fresh(&self, arena: &PmArena, pairs: &[KvPair]) -> Result<Self> {
        let n = Self::alloc(arena, self.cap)?;
        n.fill(arena, pairs)?;
        Ok(n)
    }
}

impl LeafOps for AppendNode {
    fn alloc_leaf(arena: &PmArena, node_bytes: u64) -> Result<Self> {
        Self::alloc(arena, node_bytes / ENTRY_BYTES)
    }

    fn open_leaf(arena: &PmArena, addr: u64, node_bytes: u64) -> Self {
        Self::open(arena, addr, node_bytes / ENTRY_BYTES)
    }

    fn addr(&self) -> u64 {
        self.hdr
    }

    fn get(&self, arena: &PmArena, k: u64) -> Result<Option<u64>> {
        Ok(match self.lookup(arena, k)? {
            Some(Entry {
                flag: EntryFlag::Insert,
                value,
                ..
            }) => Some(value),
            _ => None,
        })
    }

    fn is_full(&self, arena: &PmArena) -> Result<bool> {
        Ok(self.count(arena)? >= self.cap)
    }

    fn insert(&self, arena: &PmArena, k: u64, v: u64) -> Result<()> {
        if LeafOps::get(self, arena, k)?.is_some() {
            return Err(TreeError::Duplicate(k));
        }
        self.append(
            arena,
            Entry {
                flag: EntryFlag::Insert,
                key: k,
                value: v,
            },
        )
    }

    fn update(&self, arena: &PmArena, k: u64, v: u64) -> Result<Option<u64>> {
        let Some(old) = LeafOps::get(self, arena, k)? else {
            return Ok(None);
        };
        self.append(
            arena,
            Entry {
                flag: EntryFlag::Insert,
                key: k,
                value: v,
            },
        )?;
        Ok(Some(old))
    }

    fn delete(&self, arena: &PmArena, k: u64) -> Result<bool> {
        if LeafOps::get(self, arena, k)?.is_none() {
            return Ok(false);
        }
        self.append(
            arena,
            Entry {
                flag: EntryFlag::Delete,
                key: k,
                value: 0,
            },
        )?;
        Ok(true)
    }

    fn pairs(&self, arena: &PmArena) -> Result<Vec<KvPair>> {
        self.live(arena)
    }

    fn sibling(&self, arena: &PmArena) -> Result<u64> {
        Ok(arena.load(self.hdr + W_SIBLING * 8)?)
    }

    fn set_sibling(&self, arena: &PmArena, s: u64) -> Result<()> {
        arena.store(self.hdr + W_SIBLING * 8, s)?;
        arena.persist(self.hdr)?;
        Ok(())
    }

    /// Replays the log, then rewrites the live pairs (and `new`) into fresh
    /// nodes: one when they fit in half a node, otherwise two around the
    /// median key.
    fn split(&self, arena: &PmArena, new: Option<KvPair>) -> Result<SplitResult> {
        let mut all = self.live(arena)?;
        if let Some(new) = new {
            match all.binary_search_by_key(&new.key, |p| p.key) {
                Ok(i) => all[i] = new,
                Err(i) => all.insert(i, new),
            }
        }
        let sibling = LeafOps::sibling(self, arena)?;
        if (all.len() as u64) <= self.cap / 2 {
            let n = self.fresh(arena, &all)?;
            n.set_sibling(arena, sibling)?;
            return Ok(SplitResult::Compacted { node: n.hdr });
        }
        let m = all.len() / 2;
        let right = self.fresh(arena, &all[m..])?;
        right.set_sibling(arena, sibling)?;
        let left = self.fresh(arena, &all[..m])?;
        left.set_sibling(arena, right.hdr)?;
        Ok(SplitResult::Split {
            left: left.hdr,
            sep: all[m].key,
            right: right.hdr,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pmem::ArenaConfig;

    fn setup(cap: u64) -> (PmArena, AppendNode) {
        let a = PmArena::new(ArenaConfig::with_capacity(1 << 16)).unwrap();
        let n = AppendNode::alloc(&a, cap).unwrap();
        (a, n)
    }

    #[test]
    fn first_insert_is_one_entry_one_flush() {
        let (a, n) = setup(8);
        let f = a.stats().flush_count;
        LeafOps::insert(&n, &a, 5, 50).unwrap();
        assert_eq!(n.count(&a).unwrap(), 1);
        assert_eq!(a.stats().flush_count - f, 1);
    }

    #[test]
    fn delete_then_search_sees_two_entries() {
        let (a, n) = setup(8);
        LeafOps::insert(&n, &a, 5, 50).unwrap();
        assert!(LeafOps::delete(&n, &a, 5).unwrap());
        assert_eq!(n.count(&a).unwrap(), 2);
        assert_eq!(LeafOps::get(&n, &a, 5).unwrap(), None);
        assert!(!LeafOps::delete(&n, &a, 5).unwrap());
        assert_eq!(a.stats().shift_count, 0);
    }

    #[test]
    fn full_tail_must_split() {
        let (a, n) = setup(3);
        for k in 1..=3 {
            LeafOps::insert(&n, &a, k, k).unwrap();
        }
        assert!(matches!(LeafOps::insert(&n, &a, 4, 4), Err(TreeError::MustSplit)));
    }

    #[test]
    fn split_partitions_live_pairs() {
        let (a, n) = setup(6);
        for k in [50, 10, 40, 20, 30] {
            LeafOps::insert(&n, &a, k, k).unwrap();
        }
        LeafOps::delete(&n, &a, 40).unwrap();
        let SplitResult::Split { left, sep, right } = n.split(&a, Some(KvPair::new(25, 25))).unwrap() else {
            panic!("expected split");
        };
        let l = AppendNode::open(&a, left, 6);
        let r = AppendNode::open(&a, right, 6);
        let keys = |x: &AppendNode| x.live(&a).unwrap().iter().map(|p| p.key).collect::<Vec<_>>();
        assert_eq!(keys(&l), [10, 20]);
        assert_eq!(keys(&r), [25, 30, 50]);
        assert_eq!(sep, 25);
        assert_eq!(LeafOps::sibling(&l, &a).unwrap(), right);
    }

    #[test]
    fn sparse_node_compacts_instead() {
        let (a, n) = setup(6);
        LeafOps::insert(&n, &a, 1, 1).unwrap();
        for _ in 0..5 {
            LeafOps::update(&n, &a, 1, 2).unwrap();
        }
        let SplitResult::Compacted { node } = n.split(&a, Some(KvPair::new(9, 9))).unwrap() else {
            panic!("expected compaction");
        };
        let c = AppendNode::open(&a, node, 6);
        assert_eq!(c.live(&a).unwrap(), [KvPair::new(1, 2), KvPair::new(9, 9)]);
    }
}
