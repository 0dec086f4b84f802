//! Sorted node anchored at slot 0: every insert or delete shifts the
//! greater pairs, store by store, flushing each line as it is left behind.

use crate::error::{Result, TreeError};
use crate::node::{header_bytes, KvPair, Search, SLOT_BYTES};
use crate::pmem::PmArena;

use super::{LeafOps, SplitResult};

const W_COUNT: u64 = 0;
const W_SIBLING: u64 = 1;
const W_LOCK: u64 = 2;
const W_LEFTMOST: u64 = 3;
const W_LEVEL: u64 = 4;

/// Header `(count, sibling, lock, leftmost, level)` followed by `cap` slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearNode {
    hdr: u64,
    array: u64,
    cap: u64,
}

impl LinearNode {
    pub fn alloc(arena: &PmArena, cap: u64, level: u64, sync: bool) -> Result<Self> {
        let line = arena.line_size();
        let hb = header_bytes(line);
        let h = arena.alloc(hb + cap * SLOT_BYTES, line)?;
        let node = Self::open(arena, h.offset, cap);
        if level > 0 {
            arena.store(node.word(W_LEVEL), level)?;
            if sync {
                arena.persist(node.hdr)?;
            }
        }
        Ok(node)
    }

    pub fn open(arena: &PmArena, hdr: u64, cap: u64) -> Self {
        Self {
            hdr,
            array: hdr + header_bytes(arena.line_size()),
            cap,
        }
    }

    pub fn addr(&self) -> u64 {
        self.hdr
    }

    pub fn cap(&self) -> u64 {
        self.cap
    }

    fn word(&self, w: u64) -> u64 {
        self.hdr + w * 8
    }

    fn set(&self, arena: &PmArena, w: u64, v: u64, sync: bool) -> Result<()> {
        arena.store(self.word(w), v)?;
        if sync {
            arena.persist(self.word(w))?;
        }
        Ok(())
    }

    pub fn count(&self, arena: &PmArena) -> Result<u64> {
        Ok(arena.load(self.word(W_COUNT))?)
    }

    pub fn sibling(&self, arena: &PmArena) -> Result<u64> {
        Ok(arena.load(self.word(W_SIBLING))?)
    }

    pub fn set_sibling(&self, arena: &PmArena, s: u64, sync: bool) -> Result<()> {
        self.set(arena, W_SIBLING, s, sync)
    }

    pub fn leftmost(&self, arena: &PmArena) -> Result<u64> {
        Ok(arena.load(self.word(W_LEFTMOST))?)
    }

    pub fn set_leftmost(&self, arena: &PmArena, c: u64, sync: bool) -> Result<()> {
        self.set(arena, W_LEFTMOST, c, sync)
    }

    pub fn level(&self, arena: &PmArena) -> Result<u64> {
        Ok(arena.load(self.word(W_LEVEL))?)
    }

    pub fn lock_word(&self) -> u64 {
        self.word(W_LOCK)
    }

    pub fn slot_addr(&self, i: u64) -> u64 {
        self.array + i * SLOT_BYTES
    }

    pub fn slot(&self, arena: &PmArena, i: u64) -> Result<KvPair> {
        let a = self.slot_addr(i);
        Ok(KvPair::new(arena.load(a)?, arena.load(a + 8)?))
    }

    fn write_slot(&self, arena: &PmArena, i: u64, p: KvPair) -> Result<()> {
        let a = self.slot_addr(i);
        arena.store(a + 8, p.value)?;
        arena.store(a, p.key)?;
        Ok(())
    }

    fn per_line(&self, arena: &PmArena) -> u64 {
        (arena.line_size() / SLOT_BYTES).max(1)
    }

    pub fn pairs(&self, arena: &PmArena) -> Result<Vec<KvPair>> {
        (0..self.count(arena)?).map(|i| self.slot(arena, i)).collect()
    }

    pub fn search(&self, arena: &PmArena, k: u64) -> Result<Search> {
        let (mut lo, mut hi) = (0, self.count(arena)?);
        while lo < hi {
            let mid = (lo + hi) / 2;
            let p = self.slot(arena, mid)?;
            if p.key == k {
                return Ok(Search::Found { pos: mid, value: p.value });
            }
            if p.key < k {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        Ok(Search::NotFound { pos: lo })
    }

    /// Internal-node routing: the child covering `k`.
    pub fn child_for(&self, arena: &PmArena, k: u64) -> Result<(u64, usize)> {
        let idx = match self.search(arena, k)? {
            Search::Found { pos, .. } => pos + 1,
            Search::NotFound { pos } => pos,
        };
        Ok((self.child(arena, idx as usize)?, idx as usize))
    }

    /// Child by routing index: 0 is the leftmost, `j + 1` the value at slot `j`.
    pub fn child(&self, arena: &PmArena, idx: usize) -> Result<u64> {
        if idx == 0 {
            self.leftmost(arena)
        } else {
            Ok(self.slot(arena, idx as u64 - 1)?.value)
        }
    }

    pub fn set_child(&self, arena: &PmArena, idx: usize, c: u64, sync: bool) -> Result<()> {
        if idx == 0 {
            return self.set_leftmost(arena, c, sync);
        }
        let a = self.slot_addr(idx as u64 - 1) + 8;
        arena.store(a, c)?;
        if sync {
            arena.persist(a)?;
        }
        Ok(())
    }

    /// Shift slots `pos..count` one to the right and write `p` at `pos`.
    pub fn insert_at(&self, arena: &PmArena, pos: u64, p: KvPair, sync: bool) -> Result<()> {
        let n = self.count(arena)?;
        if n >= self.cap {
            return Err(TreeError::MustSplit);
        }
        let per = self.per_line(arena);
        for j in (pos + 1..=n).rev() {
            let moved = self.slot(arena, j - 1)?;
            self.write_slot(arena, j, moved)?;
            if sync && j % per == 0 {
                arena.flush(self.slot_addr(j))?;
            }
        }
        arena.count_shifts(n - pos);
        self.write_slot(arena, pos, p)?;
        if sync {
            arena.flush(self.slot_addr(pos))?;
            arena.fence();
        }
        self.set(arena, W_COUNT, n + 1, sync)
    }

    /// Shift slots `pos+1..count` one to the left and null the tail.
    pub fn delete_at(&self, arena: &PmArena, pos: u64, sync: bool) -> Result<()> {
        let n = self.count(arena)?;
        let per = self.per_line(arena);
        for j in pos..n - 1 {
            let moved = self.slot(arena, j + 1)?;
            self.write_slot(arena, j, moved)?;
            if sync && (j + 1) % per == 0 {
                arena.flush(self.slot_addr(j))?;
            }
        }
        arena.count_shifts(n - 1 - pos);
        self.write_slot(arena, n - 1, KvPair::NULL)?;
        if sync {
            arena.flush(self.slot_addr(n - 1))?;
            arena.fence();
        }
        self.set(arena, W_COUNT, n - 1, sync)
    }

    pub fn insert(&self, arena: &PmArena, k: u64, v: u64, sync: bool) -> Result<()> {
        match self.search(arena, k)? {
            Search::Found { .. } => Err(TreeError::Duplicate(k)),
            Search::NotFound { pos } => self.insert_at(arena, pos, KvPair::new(k, v), sync),
        }
    }

    pub fn delete(&self, arena: &PmArena, k: u64, sync: bool) -> Result<()> {
        match self.search(arena, k)? {
            Search::Found { pos, .. } => self.delete_at(arena, pos, sync),
            Search::NotFound { .. } => Err(TreeError::NotFound(k)),
        }
    }

    /// Write `pairs` from slot 0 into an empty node, one flush per line.
    pub fn fill(&self, arena: &PmArena, pairs: &[KvPair], sync: bool) -> Result<()> {
        let per = self.per_line(arena);
        for (i, p) in pairs.iter().enumerate() {
            let i = i as u64;
            self.write_slot(arena, i, *p)?;
            if sync && (i + 1 == pairs.len() as u64 || (i + 1).is_multiple_of(per)) {
                arena.flush(self.slot_addr(i))?;
            }
        }
        self.set(arena, W_COUNT, pairs.len() as u64, sync)
    }

    /// Null slots `keep..count` from the tail down and shrink the count.
    pub fn truncate(&self, arena: &PmArena, keep: u64, sync: bool) -> Result<()> {
        let n = self.count(arena)?;
        let per = self.per_line(arena);
        for i in (keep..n).rev() {
            self.write_slot(arena, i, KvPair::NULL)?;
            if sync && (i == keep || i % per == 0) {
                arena.flush(self.slot_addr(i))?;
            }
        }
        self.set(arena, W_COUNT, keep, sync)
    }
}

impl LeafOps for LinearNode {
    fn alloc_leaf(arena: &PmArena, node_bytes: u64) -> Result<Self> {
        Self::alloc(arena, node_bytes / SLOT_BYTES, 0, true)
    }

    fn open_leaf(arena: &PmArena, addr: u64, node_bytes: u64) -> Self {
        Self::open(arena, addr, node_bytes / SLOT_BYTES)
    }

    fn addr(&self) -> u64 {
        self.hdr
    }

    fn get(&self, arena: &PmArena, k: u64) -> Result<Option<u64>> {
        Ok(match self.search(arena, k)? {
            Search::Found { value, .. } => Some(value),
            Search::NotFound { .. } => None,
        })
    }

    fn is_full(&self, arena: &PmArena) -> Result<bool> {
        Ok(self.count(arena)? >= self.cap)
    }

    fn insert(&self, arena: &PmArena, k: u64, v: u64) -> Result<()> {
        LinearNode::insert(self, arena, k, v, true)
    }

    fn update(&self, arena: &PmArena, k: u64, v: u64) -> Result<Option<u64>> {
        let Search::Found { pos, value } = self.search(arena, k)? else {
            return Ok(None);
        };
        let a = self.slot_addr(pos) + 8;
        arena.store(a, v)?;
        arena.persist(a)?;
        Ok(Some(value))
    }

    fn delete(&self, arena: &PmArena, k: u64) -> Result<bool> {
        match LinearNode::delete(self, arena, k, true) {
            Ok(()) => Ok(true),
            Err(TreeError::NotFound(_)) => Ok(false),
            Err(e) => Err(e),
        }
    }

    fn pairs(&self, arena: &PmArena) -> Result<Vec<KvPair>> {
        LinearNode::pairs(self, arena)
    }

    fn sibling(&self, arena: &PmArena) -> Result<u64> {
        LinearNode::sibling(self, arena)
    }

    fn set_sibling(&self, arena: &PmArena, s: u64) -> Result<()> {
        LinearNode::set_sibling(self, arena, s, true)
    }

    /// Split in place: the right half moves to a new node, the left stays.
    fn split(&self, arena: &PmArena, new: Option<KvPair>) -> Result<SplitResult> {
        let mut all = self.pairs(arena)?;
        if let Some(new) = new {
            let at = all.partition_point(|p| p.key < new.key);
            all.insert(at, new);
        }
        let m = all.len() / 2;
        let sep = all[m].key;
        let right = Self::alloc(arena, self.cap, 0, true)?;
        right.fill(arena, &all[m..], true)?;
        right.set_sibling(arena, self.sibling(arena)?, true)?;
        self.set_sibling(arena, right.hdr, true)?;
        let is_new = |p: &KvPair| new.is_some_and(|n| n.key == p.key);
        let kept = all[..m].iter().filter(|p| !is_new(p)).count() as u64;
        self.truncate(arena, kept, true)?;
        if let Some(new) = new.filter(|n| n.key < sep) {
            LinearNode::insert(self, arena, new.key, new.value, true)?;
        }
        Ok(SplitResult::Split {
            left: self.hdr,
            sep,
            right: right.hdr,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pmem::ArenaConfig;

    fn arena(line: u64) -> PmArena {
        PmArena::new(ArenaConfig {
            line_size: line,
            ..ArenaConfig::with_capacity(1 << 16)
        })
        .unwrap()
    }

    fn data_flushes(a: &PmArena, node: &LinearNode, f: impl FnOnce()) -> usize {
        a.set_record_events(true);
        a.take_events();
        f();
        let line = a.line_size();
        let lo = node.slot_addr(0) / line;
        let hi = node.slot_addr(node.cap()) / line;
        a.take_events()
            .iter()
            .filter(|e| matches!(e, crate::pmem::Event::Flush { line: l } if (lo..hi).contains(l)))
            .count()
    }

    #[test]
    fn second_smallest_insert_flushes_three_lines() {
        let a = arena(32);
        let n = LinearNode::alloc(&a, 8, 0, true).unwrap();
        for k in [10, 20, 30, 40, 50] {
            n.insert(&a, k, k, true).unwrap();
        }
        let before = a.stats().shift_count;
        let f = data_flushes(&a, &n, || n.insert(&a, 15, 15, true).unwrap());
        assert_eq!(f, 3);
        assert_eq!(a.stats().shift_count - before, 4);
        let keys: Vec<u64> = n.pairs(&a).unwrap().iter().map(|p| p.key).collect();
        assert_eq!(keys, [10, 15, 20, 30, 40, 50]);
    }

    #[test]
    fn greatest_insert_shifts_nothing() {
        let a = arena(32);
        let n = LinearNode::alloc(&a, 8, 0, true).unwrap();
        for k in [10, 20, 30] {
            n.insert(&a, k, k, true).unwrap();
        }
        let before = a.stats().shift_count;
        assert_eq!(data_flushes(&a, &n, || n.insert(&a, 99, 1, true).unwrap()), 1);
        assert_eq!(a.stats().shift_count, before);
    }

    #[test]
    fn smallest_delete_flushes_three_lines() {
        let a = arena(32);
        let n = LinearNode::alloc(&a, 8, 0, true).unwrap();
        for k in [10, 20, 30, 40, 50, 60] {
            n.insert(&a, k, k, true).unwrap();
        }
        assert_eq!(data_flushes(&a, &n, || n.delete(&a, 10, true).unwrap()), 3);
        assert_eq!(n.slot(&a, 5).unwrap(), KvPair::NULL);
        assert_eq!(data_flushes(&a, &n, || n.delete(&a, 60, true).unwrap()), 1);
        assert!(matches!(n.delete(&a, 7, true), Err(TreeError::NotFound(7))));
    }

    #[test]
    fn full_node_must_split() {
        let a = arena(64);
        let n = LinearNode::alloc(&a, 4, 0, true).unwrap();
        for k in 1..=4 {
            n.insert(&a, k, k, true).unwrap();
        }
        assert!(matches!(n.insert(&a, 9, 9, true), Err(TreeError::MustSplit)));
    }

    #[test]
    fn split_keeps_both_halves_sorted() {
        let a = arena(64);
        let n = LinearNode::alloc(&a, 4, 0, true).unwrap();
        for k in [10, 20, 30, 40] {
            n.insert(&a, k, k, true).unwrap();
        }
        let SplitResult::Split { left, sep, right } = n.split(&a, Some(KvPair::new(15, 15))).unwrap() else {
            panic!("expected a split");
        };
        assert_eq!((left, sep), (n.addr(), 20));
        let r = LinearNode::open(&a, right, 4);
        let keys = |x: &LinearNode| x.pairs(&a).unwrap().iter().map(|p| p.key).collect::<Vec<_>>();
        assert_eq!(keys(&n), [10, 15]);
        assert_eq!(keys(&r), [20, 30, 40]);
        assert_eq!(n.sibling(&a).unwrap(), right);
    }
}
