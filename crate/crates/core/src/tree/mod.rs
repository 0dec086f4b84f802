//! A B+-tree of circular nodes with B-link right siblings.
//!
//! All durable state hangs off a superblock at arena offset 0:
//!
//! | offset | contents |
//! |--------|----------|
//! | 0  | magic |
//! | 8  | root node handle |
//! | 16 | start flag (one byte) |
//! | 24 | node capacity |
//! | 32 | leftmost leaf handle |

mod recovery;

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::Serialize;

use crate::error::{Result, TreeError};
use crate::node::{CircNode, KvPair, Search, SearchMode, W_LEFTMOST, W_LOCK, W_LOW, W_SIBLING};
use crate::pmem::PmArena;

pub use recovery::{Fix, FixCase, RecoveryReport};

pub const SB_MAGIC: u64 = 0x4545_5254_4352_4943;
pub const SB_MAGIC_OFF: u64 = 0;
pub const SB_ROOT: u64 = 8;
pub const SB_FLAG: u64 = 16;
pub const SB_CAP: u64 = 24;
pub const SB_LEAF_HEAD: u64 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum OpOutcome {
    Inserted,
    Deleted,
    Found(u64),
    NotFound,
    SplitPerformed,
    MergePerformed,
}

#[derive(Clone, Copy, Debug)]
pub struct TreeConfig {
    pub cap: u64,
    pub mode: SearchMode,
    pub merges: bool,
}

impl TreeConfig {
    pub fn new(cap: u64) -> Self {
        Self {
            cap,
            mode: SearchMode::Segment,
            merges: true,
        }
    }
}

/// Shape summary returned by [`CircTree::check_structure`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Shape {
    pub height: u32,
    pub leaves: usize,
    pub internals: usize,
    pub keys: usize,
}

pub struct CircTree {
    arena: Arc<PmArena>,
    cap: u64,
    mode: SearchMode,
    merges_enabled: bool,
    gate: RwLock<()>,
    root_lock: Mutex<()>,
    splits: AtomicU64,
    merges: AtomicU64,
}

impl std::fmt::Debug for CircTree {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CircTree")
            .field("cap", &self.cap)
            .field("mode", &self.mode)
            .finish()
    }
}

/// Nodes locked by a structure modification, released in reverse order.
struct Held<'a> {
    tree: &'a CircTree,
    nodes: Vec<CircNode>,
}

impl Drop for Held<'_> {
    fn drop(&mut self) {
        while let Some(n) = self.nodes.pop() {
            self.tree.unlock(&n);
        }
    }
}

impl CircTree {
    /// Format a fresh arena: superblock at offset 0 and an empty root leaf.
    pub fn create(arena: Arc<PmArena>, config: TreeConfig) -> Result<Self> {
        if config.cap < 4 || !config.cap.is_power_of_two() {
            return Err(TreeError::NotPowerOfTwo(config.cap));
        }
        if arena.alloc_cursor() != 0 {
            return Err(TreeError::Contract("tree must be created on an empty arena".into()));
        }
        let line = arena.line_size();
        let sb = arena.alloc(line.max(64), line)?;
        debug_assert_eq!(sb.offset, 0);
        let root = CircNode::alloc(&arena, config.cap, 0)?;
        arena.store(SB_MAGIC_OFF, SB_MAGIC)?;
        arena.store(SB_ROOT, root.hdr)?;
        arena.store(SB_CAP, config.cap)?;
        arena.store(SB_LEAF_HEAD, root.hdr)?;
        arena.write_abs(SB_FLAG, &[1])?;
        for off in (0..40).step_by(line as usize) {
            arena.flush(off)?;
        }
        arena.fence();
        Ok(Self::from_parts(arena, config))
    }

    fn from_parts(arena: Arc<PmArena>, config: TreeConfig) -> Self {
        Self {
            arena,
            cap: config.cap,
            mode: config.mode,
            merges_enabled: config.merges,
            gate: RwLock::new(()),
            root_lock: Mutex::new(()),
            splits: AtomicU64::new(0),
            merges: AtomicU64::new(0),
        }
    }

    /// Open a formatted arena. Runs recovery when the start flag is still
    /// set, then sets it.
    pub fn open(
        arena: Arc<PmArena>,
        mode: SearchMode,
        merges: bool,
    ) -> Result<(Self, Option<RecoveryReport>)> {
        if arena.capacity() < 64 {
            return Err(TreeError::Corruption("arena too small for a superblock".into()));
        }
        if arena.load(SB_MAGIC_OFF)? != SB_MAGIC {
            return Err(TreeError::Corruption("superblock magic mismatch".into()));
        }
        let cap = arena.load(SB_CAP)?;
        if !(4..=1 << 20).contains(&cap) || !cap.is_power_of_two() {
            return Err(TreeError::Corruption(format!("bad node capacity {cap}")));
        }
        let tree = Self::from_parts(arena, TreeConfig { cap, mode, merges });
        let report = if tree.start_flag()? {
            Some(tree.recover()?)
        } else {
            None
        };
        tree.set_start_flag(true)?;
        Ok((tree, report))
    }

    /// Clear the start flag; a later `open` skips recovery.
    pub fn close(self) -> Result<()> {
        self.set_start_flag(false)
    }

    pub fn start_flag(&self) -> Result<bool> {
        let mut b = [0u8];
        self.arena.read_abs(SB_FLAG, &mut b)?;
        Ok(b[0] != 0)
    }

    fn set_start_flag(&self, on: bool) -> Result<()> {
        self.arena.write_abs(SB_FLAG, &[u8::from(on)])?;
        self.arena.persist(SB_FLAG)?;
        Ok(())
    }

    pub fn arena(&self) -> &Arc<PmArena> {
        &self.arena
    }

    pub fn cap(&self) -> u64 {
        self.cap
    }

    pub fn mode(&self) -> SearchMode {
        self.mode
    }

    pub fn splits(&self) -> u64 {
        self.splits.load(Ordering::Relaxed)
    }

    pub fn merges(&self) -> u64 {
        self.merges.load(Ordering::Relaxed)
    }

    fn node(&self, hdr: u64) -> Result<CircNode> {
        CircNode::open(&self.arena, hdr, self.cap)
    }

    pub fn root(&self) -> Result<CircNode> {
        self.node(self.arena.load(SB_ROOT)?)
    }

    pub fn height(&self) -> Result<u32> {
        Ok(self.root()?.level(&self.arena)? + 1)
    }

    fn lock(&self, node: &CircNode) {
        let addr = node.hdr + W_LOCK;
        let mut spins = 0u32;
        while !self.arena.cas_volatile(addr, 0, 1).unwrap_or(true) {
            spins += 1;
            if spins.is_multiple_of(64) {
                std::thread::yield_now();
            } else {
                std::hint::spin_loop();
            }
        }
    }

    fn unlock(&self, node: &CircNode) {
        let _ = self.arena.set_volatile(node.hdr + W_LOCK, 0);
    }

    /// Follow right siblings while `k` belongs further right. `node` is
    /// locked on entry; the returned node is locked.
    fn move_right(&self, mut node: CircNode, k: u64) -> Result<CircNode> {
        loop {
            let sib = node.sibling(&self.arena)?;
            if sib == 0 {
                return Ok(node);
            }
            let s = self.node(sib)?;
            if k < s.low(&self.arena)? {
                return Ok(node);
            }
            self.unlock(&node);
            self.lock(&s);
            node = s;
        }
    }

    /// Descend to the leaf covering `k`, returning it locked together with
    /// the internal nodes visited.
    fn find_leaf(&self, k: u64) -> Result<(CircNode, Vec<u64>)> {
        let mut node = self.root()?;
        let mut path = Vec::new();
        loop {
            self.lock(&node);
            node = self.move_right(node, k)?;
            let level = node.level(&self.arena);
            let child = match level {
                Ok(0) => return Ok((node, path)),
                Ok(_) => node.child_for(&self.arena, k, self.mode),
                Err(e) => Err(e),
            };
            self.unlock(&node);
            path.push(node.hdr);
            node = self.node(child?)?;
        }
    }

    pub fn search(&self, k: u64) -> Result<OpOutcome> {
        let _g = self.gate.read();
        let (leaf, _) = self.find_leaf(k)?;
        let r = leaf.search_with(&self.arena, k, self.mode, None);
        self.unlock(&leaf);
        Ok(match r? {
            Search::Found { value, .. } => OpOutcome::Found(value),
            Search::NotFound { .. } => OpOutcome::NotFound,
        })
    }

    pub fn get(&self, k: u64) -> Result<Option<u64>> {
        Ok(match self.search(k)? {
            OpOutcome::Found(v) => Some(v),
            _ => None,
        })
    }

    /// Crash recovery tells a shifted pair from its stale copy by value, so
    /// live values must be distinct, as record pointers are.
    pub fn insert(&self, k: u64, v: u64) -> Result<OpOutcome> {
        if v == 0 {
            return Err(TreeError::NullValue);
        }
        let _g = self.gate.read();
        let (leaf, path) = self.find_leaf(k)?;
        let mut held = Held {
            tree: self,
            nodes: vec![leaf],
        };
        let (_, n) = leaf.bn(&self.arena)?;
        if let Search::Found { .. } = leaf.search_with(&self.arena, k, self.mode, None)? {
            return Err(TreeError::Duplicate(k));
        }
        if n < self.cap {
            leaf.insert_with(&self.arena, k, v, self.mode)?;
            return Ok(OpOutcome::Inserted);
        }
        self.split(leaf, 0, KvPair::new(k, v), path, &mut held)?;
        Ok(OpOutcome::SplitPerformed)
    }

    /// Overwrite the value of an existing key; returns the previous value.
    pub fn update(&self, k: u64, v: u64) -> Result<Option<u64>> {
        if v == 0 {
            return Err(TreeError::NullValue);
        }
        let _g = self.gate.read();
        let (leaf, _) = self.find_leaf(k)?;
        let held = Held {
            tree: self,
            nodes: vec![leaf],
        };
        let r = match leaf.search_with(&self.arena, k, self.mode, None)? {
            Search::Found { pos, .. } => Some(leaf.update_at(&self.arena, pos, v)?),
            Search::NotFound { .. } => None,
        };
        drop(held);
        Ok(r)
    }

    pub fn delete(&self, k: u64) -> Result<OpOutcome> {
        let n_after = {
            let _g = self.gate.read();
            let (leaf, _) = self.find_leaf(k)?;
            let _held = Held {
                tree: self,
                nodes: vec![leaf],
            };
            match leaf.search_with(&self.arena, k, self.mode, None)? {
                Search::NotFound { .. } => return Ok(OpOutcome::NotFound),
                Search::Found { pos, .. } => leaf.delete_at(&self.arena, pos)?,
            };
            leaf.bn(&self.arena)?.1
        };
        if self.merges_enabled && n_after < self.cap / 2 && self.try_merge(k)? {
            return Ok(OpOutcome::MergePerformed);
        }
        Ok(OpOutcome::Deleted)
    }

    /// All pairs with `lo <= key <= hi`, in key order.
    pub fn scan(&self, lo: u64, hi: u64) -> Result<Vec<KvPair>> {
        let mut out: Vec<KvPair> = Vec::new();
        if lo > hi {
            return Ok(out);
        }
        let _g = self.gate.read();
        let (mut leaf, _) = self.find_leaf(lo)?;
        loop {
            let view = leaf.logical_view(&self.arena);
            let sib = leaf.sibling(&self.arena);
            self.unlock(&leaf);
            let last = out.last().map(|p| p.key);
            for p in view? {
                if p.key >= lo && p.key <= hi && last.is_none_or(|l| p.key > l) {
                    out.push(p);
                }
            }
            let sib = sib?;
            if sib == 0 {
                return Ok(out);
            }
            let next = self.node(sib)?;
            if next.low(&self.arena)? > hi {
                return Ok(out);
            }
            self.lock(&next);
            leaf = next;
        }
    }

    /// Split the full, locked `node` while inserting `new`, then post the
    /// new right sibling to the parent level.
    fn split(
        &self,
        node: CircNode,
        level: u32,
        new: KvPair,
        mut path: Vec<u64>,
        held: &mut Held<'_>,
    ) -> Result<()> {
        let a = &*self.arena;
        let cap = self.cap;
        let (b, _) = node.bn(a)?;
        let view = node.logical_view(a)?;
        let q = view.partition_point(|p| p.key < new.key);
        let mut comb = view.clone();
        comb.insert(q, new);
        let (left_len, right_start, promoted) = if level == 0 {
            if q >= (cap / 2) as usize {
                ((cap / 2) as usize, (cap / 2) as usize, None)
            } else {
                ((cap / 2 + 1) as usize, (cap / 2 + 1) as usize, None)
            }
        } else {
            let p = (cap / 2) as usize;
            (p, p + 1, Some(comb[p]))
        };
        let right = &comb[right_start..];
        let boundary = promoted.map_or(right[0].key, |p| p.key);
        let kept = view.partition_point(|p| p.key < boundary);

        // copy the greater half into a fresh, locked sibling
        let s = CircNode::alloc(a, cap, level)?;
        a.cas_volatile(s.hdr + W_LOCK, 0, 1)?;
        held.nodes.push(s);
        if let Some(p) = promoted {
            a.store(s.hdr + W_LEFTMOST, p.value)?;
        }
        let mut last_line = None;
        for (i, p) in right.iter().enumerate() {
            s.put_pair(a, i as u64, *p)?;
            let line = s.slot_addr(i as u64) / a.line_size();
            if last_line != Some(line) {
                if let Some(l) = last_line {
                    a.flush(l * a.line_size())?;
                }
                last_line = Some(line);
            }
        }
        if let Some(l) = last_line {
            a.flush(l * a.line_size())?;
        }
        a.store(s.hdr + W_SIBLING, node.sibling(a)?)?;
        a.store(s.hdr + W_LOW, boundary)?;
        a.store(s.hdr + crate::node::W_BN, crate::node::pack_bn(0, right.len() as u32))?;
        s.flush_header(a)?;
        a.fence();

        // publish, then trim the old node
        node.set_word(a, W_SIBLING, s.hdr)?;
        for i in (kept..view.len()).rev() {
            let slot = node.slot_of(b, i as i64);
            node.null_slot(a, slot)?;
            if i == kept || node.slot_addr(slot).is_multiple_of(a.line_size()) {
                node.persist_slot(a, slot)?;
            }
        }
        node.set_bn(a, b, kept as u64)?;
        if q < left_len {
            node.insert_with(a, new.key, new.value, self.mode)?;
        }
        self.splits.fetch_add(1, Ordering::Relaxed);
        self.post_to_parent(node, level, boundary, s.hdr, &mut path, held)
    }

    fn post_to_parent(
        &self,
        child: CircNode,
        level: u32,
        sep: u64,
        right: u64,
        path: &mut Vec<u64>,
        held: &mut Held<'_>,
    ) -> Result<()> {
        let parent = match path.pop() {
            Some(p) => self.node(p)?,
            None => {
                {
                    let _r = self.root_lock.lock();
                    let root = self.arena.load(SB_ROOT)?;
                    if root == child.hdr {
                        let r = self.make_root(child.hdr, sep, right, level + 1)?;
                        self.arena.store(SB_ROOT, r.hdr)?;
                        self.arena.persist(SB_ROOT)?;
                        return Ok(());
                    }
                }
                self.locate_at_level(sep, level + 1)?
            }
        };
        self.lock(&parent);
        let parent = self.move_right(parent, sep)?;
        held.nodes.push(parent);
        let (_, n) = parent.bn(&self.arena)?;
        if n + 1 < self.cap {
            parent.insert_with(&self.arena, sep, right, self.mode)?;
            return Ok(());
        }
        self.split(parent, level + 1, KvPair::new(sep, right), std::mem::take(path), held)
    }

    /// Build and persist a root over `left` and `right`; the caller swings
    /// the superblock.
    fn make_root(&self, left: u64, sep: u64, right: u64, level: u32) -> Result<CircNode> {
        let a = &*self.arena;
        let r = CircNode::alloc(a, self.cap, level)?;
        a.store(r.hdr + W_LEFTMOST, left)?;
        r.put_pair(a, 0, KvPair::new(sep, right))?;
        r.persist_slot(a, 0)?;
        a.store(r.hdr + crate::node::W_BN, crate::node::pack_bn(0, 1))?;
        r.flush_header(a)?;
        a.fence();
        Ok(r)
    }

    /// Unlocked descent to the node at `level` covering `k`.
    fn locate_at_level(&self, k: u64, level: u32) -> Result<CircNode> {
        let mut node = self.root()?;
        let mut guard = 0u64;
        loop {
            guard += 1;
            if guard > self.max_nodes() {
                return Err(TreeError::Corruption("descent does not terminate".into()));
            }
            let sib = node.sibling(&self.arena)?;
            if sib != 0 {
                let s = self.node(sib)?;
                if k >= s.low(&self.arena)? {
                    node = s;
                    continue;
                }
            }
            let l = node.level(&self.arena)?;
            if l == level {
                return Ok(node);
            }
            if l < level {
                return Err(TreeError::Contract(format!("no level {level} above {l}")));
            }
            node = self.node(node.child_for(&self.arena, k, self.mode)?)?;
        }
    }

    /// Number of levels an insert of `k` would split, ignoring concurrency.
    pub fn split_depth(&self, k: u64) -> Result<u32> {
        let _g = self.gate.read();
        let top = self.root()?.level(&self.arena)?;
        let mut depth = 0;
        for level in 0..=top {
            let node = self.locate_at_level(k, level)?;
            let (_, n) = node.bn(&self.arena)?;
            let max = if level == 0 { self.cap } else { self.cap - 1 };
            if n < max {
                break;
            }
            depth += 1;
        }
        Ok(depth)
    }

    /// Whether deleting `k` would trigger a merge.
    pub fn merge_candidate(&self, k: u64) -> Result<bool> {
        let _g = self.gate.read();
        let a = &*self.arena;
        if !self.merges_enabled || self.root()?.level(a)? == 0 {
            return Ok(false);
        }
        let leaf = self.locate_at_level(k, 0)?;
        let (_, n) = leaf.bn(a)?;
        if !matches!(leaf.search(a, k)?, Search::Found { .. }) || n > self.cap / 2 {
            return Ok(false);
        }
        let sib = leaf.sibling(a)?;
        if sib == 0 {
            return Ok(false);
        }
        let r = self.node(sib)?;
        if n - 1 + r.bn(a)?.1 > self.cap {
            return Ok(false);
        }
        let parent = self.locate_at_level(k, 1)?;
        let kids = parent.children(a)?;
        Ok(kids.windows(2).any(|w| w[0] == leaf.hdr && w[1] == sib))
    }

    fn max_nodes(&self) -> u64 {
        let per = crate::node::header_bytes(self.arena.line_size()) + self.cap * 16;
        self.arena.capacity() / per + 1
    }

    /// Merge the underfull leaf covering `k` into its right sibling when both
    /// share a parent and the sibling has room.
    fn try_merge(&self, k: u64) -> Result<bool> {
        let _g = self.gate.write();
        let a = &*self.arena;
        let mut path = Vec::new();
        let mut node = self.root()?;
        loop {
            node = self.unlocked_move_right(node, k)?;
            if node.level(a)? == 0 {
                break;
            }
            path.push(node);
            node = self.node(node.child_for(a, k, self.mode)?)?;
        }
        let (l, Some(parent)) = (node, path.last().copied()) else {
            return Ok(false);
        };
        let r_hdr = l.sibling(a)?;
        let (bl, nl) = l.bn(a)?;
        if r_hdr == 0 || nl >= self.cap / 2 {
            return Ok(false);
        }
        let r = self.node(r_hdr)?;
        let (br, nr) = r.bn(a)?;
        if nl + nr > self.cap {
            return Ok(false);
        }
        let kids = parent.children(a)?;
        let Some(i) = kids.iter().position(|&c| c == l.hdr) else {
            return Ok(false);
        };
        if kids.get(i + 1) != Some(&r_hdr) {
            return Ok(false);
        }
        let pred = if a.load(SB_LEAF_HEAD)? == l.hdr {
            None
        } else {
            Some(self.predecessor(&l)?)
        };

        // copy into the free slots left of the sibling's base
        let pairs = l.logical_view(a)?;
        let m = pairs.len() as i64;
        let mut lines = Vec::new();
        for (i, p) in pairs.iter().enumerate() {
            let slot = r.slot_of(br, i as i64 - m);
            r.put_pair(a, slot, *p)?;
            let line = r.slot_addr(slot) / a.line_size();
            if !lines.contains(&line) {
                lines.push(line);
            }
        }
        for line in lines {
            a.flush(line * a.line_size())?;
        }
        a.fence();
        r.set_bn(a, r.slot_of(br, -m), nr + nl)?;
        l.set_bn(a, bl, 0)?;
        match pred {
            Some(p) => p.set_word(a, W_SIBLING, r.hdr)?,
            None => {
                a.store(SB_LEAF_HEAD, r.hdr)?;
                a.persist(SB_LEAF_HEAD)?;
            }
        }
        // drop the sibling's separator, then route the merged range to it
        parent.delete_at(a, i as u64)?;
        if i == 0 {
            parent.set_word(a, W_LEFTMOST, r.hdr)?;
        } else {
            parent.update_at(a, i as u64 - 1, r.hdr)?;
        }
        r.set_word(a, W_LOW, l.low(a)?)?;
        self.merges.fetch_add(1, Ordering::Relaxed);
        Ok(true)
    }

    fn unlocked_move_right(&self, mut node: CircNode, k: u64) -> Result<CircNode> {
        for _ in 0..self.max_nodes() {
            let sib = node.sibling(&self.arena)?;
            if sib == 0 {
                return Ok(node);
            }
            let s = self.node(sib)?;
            if k < s.low(&self.arena)? {
                return Ok(node);
            }
            node = s;
        }
        Err(TreeError::Corruption("sibling chain does not terminate".into()))
    }

    /// Leaf whose sibling is `l`.
    fn predecessor(&self, l: &CircNode) -> Result<CircNode> {
        let low = l.low(&self.arena)?;
        let mut node = if low == 0 {
            self.node(self.arena.load(SB_LEAF_HEAD)?)?
        } else {
            self.locate_at_level(low - 1, 0)?
        };
        for _ in 0..self.max_nodes() {
            let sib = node.sibling(&self.arena)?;
            if sib == l.hdr {
                return Ok(node);
            }
            if sib == 0 {
                break;
            }
            node = self.node(sib)?;
        }
        Err(TreeError::Corruption(format!("no predecessor for leaf {:#x}", l.hdr)))
    }

    /// Nodes of one level in sibling order, starting from `head`.
    fn chain(&self, head: u64) -> Result<Vec<CircNode>> {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        let mut cur = head;
        while cur != 0 {
            if !seen.insert(cur) || out.len() as u64 > self.max_nodes() {
                return Err(TreeError::Corruption(format!("sibling cycle at {cur:#x}")));
            }
            let n = self.node(cur)?;
            out.push(n);
            cur = n.sibling(&self.arena)?;
        }
        Ok(out)
    }

    /// Head node of every level, index 0 being the leaves.
    fn level_heads(&self) -> Result<Vec<u64>> {
        let a = &*self.arena;
        let root = self.root()?;
        let top = root.level(a)?;
        let mut heads = vec![0; top as usize + 1];
        let mut node = root;
        for l in (0..=top).rev() {
            if node.level(a)? != l {
                return Err(TreeError::Corruption(format!(
                    "node {:#x} at level {} where {l} expected",
                    node.hdr,
                    node.level(a)?
                )));
            }
            heads[l as usize] = node.hdr;
            if l > 0 {
                node = self.node(node.leftmost(a)?)?;
            }
        }
        heads[0] = a.load(SB_LEAF_HEAD)?;
        Ok(heads)
    }

    /// Every key/value pair in key order, read through the leaf chain.
    pub fn contents(&self) -> Result<Vec<KvPair>> {
        let _g = self.gate.read();
        let head = self.arena.load(SB_LEAF_HEAD)?;
        let mut out = Vec::new();
        for leaf in self.chain(head)? {
            out.extend(leaf.logical_view(&self.arena)?);
        }
        Ok(out)
    }

    /// Verify the structural invariants of a quiescent tree.
    pub fn check_structure(&self) -> Result<Shape> {
        let _g = self.gate.write();
        let a = &*self.arena;
        let bad = |m: String| Err(TreeError::Corruption(m));
        let heads = self.level_heads()?;
        let mut shape = Shape {
            height: heads.len() as u32,
            ..Shape::default()
        };
        let mut below: Option<Vec<CircNode>> = None;
        for (lvl, &head) in heads.iter().enumerate() {
            let chain = self.chain(head)?;
            let mut prev_key: Option<u64> = None;
            for (ci, node) in chain.iter().enumerate() {
                if node.level(a)? != lvl as u32 {
                    return bad(format!("node {:#x} has wrong level", node.hdr));
                }
                if a.load(node.hdr + W_LOCK)? != 0 {
                    return bad(format!("node {:#x} left locked", node.hdr));
                }
                let (b, n) = node.bn(a)?;
                let max = if lvl == 0 { self.cap } else { self.cap - 1 };
                if n > max {
                    return bad(format!("node {:#x} holds {n} > {max}", node.hdr));
                }
                let raw = node.raw_slots(a)?;
                let low = node.low(a)?;
                if ci == 0 && low != 0 {
                    return bad(format!("head {:#x} has low fence {low}", node.hdr));
                }
                let mut vals = HashSet::new();
                for i in 0..self.cap {
                    let p = raw[node.slot_of(b, i as i64) as usize];
                    if i < n {
                        if p.is_null() {
                            return bad(format!("null pair inside node {:#x}", node.hdr));
                        }
                        if !vals.insert(p.value) {
                            return bad(format!("duplicate value in node {:#x}", node.hdr));
                        }
                        if prev_key.is_some_and(|k| p.key <= k) || p.key < low {
                            return bad(format!("key order broken at node {:#x}", node.hdr));
                        }
                        prev_key = Some(p.key);
                    } else if p != KvPair::NULL {
                        return bad(format!("non-null slot outside range in {:#x}", node.hdr));
                    }
                }
                if let Some(s) = chain.get(ci + 1) {
                    if s.low(a)? <= low && ci + 1 < chain.len() {
                        return bad(format!("low fences not increasing after {:#x}", node.hdr));
                    }
                    if prev_key.is_some_and(|k| k >= s.low(a).unwrap_or(0)) {
                        return bad(format!("key {prev_key:?} beyond fence of {:#x}", s.hdr));
                    }
                }
                if lvl == 0 {
                    shape.leaves += 1;
                    shape.keys += n as usize;
                } else {
                    shape.internals += 1;
                }
            }
            if let Some(children) = below.take() {
                let mut kids = Vec::new();
                for node in &chain {
                    let low = node.low(a)?;
                    let mut expect_low = low;
                    let (lm, view) = (node.leftmost(a)?, node.logical_view(a)?);
                    for (c, lo) in std::iter::once((lm, None))
                        .chain(view.iter().map(|p| (p.value, Some(p.key))))
                    {
                        if let Some(k) = lo {
                            expect_low = k;
                        }
                        let child = self.node(c)?;
                        if child.low(a)? != expect_low {
                            return bad(format!(
                                "child {c:#x} low {} but separator {expect_low}",
                                child.low(a)?
                            ));
                        }
                        kids.push(c);
                    }
                }
                let chain_ids: Vec<u64> = children.iter().map(|n| n.hdr).collect();
                if kids != chain_ids {
                    return bad(format!(
                        "level {} children disagree with level {} chain",
                        lvl,
                        lvl - 1
                    ));
                }
            }
            below = Some(chain);
        }
        if below.map(|c| c.len()) != Some(1) {
            return bad("root has siblings".into());
        }
        Ok(shape)
    }
}

#[cfg(test)]
mod tests;
