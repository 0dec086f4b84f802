//! Comparison trees that share the arena instrumentation of [`CircTree`].
//!
//! These mirror only the leaf write and flush behavior of the designs they
//! stand in for. Both use sorted [`LinearNode`] internal nodes and a single
//! tree-wide mutex; neither supports merges or recovery.
//!
//! [`CircTree`]: crate::tree::CircTree

pub mod append;
pub mod linear;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::error::{Result, TreeError};
use crate::node::{KvPair, SLOT_BYTES};
use crate::pmem::PmArena;

pub use append::AppendNode;
pub use linear::LinearNode;

/// Outcome of reorganizing a full leaf.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitResult {
    /// `left` replaces the old leaf in its parent and `(sep, right)` is new.
    Split { left: u64, sep: u64, right: u64 },
    /// The old leaf was rewritten into a single fresh node.
    Compacted { node: u64 },
}

/// Leaf behavior plugged into [`BaselineTree`].
pub trait LeafOps: Copy + Send + Sync {
    fn alloc_leaf(arena: &PmArena, node_bytes: u64) -> Result<Self>;
    fn open_leaf(arena: &PmArena, addr: u64, node_bytes: u64) -> Self;
    fn addr(&self) -> u64;
    fn get(&self, arena: &PmArena, k: u64) -> Result<Option<u64>>;
    fn is_full(&self, arena: &PmArena) -> Result<bool>;
    fn insert(&self, arena: &PmArena, k: u64, v: u64) -> Result<()>;
    fn update(&self, arena: &PmArena, k: u64, v: u64) -> Result<Option<u64>>;
    fn delete(&self, arena: &PmArena, k: u64) -> Result<bool>;
    fn pairs(&self, arena: &PmArena) -> Result<Vec<KvPair>>;
    fn sibling(&self, arena: &PmArena) -> Result<u64>;
    fn set_sibling(&self, arena: &PmArena, s: u64) -> Result<()>;
    fn split(&self, arena: &PmArena, new: Option<KvPair>) -> Result<SplitResult>;
}

struct State {
    root: u64,
    height: usize,
    head: u64,
}

type Path = Vec<(LinearNode, usize)>;

/// B+-tree over leaves of kind `L`. Internal-node writes are flushed only
/// when `sync_inner` is set.
pub struct BaselineTree<L: LeafOps> {
    arena: Arc<PmArena>,
    node_bytes: u64,
    in_cap: u64,
    sync_inner: bool,
    state: Mutex<State>,
    splits: AtomicU64,
    _leaf: std::marker::PhantomData<L>,
}

pub type LinearTree = BaselineTree<LinearNode>;
pub type AppendTree = BaselineTree<AppendNode>;

impl LinearTree {
    pub fn create(arena: Arc<PmArena>, node_bytes: u64) -> Result<Self> {
        BaselineTree::with_options(arena, node_bytes, true)
    }
}

impl AppendTree {
    pub fn create(arena: Arc<PmArena>, node_bytes: u64) -> Result<Self> {
        BaselineTree::with_options(arena, node_bytes, false)
    }
}

impl<L: LeafOps> BaselineTree<L> {
    pub fn with_options(arena: Arc<PmArena>, node_bytes: u64, sync_inner: bool) -> Result<Self> {
        let in_cap = node_bytes / SLOT_BYTES;
        if in_cap < 4 {
            return Err(TreeError::Contract(format!("node of {node_bytes} bytes is too small")));
        }
        if arena.alloc_cursor() == 0 {
            // handle 0 terminates sibling chains
            arena.alloc(arena.line_size(), arena.line_size())?;
        }
        let leaf = L::alloc_leaf(&arena, node_bytes)?;
        Ok(Self {
            node_bytes,
            in_cap,
            sync_inner,
            state: Mutex::new(State {
                root: leaf.addr(),
                height: 0,
                head: leaf.addr(),
            }),
            splits: AtomicU64::new(0),
            arena,
            _leaf: std::marker::PhantomData,
        })
    }

    pub fn arena(&self) -> &Arc<PmArena> {
        &self.arena
    }

    pub fn splits(&self) -> u64 {
        self.splits.load(Ordering::Relaxed)
    }

    pub fn height(&self) -> usize {
        self.state.lock().height
    }

    fn inner(&self, addr: u64) -> LinearNode {
        LinearNode::open(&self.arena, addr, self.in_cap)
    }

    fn leaf(&self, addr: u64) -> L {
        L::open_leaf(&self.arena, addr, self.node_bytes)
    }

    fn descend(&self, st: &State, k: u64) -> Result<(L, Path)> {
        let mut path = Vec::with_capacity(st.height);
        let mut cur = st.root;
        for _ in 0..st.height {
            let n = self.inner(cur);
            let (child, idx) = n.child_for(&self.arena, k)?;
            path.push((n, idx));
            cur = child;
        }
        Ok((self.leaf(cur), path))
    }

    /// The leaf immediately left of the one reached through `path`.
    fn predecessor(&self, st: &State, path: &Path) -> Result<Option<L>> {
        let Some(depth) = path.iter().rposition(|&(_, idx)| idx > 0) else {
            return Ok(None);
        };
        let (n, idx) = path[depth];
        let mut cur = n.child(&self.arena, idx - 1)?;
        for _ in depth + 1..st.height {
            let n = self.inner(cur);
            cur = n.child(&self.arena, n.count(&self.arena)? as usize)?;
        }
        Ok(Some(self.leaf(cur)))
    }

    /// Point whatever referenced `old` (parent slot, root, predecessor
    /// sibling, chain head) at `new`.
    fn replace_leaf(&self, st: &mut State, path: &Path, old: L, new: u64) -> Result<()> {
        if new == old.addr() {
            return Ok(());
        }
        match self.predecessor(st, path)? {
            Some(p) => p.set_sibling(&self.arena, new)?,
            None => st.head = new,
        }
        match path.last() {
            Some(&(parent, idx)) => parent.set_child(&self.arena, idx, new, self.sync_inner)?,
            None => st.root = new,
        }
        Ok(())
    }

    fn reorganize(&self, st: &mut State, leaf: L, path: Path, new: Option<KvPair>) -> Result<()> {
        match leaf.split(&self.arena, new)? {
            SplitResult::Compacted { node } => self.replace_leaf(st, &path, leaf, node),
            SplitResult::Split { left, sep, right } => {
                self.splits.fetch_add(1, Ordering::Relaxed);
                self.replace_leaf(st, &path, leaf, left)?;
                self.post(st, path, left, sep, right)
            }
        }
    }

    /// Add separator `(sep, right)` above `left`, splitting internal nodes
    /// and growing the root as needed.
    fn post(&self, st: &mut State, mut path: Path, left: u64, sep: u64, right: u64) -> Result<()> {
        let sync = self.sync_inner;
        let Some((parent, _)) = path.pop() else {
            let root = LinearNode::alloc(&self.arena, self.in_cap, st.height as u64 + 1, sync)?;
            root.set_leftmost(&self.arena, left, sync)?;
            root.insert(&self.arena, sep, right, sync)?;
            st.root = root.addr();
            st.height += 1;
            return Ok(());
        };
        if parent.count(&self.arena)? < self.in_cap {
            return parent.insert(&self.arena, sep, right, sync);
        }
        let new = KvPair::new(sep, right);
        let mut all = parent.pairs(&self.arena)?;
        let at = all.partition_point(|p| p.key < sep);
        all.insert(at, new);
        let p = all.len() / 2;
        let promoted = all[p];
        let level = parent.level(&self.arena)?;
        let sib = LinearNode::alloc(&self.arena, self.in_cap, level, sync)?;
        sib.set_leftmost(&self.arena, promoted.value, sync)?;
        sib.fill(&self.arena, &all[p + 1..], sync)?;
        let kept = all[..p].iter().filter(|q| q.key != sep).count() as u64;
        parent.truncate(&self.arena, kept, sync)?;
        if sep < promoted.key {
            parent.insert(&self.arena, sep, right, sync)?;
        }
        self.post(st, path, parent.addr(), promoted.key, sib.addr())
    }

    pub fn insert(&self, k: u64, v: u64) -> Result<()> {
        if v == 0 {
            return Err(TreeError::NullValue);
        }
        let mut st = self.state.lock();
        let (leaf, path) = self.descend(&st, k)?;
        if leaf.get(&self.arena, k)?.is_some() {
            return Err(TreeError::Duplicate(k));
        }
        if !leaf.is_full(&self.arena)? {
            return leaf.insert(&self.arena, k, v);
        }
        self.reorganize(&mut st, leaf, path, Some(KvPair::new(k, v)))
    }

    pub fn get(&self, k: u64) -> Result<Option<u64>> {
        let st = self.state.lock();
        let (leaf, _) = self.descend(&st, k)?;
        leaf.get(&self.arena, k)
    }

    pub fn update(&self, k: u64, v: u64) -> Result<Option<u64>> {
        if v == 0 {
            return Err(TreeError::NullValue);
        }
        self.retry_full(k, |leaf| leaf.update(&self.arena, k, v))
    }

    pub fn delete(&self, k: u64) -> Result<bool> {
        self.retry_full(k, |leaf| leaf.delete(&self.arena, k))
    }

    /// Run `op` on the leaf for `k`, reorganizing it once if it has no room.
    fn retry_full<T>(&self, k: u64, op: impl Fn(&L) -> Result<T>) -> Result<T> {
        let mut st = self.state.lock();
        let (leaf, path) = self.descend(&st, k)?;
        match op(&leaf) {
            Err(TreeError::MustSplit) => {
                self.reorganize(&mut st, leaf, path, None)?;
                let (leaf, _) = self.descend(&st, k)?;
                op(&leaf)
            }
            r => r,
        }
    }

    /// All pairs in key order, following the leaf chain.
    pub fn contents(&self) -> Result<Vec<KvPair>> {
        let st = self.state.lock();
        let mut out = Vec::new();
        let mut cur = st.head;
        while cur != 0 {
            let leaf = self.leaf(cur);
            out.extend(leaf.pairs(&self.arena)?);
            cur = leaf.sibling(&self.arena)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::pmem::ArenaConfig;

    fn arena() -> Arc<PmArena> {
        Arc::new(PmArena::new(ArenaConfig::with_capacity(64 << 20)).unwrap())
    }

    fn run_oracle<L: LeafOps>(tree: &BaselineTree<L>, seed: u64, ops: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut oracle = BTreeMap::new();
        for _ in 0..ops {
            let k = rng.random_range(1..2_000u64);
            match rng.random_range(0..4) {
                0 | 1 => {
                    let r = tree.insert(k, k + 7);
                    if oracle.insert(k, k + 7).is_some() {
                        assert!(matches!(r, Err(TreeError::Duplicate(_))));
                    } else {
                        r.unwrap();
                    }
                }
                2 => assert_eq!(tree.delete(k).unwrap(), oracle.remove(&k).is_some()),
                _ => assert_eq!(tree.get(k).unwrap(), oracle.get(&k).copied()),
            }
        }
        let got: Vec<(u64, u64)> = tree.contents().unwrap().iter().map(|p| (p.key, p.value)).collect();
        let want: Vec<(u64, u64)> = oracle.into_iter().collect();
        assert_eq!(got.len(), want.len());
        assert!(got == want, "contents diverge from the oracle");
    }

    #[test]
    fn linear_tree_matches_oracle() {
        for nb in [128, 512, 4096] {
            let t = LinearTree::create(arena(), nb).unwrap();
            run_oracle(&t, nb, 20_000);
            if nb == 128 {
                assert!(t.height() >= 2);
            }
        }
    }

    #[test]
    fn append_tree_matches_oracle() {
        for nb in [128, 512, 4096] {
            let t = AppendTree::create(arena(), nb).unwrap();
            run_oracle(&t, nb + 1, 20_000);
            if nb == 128 {
                assert!(t.height() >= 2);
            }
        }
    }

    #[test]
    fn descending_fill_of_one_linear_node_shifts_32640() {
        let t = LinearTree::create(arena(), 4096).unwrap();
        for k in (1..=256).rev() {
            t.insert(k, k).unwrap();
        }
        assert_eq!(t.splits(), 0);
        assert_eq!(t.arena().stats().shift_count, 32_640);
    }

    #[test]
    fn append_inner_nodes_are_not_flushed() {
        let a = arena();
        let t = AppendTree::create(a.clone(), 512).unwrap();
        for k in 1..=21 {
            t.insert(k, k).unwrap();
        }
        let before = a.stats().flush_count;
        t.insert(22, 22).unwrap();
        assert_eq!(t.splits(), 1);
        assert!(t.height() == 1);
        // two fresh leaves and their headers; the new root costs nothing
        let lines = |n: u64| (n * 24).div_ceil(64);
        assert_eq!(a.stats().flush_count - before, lines(11) + lines(11) + 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn single_linear_insert_shifts_greater_keys(
            keys in proptest::collection::btree_set(1u64..10_000, 1..64),
            k in 1u64..10_000,
        ) {
            prop_assume!(!keys.contains(&k));
            let a = arena();
            let n = LinearNode::alloc(&a, 64, 0, true).unwrap();
            for &x in &keys {
                n.insert(&a, x, x, true).unwrap();
            }
            let before = a.stats().shift_count;
            n.insert(&a, k, k, true).unwrap();
            let greater = keys.iter().filter(|&&x| x > k).count() as u64;
            prop_assert_eq!(a.stats().shift_count - before, greater);
        }
    }
}
