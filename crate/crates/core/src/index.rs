//! Uniform access to every tree kind, for the key-value layer and benches.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::baselines::{AppendTree, LinearTree};
use crate::error::{Result, TreeError};
use crate::node::{KvPair, SearchMode, SLOT_BYTES};
use crate::pmem::PmArena;
use crate::tree::{CircTree, OpOutcome, TreeConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum TreeKind {
    /// Circular nodes, segment search.
    Circ,
    /// Circular nodes, linear scan over the logical range.
    CircLs,
    Linear,
    Append,
}

impl TreeKind {
    pub const ALL: [TreeKind; 4] = [TreeKind::Circ, TreeKind::CircLs, TreeKind::Linear, TreeKind::Append];

    pub fn name(self) -> &'static str {
        match self {
            TreeKind::Circ => "circ",
            TreeKind::CircLs => "circ_ls",
            TreeKind::Linear => "linear",
            TreeKind::Append => "append",
        }
    }
}

pub trait Index: Send + Sync {
    fn kind(&self) -> TreeKind;
    fn arena(&self) -> &Arc<PmArena>;
    /// Fails with [`TreeError::Duplicate`] when `k` is present.
    fn insert(&self, k: u64, v: u64) -> Result<()>;
    fn get(&self, k: u64) -> Result<Option<u64>>;
    /// Previous value, or `None` when `k` is absent.
    fn update(&self, k: u64, v: u64) -> Result<Option<u64>>;
    /// Whether `k` was present.
    fn delete(&self, k: u64) -> Result<bool>;
    fn contents(&self) -> Result<Vec<KvPair>>;
    fn splits(&self) -> u64;
    fn merges(&self) -> u64;
}

/// Check that a node of `node_bytes` holds a power-of-two slot count.
pub fn node_capacity(node_bytes: u64) -> Result<u64> {
    let cap = node_bytes / SLOT_BYTES;
    if !node_bytes.is_multiple_of(SLOT_BYTES) || !cap.is_power_of_two() {
        return Err(TreeError::NotPowerOfTwo(cap));
    }
    if cap < 4 {
        return Err(TreeError::Contract(format!("node of {node_bytes} bytes holds fewer than 4 pairs")));
    }
    Ok(cap)
}

/// Build an empty tree of `kind` on a fresh arena.
pub fn build(kind: TreeKind, arena: Arc<PmArena>, node_bytes: u64) -> Result<Box<dyn Index>> {
    let cap = node_capacity(node_bytes)?;
    Ok(match kind {
        TreeKind::Circ | TreeKind::CircLs => {
            let mut cfg = TreeConfig::new(cap);
            if kind == TreeKind::CircLs {
                cfg.mode = SearchMode::Logical;
            }
            Box::new(Circ {
                tree: CircTree::create(arena, cfg)?,
                kind,
            })
        }
        TreeKind::Linear => Box::new(LinearTree::create(arena, node_bytes)?),
        TreeKind::Append => Box::new(AppendTree::create(arena, node_bytes)?),
    })
}

struct Circ {
    tree: CircTree,
    kind: TreeKind,
}

impl Index for Circ {
    fn kind(&self) -> TreeKind {
        self.kind
    }

    fn arena(&self) -> &Arc<PmArena> {
        self.tree.arena()
    }

    fn insert(&self, k: u64, v: u64) -> Result<()> {
        self.tree.insert(k, v).map(|_| ())
    }

    fn get(&self, k: u64) -> Result<Option<u64>> {
        self.tree.get(k)
    }

    fn update(&self, k: u64, v: u64) -> Result<Option<u64>> {
        self.tree.update(k, v)
    }

    fn delete(&self, k: u64) -> Result<bool> {
        Ok(self.tree.delete(k)? != OpOutcome::NotFound)
    }

    fn contents(&self) -> Result<Vec<KvPair>> {
        self.tree.contents()
    }

    fn splits(&self) -> u64 {
        self.tree.splits()
    }

    fn merges(&self) -> u64 {
        self.tree.merges()
    }
}

macro_rules! baseline_index {
    ($t:ty, $kind:expr) => {
        impl Index for $t {
            fn kind(&self) -> TreeKind {
                $kind
            }

            fn arena(&self) -> &Arc<PmArena> {
                <$t>::arena(self)
            }

            fn insert(&self, k: u64, v: u64) -> Result<()> {
                <$t>::insert(self, k, v)
            }

            fn get(&self, k: u64) -> Result<Option<u64>> {
                <$t>::get(self, k)
            }

            fn update(&self, k: u64, v: u64) -> Result<Option<u64>> {
                <$t>::update(self, k, v)
            }

            fn delete(&self, k: u64) -> Result<bool> {
                <$t>::delete(self, k)
            }

            fn contents(&self) -> Result<Vec<KvPair>> {
                <$t>::contents(self)
            }

            fn splits(&self) -> u64 {
                <$t>::splits(self)
            }

            fn merges(&self) -> u64 {
                0
            }
        }
    };
}

baseline_index!(LinearTree, TreeKind::Linear);
baseline_index!(AppendTree, TreeKind::Append);

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::pmem::ArenaConfig;

    #[test]
    fn rejects_bad_node_sizes() {
        for nb in [0, 48, 100, 768] {
            assert!(node_capacity(nb).is_err(), "{nb}");
        }
        assert_eq!(node_capacity(4096).unwrap(), 256);
    }

    #[test]
    fn all_kinds_agree_on_a_shared_workload() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ops: Vec<(bool, u64)> = (0..10_000)
            .map(|_| (rng.random_bool(0.8), rng.random_range(1..5_000)))
            .collect();
        let mut sets = Vec::new();
        for kind in TreeKind::ALL {
            let arena = Arc::new(PmArena::new(ArenaConfig::with_capacity(32 << 20)).unwrap());
            let t = build(kind, arena, 512).unwrap();
            assert_eq!(t.kind(), kind);
            for &(ins, k) in &ops {
                if ins {
                    let _ = t.insert(k, k);
                } else {
                    t.delete(k).unwrap();
                }
            }
            sets.push(t.contents().unwrap().iter().map(|p| p.key).collect::<BTreeSet<_>>());
        }
        assert!(sets.windows(2).all(|w| w[0] == w[1]));
        assert!(!sets[0].is_empty());
    }
}
