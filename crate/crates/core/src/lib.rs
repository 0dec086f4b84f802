//! Circular-node B+-tree on simulated persistent memory.

pub mod baselines;
pub mod bench;
pub mod error;
pub mod index;
pub mod kv;
pub mod metrics;
pub mod node;
pub mod pmem;
pub mod tree;

pub use error::{PmError, Result, TreeError};
pub use node::{circ_index, CircNode, KvPair, NodeHeader, Search, SearchMode};
pub use pmem::{ArenaConfig, CrashImage, CrashPoint, CrashPolicy, Handle, PersistOrder, PmArena, Stats};
pub use tree::{CircTree, OpOutcome, RecoveryReport, TreeConfig};
