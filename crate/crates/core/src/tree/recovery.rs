//! Bottom-up repair of a tree image left behind by a crash.
//!
//! Pass order: reset lock words; per level, reconcile adjacent siblings that
//! share values (interrupted split or merge) and then each node's header
//! against its slots (interrupted insert or delete); walk levels again to
//! reconcile internal pointers with the level below; re-derive low fences;
//! finally clear the start flag.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::Serialize;

use super::{CircTree, Held, SB_LEAF_HEAD, SB_ROOT};
use crate::error::{Result, TreeError};
use crate::node::{CircNode, KvPair, W_LEFTMOST, W_LOCK, W_LOW, W_SIBLING};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum FixCase {
    /// Interrupted insert shift rolled back.
    InsertUndo,
    /// Completed insert whose header update was lost.
    InsertCommit,
    /// Interrupted delete completed.
    DeleteRepair,
    /// Siblings share values and both headers agree with their slots.
    SiblingConsistent,
    /// Siblings share values and one header disagrees with its slots.
    SiblingTrim,
    /// Internal pointers disagree with the level below.
    InMismatch,
    NewRoot,
    Lock,
    Scrub,
    Fence,
}

impl FixCase {
    pub fn label(self) -> &'static str {
        match self {
            FixCase::InsertUndo => "1a",
            FixCase::InsertCommit => "1b",
            FixCase::DeleteRepair => "2",
            FixCase::SiblingConsistent => "3a",
            FixCase::SiblingTrim => "3b",
            FixCase::InMismatch => "IN-mismatch",
            FixCase::NewRoot => "root",
            FixCase::Lock => "lock",
            FixCase::Scrub => "scrub",
            FixCase::Fence => "fence",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Fix {
    pub case: FixCase,
    pub node: u64,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RecoveryReport {
    pub fixes: Vec<Fix>,
}

impl RecoveryReport {
    pub fn cases(&self) -> BTreeSet<FixCase> {
        self.fixes.iter().map(|f| f.case).collect()
    }

    fn add(&mut self, case: FixCase, node: u64, detail: impl Into<String>) {
        self.fixes.push(Fix {
            case,
            node,
            detail: detail.into(),
        });
    }
}

fn corrupt<T>(m: String) -> Result<T> {
    Err(TreeError::Corruption(m))
}

struct Snapshot {
    b: u64,
    n: u64,
    raw: Vec<KvPair>,
}

impl Snapshot {
    fn take(tree: &CircTree, node: &CircNode) -> Result<Self> {
        let (b, n) = node.bn(&tree.arena)?;
        Ok(Self {
            b,
            n,
            raw: node.raw_slots(&tree.arena)?,
        })
    }

    fn in_range(&self, cap: u64, slot: u64) -> bool {
        (slot + cap - self.b) % cap < self.n
    }

    fn nonnull(&self) -> usize {
        self.raw.iter().filter(|p| !p.is_null()).count()
    }
}

impl CircTree {
    /// Repair a crashed image in place. Idempotent.
    pub fn recover(&self) -> Result<RecoveryReport> {
        let _g = self.gate.write();
        let mut rep = RecoveryReport::default();
        let a = &*self.arena;

        let heads = self.level_heads()?;
        for &head in &heads {
            for node in self.chain(head)? {
                if a.load(node.hdr + W_LOCK)? != 0 {
                    a.set_volatile(node.hdr + W_LOCK, 0)?;
                    rep.add(FixCase::Lock, node.hdr, "lock word reset");
                }
            }
        }

        for level in 0..heads.len() {
            let head = self.level_heads()?[level];
            let chain = self.chain(head)?;
            self.repair_siblings(&chain, level as u32, &mut rep)?;
            let head = self.level_heads()?[level];
            for node in self.chain(head)? {
                self.repair_node(&node, &mut rep)?;
            }
        }

        let mut level = 1;
        while level < self.level_heads()?.len() {
            self.repair_pointers(level, &mut rep)?;
            level += 1;
        }

        let root = self.root()?;
        let top = self.chain(root.hdr)?;
        if top.len() > 1 {
            let lvl = root.level(a)? + 1;
            let r = self.make_root(root.hdr, top[1].low(a)?, top[1].hdr, lvl)?;
            a.store(SB_ROOT, r.hdr)?;
            a.persist(SB_ROOT)?;
            rep.add(FixCase::NewRoot, r.hdr, "root had a right sibling");
            for extra in &top[2..] {
                self.insert_internal(lvl, extra.low(a)?, extra.hdr)?;
            }
        }

        self.repair_fences(&mut rep)?;
        self.set_start_flag(false)?;
        Ok(rep)
    }

    /// Reconcile neighbours `(x, y)` that hold the same values.
    fn repair_siblings(&self, chain: &[CircNode], level: u32, rep: &mut RecoveryReport) -> Result<()> {
        let a = &*self.arena;
        let cap = self.cap;
        let mut pred: Option<CircNode> = None;
        for w in chain.windows(2) {
            let (x, y) = (w[0], w[1]);
            let sx = Snapshot::take(self, &x)?;
            let sy = Snapshot::take(self, &y)?;
            let mut y_in: HashSet<u64> = HashSet::new();
            let mut y_out: HashSet<u64> = HashSet::new();
            for (s, p) in sy.raw.iter().enumerate() {
                if p.is_null() {
                    continue;
                }
                if sy.in_range(cap, s as u64) {
                    y_in.insert(p.value);
                } else {
                    y_out.insert(p.value);
                }
            }
            if level > 0 {
                y_in.insert(y.leftmost(a)?);
            }
            let x_in: Vec<(u64, u64)> = (0..sx.n)
                .map(|i| {
                    let s = x.slot_of(sx.b, i as i64);
                    (i, sx.raw[s as usize].value)
                })
                .filter(|&(_, v)| v != 0)
                .collect();
            let x_all: Vec<u64> = sx.raw.iter().filter(|p| !p.is_null()).map(|p| p.value).collect();
            let dup_in = x_in.iter().filter(|(_, v)| y_in.contains(v)).count();
            let dup_out = x_in.iter().filter(|(_, v)| y_out.contains(v)).count();

            if level == 0 && sx.n == 0 && x_all.iter().any(|v| y_in.contains(v)) {
                self.detach(&x, &y, pred.as_ref())?;
                rep.add(FixCase::SiblingTrim, x.hdr, "merged leaf detached after reset");
                continue;
            }
            if level == 0 && dup_in == 0 && dup_out > 0 {
                for (s, p) in sy.raw.iter().enumerate() {
                    if !p.is_null() && !sy.in_range(cap, s as u64) {
                        y.null_slot(a, s as u64)?;
                        y.persist_slot(a, s as u64)?;
                    }
                }
                rep.add(FixCase::SiblingTrim, y.hdr, "rolled back copy into sibling");
                pred = Some(x);
                continue;
            }
            if dup_in == 0 {
                pred = Some(x);
                continue;
            }
            let consistent = x_all.len() as u64 == sx.n && x_in.len() as u64 == sx.n;
            if level == 0 && consistent && dup_in == x_in.len() {
                x.set_bn(a, sx.b, 0)?;
                self.detach(&x, &y, pred.as_ref())?;
                rep.add(FixCase::SiblingConsistent, x.hdr, "merge completed");
                continue;
            }
            // interrupted split: trim the copied upper part
            let mut kept = None;
            for &(i, v) in x_in.iter().rev() {
                if y_in.contains(&v) {
                    let s = x.slot_of(sx.b, i as i64);
                    x.null_slot(a, s)?;
                    x.persist_slot(a, s)?;
                } else if kept.is_none() {
                    kept = Some(i + 1);
                }
            }
            let kept = kept.unwrap_or(0);
            if x_in.iter().take_while(|&&(i, _)| i < kept).count() as u64 != kept {
                return corrupt(format!("split node {:#x} keeps a non-prefix", x.hdr));
            }
            x.set_bn(a, sx.b, kept)?;
            let case = if consistent {
                FixCase::SiblingConsistent
            } else {
                FixCase::SiblingTrim
            };
            rep.add(case, x.hdr, format!("split trimmed to {kept} pairs"));
            pred = Some(x);
        }
        Ok(())
    }

    fn detach(&self, x: &CircNode, y: &CircNode, pred: Option<&CircNode>) -> Result<()> {
        let a = &*self.arena;
        match pred {
            Some(p) => p.set_word(a, W_SIBLING, y.hdr)?,
            None => {
                if a.load(SB_LEAF_HEAD)? != x.hdr {
                    return corrupt(format!("leaf {:#x} has no predecessor", x.hdr));
                }
                a.store(SB_LEAF_HEAD, y.hdr)?;
                a.persist(SB_LEAF_HEAD)?;
            }
        }
        Ok(())
    }

    /// Reconcile one node's header with its slots.
    fn repair_node(&self, node: &CircNode, rep: &mut RecoveryReport) -> Result<()> {
        let a = &*self.arena;
        let cap = self.cap;
        let snap = Snapshot::take(self, node)?;
        let (b, n) = (snap.b, snap.n);
        let raw = &snap.raw;
        let at = |i: i64| raw[node.slot_of(b, i) as usize];
        let count = snap.nonnull() as u64;

        let mut dups = Vec::new();
        let mut seen: HashMap<u64, u64> = HashMap::new();
        for (s, p) in raw.iter().enumerate() {
            if p.is_null() {
                continue;
            }
            if let Some(&prev) = seen.get(&p.value) {
                dups.push((prev, s as u64));
            }
            seen.insert(p.value, s as u64);
        }
        if dups.len() > 1 {
            return corrupt(format!("node {:#x} has {} duplicate values", node.hdr, dups.len()));
        }
        // as an adjacent pair (l, r) with r = l + 1 mod cap
        let dup = match dups.first() {
            None => None,
            Some(&(s1, s2)) if (s1 + 1) % cap == s2 => Some((s1, s2)),
            Some(&(s1, s2)) if (s2 + 1) % cap == s1 => Some((s2, s1)),
            Some(_) => return corrupt(format!("node {:#x} has distant duplicates", node.hdr)),
        };
        let logical = |s: u64| (s + cap - b) % cap;

        if count == n + 1 {
            if n >= cap {
                return corrupt(format!("node {:#x} over capacity", node.hdr));
            }
            let left_slot = node.slot_of(b, -1);
            let right_slot = node.slot_of(b, n as i64);
            let left = if left_slot != right_slot {
                match (!raw[left_slot as usize].is_null(), !raw[right_slot as usize].is_null()) {
                    (true, false) => true,
                    (false, true) => false,
                    _ => return corrupt(format!("node {:#x}: no unique extra slot", node.hdr)),
                }
            } else if n == 0 {
                false
            } else if let Some((l, r)) = dup {
                if l == left_slot && logical(r) == 0 {
                    true
                } else if r == right_slot && logical(l) == n - 1 {
                    false
                } else {
                    logical(l) < n / 2
                }
            } else {
                raw[left_slot as usize].key < at(0).key
            };
            match dup {
                None => {
                    let nb = if left { left_slot } else { b };
                    node.set_bn(a, nb, n + 1)?;
                    rep.add(FixCase::InsertCommit, node.hdr, format!("header set to ({nb}, {})", n + 1));
                }
                Some((l, r)) => {
                    if left {
                        let lp = raw[node.slot_of(l, -1) as usize];
                        let f = if raw[l as usize].key == raw[r as usize].key {
                            r
                        } else if raw[l as usize].key == lp.key
                            || (l == left_slot && raw[l as usize].key == 0)
                        {
                            l
                        } else {
                            r
                        };
                        let fl = if f == left_slot { -1 } else { logical(f) as i64 };
                        let mut i = fl;
                        while i >= 0 {
                            let src = self.read_slot(node, b, i - 1)?;
                            self.write_slot(node, b, i, src)?;
                            i -= 1;
                        }
                        self.write_slot(node, b, -1, KvPair::NULL)?;
                    } else {
                        let rn = raw[node.slot_of(r, 1) as usize];
                        let f = if raw[l as usize].key == raw[r as usize].key
                            || raw[r as usize].key == rn.key
                            || (r == right_slot && raw[r as usize].key == 0)
                        {
                            r
                        } else {
                            l
                        };
                        let fr = logical(f) as i64;
                        for i in fr..n as i64 {
                            let src = self.read_slot(node, b, i + 1)?;
                            self.write_slot(node, b, i, src)?;
                        }
                        self.write_slot(node, b, n as i64, KvPair::NULL)?;
                    }
                    rep.add(
                        FixCase::InsertUndo,
                        node.hdr,
                        format!("undid {} shift", if left { "left" } else { "right" }),
                    );
                }
            }
        } else if count == n && dup.is_some() {
            let (l, r) = dup.unwrap();
            let (lp, rp) = (logical(l), logical(r));
            if lp >= n || rp >= n {
                return corrupt(format!("node {:#x}: duplicate outside range", node.hdr));
            }
            if lp >= n / 2 {
                for i in lp..n - 1 {
                    let src = self.read_slot(node, b, i as i64 + 1)?;
                    self.write_slot(node, b, i as i64, src)?;
                }
                self.write_slot(node, b, n as i64 - 1, KvPair::NULL)?;
                node.set_bn(a, b, n - 1)?;
            } else {
                for i in (1..=rp).rev() {
                    let src = self.read_slot(node, b, i as i64 - 1)?;
                    self.write_slot(node, b, i as i64, src)?;
                }
                self.write_slot(node, b, 0, KvPair::NULL)?;
                node.set_bn(a, node.slot_of(b, 1), n - 1)?;
            }
            rep.add(FixCase::DeleteRepair, node.hdr, "completed interrupted shift");
        } else if dup.is_some() {
            return corrupt(format!("node {:#x}: duplicate with count {count} vs {n}", node.hdr));
        } else if count < n {
            let outside = raw
                .iter()
                .enumerate()
                .any(|(s, p)| !p.is_null() && !snap.in_range(cap, s as u64));
            if outside {
                return corrupt(format!("node {:#x}: pairs outside a short range", node.hdr));
            }
            if count == n - 1 && at(0).is_null() {
                node.set_bn(a, node.slot_of(b, 1), n - 1)?;
                rep.add(FixCase::DeleteRepair, node.hdr, "head cleared");
            } else {
                let prefix = (0..n as i64).take_while(|&i| !at(i).is_null()).count() as u64;
                if prefix != count {
                    return corrupt(format!("node {:#x}: valid pairs are not contiguous", node.hdr));
                }
                node.set_bn(a, b, prefix)?;
                let case = if count == n - 1 {
                    FixCase::DeleteRepair
                } else {
                    FixCase::SiblingTrim
                };
                rep.add(case, node.hdr, format!("header trimmed to {prefix}"));
            }
        } else if count != n {
            return corrupt(format!("node {:#x}: {count} pairs for header {n}", node.hdr));
        }

        // post-condition: range valid, others null with zero keys
        let snap = Snapshot::take(self, node)?;
        for (s, p) in snap.raw.iter().enumerate() {
            let inside = snap.in_range(cap, s as u64);
            if inside && p.is_null() {
                return corrupt(format!("node {:#x}: hole at slot {s}", node.hdr));
            }
            if !inside && !p.is_null() {
                return corrupt(format!("node {:#x}: stray pair at slot {s}", node.hdr));
            }
            if !inside && p.key != 0 {
                node.null_slot(a, s as u64)?;
                node.persist_slot(a, s as u64)?;
                rep.add(FixCase::Scrub, node.hdr, format!("cleared key at slot {s}"));
            }
        }
        let view = node.logical_view(a)?;
        if view.windows(2).any(|w| w[0].key >= w[1].key) {
            return corrupt(format!("node {:#x}: keys out of order", node.hdr));
        }
        Ok(())
    }

    fn read_slot(&self, node: &CircNode, b: u64, i: i64) -> Result<KvPair> {
        node.slot(&self.arena, node.slot_of(b, i))
    }

    fn write_slot(&self, node: &CircNode, b: u64, i: i64, p: KvPair) -> Result<()> {
        let s = node.slot_of(b, i);
        node.move_pair(&self.arena, s, p)?;
        node.persist_slot(&self.arena, s)
    }

    /// Make the pointers of `level` agree with the chain of `level - 1`.
    fn repair_pointers(&self, level: usize, rep: &mut RecoveryReport) -> Result<()> {
        let a = &*self.arena;
        let heads = self.level_heads()?;
        let below = self.chain(heads[level - 1])?;
        let ids: Vec<u64> = below.iter().map(|n| n.hdr).collect();
        let set: HashSet<u64> = ids.iter().copied().collect();
        let follow = |mut h: u64| -> Result<u64> {
            for _ in 0..=self.max_nodes() {
                if set.contains(&h) {
                    return Ok(h);
                }
                if h == 0 {
                    break;
                }
                h = self.node(h)?.sibling(a)?;
            }
            corrupt(format!("stale pointer {h:#x} leads nowhere"))
        };
        for p in self.chain(heads[level])? {
            let lm = p.leftmost(a)?;
            if !set.contains(&lm) {
                let to = follow(lm)?;
                p.set_word(a, W_LEFTMOST, to)?;
                rep.add(FixCase::InMismatch, p.hdr, format!("leftmost {lm:#x} -> {to:#x}"));
            }
            for (pos, pair) in p.logical_view(a)?.iter().enumerate() {
                if !set.contains(&pair.value) {
                    let to = follow(pair.value)?;
                    p.update_at(a, pos as u64, to)?;
                    rep.add(FixCase::InMismatch, p.hdr, format!("child {:#x} -> {to:#x}", pair.value));
                }
            }
            loop {
                let kids = p.children(a)?;
                let Some(i) = (1..kids.len()).find(|&i| kids[i] == kids[i - 1]) else {
                    break;
                };
                p.delete_at(a, i as u64 - 1)?;
                rep.add(FixCase::InMismatch, p.hdr, format!("dropped repeated child {:#x}", kids[i]));
            }
        }
        let mut referenced = HashSet::new();
        for p in self.chain(heads[level])? {
            referenced.extend(p.children(a)?);
        }
        for x in below.iter().filter(|x| !referenced.contains(&x.hdr)) {
            let low = x.low(a)?;
            self.insert_internal(level as u32, low, x.hdr)?;
            rep.add(FixCase::InMismatch, x.hdr, format!("posted missing child with low {low}"));
        }
        Ok(())
    }

    /// Insert `(key, child)` into the level-`level` node covering `key`.
    fn insert_internal(&self, level: u32, key: u64, child: u64) -> Result<()> {
        let p = self.locate_at_level(key, level)?;
        let (_, n) = p.bn(&self.arena)?;
        if n + 1 < self.cap {
            p.insert_with(&self.arena, key, child, self.mode)?;
            return Ok(());
        }
        let mut held = Held {
            tree: self,
            nodes: Vec::new(),
        };
        self.split(p, level, KvPair::new(key, child), Vec::new(), &mut held)
    }

    /// Derive every low fence from the separators above it.
    fn repair_fences(&self, rep: &mut RecoveryReport) -> Result<()> {
        let a = &*self.arena;
        let root = self.root()?;
        if root.low(a)? != 0 {
            root.set_word(a, W_LOW, 0)?;
            rep.add(FixCase::Fence, root.hdr, "root low reset");
        }
        let heads = self.level_heads()?;
        for level in (1..heads.len()).rev() {
            for p in self.chain(heads[level])? {
                let mut expect = p.low(a)?;
                let lm = p.leftmost(a)?;
                let view = p.logical_view(a)?;
                for (c, k) in std::iter::once((lm, None)).chain(view.iter().map(|q| (q.value, Some(q.key)))) {
                    if let Some(k) = k {
                        expect = k;
                    }
                    let child = self.node(c)?;
                    if child.low(a)? != expect {
                        child.set_word(a, W_LOW, expect)?;
                        rep.add(FixCase::Fence, c, format!("low fence set to {expect}"));
                    }
                }
            }
        }
        Ok(())
    }
}
