//! Crash-injection campaigns over scripted tree operations.
//!
//! Each captured operation is replayed up to every store and flush it
//! issues. At each point the harness enumerates the durable images a crash
//! could leave (line-ordered persistence), reopens each, and checks that
//! recovery yields the tree from just before or just after the operation,
//! that the structure is sound, and that a second recovery changes nothing.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{PmError, Result, TreeError};
use crate::node::{KvPair, SearchMode};
use crate::pmem::{ArenaConfig, CrashImage, CrashPolicy, PersistOrder, PmArena};
use crate::tree::{CircTree, FixCase, TreeConfig};

pub const DEFAULT_MAX_ENUM_DIRTY: usize = 20;
const SAMPLES_PER_POINT: u64 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Script {
    InsertLeft,
    InsertRight,
    Split,
    Merge,
    DeleteEnds,
    DeleteMid,
}

impl Script {
    pub const ALL: [Script; 6] = [
        Script::InsertLeft,
        Script::InsertRight,
        Script::Split,
        Script::Merge,
        Script::DeleteEnds,
        Script::DeleteMid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Script::InsertLeft => "insert_left",
            Script::InsertRight => "insert_right",
            Script::Split => "split",
            Script::Merge => "merge",
            Script::DeleteEnds => "delete_ends",
            Script::DeleteMid => "delete_mid",
        }
    }

    /// Recovery cases the script must exercise.
    pub fn expected_cases(self) -> &'static [FixCase] {
        match self {
            Script::InsertLeft | Script::InsertRight => &[FixCase::InsertUndo, FixCase::InsertCommit],
            Script::Split | Script::Merge => &[
                FixCase::SiblingConsistent,
                FixCase::SiblingTrim,
                FixCase::InMismatch,
            ],
            Script::DeleteEnds | Script::DeleteMid => &[FixCase::DeleteRepair],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    Insert(u64),
    Delete(u64),
}

#[derive(Clone, Debug, Serialize)]
pub struct Failure {
    pub op_index: usize,
    pub op: String,
    pub point: usize,
    pub image: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct CampaignReport {
    pub script: Script,
    pub seed: u64,
    pub max_enum_dirty: usize,
    pub ops_captured: usize,
    pub points_tested: usize,
    pub points_sampled: usize,
    pub images_tested: usize,
    pub failures: Vec<Failure>,
    pub cases: BTreeMap<String, usize>,
    pub missing_cases: Vec<String>,
}

impl CampaignReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.missing_cases.is_empty()
    }
}

/// Enumeration bound, overridable through `BENCH_MAX_ENUM_DIRTY`.
pub fn max_enum_dirty_from_env() -> usize {
    std::env::var("BENCH_MAX_ENUM_DIRTY")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(DEFAULT_MAX_ENUM_DIRTY)
}

fn arena_config(max_enum_dirty: usize) -> ArenaConfig {
    ArenaConfig {
        capacity: 1 << 16,
        line_size: 64,
        persist_order: PersistOrder::LineOrdered,
        max_enum_dirty,
        ..ArenaConfig::default()
    }
}

fn apply(tree: &CircTree, step: Step) -> Result<()> {
    match step {
        Step::Insert(k) => tree.insert(k, k ^ 0xABCD).map(|_| ()),
        Step::Delete(k) => tree.delete(k).map(|_| ()),
    }
}

/// Distinct keys spaced far enough apart that gaps always exist.
fn spaced_keys(rng: &mut ChaCha8Rng, n: usize, start: u64) -> Vec<u64> {
    let mut k = start;
    (0..n)
        .map(|_| {
            k += 10_000 + rng.random_range(0..5_000);
            k
        })
        .collect()
}

fn keys(tree: &CircTree) -> Result<Vec<u64>> {
    Ok(tree.contents()?.iter().map(|p| p.key).collect())
}

/// A fresh key strictly between logical positions `i` and `i + 1` for some
/// `i` in `range`.
fn between(ks: &[u64], range: std::ops::Range<usize>, rng: &mut ChaCha8Rng) -> u64 {
    let bounds = |i: usize| {
        let lo = ks[i] + 1;
        let hi = ks.get(i + 1).copied().unwrap_or(lo + 100);
        (lo, hi)
    };
    let open: Vec<usize> = range.filter(|&i| bounds(i).1 > bounds(i).0).collect();
    assert!(!open.is_empty(), "no free key in the requested gaps");
    let (lo, hi) = bounds(open[rng.random_range(0..open.len())]);
    let third = (hi - lo) / 3;
    rng.random_range(lo + third..hi - third)
}

struct Plan {
    cap: u64,
    max_enum_dirty: usize,
    tree: CircTree,
    captured: Vec<(Step, Vec<CrashCapture>)>,
}

struct CrashCapture {
    pre: Vec<KvPair>,
    post: Vec<KvPair>,
    points: Vec<crate::pmem::CrashPoint>,
}

impl Plan {
    fn new(cap: u64, max_enum_dirty: usize) -> Result<Self> {
        let arena = Arc::new(PmArena::new(arena_config(max_enum_dirty))?);
        Ok(Self {
            cap,
            max_enum_dirty,
            tree: CircTree::create(arena, TreeConfig::new(cap))?,
            captured: Vec::new(),
        })
    }

    fn setup(&mut self, step: Step) -> Result<()> {
        apply(&self.tree, step)
    }

    fn capture(&mut self, step: Step) -> Result<()> {
        let pre = self.tree.contents()?;
        let arena = self.tree.arena().clone();
        arena.begin_capture();
        let r = apply(&self.tree, step);
        let points = arena.end_capture();
        r?;
        let post = self.tree.contents()?;
        self.captured.push((step, vec![CrashCapture { pre, post, points }]));
        Ok(())
    }
}

fn build(script: Script, seed: u64, max_enum_dirty: usize) -> Result<Plan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match script {
        Script::InsertLeft | Script::InsertRight => {
            let left = script == Script::InsertLeft;
            let mut p = Plan::new(16, max_enum_dirty)?;
            let base = spaced_keys(&mut rng, 10, 1000);
            for &k in &base {
                p.setup(Step::Insert(k))?;
            }
            // rotate the base so later shifts wrap around the array end
            for &k in if left { &base[..3] } else { &base[7..] } {
                p.setup(Step::Delete(k))?;
            }
            for round in 0..4 {
                let ks = keys(&p.tree)?;
                let n = ks.len();
                let k = match (left, round) {
                    (true, 0) => rng.random_range(ks[0] / 2..ks[0]),
                    (true, _) => between(&ks, 0..n / 2 - 1, &mut rng),
                    (false, 0) => ks[n - 1] + 1_000 + rng.random_range(0..5_000),
                    (false, _) => between(&ks, n / 2 + 1..n - 1, &mut rng),
                };
                p.capture(Step::Insert(k))?;
            }
            // one free slot left: both shift directions target it
            while keys(&p.tree)?.len() < 15 {
                let ks = keys(&p.tree)?;
                let k = if left {
                    ks[ks.len() - 1] + 1_000
                } else {
                    ks[0] - 1_000
                };
                p.setup(Step::Insert(k))?;
            }
            let ks = keys(&p.tree)?;
            let k = if left {
                between(&ks, 0..ks.len() / 2 - 1, &mut rng)
            } else {
                between(&ks, ks.len() / 2 + 1..ks.len() - 1, &mut rng)
            };
            p.capture(Step::Insert(k))?;
            Ok(p)
        }
        Script::DeleteEnds | Script::DeleteMid => {
            let mut p = Plan::new(16, max_enum_dirty)?;
            let base = spaced_keys(&mut rng, 14, 1000);
            for &k in &base {
                p.setup(Step::Insert(k))?;
            }
            for &k in &base[..4] {
                p.setup(Step::Delete(k))?;
            }
            for &k in spaced_keys(&mut rng, 4, 100_000).iter() {
                p.setup(Step::Insert(k))?;
            }
            if script == Script::DeleteEnds {
                for round in 0..4 {
                    let ks = keys(&p.tree)?;
                    let k = if round % 2 == 0 { ks[0] } else { ks[ks.len() - 1] };
                    p.capture(Step::Delete(k))?;
                }
                while keys(&p.tree)?.len() > 1 {
                    let k = keys(&p.tree)?[0];
                    p.setup(Step::Delete(k))?;
                }
                let k = keys(&p.tree)?[0];
                p.capture(Step::Delete(k))?;
            } else {
                for round in 0..4 {
                    let ks = keys(&p.tree)?;
                    let n = ks.len();
                    let i = match round {
                        0 => n / 2,
                        1 => rng.random_range(1..n / 2),
                        2 => rng.random_range(n / 2 + 1..n - 1),
                        _ => 1,
                    };
                    p.capture(Step::Delete(ks[i]))?;
                }
            }
            Ok(p)
        }
        Script::Split => {
            let mut p = Plan::new(8, max_enum_dirty)?;
            let base = spaced_keys(&mut rng, 8, 1000);
            for &k in &base {
                p.setup(Step::Insert(k))?;
            }
            // smaller-half split of the root leaf
            p.capture(Step::Insert(between(&base, 0..1, &mut rng)))?;
            // greater-half split of a non-root leaf
            let mut next = base[7];
            loop {
                next += 100 + rng.random_range(0..50);
                if p.tree.split_depth(next)? > 0 {
                    p.capture(Step::Insert(next))?;
                    break;
                }
                p.setup(Step::Insert(next))?;
            }
            // grow until a leaf split cascades through the root
            loop {
                next += 100 + rng.random_range(0..50);
                let depth = p.tree.split_depth(next)?;
                if depth >= 2 {
                    p.capture(Step::Insert(next))?;
                    break;
                }
                p.setup(Step::Insert(next))?;
            }
            Ok(p)
        }
        Script::Merge => {
            let mut p = Plan::new(8, max_enum_dirty)?;
            let base = spaced_keys(&mut rng, 28, 1000);
            for &k in &base {
                p.setup(Step::Insert(k))?;
            }
            let mut merges = 0;
            // the head leaf first, then leaves in the middle of the chain
            for target in [0usize, 1, 2] {
                let leaves = leaf_keys(&p.tree)?;
                let Some(leaf) = leaves.get(target) else { break };
                let mut ks = leaf.clone();
                while let Some(k) = ks.first().copied() {
                    ks.remove(0);
                    if p.tree.merge_candidate(k)? {
                        p.capture(Step::Delete(k))?;
                        merges += 1;
                        break;
                    }
                    p.setup(Step::Delete(k))?;
                }
            }
            if merges == 0 {
                return Err(TreeError::Contract("merge script produced no merge".into()));
            }
            Ok(p)
        }
    }
}

fn leaf_keys(tree: &CircTree) -> Result<Vec<Vec<u64>>> {
    let mut out = Vec::new();
    let a = tree.arena();
    let mut cur = a.load(crate::tree::SB_LEAF_HEAD)?;
    while cur != 0 {
        let n = crate::node::CircNode::open(a, cur, tree.cap())?;
        out.push(n.logical_view(a)?.iter().map(|p| p.key).collect());
        cur = n.sibling(a)?;
    }
    Ok(out)
}

fn image_hash(img: &CrashImage) -> u64 {
    let mut h = DefaultHasher::new();
    img.bytes.hash(&mut h);
    h.finish()
}

/// Check one image; returns the recovery cases seen.
fn check_image(
    cfg: &ArenaConfig,
    img: &CrashImage,
    pre: &[KvPair],
    post: &[KvPair],
) -> std::result::Result<BTreeSet<FixCase>, String> {
    let arena = Arc::new(PmArena::from_crash_image(cfg.clone(), img).map_err(|e| e.to_string())?);
    let (tree, rep) =
        CircTree::open(arena.clone(), SearchMode::Segment, true).map_err(|e| format!("recovery: {e}"))?;
    let rep = rep.ok_or("start flag was not set")?;
    tree.check_structure().map_err(|e| format!("structure: {e}"))?;
    let got = tree.contents().map_err(|e| e.to_string())?;
    if got != pre && got != post {
        return Err(format!(
            "contents match neither side: {} pairs vs pre {} / post {}",
            got.len(),
            pre.len(),
            post.len()
        ));
    }
    let before = arena.persistent_snapshot();
    let again = tree.recover().map_err(|e| format!("second recovery: {e}"))?;
    if !again.fixes.is_empty() {
        return Err(format!("second recovery applied {} fixes", again.fixes.len()));
    }
    let mut after = arena.persistent_snapshot();
    let flag = crate::tree::SB_FLAG as usize;
    after[flag] = before[flag];
    if after != before {
        return Err("second recovery changed the image".into());
    }
    Ok(rep.cases())
}

pub fn run_campaign(script: Script, seed: u64, max_enum_dirty: usize) -> Result<CampaignReport> {
    let plan = build(script, seed, max_enum_dirty)?;
    let cfg = plan.tree.arena().config().clone();
    let mut report = CampaignReport {
        script,
        seed,
        max_enum_dirty,
        ops_captured: plan.captured.len(),
        points_tested: 0,
        points_sampled: 0,
        images_tested: 0,
        failures: Vec::new(),
        cases: BTreeMap::new(),
        missing_cases: Vec::new(),
    };
    debug_assert!(plan.cap >= 4 && plan.max_enum_dirty == max_enum_dirty);
    let mut seen_cases = BTreeSet::new();
    for (op_index, (step, caps)) in plan.captured.iter().enumerate() {
        for cap in caps {
            for (pi, point) in cap.points.iter().enumerate() {
                report.points_tested += 1;
                let images = match point.images(CrashPolicy::Enumerate) {
                    Ok(v) => v,
                    Err(PmError::EnumerationExplosion { .. }) => {
                        report.points_sampled += 1;
                        let mut v = point.images(CrashPolicy::AllDropped)?;
                        v.extend(point.images(CrashPolicy::AllPersisted)?);
                        for i in 0..SAMPLES_PER_POINT {
                            let s = seed ^ ((op_index as u64) << 40) ^ ((pi as u64) << 20) ^ i;
                            v.extend(point.images(CrashPolicy::Random(s))?);
                        }
                        v
                    }
                    Err(e) => return Err(e.into()),
                };
                let mut hashes = HashSet::new();
                for (ii, img) in images.iter().enumerate() {
                    if !hashes.insert(image_hash(img)) {
                        continue;
                    }
                    report.images_tested += 1;
                    match check_image(&cfg, img, &cap.pre, &cap.post) {
                        Ok(cases) => {
                            for c in cases {
                                *report.cases.entry(c.label().to_string()).or_default() += 1;
                                seen_cases.insert(c);
                            }
                        }
                        Err(reason) => report.failures.push(Failure {
                            op_index,
                            op: format!("{step:?}"),
                            point: pi,
                            image: ii,
                            reason,
                        }),
                    }
                }
            }
        }
    }
    report.missing_cases = script
        .expected_cases()
        .iter()
        .filter(|c| !seen_cases.contains(c))
        .map(|c| c.label().to_string())
        .collect();
    Ok(report)
}
