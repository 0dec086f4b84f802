//! Seeded load and session workloads with virtual-latency reports.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Result, TreeError};
use crate::index::{build, node_capacity, TreeKind};
use crate::kv::{synth_field, synth_fields, KvStore, OpKind, FIELDS, FIELD_BYTES};
use crate::metrics::{geo_mean, percentile, timed};
use crate::pmem::{ArenaConfig, Event, PmArena, Stats};

use super::keys::{uniform_keys, zipf_keys};

pub const DEFAULT_THETA: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Distribution {
    Uniform,
    Zipfian { theta: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Phase {
    /// Inserts of `key_count` distinct uniform keys into the bare index.
    Load,
    /// Key-value puts of every key, then 50/50 gets and field updates.
    SessionStore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub tree_kind: TreeKind,
    pub node_bytes: u64,
    pub key_count: u64,
    pub distribution: Distribution,
    #[serde(default = "default_flush_latency")]
    pub flush_latency_ns: u64,
    #[serde(default = "default_line_size")]
    pub line_size: u64,
    #[serde(default = "default_threads")]
    pub threads: usize,
    pub seed: u64,
    pub phase: Phase,
    /// Session-phase operations; defaults to `key_count`.
    #[serde(default)]
    pub session_ops: Option<u64>,
    #[serde(default)]
    pub op_base_ns: u64,
    #[serde(default)]
    pub wall_clock: bool,
}

fn default_flush_latency() -> u64 {
    300
}

fn default_line_size() -> u64 {
    64
}

fn default_threads() -> usize {
    1
}

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("malformed workload spec: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid workload spec: {0}")]
    Invalid(String),
}

impl WorkloadSpec {
    pub fn new(tree_kind: TreeKind, node_bytes: u64, key_count: u64, seed: u64) -> Self {
        Self {
            tree_kind,
            node_bytes,
            key_count,
            distribution: Distribution::Uniform,
            flush_latency_ns: default_flush_latency(),
            line_size: default_line_size(),
            threads: 1,
            seed,
            phase: Phase::Load,
            session_ops: None,
            op_base_ns: 0,
            wall_clock: false,
        }
    }

    pub fn from_json(s: &str) -> Result<Self, SpecError> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        let bad = |m: String| Err(SpecError::Invalid(m));
        if let Err(e) = node_capacity(self.node_bytes) {
            return bad(format!("node_bytes {}: {e}", self.node_bytes));
        }
        if !self.line_size.is_power_of_two() || self.line_size < 16 || self.line_size > self.node_bytes {
            return bad(format!("line_size {} must be a power of two in [16, node_bytes]", self.line_size));
        }
        if self.key_count == 0 || self.key_count > 1 << 24 {
            return bad(format!("key_count {} out of range", self.key_count));
        }
        if self.threads == 0 || self.threads > 64 {
            return bad(format!("threads {} out of range", self.threads));
        }
        if let Distribution::Zipfian { theta } = self.distribution {
            if !(theta >= 0.0 && theta.is_finite()) {
                return bad(format!("zipf theta {theta} must be finite and non-negative"));
            }
        }
        if self.session_ops.is_some_and(|n| n > 1 << 26) {
            return bad("session_ops out of range".into());
        }
        Ok(())
    }

    fn session_ops(&self) -> u64 {
        self.session_ops.unwrap_or(self.key_count)
    }

    /// Arena bytes the run needs, with headroom.
    fn arena_bytes(&self) -> u64 {
        let n = self.key_count;
        let line = self.line_size;
        let field = (FIELD_BYTES as u64).div_ceil(line) * line;
        let mut bytes = (1 << 20) + 64 * self.node_bytes;
        bytes += n * 256;
        if self.phase == Phase::SessionStore {
            bytes += n * (FIELDS as u64 * field + (8 * FIELDS as u64).div_ceil(line) * line);
            bytes += self.session_ops() * field;
        }
        bytes.next_multiple_of(line)
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct LatencySummary {
    pub ops: u64,
    pub geo_mean_ns: f64,
    pub p99_ns: u64,
}

impl LatencySummary {
    fn of(xs: &[u64]) -> Self {
        Self {
            ops: xs.len() as u64,
            geo_mean_ns: geo_mean(xs),
            p99_ns: percentile(xs, 99.0),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub spec: WorkloadSpec,
    /// Over the measured phase: inserts for load, session ops otherwise.
    pub geo_mean_latency_ns: f64,
    pub p99_latency_ns: u64,
    pub per_thread_geo_mean_ns: Vec<f64>,
    pub insert: LatencySummary,
    pub get: Option<LatencySummary>,
    pub update: Option<LatencySummary>,
    pub update_misses: u64,
    pub flush_count: u64,
    pub fence_count: u64,
    pub bytes_flushed: u64,
    pub shift_count: u64,
    pub virtual_clock_ns: u64,
    pub splits: u64,
    pub merges: u64,
    pub final_keys: u64,
    pub wall_geo_mean_ns: Option<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Op {
    Insert,
    Get,
    Update,
}

#[derive(Default)]
struct ThreadLog {
    ops: Vec<(Op, u64)>,
    wall: Vec<u64>,
}

impl ThreadLog {
    fn latencies(&self, op: Op) -> Vec<u64> {
        self.ops.iter().filter(|(o, _)| *o == op).map(|&(_, l)| l).collect()
    }
}

/// Run `per_thread` on `threads` scoped workers, each given its index.
fn fan_out<T: Send>(threads: usize, per_thread: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    if threads == 1 {
        return Ok(vec![per_thread(0)?]);
    }
    std::thread::scope(|s| {
        let hs: Vec<_> = (0..threads).map(|t| s.spawn({
            let f = &per_thread;
            move || f(t)
        })).collect();
        hs.into_iter()
            .map(|h| h.join().map_err(|_| TreeError::Contract("worker panicked".into()))?)
            .collect()
    })
}

fn chunk(keys: &[u64], threads: usize, t: usize) -> &[u64] {
    let per = keys.len().div_ceil(threads);
    let lo = (t * per).min(keys.len());
    &keys[lo..(lo + per).min(keys.len())]
}

fn op_timed<T>(arena: &PmArena, spec: &WorkloadSpec, log: &mut ThreadLog, op: Op, f: impl FnOnce() -> T) -> T {
    let start = spec.wall_clock.then(Instant::now);
    let (out, ns) = timed(arena, spec.op_base_ns, f);
    log.ops.push((op, ns));
    if let Some(s) = start {
        log.wall.push(s.elapsed().as_nanos() as u64);
    }
    out
}

pub fn run(spec: &WorkloadSpec) -> Result<RunReport> {
    run_detailed(spec, false).map(|(r, _)| r)
}

/// Like [`run`], optionally returning the full arena event log.
pub fn run_detailed(spec: &WorkloadSpec, record_events: bool) -> Result<(RunReport, Vec<Event>)> {
    spec.validate().map_err(|e| TreeError::Contract(e.to_string()))?;
    let arena = Arc::new(PmArena::new(ArenaConfig {
        capacity: spec.arena_bytes(),
        line_size: spec.line_size,
        flush_latency_ns: spec.flush_latency_ns,
        record_events,
        ..ArenaConfig::default()
    })?);
    let index = build(spec.tree_kind, arena.clone(), spec.node_bytes)?;
    let keys = uniform_keys(spec.key_count as usize, spec.seed);
    let threads = spec.threads;

    let (logs, update_misses, final_keys, splits, merges) = match spec.phase {
        Phase::Load => {
            let logs = fan_out(threads, |t| {
                let mut log = ThreadLog::default();
                for &k in chunk(&keys, threads, t) {
                    op_timed(&arena, spec, &mut log, Op::Insert, || index.insert(k, k))?;
                }
                Ok(log)
            })?;
            let n = index.contents()?.len() as u64;
            (logs, 0, n, index.splits(), index.merges())
        }
        Phase::SessionStore => {
            let store = KvStore::new(index);
            let mut loads = fan_out(threads, |t| {
                let mut log = ThreadLog::default();
                for &k in chunk(&keys, threads, t) {
                    op_timed(&arena, spec, &mut log, Op::Insert, || store.put(k, &synth_fields(k, 0)))?;
                }
                Ok(log)
            })?;
            let ops = spec.session_ops() as usize;
            let ranks = match spec.distribution {
                Distribution::Uniform => {
                    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5E55);
                    (0..ops).map(|_| rng.random_range(0..keys.len() as u64)).collect()
                }
                Distribution::Zipfian { theta } => zipf_keys(ops, theta, keys.len() as u64, spec.seed ^ 0x5E55)?,
            };
            let session = fan_out(threads, |t| {
                let mut log = ThreadLog::default();
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(t as u64 + 1));
                for (i, &r) in chunk(&ranks, threads, t).iter().enumerate() {
                    let k = keys[r as usize];
                    if rng.random_bool(0.5) {
                        op_timed(&arena, spec, &mut log, Op::Get, || store.get(k))?;
                    } else {
                        let f = rng.random_range(0..FIELDS);
                        let d = synth_field(k, f, i as u64 + 1);
                        match op_timed(&arena, spec, &mut log, Op::Update, || store.update_field(k, f, &d)) {
                            Ok(()) | Err(TreeError::NotFound(_)) => {}
                            Err(e) => return Err(e),
                        }
                    }
                }
                Ok(log)
            })?;
            for (l, s) in loads.iter_mut().zip(session) {
                l.ops.extend(s.ops);
                l.wall.extend(s.wall);
            }
            let misses = store.stats().counts.get(&OpKind::UpdateMiss).copied().unwrap_or(0);
            let idx = store.index();
            let n = idx.contents()?.len() as u64;
            (loads, misses, n, idx.splits(), idx.merges())
        }
    };

    let gather = |op: Op| -> Vec<u64> { logs.iter().flat_map(|l| l.latencies(op)).collect() };
    let inserts = gather(Op::Insert);
    let gets = gather(Op::Get);
    let updates = gather(Op::Update);
    let measured: Vec<u64> = match spec.phase {
        Phase::Load => inserts.clone(),
        Phase::SessionStore => logs
            .iter()
            .flat_map(|l| l.ops.iter().filter(|(o, _)| *o != Op::Insert).map(|&(_, x)| x))
            .collect(),
    };
    let per_thread = logs
        .iter()
        .map(|l| {
            let xs: Vec<u64> = match spec.phase {
                Phase::Load => l.latencies(Op::Insert),
                Phase::SessionStore => l.ops.iter().filter(|(o, _)| *o != Op::Insert).map(|&(_, x)| x).collect(),
            };
            geo_mean(&xs)
        })
        .collect();
    let wall: Vec<u64> = logs.iter().flat_map(|l| l.wall.iter().copied()).collect();
    let Stats {
        flush_count,
        fence_count,
        bytes_flushed,
        virtual_clock_ns,
        shift_count,
    } = arena.stats();
    let session = spec.phase == Phase::SessionStore;
    let report = RunReport {
        spec: spec.clone(),
        geo_mean_latency_ns: geo_mean(&measured),
        p99_latency_ns: percentile(&measured, 99.0),
        per_thread_geo_mean_ns: per_thread,
        insert: LatencySummary::of(&inserts),
        get: session.then(|| LatencySummary::of(&gets)),
        update: session.then(|| LatencySummary::of(&updates)),
        update_misses,
        flush_count,
        fence_count,
        bytes_flushed,
        shift_count,
        virtual_clock_ns,
        splits,
        merges,
        final_keys,
        wall_geo_mean_ns: spec.wall_clock.then(|| geo_mean(&wall)),
    };
    Ok((report, if record_events { arena.take_events() } else { Vec::new() }))
}

/// Flat row for CSV output: spec fields then counters.
#[derive(Debug, Serialize)]
pub struct CsvRow<'a> {
    pub tree_kind: &'a str,
    pub node_bytes: u64,
    pub key_count: u64,
    pub distribution: &'a str,
    pub theta: Option<f64>,
    pub flush_latency_ns: u64,
    pub line_size: u64,
    pub threads: usize,
    pub seed: u64,
    pub phase: &'a str,
    pub geo_mean_latency_ns: f64,
    pub p99_latency_ns: u64,
    pub flush_count: u64,
    pub fence_count: u64,
    pub bytes_flushed: u64,
    pub shift_count: u64,
    pub splits: u64,
    pub merges: u64,
}

impl RunReport {
    pub fn csv_row(&self) -> CsvRow<'_> {
        let s = &self.spec;
        let (distribution, theta) = match s.distribution {
            Distribution::Uniform => ("uniform", None),
            Distribution::Zipfian { theta } => ("zipfian", Some(theta)),
        };
        CsvRow {
            tree_kind: s.tree_kind.name(),
            node_bytes: s.node_bytes,
            key_count: s.key_count,
            distribution,
            theta,
            flush_latency_ns: s.flush_latency_ns,
            line_size: s.line_size,
            threads: s.threads,
            seed: s.seed,
            phase: match s.phase {
                Phase::Load => "load",
                Phase::SessionStore => "session_store",
            },
            geo_mean_latency_ns: self.geo_mean_latency_ns,
            p99_latency_ns: self.p99_latency_ns,
            flush_count: self.flush_count,
            fence_count: self.fence_count,
            bytes_flushed: self.bytes_flushed,
            shift_count: self.shift_count,
            splits: self.splits,
            merges: self.merges,
        }
    }
}

/// Serialize reports as CSV, one row each, with a header.
pub fn write_csv<W: std::io::Write>(out: W, reports: &[RunReport]) -> std::result::Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(r.csv_row())?;
    }
    w.flush()?;
    Ok(())
}
