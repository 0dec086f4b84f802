use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use circtree::bench::crash::{max_enum_dirty_from_env, run_campaign, Script};
use circtree::bench::figure1::figure1;
use circtree::bench::workload::{run, write_csv, Distribution, Phase, RunReport, WorkloadSpec, DEFAULT_THETA};
use circtree::index::TreeKind;

#[derive(Parser)]
#[command(name = "bench", about = "Circular-node B+-tree benchmarks and crash campaigns")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dist {
    Uniform,
    Zipfian,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long, default_value_t = 4096)]
    node_bytes: u64,
    #[arg(long, default_value_t = 100_000)]
    keys: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    flush_latency_ns: u64,
    #[arg(long, default_value_t = 64)]
    line_size: u64,
    #[arg(long, default_value_t = 0)]
    op_base_ns: u64,
    /// Also record wall-clock latencies (not deterministic).
    #[arg(long)]
    wall_clock: bool,
    /// JSON report path; a CSV with the same stem is written beside it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// CSV path, overriding the one derived from `--out`.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// One workload run.
    Run {
        #[arg(long, value_enum, default_value_t = TreeKind::Circ)]
        tree: TreeKind,
        #[arg(long, value_enum, default_value_t = Dist::Uniform)]
        dist: Dist,
        #[arg(long, default_value_t = DEFAULT_THETA)]
        theta: f64,
        #[arg(long, value_enum, default_value_t = Phase::Load)]
        phase: Phase,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        session_ops: Option<u64>,
        /// Read the full spec from a JSON file instead of flags.
        #[arg(long, conflicts_with_all = ["tree", "dist", "phase"])]
        spec: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Every tree kind at every node size, load phase.
    Sweep {
        #[arg(long, value_enum, num_args = 1.., default_values_t = [TreeKind::Circ, TreeKind::Linear])]
        trees: Vec<TreeKind>,
        #[arg(long, num_args = 1.., default_values_t = [512, 1024, 2048, 4096])]
        sizes: Vec<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Flush counts of the two-pairs-per-line insert and delete scenario.
    Figure1 {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Crash-injection campaign over one scripted operation sequence.
    Crash {
        #[arg(long, value_enum)]
        script: Option<Script>,
        /// Run every script.
        #[arg(long, conflicts_with = "script")]
        all: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Session store: load, then 50/50 reads and updates over Zipfian keys.
    YcsbA {
        /// Thread counts to run; defaults to 1, 2, 4 and 8.
        #[arg(long, num_args = 1..)]
        threads: Vec<usize>,
        #[arg(long, value_enum, default_value_t = TreeKind::Circ)]
        tree: TreeKind,
        #[arg(long, default_value_t = DEFAULT_THETA)]
        theta: f64,
        #[arg(long)]
        ops: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
}

fn spec_from(tree: TreeKind, c: &Common) -> WorkloadSpec {
    let mut s = WorkloadSpec::new(tree, c.node_bytes, c.keys, c.seed);
    s.flush_latency_ns = c.flush_latency_ns;
    s.line_size = c.line_size;
    s.op_base_ns = c.op_base_ns;
    s.wall_clock = c.wall_clock;
    s
}

fn write_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn emit(reports: &[RunReport], c: &Common) -> Result<()> {
    if reports.len() == 1 {
        write_json(c.out.as_deref(), &reports[0])?;
    } else {
        write_json(c.out.as_deref(), &reports)?;
    }
    let csv = c.csv.clone().or_else(|| c.out.as_ref().map(|p| p.with_extension("csv")));
    if let Some(p) = csv {
        let f = File::create(&p).with_context(|| format!("creating {}", p.display()))?;
        write_csv(f, reports)?;
    }
    Ok(())
}

fn summary(r: &RunReport) {
    eprintln!(
        "{:<8} {:>5}B keys={:<7} threads={} geo={:.1}ns p99={}ns flushes={} bytes={} shifts={} splits={}",
        r.spec.tree_kind.name(),
        r.spec.node_bytes,
        r.spec.key_count,
        r.spec.threads,
        r.geo_mean_latency_ns,
        r.p99_latency_ns,
        r.flush_count,
        r.bytes_flushed,
        r.shift_count,
        r.splits
    );
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run {
            tree,
            dist,
            theta,
            phase,
            threads,
            session_ops,
            spec,
            common,
        } => {
            let spec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    WorkloadSpec::from_json(&text)?
                }
                None => {
                    let mut s = spec_from(tree, &common);
                    s.distribution = match dist {
                        Dist::Uniform => Distribution::Uniform,
                        Dist::Zipfian => Distribution::Zipfian { theta },
                    };
                    s.phase = phase;
                    s.threads = threads;
                    s.session_ops = session_ops;
                    s
                }
            };
            let r = run(&spec)?;
            summary(&r);
            emit(&[r], &common)?;
        }
        Cmd::Sweep { trees, sizes, common } => {
            let mut reports = Vec::new();
            for &nb in &sizes {
                for &t in &trees {
                    let mut s = spec_from(t, &common);
                    s.node_bytes = nb;
                    let r = run(&s)?;
                    summary(&r);
                    reports.push(r);
                }
            }
            emit(&reports, &common)?;
        }
        Cmd::Figure1 { out } => {
            let r = figure1()?;
            for c in &r.cases {
                eprintln!(
                    "{:<34} data-line flushes {} (expected {}), shifts {}",
                    c.name, c.data_line_flushes, c.expected, c.shifts
                );
            }
            write_json(out.as_deref(), &r)?;
            if !r.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Cmd::Crash { script, all, seed, out } => {
            let scripts = match (script, all) {
                (Some(s), _) => vec![s],
                (None, true) => Script::ALL.to_vec(),
                (None, false) => anyhow::bail!("pass --script <name> or --all"),
            };
            let bound = max_enum_dirty_from_env();
            let mut reports = Vec::new();
            for s in scripts {
                let r = run_campaign(s, seed, bound)?;
                eprintln!(
                    "{:<12} points={} images={} sampled={} failures={} missing={:?}",
                    s.name(),
                    r.points_tested,
                    r.images_tested,
                    r.points_sampled,
                    r.failures.len(),
                    r.missing_cases
                );
                reports.push(r);
            }
            let ok = reports.iter().all(|r| r.passed());
            if reports.len() == 1 {
                write_json(out.as_deref(), &reports[0])?;
            } else {
                write_json(out.as_deref(), &reports)?;
            }
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Cmd::YcsbA {
            threads,
            tree,
            theta,
            ops,
            common,
        } => {
            let counts = if threads.is_empty() { vec![1, 2, 4, 8] } else { threads };
            let mut reports = Vec::new();
            for t in counts {
                let mut s = spec_from(tree, &common);
                s.phase = Phase::SessionStore;
                s.distribution = Distribution::Zipfian { theta };
                s.threads = t;
                s.session_ops = ops;
                let r = run(&s)?;
                summary(&r);
                reports.push(r);
            }
            emit(&reports, &common)?;
        }
    }
    std::io::stdout().flush()?;
    Ok(ExitCode::SUCCESS)
}
