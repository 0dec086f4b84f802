//! Motivating scenario with two pairs per cache line: inserting the
//! second-smallest key and deleting the smallest key, in a linear node and
//! in a circular node, counting only flushes of data lines.

use serde::Serialize;

use crate::baselines::LinearNode;
use crate::error::Result;
use crate::node::{CircNode, SLOT_BYTES};
use crate::pmem::{ArenaConfig, Event, PmArena};

const CAP: u64 = 8;
const INSERT_BASE: [u64; 5] = [10, 20, 30, 40, 50];
const INSERT_KEY: u64 = 15;
const DELETE_BASE: [u64; 6] = [10, 20, 30, 40, 50, 60];

#[derive(Clone, Copy, Debug, Serialize, PartialEq, Eq)]
pub struct Case {
    pub name: &'static str,
    pub data_line_flushes: usize,
    pub expected: usize,
    pub shifts: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Figure1Report {
    pub line_size: u64,
    pub cases: Vec<Case>,
}

impl Figure1Report {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.data_line_flushes == c.expected)
    }
}

fn arena() -> Result<PmArena> {
    Ok(PmArena::new(ArenaConfig {
        line_size: 2 * SLOT_BYTES,
        record_events: true,
        ..ArenaConfig::with_capacity(1 << 12)
    })?)
}

/// Flushes and shifts caused by `f`, counting only lines in `[lo, hi)`.
fn measure(a: &PmArena, lo: u64, hi: u64, f: impl FnOnce() -> Result<()>) -> Result<(usize, u64)> {
    a.take_events();
    let shifts = a.stats().shift_count;
    f()?;
    let line = a.line_size();
    let n = a
        .take_events()
        .iter()
        .filter(|e| matches!(e, Event::Flush { line: l } if (lo / line..hi.div_ceil(line)).contains(l)))
        .count();
    Ok((n, a.stats().shift_count - shifts))
}

fn linear(base: &[u64], op: impl FnOnce(&PmArena, &LinearNode) -> Result<()>) -> Result<(usize, u64)> {
    let a = arena()?;
    let n = LinearNode::alloc(&a, CAP, 0, true)?;
    for &k in base {
        n.insert(&a, k, k, true)?;
    }
    measure(&a, n.slot_addr(0), n.slot_addr(CAP), || op(&a, &n))
}

fn circular(base: &[u64], op: impl FnOnce(&PmArena, &CircNode) -> Result<()>) -> Result<(usize, u64)> {
    let a = arena()?;
    let n = CircNode::alloc(&a, CAP, 0)?;
    for &k in base {
        n.insert(&a, k, k)?;
    }
    measure(&a, n.slot_addr(0), n.slot_addr(CAP - 1) + SLOT_BYTES, || op(&a, &n))
}

pub fn figure1() -> Result<Figure1Report> {
    let case = |name, (data_line_flushes, shifts), expected| Case {
        name,
        data_line_flushes,
        expected,
        shifts,
    };
    let cases = vec![
        case(
            "linear_insert_second_smallest",
            linear(&INSERT_BASE, |a, n| n.insert(a, INSERT_KEY, INSERT_KEY, true))?,
            3,
        ),
        case(
            "circular_insert_second_smallest",
            circular(&INSERT_BASE, |a, n| n.insert(a, INSERT_KEY, INSERT_KEY).map(|_| ()))?,
            2,
        ),
        case(
            "linear_delete_smallest",
            linear(&DELETE_BASE, |a, n| n.delete(a, DELETE_BASE[0], true))?,
            3,
        ),
        case(
            "circular_delete_smallest",
            circular(&DELETE_BASE, |a, n| n.delete(a, DELETE_BASE[0]).map(|_| ()))?,
            1,
        ),
    ];
    Ok(Figure1Report {
        line_size: 2 * SLOT_BYTES,
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_counts() {
        let r = figure1().unwrap();
        let got: Vec<usize> = r.cases.iter().map(|c| c.data_line_flushes).collect();
        assert_eq!(got, [3, 2, 3, 1]);
        let shifts: Vec<u64> = r.cases.iter().map(|c| c.shifts).collect();
        assert_eq!(shifts, [4, 1, 5, 0]);
        assert!(r.passed());
    }
}
