//! Key-value store over any [`Index`]: values are made durable before the
//! key is indexed, and field updates are copy-on-write.

use std::collections::BTreeMap;

use parking_lot::Mutex;
use serde::Serialize;
use thiserror::Error;

use crate::error::{Result, TreeError};
use crate::index::Index;
use crate::metrics::timed;
use crate::pmem::{Handle, PmArena};

pub const FIELDS: usize = 10;
pub const FIELD_BYTES: usize = 100;
pub const VALUE_BYTES: usize = FIELDS * FIELD_BYTES;

pub type Field = [u8; FIELD_BYTES];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Put,
    Get,
    Update,
    UpdateMiss,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct StoreStats {
    pub latencies_ns: Vec<u64>,
    pub kinds: Vec<OpKind>,
    pub counts: BTreeMap<OpKind, u64>,
}

impl StoreStats {
    fn record(&mut self, kind: OpKind, ns: u64) {
        self.latencies_ns.push(ns);
        self.kinds.push(kind);
        *self.counts.entry(kind).or_default() += 1;
    }

    pub fn latencies_of(&self, kind: OpKind) -> Vec<u64> {
        self.kinds
            .iter()
            .zip(&self.latencies_ns)
            .filter(|(k, _)| **k == kind)
            .map(|(_, &l)| l)
            .collect()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KeyError {
    #[error("key {0:?} lacks the \"user\" prefix")]
    MissingPrefix(String),
    #[error("key {0:?} has no digits after the prefix")]
    Empty(String),
    #[error("key {0:?} contains a non-digit")]
    NonDigit(String),
    #[error("key {0:?} does not fit in 64 bits")]
    Overflow(String),
}

/// `"user<digits>"` to the integer the digits spell.
pub fn parse_ycsb_key(s: &str) -> Result<u64, KeyError> {
    let digits = s.strip_prefix("user").ok_or_else(|| KeyError::MissingPrefix(s.into()))?;
    if digits.is_empty() {
        return Err(KeyError::Empty(s.into()));
    }
    if !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(KeyError::NonDigit(s.into()));
    }
    digits.parse().map_err(|_| KeyError::Overflow(s.into()))
}

pub struct KvStore {
    index: Box<dyn Index>,
    op_base_ns: u64,
    stats: Mutex<StoreStats>,
}

impl KvStore {
    pub fn new(index: Box<dyn Index>) -> Self {
        Self::with_op_base(index, 0)
    }

    /// `op_base_ns` is added to every recorded op latency.
    pub fn with_op_base(index: Box<dyn Index>, op_base_ns: u64) -> Self {
        Self {
            index,
            op_base_ns,
            stats: Mutex::new(StoreStats::default()),
        }
    }

    pub fn index(&self) -> &dyn Index {
        self.index.as_ref()
    }

    fn arena(&self) -> &PmArena {
        self.index.arena()
    }

    pub fn stats(&self) -> StoreStats {
        self.stats.lock().clone()
    }

    pub fn take_stats(&self) -> StoreStats {
        std::mem::take(&mut *self.stats.lock())
    }

    fn persist_region(&self, h: &Handle) -> Result<()> {
        let a = self.arena();
        let line = a.line_size();
        let mut l = h.offset / line * line;
        while l < h.offset + h.size {
            a.flush(l)?;
            l += line;
        }
        Ok(())
    }

    fn write_field(&self, data: &Field) -> Result<Handle> {
        let a = self.arena();
        let h = a.alloc(FIELD_BYTES as u64, a.line_size())?;
        a.write(&h, 0, data)?;
        self.persist_region(&h)?;
        Ok(h)
    }

    /// Write and flush every field and the field-pointer array, then fence.
    /// Returns the record handle; nothing references it yet.
    pub fn put_value(&self, fields: &[Field; FIELDS]) -> Result<Handle> {
        let a = self.arena();
        let mut ptrs = [0u8; FIELDS * 8];
        for (i, f) in fields.iter().enumerate() {
            let h = self.write_field(f)?;
            ptrs[i * 8..i * 8 + 8].copy_from_slice(&h.offset.to_le_bytes());
        }
        let rec = a.alloc((FIELDS * 8) as u64, a.line_size())?;
        a.write(&rec, 0, &ptrs)?;
        self.persist_region(&rec)?;
        a.fence();
        Ok(rec)
    }

    pub fn put(&self, k: u64, fields: &[Field; FIELDS]) -> Result<()> {
        let (r, ns) = timed(self.arena(), self.op_base_ns, || {
            let rec = self.put_value(fields)?;
            self.index.insert(k, rec.offset)
        });
        self.stats.lock().record(OpKind::Put, ns);
        r
    }

    fn read_record(&self, rec: u64) -> Result<[u64; FIELDS]> {
        let a = self.arena();
        let mut out = [0u64; FIELDS];
        for (i, p) in out.iter_mut().enumerate() {
            *p = a.load(rec + 8 * i as u64)?;
        }
        Ok(out)
    }

    fn gather(&self, rec: u64) -> Result<Vec<u8>> {
        let a = self.arena();
        let mut out = vec![0u8; VALUE_BYTES];
        for (i, p) in self.read_record(rec)?.into_iter().enumerate() {
            if p == 0 {
                return Err(TreeError::Corruption(format!("record {rec} field {i} is null")));
            }
            a.read_abs(p, &mut out[i * FIELD_BYTES..(i + 1) * FIELD_BYTES])?;
        }
        Ok(out)
    }

    pub fn get(&self, k: u64) -> Result<Option<Vec<u8>>> {
        let (r, ns) = timed(self.arena(), self.op_base_ns, || match self.index.get(k)? {
            Some(rec) => self.gather(rec).map(Some),
            None => Ok(None),
        });
        self.stats.lock().record(OpKind::Get, ns);
        r
    }

    /// Copy-on-write update of one field: the new region is durable before
    /// the pointer swing.
    pub fn update_field(&self, k: u64, field: usize, data: &Field) -> Result<()> {
        if field >= FIELDS {
            return Err(TreeError::Contract(format!("field index {field} out of range")));
        }
        let (r, ns) = timed(self.arena(), self.op_base_ns, || -> Result<bool> {
            let Some(rec) = self.index.get(k)? else {
                return Ok(false);
            };
            let a = self.arena();
            let h = self.write_field(data)?;
            a.fence();
            let slot = rec + 8 * field as u64;
            a.store(slot, h.offset)?;
            a.persist(slot)?;
            Ok(true)
        });
        let hit = matches!(r, Ok(true));
        self.stats
            .lock()
            .record(if hit { OpKind::Update } else { OpKind::UpdateMiss }, ns);
        match r? {
            true => Ok(()),
            false => Err(TreeError::NotFound(k)),
        }
    }
}

/// Deterministic field contents for key `k`, version `ver`.
pub fn synth_fields(k: u64, ver: u64) -> [Field; FIELDS] {
    let mut out = [[0u8; FIELD_BYTES]; FIELDS];
    for (i, f) in out.iter_mut().enumerate() {
        *f = synth_field(k, i, ver);
    }
    out
}

pub fn synth_field(k: u64, field: usize, ver: u64) -> Field {
    let mut f = [0u8; FIELD_BYTES];
    let mut x = (k ^ (field as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ver.rotate_left(32)) | 1;
    for b in f.iter_mut() {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        *b = x as u8;
    }
    f
}
