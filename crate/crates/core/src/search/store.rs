//! Append-only record of evaluated candidates.
//!
//! One record per line, `encoding_bits,reward,latency_ms,step,timestamp`.
//! Lines starting with `#` are header comments. The timestamp is a logical
//! counter (the record's position), which keeps reruns byte-identical.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use super::SearchError;
use crate::search_space::{bits_to_string, parse_bits};

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub bits: Vec<u8>,
    /// Non-finite for failed evaluations.
    pub reward: f64,
    pub latency_ms: f64,
    pub step: usize,
    pub timestamp: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservationStore {
    records: Vec<Record>,
    seen: HashSet<Vec<u8>>,
}

impl ObservationStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn contains(&self, bits: &[u8]) -> bool {
        self.seen.contains(bits)
    }

    /// Appends a record, stamping it with the next logical timestamp.
    pub fn push(&mut self, bits: Vec<u8>, reward: f64, latency_ms: f64, step: usize) -> Result<&Record, SearchError> {
        if !self.seen.insert(bits.clone()) {
            return Err(SearchError::Duplicate(bits_to_string(&bits)));
        }
        let timestamp = self.records.len() as u64;
        self.records.push(Record {
            bits,
            reward,
            latency_ms,
            step,
            timestamp,
        });
        Ok(self.records.last().expect("just pushed"))
    }

    /// Highest finite reward; ties go to the earlier record.
    pub fn best(&self) -> Option<&Record> {
        self.records
            .iter()
            .filter(|r| r.reward.is_finite())
            .fold(None, |best: Option<&Record>, r| match best {
                Some(b) if b.reward >= r.reward => Some(b),
                _ => Some(r),
            })
    }

    /// Records sorted by reward (descending, non-finite last), ties by timestamp.
    pub fn ranked(&self) -> Vec<&Record> {
        let mut v: Vec<&Record> = self.records.iter().collect();
        v.sort_by(|a, b| {
            let key = |r: &Record| if r.reward.is_finite() { r.reward } else { f64::NEG_INFINITY };
            key(b).total_cmp(&key(a)).then(a.timestamp.cmp(&b.timestamp))
        });
        v
    }

    /// Last step with any record.
    pub fn last_step(&self) -> Option<usize> {
        self.records.iter().map(|r| r.step).max()
    }

    pub fn write<W: Write>(&self, mut out: W, header: &[String]) -> Result<(), SearchError> {
        for h in header {
            writeln!(out, "# {h}")?;
        }
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{}",
                bits_to_string(&r.bits),
                r.reward,
                r.latency_ms,
                r.step,
                r.timestamp
            )?;
        }
        out.flush()?;
        Ok(())
    }

    /// Atomic save through a temporary sibling file.
    pub fn save(&self, path: &Path, header: &[String]) -> Result<(), SearchError> {
        let tmp = path.with_extension("tmp");
        {
            let f = fs::File::create(&tmp)?;
            self.write(std::io::BufWriter::new(f), header)?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self, SearchError> {
        let mut store = Self::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: String| SearchError::Parse { line: i + 1, reason: m };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(err(format!("expected 5 fields, found {}", f.len())));
            }
            let bits = parse_bits(f[0]).map_err(|e| err(e.to_string()))?;
            let reward: f64 = f[1].parse().map_err(|e| err(format!("reward: {e}")))?;
            let latency: f64 = f[2].parse().map_err(|e| err(format!("latency: {e}")))?;
            let step: usize = f[3].parse().map_err(|e| err(format!("step: {e}")))?;
            let ts: u64 = f[4].parse().map_err(|e| err(format!("timestamp: {e}")))?;
            if ts != store.len() as u64 {
                return Err(err(format!("timestamp {ts} out of sequence")));
            }
            store.push(bits, reward, latency, step).map_err(|e| err(e.to_string()))?;
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self, SearchError> {
        Self::read(std::io::BufReader::new(fs::File::open(path)?))
    }
}
