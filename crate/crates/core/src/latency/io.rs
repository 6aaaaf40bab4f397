//! Line-oriented table files.
//!
//! The first line is `#sparsearch-latency-v1,device=<name>`. Further `#`
//! lines carry `key=value` metadata (`provenance`, `grid`) or comments. Each
//! record is `layer_type,in_ch,out_ch,H,W,scheme,ratio,latency_ms`.

use std::io::{BufRead, Write};

use super::{LatencyError, LatencyTable, LayerDescriptor, Provenance, DEFAULT_GRID};

pub const TABLE_HEADER: &str = "#sparsearch-latency-v1";

pub fn write_table<W: Write>(mut out: W, table: &LatencyTable) -> Result<(), LatencyError> {
    writeln!(out, "{TABLE_HEADER},device={}", table.device)?;
    writeln!(out, "#provenance={}", table.provenance)?;
    let grid: Vec<String> = table.grid.iter().map(|r| r.to_string()).collect();
    writeln!(out, "#grid={}", grid.join(";"))?;
    for (d, s, r, ms) in table.entries() {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            d.layer_type.name(),
            d.in_ch,
            d.out_ch,
            d.h,
            d.w,
            s,
            r,
            ms
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_table<R: BufRead>(input: R) -> Result<LatencyTable, LatencyError> {
    let mut lines = input.lines().enumerate();
    let (_, first) = lines.next().ok_or(LatencyError::Parse {
        line: 1,
        reason: "empty file".into(),
    })?;
    let first = first?;
    let device = first
        .strip_prefix(TABLE_HEADER)
        .and_then(|rest| rest.strip_prefix(",device="))
        .ok_or(LatencyError::Parse {
            line: 1,
            reason: format!("expected header {TABLE_HEADER},device=<name>"),
        })?
        .trim()
        .to_string();
    let mut provenance = Provenance::Measured;
    let mut grid = DEFAULT_GRID.to_vec();
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line?;
        let lineno = i + 1;
        let err = |reason: String| LatencyError::Parse { line: lineno, reason };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            if let Some(p) = meta.strip_prefix("provenance=") {
                provenance = match p {
                    "measured" => Provenance::Measured,
                    "synthetic" => Provenance::Synthetic,
                    other => return Err(err(format!("unknown provenance {other:?}"))),
                };
            } else if let Some(g) = meta.strip_prefix("grid=") {
                grid = g
                    .split(';')
                    .map(|v| v.parse::<f64>().map_err(|e| err(e.to_string())))
                    .collect::<Result<_, _>>()?;
            }
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|e| err(format!("{s:?}: {e}")));
        let real = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
        let desc = LayerDescriptor::new(f[0].parse().map_err(|e: LatencyError| err(e.to_string()))?, num(f[1])?, num(f[2])?, num(f[3])?, num(f[4])?)
            .map_err(|e| err(e.to_string()))?;
        let scheme = f[5].parse().map_err(|e: LatencyError| err(e.to_string()))?;
        let (ratio, ms) = (real(f[6])?, real(f[7])?);
        if !(0.0..1.0).contains(&ratio) || !ms.is_finite() || ms < 0.0 {
            return Err(err(format!("ratio {ratio} or latency {ms} out of range")));
        }
        records.push((desc, scheme, ratio, ms));
    }
    let mut table = LatencyTable::new(device, provenance, grid)?;
    for (d, s, r, ms) in records {
        table.insert(d, s, r, ms);
    }
    if !table.is_monotone() {
        let n = table.enforce_monotone();
        log::warn!("loaded table was not monotone; clamped {n} entries");
    }
    Ok(table)
}
