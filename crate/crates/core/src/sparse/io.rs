//! `BCS1` binary layout, little-endian: magic, rows `u32`, cols `u32`, then
//! weights (`f32`), compact columns, column stride, occurrence, row offset and
//! permutation (all `u32`), each prefixed by a `u64` element count.

use std::io::{Read, Write};

use super::{BcsMatrix, SparseError};

pub const BCS_MAGIC: &[u8; 4] = b"BCS1";

fn write_u32s<W: Write>(out: &mut W, v: &[u32]) -> std::io::Result<()> {
    out.write_all(&(v.len() as u64).to_le_bytes())?;
    for x in v {
        out.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_bcs<W: Write>(mut out: W, m: &BcsMatrix<f32>) -> Result<(), SparseError> {
    out.write_all(BCS_MAGIC)?;
    out.write_all(&(m.rows as u32).to_le_bytes())?;
    out.write_all(&(m.cols as u32).to_le_bytes())?;
    out.write_all(&(m.weights.len() as u64).to_le_bytes())?;
    for w in &m.weights {
        out.write_all(&w.to_le_bytes())?;
    }
    for arr in [&m.compact_cols, &m.col_stride, &m.occurrence, &m.row_offset, &m.perm] {
        write_u32s(&mut out, arr)?;
    }
    out.flush()?;
    Ok(())
}

fn read_4<R: Read>(r: &mut R) -> Result<[u8; 4], SparseError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_len<R: Read>(r: &mut R) -> Result<usize, SparseError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    let n = u64::from_le_bytes(b);
    // guards against allocating from a corrupt length
    if n > (u32::MAX as u64) * 4 {
        return Err(SparseError::Format(format!("array length {n} is implausible")));
    }
    Ok(n as usize)
}

fn read_u32s<R: Read>(r: &mut R) -> Result<Vec<u32>, SparseError> {
    let n = read_len(r)?;
    (0..n).map(|_| read_4(r).map(u32::from_le_bytes)).collect()
}

/// Reads and validates a `BCS1` stream.
pub fn read_bcs<R: Read>(mut input: R) -> Result<BcsMatrix<f32>, SparseError> {
    let magic = read_4(&mut input)?;
    if &magic != BCS_MAGIC {
        return Err(SparseError::Format(format!("bad magic {magic:?}")));
    }
    let rows = u32::from_le_bytes(read_4(&mut input)?) as usize;
    let cols = u32::from_le_bytes(read_4(&mut input)?) as usize;
    let nw = read_len(&mut input)?;
    let weights = (0..nw)
        .map(|_| read_4(&mut input).map(f32::from_le_bytes))
        .collect::<Result<Vec<_>, _>>()?;
    let m = BcsMatrix {
        rows,
        cols,
        weights,
        compact_cols: read_u32s(&mut input)?,
        col_stride: read_u32s(&mut input)?,
        occurrence: read_u32s(&mut input)?,
        row_offset: read_u32s(&mut input)?,
        perm: read_u32s(&mut input)?,
    };
    m.validate()?;
    Ok(m)
}
