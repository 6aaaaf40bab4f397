//! Named-tensor container.
//!
//! Layout (all integers little-endian): `b"SPTC"`, version `u32`, tensor count
//! `u32`, then per tensor: name length `u32`, UTF-8 name, rank `u32`, dims
//! `u32[rank]`, dtype tag `u8` (0 = f64, 1 = f32), raw little-endian data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPTC";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;
const DTYPE_F32: u8 = 1;

pub fn write_tensors<W: Write>(mut out: W, tensors: &[(String, &Tensor)]) -> Result<(), TensorError> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        out.write_all(&[DTYPE_F64])?;
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TensorError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>, TensorError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TensorError::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut input)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut input)? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| TensorError::Format(e.to_string()))?;
        let rank = read_u32(&mut input)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut input)? as usize);
        }
        let mut tag = [0u8; 1];
        input.read_exact(&mut tag)?;
        let n: usize = shape.iter().product();
        let data = match tag[0] {
            DTYPE_F64 => {
                let mut raw = vec![0u8; n * 8];
                input.read_exact(&mut raw)?;
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect()
            }
            DTYPE_F32 => {
                let mut raw = vec![0u8; n * 4];
                input.read_exact(&mut raw)?;
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
                    .collect()
            }
            t => return Err(TensorError::Format(format!("unknown dtype tag {t} for {name}"))),
        };
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save_tensors(path: &Path, tensors: &[(String, &Tensor)]) -> Result<(), TensorError> {
    write_tensors(BufWriter::new(File::create(path)?), tensors)
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>, TensorError> {
    read_tensors(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_names_shapes_and_bits() {
        let a = Tensor::new(vec![2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5, 1e300, -7.25]).unwrap();
        let b = Tensor::scalar(0.1);
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("cell0.block1.w".into(), &a), ("s".into(), &b)]).unwrap();
        assert_eq!(&buf[..4], b"SPTC");
        let back = read_tensors(buf.as_slice()).unwrap();
        assert_eq!(back[0].0, "cell0.block1.w");
        assert_eq!(back[0].1, a);
        assert_eq!(back[0].1.data()[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back[1].1, b);
    }

    #[test]
    fn rejects_bad_magic() {
        let err = read_tensors(&b"XXXX\x01\0\0\0\0\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, TensorError::Format(_)));
    }
}
