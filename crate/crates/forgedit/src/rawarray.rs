//! Single-array binary file: magic, version, rank, dims (u64) and
//! little-endian f64 values. Used for embeddings and text tables.

use std::path::Path;

use forgedit_core::Array;

use crate::error::{format_err, IoContext};
use crate::store::write_atomic;
use crate::Result;

const MAGIC: &[u8; 4] = b"FGAR";
const VERSION: u32 = 1;

pub fn to_bytes(a: &Array) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * (a.shape().len() + a.len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(a.shape().len() as u32).to_le_bytes());
    for &d in a.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in a.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn from_bytes(b: &[u8], origin: &Path) -> Result<Array> {
    let bad = |m: &str| format_err(origin, m);
    if b.len() < 12 || &b[..4] != MAGIC {
        return Err(bad("not an array file"));
    }
    let word = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().expect("4 bytes"));
    if word(4) != VERSION {
        return Err(bad("unsupported array file version"));
    }
    let rank = word(8) as usize;
    let head = 12 + 8 * rank;
    if b.len() < head {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> =
        (0..rank).map(|i| u64::from_le_bytes(b[12 + 8 * i..20 + 8 * i].try_into().expect("8 bytes")) as usize).collect();
    let n: usize = shape.iter().product();
    if b.len() != head + 8 * n {
        return Err(bad("payload size does not match shape"));
    }
    let data = b[head..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(Array::from_vec(&shape, data)?)
}

pub fn save(a: &Array, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(a))
}

pub fn load(path: &Path) -> Result<Array> {
    from_bytes(&std::fs::read(path).at(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let a = Array::from_vec(&[1, 2, 3], vec![0.5, -1.0, 2.25, f64::MIN_POSITIVE, 1e300, -0.0]).unwrap();
        let b = from_bytes(&to_bytes(&a), Path::new("mem")).unwrap();
        assert_eq!(to_bytes(&a), to_bytes(&b));
        assert!(from_bytes(&to_bytes(&a)[..20], Path::new("mem")).is_err());
    }
}
