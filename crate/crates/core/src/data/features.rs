//! Per-utterance feature matrices: `"CPCF" | rows u64 | cols u64 | f32 payload`,
//! little-endian, row-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CPCF";

pub fn write_features(path: &Path, m: &Tensor<f32>) -> Result<()> {
    let mut b = Vec::with_capacity(20 + 4 * m.len());
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    b.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.data() {
        b.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, b).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor<f32>> {
    let b = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: &str| Error::Format {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if b.len() < 20 || &b[..4] != MAGIC {
        return Err(bad("missing CPCF header"));
    }
    let rows = u64::from_le_bytes(b[4..12].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(b[12..20].try_into().unwrap()) as usize;
    let expect = rows.checked_mul(cols).and_then(|n| n.checked_mul(4)).and_then(|n| n.checked_add(20));
    if expect != Some(b.len()) {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("{rows}×{cols} matrix does not fit {} bytes", b.len()),
        });
    }
    let data = b[20..].chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(vec![rows, cols], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.cpcf");
        let m = Tensor::new(vec![3, 2], vec![1.0, 2.0, -3.0, 0.5, 1e-8, 7.0]).unwrap();
        write_features(&p, &m).unwrap();
        assert_eq!(read_features(&p).unwrap(), m);
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, bytes).unwrap();
        assert!(read_features(&p).is_err());
    }
}
