//! Flat binary tensor files: magic `AVFT`, u32 rank, u32 dims, then f32
//! payload, everything little-endian. Rank 2 carries mel spectrograms or
//! plain matrices, rank 4 carries frame stacks, rank 1 carries waveforms.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array4};

use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"AVFT";

/// Writes a tensor of arbitrary rank. `data` must hold exactly the product
/// of `dims` values in row-major order.
pub fn write_tensor(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
    let expected: usize = dims.iter().product();
    if data.len() != expected {
        return Err(Error::Shape(format!(
            "tensor write: dims {dims:?} imply {expected} values, got {}",
            data.len()
        )));
    }
    let mut buf = Vec::with_capacity(8 + 4 * dims.len() + 4 * data.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads a tensor of any rank, returning its dims and row-major values.
pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::format(path, format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(path, format!("bad magic {:?}", &bytes[..4])));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::format(path, format!("unsupported rank {rank}")));
    }
    let header_len = 8 + 4 * rank;
    if bytes.len() < header_len {
        return Err(Error::format(path, "truncated dim header".to_string()));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 8 + 4 * i;
        dims.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let count: usize = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(
        || Error::format(path, format!("dims {dims:?} overflow")),
    )?;
    let payload = &bytes[header_len..];
    if payload.len() != count * 4 {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, dims {dims:?} need {}", payload.len(), count * 4),
        ));
    }
    let mut data = Vec::with_capacity(count);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok((dims, data))
}

/// Writes a rank-2 tensor.
pub fn write_array2(path: &Path, arr: &Array2<f32>) -> Result<()> {
    let v: Vec<f32> = arr.iter().copied().collect();
    write_tensor(path, &[arr.nrows(), arr.ncols()], &v)
}

/// Reads a rank-2 tensor, rejecting other ranks.
pub fn read_array2(path: &Path) -> Result<Array2<f32>> {
    let (dims, data) = read_tensor(path)?;
    if dims.len() != 2 {
        return Err(Error::format(path, format!("expected rank 2, got {}", dims.len())));
    }
    Array2::from_shape_vec((dims[0], dims[1]), data)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Writes a rank-4 tensor (frames x channels x height x width).
pub fn write_array4(path: &Path, arr: &Array4<f32>) -> Result<()> {
    let d = arr.dim();
    let v: Vec<f32> = arr.iter().copied().collect();
    write_tensor(path, &[d.0, d.1, d.2, d.3], &v)
}

/// Reads a rank-4 tensor, rejecting other ranks.
pub fn read_array4(path: &Path) -> Result<Array4<f32>> {
    let (dims, data) = read_tensor(path)?;
    if dims.len() != 4 {
        return Err(Error::format(path, format!("expected rank 4, got {}", dims.len())));
    }
    Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), data)
        .map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank2_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.avft");
        let arr = Array2::from_shape_fn((5, 3), |(i, j)| (i as f32 * 0.37 - j as f32).tan());
        write_array2(&p, &arr).unwrap();
        let back = read_array2(&p).unwrap();
        assert_eq!(arr, back);
        for (a, b) in arr.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rank4_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.avft");
        let arr = Array4::from_shape_fn((2, 3, 4, 5), |(a, b, c, d)| {
            (a * 1000 + b * 100 + c * 10 + d) as f32
        });
        write_array4(&p, &arr).unwrap();
        assert_eq!(read_array4(&p).unwrap(), arr);
    }

    #[test]
    fn rank1_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.avft");
        let wave: Vec<f32> = (0..100).map(|i| (i as f32 * 0.1).sin()).collect();
        write_tensor(&p, &[100], &wave).unwrap();
        let (dims, data) = read_tensor(&p).unwrap();
        assert_eq!(dims, vec![100]);
        assert_eq!(data, wave);
    }

    #[test]
    fn header_layout_is_fixed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.avft");
        write_tensor(&p, &[2, 3], &[1.0; 6]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"AVFT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 16 + 6 * 4);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.avft");
        std::fs::write(&p, b"NOPE\x02\x00\x00\x00").unwrap();
        assert!(read_tensor(&p).unwrap_err().to_string().contains("bad magic"));

        let q = dir.path().join("short.avft");
        write_tensor(&q, &[2, 3], &[0.0; 6]).unwrap();
        let mut bytes = std::fs::read(&q).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&q, &bytes).unwrap();
        let err = read_tensor(&q).unwrap_err().to_string();
        assert!(err.contains("payload"), "{err}");
    }

    #[test]
    fn rejects_rank_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.avft");
        write_tensor(&p, &[6], &[0.0; 6]).unwrap();
        assert!(read_array2(&p).is_err());
        assert!(read_array4(&p).is_err());
    }

    #[test]
    fn rejects_length_mismatch_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.avft");
        assert!(write_tensor(&p, &[2, 3], &[0.0; 5]).is_err());
    }
}
