//! `MEL0` container: magic, little-endian `u32` frames and bins, then
//! `frames * bins` little-endian `f32` values in row-major order.

use std::fs;
use std::path::Path;

use crate::nn::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"MEL0";

pub fn write_mel(path: &Path, values: &Tensor) -> Result<()> {
    let (frames, bins) = (values.rows(), values.cols());
    let mut buf = Vec::with_capacity(12 + 4 * values.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(frames as u32).to_le_bytes());
    buf.extend_from_slice(&(bins as u32).to_le_bytes());
    for &v in values.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_mel(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |message: &str| Error::Format {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing MEL0 header"));
    }
    let frames = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let bins = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != frames * bins * 4 {
        return Err(bad("payload length does not match header"));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Ok(Tensor::new(&[frames, bins], data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mel");
        let t = Tensor::new(&[2, 3], vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125]);
        write_mel(&path, &t).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"MEL0");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &0.0f32.to_le_bytes());
        assert_eq!(&bytes[16..20], &0.25f32.to_le_bytes());
        assert_eq!(bytes.len(), 12 + 24);
        assert_eq!(read_mel(&path).unwrap(), t);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mel");
        fs::write(&path, b"MEL0\x02\0\0\0\x02\0\0\0abc").unwrap();
        assert!(matches!(read_mel(&path), Err(Error::Format { .. })));
    }
}
