//! `NST1` tensor files with an optional JSON sidecar.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    b"NST1"
//! version  u16   (= 1)
//! dtype    u8    (1 = f32)
//! ndim     u8
//! dims     [u32; ndim]
//! payload  [f32; Π dims]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Tensor;

const MAGIC: &[u8; 4] = b"NST1";
const VERSION: u16 = 1;
const DTYPE_F32: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NstKind {
    Clean,
    Noisy,
    Noise,
    Dark,
}

/// Sidecar metadata stored next to a tensor file as `<file>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NstMeta {
    pub iso: Option<u32>,
    pub exposure_ratio: Option<f64>,
    pub black_level: f64,
    pub white_level: f64,
    pub kind: NstKind,
}

/// Tensor values are narrowed to `f32` on write.
pub fn write_nst<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    let ndim = u8::try_from(t.ndim()).map_err(|_| Error::Format("too many dims for NST".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[DTYPE_F32, ndim])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn truncated(e: std::io::Error) -> Error {
    Error::Format(format!("truncated NST file: {e}"))
}

pub fn read_nst<R: Read>(mut r: R) -> Result<Tensor> {
    let mut head = [0u8; 8];
    r.read_exact(&mut head).map_err(truncated)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("not an NST file (bad magic)".into()));
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported NST version {version}")));
    }
    if head[6] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported NST dtype code {}", head[6])));
    }
    let ndim = head[7] as usize;
    let mut dims = vec![0u8; 4 * ndim];
    r.read_exact(&mut dims).map_err(truncated)?;
    let shape: Vec<usize> = dims
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; 4 * n];
    r.read_exact(&mut raw).map_err(truncated)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after NST payload".into()));
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(&shape, data)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_nst(path: &Path, t: &Tensor, meta: Option<&NstMeta>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_nst(&mut w, t)?;
    w.flush()?;
    if let Some(m) = meta {
        std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(m)?)?;
    }
    Ok(())
}

/// Loads a tensor and, when present, its sidecar.
pub fn load_nst(path: &Path) -> Result<(Tensor, Option<NstMeta>)> {
    let t = read_nst(BufReader::new(File::open(path)?))?;
    let side = sidecar_path(path);
    let meta = if side.exists() {
        Some(serde_json::from_slice(&std::fs::read(side)?)?)
    } else {
        None
    };
    Ok((t, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    #[test]
    fn round_trip_is_bit_exact_on_f32() {
        let mut rng = Rng::new(1, 0);
        let t = Tensor::randn(&[2, 3, 5], 1.0, &mut rng).map(|v| v as f32 as f64);
        let mut buf = Vec::new();
        write_nst(&mut buf, &t).unwrap();
        assert_eq!(buf.len(), 8 + 3 * 4 + 4 * 30);
        let back = read_nst(&buf[..]).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_bad_headers_and_truncation() {
        let t = Tensor::full(&[4], 1.5);
        let mut buf = Vec::new();
        write_nst(&mut buf, &t).unwrap();
        assert!(read_nst(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_nst(&bad[..]).is_err());
        let mut bad = buf.clone();
        bad[6] = 9;
        assert!(read_nst(&bad[..]).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(read_nst(&long[..]).is_err());
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.nst");
        let meta = NstMeta {
            iso: Some(3200),
            exposure_ratio: Some(300.0),
            black_level: 0.0,
            white_level: 1.0,
            kind: NstKind::Noisy,
        };
        save_nst(&path, &Tensor::zeros(&[1, 2, 2]), Some(&meta)).unwrap();
        assert!(dir.path().join("x.nst.json").exists());
        let (t, m) = load_nst(&path).unwrap();
        assert_eq!(t.shape(), [1, 2, 2]);
        assert_eq!(m, Some(meta));
    }
}
