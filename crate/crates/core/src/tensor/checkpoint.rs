//! `NDCK` parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"NDCK"
//! version  u16            (= 1)
//! count    u32
//! count × {
//!     name_len u16, name [u8; name_len] (UTF-8),
//!     ndim u8, dims [u32; ndim],
//!     payload [f32 LE; Π dims]
//! }
//! ```

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NDCK";
const VERSION: u16 = 1;

/// One named tensor in a checkpoint. Values are held as the stored `f32`s.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub name: String,
    pub dims: Vec<u32>,
    pub payload: Vec<f32>,
}

impl CheckpointRecord {
    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Self {
        Self {
            name: name.into(),
            dims: t.shape().iter().map(|&d| d as u32).collect(),
            payload: t.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let shape: Vec<usize> = self.dims.iter().map(|&d| d as usize).collect();
        Tensor::new(&shape, self.payload.iter().map(|&v| v as f64).collect())
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, records: &[CheckpointRecord]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(records.len())
        .map_err(|_| Error::Format("too many checkpoint records".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for r in records {
        let name = r.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("parameter name too long: {}", r.name)))?;
        let ndim = u8::try_from(r.dims.len())
            .map_err(|_| Error::Format(format!("too many dims for {}", r.name)))?;
        let n: u64 = r.dims.iter().map(|&d| d as u64).product();
        if n != r.payload.len() as u64 {
            return Err(Error::Format(format!(
                "record {} has {} values for dims {:?}",
                r.name,
                r.payload.len(),
                r.dims
            )));
        }
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[ndim])?;
        for d in &r.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(r.payload.len() * 4);
        for v in &r.payload {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<CheckpointRecord>> {
    let magic: [u8; 4] = read_exact(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an NDCK checkpoint (bad magic)".into()));
    }
    let version = u16::from_le_bytes(read_exact(&mut r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported NDCK version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(&mut r)?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let [ndim] = read_exact::<_, 1>(&mut r)?;
        let dims = (0..ndim)
            .map(|_| read_exact(&mut r).map(u32::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().map(|&d| d as usize).product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)
            .map_err(|e| Error::Format(format!("truncated payload for {name}: {e}")))?;
        let payload = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(CheckpointRecord {
            name,
            dims,
            payload,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic() {
        assert!(read_checkpoint(&b"NOPE\x01\x00\x00\x00\x00\x00"[..]).is_err());
    }

    #[test]
    fn header_layout() {
        let rec = CheckpointRecord {
            name: "w".into(),
            dims: vec![2],
            payload: vec![1.0, -2.5],
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[rec]).unwrap();
        assert_eq!(&buf[..4], b"NDCK");
        assert_eq!(&buf[4..6], &1u16.to_le_bytes());
        assert_eq!(&buf[6..10], &1u32.to_le_bytes());
        assert_eq!(&buf[10..12], &1u16.to_le_bytes());
        assert_eq!(buf[12], b'w');
        assert_eq!(buf[13], 1);
        assert_eq!(&buf[14..18], &2u32.to_le_bytes());
        assert_eq!(&buf[18..22], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 26);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            bits in prop::collection::vec(any::<u32>(), 1..64),
            name in "[a-z_.0-9]{1,24}",
        ) {
            let payload: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
            let rec = CheckpointRecord { name, dims: vec![payload.len() as u32], payload };
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, std::slice::from_ref(&rec)).unwrap();
            let back = read_checkpoint(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), 1);
            let a: Vec<u32> = rec.payload.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back[0].payload.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(&back[0].name, &rec.name);
            let mut again = Vec::new();
            write_checkpoint(&mut again, &back).unwrap();
            prop_assert_eq!(buf, again);
        }
    }
}
