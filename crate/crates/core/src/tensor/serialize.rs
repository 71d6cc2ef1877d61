//! Versioned flat tensor container.
//!
//! Layout (all integers little-endian):
//! `b"PGTENSOR"`, `u32` version, `u32` count, then per tensor
//! `u32` name length, name bytes (UTF-8), `u32` rank, `rank x u64` extents,
//! `prod(extents) x f64` values.

use std::io::{Read, Write};

use super::{Result, Tensor, TensorError};

pub const MAGIC: &[u8; 8] = b"PGTENSOR";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        NamedTensor {
            name: name.into(),
            tensor,
        }
    }
}

pub fn write_tensors<W: Write>(mut w: W, tensors: &[NamedTensor]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for nt in tensors {
        let name = nt.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = nt.tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(nt.tensor.numel() * 8);
        for v in nt.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

// Guards against absurd allocations from corrupt headers.
const MAX_ELEMS: u64 = 1 << 32;

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<NamedTensor>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Format("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(TensorError::Format(format!(
            "unsupported version {version}"
        )));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let nlen = read_u32(&mut r)? as usize;
        if nlen > 1 << 16 {
            return Err(TensorError::Format(format!("name length {nlen}")));
        }
        let mut name = vec![0u8; nlen];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| TensorError::Format(e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 16 {
            return Err(TensorError::Format(format!("rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut total: u64 = 1;
        for _ in 0..rank {
            let d = read_u64(&mut r)?;
            total = total.saturating_mul(d);
            shape.push(d as usize);
        }
        if total > MAX_ELEMS {
            return Err(TensorError::Format(format!(
                "tensor {name} has {total} elements"
            )));
        }
        let mut raw = vec![0u8; total as usize * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| TensorError::Format(e.to_string()))?;
        out.push(NamedTensor { name, tensor });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = NamedTensor::new("w", Tensor::from_slice(&[2], &[1.0, -0.5]).unwrap());
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[t]).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 1);
        // name len + 'w' + rank + extent + 2 values
        assert_eq!(buf.len(), 16 + 4 + 1 + 4 + 8 + 16);
        assert_eq!(
            f64::from_le_bytes(buf[buf.len() - 8..].try_into().unwrap()),
            -0.5
        );
    }

    #[test]
    fn rejects_corruption() {
        assert!(read_tensors(&b"NOTMAGIC\x01\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[NamedTensor::new("x", Tensor::zeros(&[3]))]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_tensors(&buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..4), 0..5), seed in any::<u64>()) {
            let tensors: Vec<NamedTensor> = shapes.iter().enumerate().map(|(i, s)| {
                let n: usize = s.iter().product();
                let data = (0..n).map(|j| ((seed as f64) * 1e-12 + j as f64 * 0.7).sin()).collect();
                NamedTensor::new(format!("t{i}/é"), Tensor::new(s.clone(), data).unwrap())
            }).collect();
            let mut buf = Vec::new();
            write_tensors(&mut buf, &tensors).unwrap();
            let back = read_tensors(&buf[..]).unwrap();
            prop_assert_eq!(back, tensors);
        }
    }
}
