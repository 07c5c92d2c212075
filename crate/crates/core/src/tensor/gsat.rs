//! `GSAT` binary tensor files.
//!
//! Layout: magic `GSAT`, version byte (1), dtype byte (0 = f64, 1 = f32), rank
//! byte, `rank` little-endian u64 extents, then little-endian row-major data.

use std::fs;
use std::io;
use std::path::Path;

use super::{Result, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"GSAT";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64 = 0,
    F32 = 1,
}

impl Dtype {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Self::F64),
            1 => Some(Self::F32),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Self::F64 => 8,
            Self::F32 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::F64 => "float64",
            Self::F32 => "float32",
        }
    }
}

pub fn encode(t: &Tensor, dtype: Dtype) -> Vec<u8> {
    assert!(
        t.rank() <= u8::MAX as usize,
        "rank {} does not fit a GSAT header",
        t.rank()
    );
    let mut out = Vec::with_capacity(7 + 8 * t.rank() + dtype.width() * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype as u8);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    match dtype {
        Dtype::F64 => t
            .data()
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Dtype::F32 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
    }
    out
}

/// Header fields without decoding the payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data_offset: usize,
}

pub fn decode_header(bytes: &[u8]) -> Result<Header> {
    let bad = |m: String| TensorError::Format(m);
    if bytes.len() < 7 || &bytes[..4] != MAGIC {
        return Err(bad("missing GSAT magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(bad(format!("unsupported version {}", bytes[4])));
    }
    let dtype = Dtype::from_byte(bytes[5])
        .ok_or_else(|| bad(format!("unknown dtype byte {}", bytes[5])))?;
    let rank = bytes[6] as usize;
    let data_offset = 7 + 8 * rank;
    if bytes.len() < data_offset {
        return Err(bad(format!("truncated header for rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for ax in 0..rank {
        let raw: [u8; 8] = bytes[7 + 8 * ax..15 + 8 * ax].try_into().unwrap();
        let e = u64::from_le_bytes(raw);
        if e == 0 {
            return Err(bad(format!("zero extent on axis {ax}")));
        }
        shape.push(usize::try_from(e).map_err(|_| bad(format!("extent {e} too large")))?);
    }
    Ok(Header {
        dtype,
        shape,
        data_offset,
    })
}

pub fn decode(bytes: &[u8]) -> Result<(Tensor, Dtype)> {
    let header = decode_header(bytes)?;
    let numel = header
        .shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| TensorError::Format("element count overflows".into()))?;
    let payload = &bytes[header.data_offset..];
    if payload.len() != numel * header.dtype.width() {
        return Err(TensorError::Format(format!(
            "expected {} payload bytes, found {}",
            numel * header.dtype.width(),
            payload.len()
        )));
    }
    let data: Vec<f64> = match header.dtype {
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    let t = if header.shape.is_empty() {
        Tensor::scalar(data[0])
    } else {
        Tensor::new(header.shape, data)?
    };
    Ok((t, header.dtype))
}

pub fn write_file(path: impl AsRef<Path>, t: &Tensor, dtype: Dtype) -> io::Result<()> {
    fs::write(path, encode(t, dtype))
}

pub fn read_file(path: impl AsRef<Path>) -> io::Result<(Tensor, Dtype)> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_byte_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let bytes = encode(&t, Dtype::F64);
        let mut expect = b"GSAT".to_vec();
        expect.extend([1, 0, 2]);
        expect.extend(1u64.to_le_bytes());
        expect.extend(2u64.to_le_bytes());
        expect.extend(1.0f64.to_le_bytes());
        expect.extend((-2.0f64).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn rejects_corrupt_input() {
        let t = Tensor::filled(&[2, 2], 0.5);
        let good = encode(&t, Dtype::F32);
        assert!(decode(&good[..good.len() - 1]).is_err());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = good.clone();
        bad[5] = 9;
        assert!(decode(&bad).is_err());
        let mut bad = good;
        bad[4] = 2;
        assert!(decode(&bad).is_err());
    }

    proptest! {
        #[test]
        fn f64_round_trip(shape in prop::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let t = crate::tensor::seeded_init(&shape, crate::tensor::InitScheme::StandardNormal, seed);
            let t = if shape.is_empty() { Tensor::scalar(t.data()[0]) } else { t };
            let (back, dtype) = decode(&encode(&t, Dtype::F64)).unwrap();
            prop_assert_eq!(dtype, Dtype::F64);
            prop_assert_eq!(back, t);
        }
    }
}
