//! `VTTS` tensor files: magic `b"VTTS"`, `u32` version, `u32` rank, one
//! `u32` per dimension, then row-major little-endian `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"VTTS";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn from_mat<T: Scalar>(m: &Mat<T>) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            data: m.as_slice().iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    /// Interprets a rank-2 tensor as a matrix.
    pub fn to_mat<T: Scalar>(&self) -> Result<Mat<T>> {
        match self.dims[..] {
            [r, c] => Ok(Mat::from_vec(
                r,
                c,
                self.data.iter().map(|&v| T::of(v as f64)).collect(),
            )),
            _ => Err(Error::Input(format!(
                "expected a rank-2 tensor, got dims {:?}",
                self.dims
            ))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(mut bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(path, reason.to_string());
        let mut magic = [0u8; 4];
        bytes.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("not a VTTS tensor file"));
        }
        let mut word = || -> Result<u32> {
            let mut b = [0u8; 4];
            bytes.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
            Ok(u32::from_le_bytes(b))
        };
        let version = word()?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let ndim = word()? as usize;
        let dims = (0..ndim)
            .map(|_| word().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        if bytes.len() != count * 4 {
            return Err(bad(&format!(
                "payload is {} bytes, dims {:?} need {}",
                bytes.len(),
                dims,
                count * 4
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes, path)
    }
}

pub fn write_mat<T: Scalar>(path: &Path, m: &Mat<T>) -> Result<()> {
    Tensor::from_mat(m).write(path)
}

pub fn read_mat<T: Scalar>(path: &Path) -> Result<Mat<T>> {
    Tensor::read(path)?.to_mat()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor {
            dims: vec![2, 1],
            data: vec![1.0, -2.5],
        };
        let b = t.encode();
        assert_eq!(&b[..4], b"VTTS");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(b.len(), 12 + 8 + 8);
        assert_eq!(Tensor::decode(&b, Path::new("x")).unwrap(), t);
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut b = Tensor {
            dims: vec![3],
            data: vec![1.0, 2.0, 3.0],
        }
        .encode();
        b.pop();
        assert!(Tensor::decode(&b, Path::new("x")).is_err());
        assert!(Tensor::decode(b"VTTX", Path::new("x")).is_err());
    }
}
