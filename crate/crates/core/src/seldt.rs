//! The SELDT tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes   "SELDT1\0\0"
//! ndim    u32
//! dims    ndim x u64
//! data    prod(dims) x f32 (IEEE-754, row-major)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Result, SeldError};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"SELDT1\0\0";

/// Largest rank accepted when reading; guards against garbage headers.
const MAX_NDIM: u32 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct SeldtTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl SeldtTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(SeldError::Format(format!(
                "dims {:?} describe {} elements but {} were given",
                dims,
                n,
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_array<T: Scalar>(a: &ArrayD<T>) -> Self {
        Self {
            dims: a.shape().to_vec(),
            data: a.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
        }
    }

    pub fn to_array<T: Scalar>(&self) -> ArrayD<T> {
        let data = self.data.iter().map(|&v| T::lit(v as f64)).collect();
        ArrayD::from_shape_vec(IxDyn(&self.dims), data).expect("dims checked at construction")
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for &d in &self.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(SeldError::Format("bad magic, not a SELDT file".into()));
        }
        let mut b4 = [0u8; 4];
        read_exact(&mut r, &mut b4, "ndim")?;
        let ndim = u32::from_le_bytes(b4);
        if ndim > MAX_NDIM {
            return Err(SeldError::Format(format!("ndim {ndim} exceeds {MAX_NDIM}")));
        }
        let mut dims = Vec::with_capacity(ndim as usize);
        let mut b8 = [0u8; 8];
        for _ in 0..ndim {
            read_exact(&mut r, &mut b8, "dims")?;
            let d = usize::try_from(u64::from_le_bytes(b8))
                .map_err(|_| SeldError::Format("dimension does not fit in usize".into()))?;
            dims.push(d);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| SeldError::Format("element count overflows".into()))?;
        let mut raw = Vec::new();
        r.read_to_end(&mut raw)?;
        if raw.len() != n * 4 {
            return Err(SeldError::Format(format!(
                "expected {} payload bytes, found {}",
                n * 4,
                raw.len()
            )));
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = File::create(path)?;
        self.write_to(BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = File::open(path)?;
        Self::read_from(BufReader::new(f))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => {
            SeldError::Format(format!("truncated header while reading {what}"))
        }
        _ => SeldError::Io(e),
    })
}
