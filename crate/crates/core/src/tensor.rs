//! Dense n-dimensional arrays.
//!
//! Layout is row-major everywhere: the last extent varies fastest. Storage is
//! shared behind an `Arc`, so `reshape` and `clone` are views that never copy.
//!
//! Values are always held as `f64`. A tensor tagged [`DType::F32`] has every
//! value rounded to the nearest `f32` whenever it is constructed, so results
//! carry single-precision storage error while reductions accumulate in double.

use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg;

pub const MAGIC: &[u8; 4] = b"MOST";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            t => Err(Error::Format(format!("unknown dtype tag {t}"))),
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    /// Result dtype of an op mixing `self` and `other`.
    pub fn promote(self, other: DType) -> DType {
        if self == DType::F64 || other == DType::F64 {
            DType::F64
        } else {
            DType::F32
        }
    }
}

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    dtype: DType,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.dtype == other.dtype && self.data == other.data
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds an f64 tensor, checking extents and finiteness.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::with_dtype(shape, data, DType::F64)
    }

    pub fn with_dtype(shape: &[usize], mut data: Vec<f64>, dtype: DType) -> Result<Self> {
        if shape.contains(&0) {
            return dim_err(format!("extents must be positive, got {shape:?}"));
        }
        if numel(shape) != data.len() {
            return dim_err(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            ));
        }
        if dtype == DType::F32 {
            quantize(&mut data);
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            dtype,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor::new(shape, vec![value; numel(shape)]).expect("full: valid shape and finite value")
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(&[1], vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::new(&[n, n], data).expect("eye")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|arc| (*arc).clone())
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range for axis {i}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return dim_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            dtype: self.dtype,
        })
    }

    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        if dtype == self.dtype {
            return self.clone();
        }
        Tensor::with_dtype(&self.shape, self.data.to_vec(), dtype).expect("dtype cast of finite data")
    }

    /// Builds a tensor with the given dtype from freshly computed values.
    pub(crate) fn from_op(shape: &[usize], data: Vec<f64>, dtype: DType, op: &str) -> Result<Tensor> {
        Tensor::with_dtype(shape, data, dtype).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("{op}: {msg}")),
            other => other,
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.as_matrix("matmul lhs")?;
        let (k2, n) = other.as_matrix("matmul rhs")?;
        if k != k2 {
            return dim_err(format!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape, other.shape
            ));
        }
        let out = linalg::matmul(m, k, n, &self.data, &other.data);
        Tensor::from_op(&[m, n], out, self.dtype.promote(other.dtype), "matmul")
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.as_matrix("transpose")?;
        Tensor::from_op(&[c, r], linalg::transpose(r, c, &self.data), self.dtype, "transpose")
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Tensor::from_op(&self.shape, data, self.dtype, "map")
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return dim_err(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Tensor::from_op(&self.shape, data, self.dtype.promote(other.dtype), "zip")
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn as_matrix(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => dim_err(format!("{what}: expected a matrix, got shape {:?}", self.shape)),
        }
    }

    /// Writes `MOST | dtype u8 | rank u8 | extents u64... | values`, all
    /// little-endian.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[self.dtype.tag(), self.shape.len() as u8])?;
        for &e in &self.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        match self.dtype {
            DType::F32 => {
                let mut buf = Vec::with_capacity(self.numel() * 4);
                for &v in self.data.iter() {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
                w.write_all(&buf)?;
            }
            DType::F64 => {
                let mut buf = Vec::with_capacity(self.numel() * 8);
                for &v in self.data.iter() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad tensor magic {magic:?}")));
        }
        let mut head = [0u8; 2];
        r.read_exact(&mut head)?;
        let dtype = DType::from_tag(head[0])?;
        let rank = head[1] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n = numel(&shape);
        let mut raw = vec![0u8; n * dtype.size_of()];
        r.read_exact(&mut raw)?;
        let data = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        Tensor::with_dtype(&shape, data, dtype)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }
}

pub(crate) fn quantize(data: &mut [f64]) {
    for v in data {
        *v = *v as f32 as f64;
    }
}
