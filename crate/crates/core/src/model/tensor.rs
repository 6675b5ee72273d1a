use crate::error::{Result, SeldError};
use crate::scalar::Scalar;
use crate::seldt::SeldtTensor;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(SeldError::Shape { expected: dims, got: vec![data.len()] });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], v: T) -> Self {
        Self { dims: dims.to_vec(), data: vec![v; dims.iter().product()] }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(SeldError::Shape { expected: dims.to_vec(), got: self.dims });
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { dims: self.dims.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elements `[start, start + len)` along axis 0.
    pub fn slice_outer(&self, start: usize, len: usize) -> Self {
        let inner: usize = self.dims[1..].iter().product();
        let mut dims = self.dims.clone();
        dims[0] = len;
        Self { dims, data: self.data[start * inner..(start + len) * inner].to_vec() }
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| SeldError::domain("nothing to stack"))?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.dims != first.dims {
                return Err(SeldError::Shape { expected: first.dims.clone(), got: p.dims.clone() });
            }
            data.extend_from_slice(&p.data);
        }
        let mut dims = vec![parts.len()];
        dims.extend_from_slice(&first.dims);
        Ok(Self { dims, data })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn to_seldt(&self) -> SeldtTensor {
        SeldtTensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
        }
    }

    pub fn from_seldt(t: &SeldtTensor) -> Self {
        Self {
            dims: t.dims.clone(),
            data: t.data.iter().map(|&v| T::lit(v as f64)).collect(),
        }
    }
}
