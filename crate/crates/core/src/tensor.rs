use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major float32 tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} imply {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let numel = dims.iter().product();
        Self {
            dims,
            data: vec![0.0; numel],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Contiguous slice obtained by fixing the leading indices.
    pub fn slice(&self, leading: &[usize]) -> &[f32] {
        let (start, len) = self.span(leading);
        &self.data[start..start + len]
    }

    pub fn slice_mut(&mut self, leading: &[usize]) -> &mut [f32] {
        let (start, len) = self.span(leading);
        &mut self.data[start..start + len]
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        self.slice(&[i])
    }

    fn span(&self, leading: &[usize]) -> (usize, usize) {
        assert!(leading.len() <= self.dims.len(), "too many indices");
        let mut stride: usize = self.dims[leading.len()..].iter().product();
        let len = stride;
        let mut start = 0;
        for (axis, &idx) in leading.iter().enumerate().rev() {
            assert!(idx < self.dims[axis], "index {idx} out of range on axis {axis}");
            start += idx * stride;
            stride *= self.dims[axis];
        }
        (start, len)
    }
}
