//! Dense row-major f32 tensors.
//!
//! Tensors are plain value types; gradient tracking lives on the tape, with
//! `requires_grad` recording the default trainability when a tensor is bound
//! to one.

use crate::rng::fnv1a64;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {shape:?} implies {numel} elements, got {}",
            data.len()
        );
        Tensor {
            shape,
            data,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn scalar_value(v: f32) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Value of a 1-element tensor.
    pub fn scalar(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "scalar() on shape {:?}", self.shape);
        self.data[0]
    }

    /// Leading dimension, i.e. the batch size of a stacked tensor.
    pub fn rows(&self) -> usize {
        assert!(!self.shape.is_empty());
        self.shape[0]
    }

    /// Elements per row for a stacked tensor.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// View of row `i` of a stacked tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    /// Copy row `i` out as a tensor with the per-row shape.
    pub fn row_tensor(&self, i: usize) -> Tensor {
        Tensor::new(self.shape[1..].to_vec(), self.row(i).to_vec())
    }

    /// Stack same-shaped tensors along a new leading axis.
    pub fn stack(rows: &[&Tensor]) -> Tensor {
        assert!(!rows.is_empty(), "stack of zero tensors");
        let per = rows[0].shape.clone();
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(&per);
        let mut data = Vec::with_capacity(rows.len() * rows[0].len());
        for r in rows {
            assert_eq!(r.shape, per, "stack over mismatched shapes");
            data.extend_from_slice(&r.data);
        }
        Tensor::new(shape, data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// FNV-1a over the raw little-endian bytes of the data.
    pub fn content_hash(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fnv1a64(&bytes)
    }
}
