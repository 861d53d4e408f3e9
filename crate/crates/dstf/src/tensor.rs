//! Dense row-major tensor of `f32` with the reductions the rest of the
//! crate builds on. Reductions accumulate in `f64` so sparsity counts and
//! loss values are stable across platforms.

use crate::error::{Error, Result};

/// Supported ranks: vectors, matrices, and NCHW feature maps.
const VALID_RANKS: [usize; 3] = [1, 2, 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    AbsSum,
    SqSum,
    MaxAbs,
}

/// Dense n-dimensional array of 32-bit reals, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if !VALID_RANKS.contains(&shape.len()) {
            return Err(Error::InvalidTensor(format!(
                "rank {} not in {{1, 2, 4}}",
                shape.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidTensor(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(shape, vec![0.0; numel]).expect("valid shape for zeros")
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(shape, vec![value; numel]).expect("valid shape for filled")
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("non-empty vector")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Same data under a new shape; extent product must match.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn elementwise(op: ElemOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(Error::ShapeMismatch {
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| match op {
                ElemOp::Add => x + y,
                ElemOp::Sub => x - y,
                ElemOp::Mul => x * y,
            })
            .collect();
        Ok(Tensor {
            shape: a.shape.clone(),
            data,
        })
    }

    /// Number of entries with `|x| <= eps`. `eps = 0` counts exact zeros.
    pub fn count_zeros(&self, eps: f32) -> usize {
        assert!(eps >= 0.0, "eps must be non-negative");
        self.data.iter().filter(|x| x.abs() <= eps).count()
    }

    /// Reduction over all entries, accumulated in f64 in index order.
    pub fn reduce(&self, kind: Reduction) -> f64 {
        match kind {
            Reduction::Sum => self.data.iter().map(|&x| x as f64).sum(),
            Reduction::AbsSum => self.data.iter().map(|&x| (x as f64).abs()).sum(),
            Reduction::SqSum => self.data.iter().map(|&x| (x as f64) * (x as f64)).sum(),
            Reduction::MaxAbs => self
                .data
                .iter()
                .map(|&x| (x as f64).abs())
                .fold(0.0, f64::max),
        }
    }
}
