use std::fmt;

use crate::error::{bail, Result};

use super::kernels;

/// Dense row-major `f32` array.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            bail!(Shape, "zero-sized dimension in {:?}", dims);
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            bail!(Shape, "dims {:?} need {} values, got {}", dims, numel, data.len());
        }
        Ok(Self { dims: dims.to_vec(), data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let numel = dims.iter().product();
        Self { dims: dims.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(dims: &[usize], value: f32) -> Self {
        let numel = dims.iter().product();
        Self { dims: dims.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f32) -> Self {
        Self { dims: vec![1], data: vec![value] }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self { dims: vec![data.len()], data }
    }

    /// 2-D tensor from nested rows; panics on ragged input (test helper).
    pub fn from_rows(rows: &[&[f32]]) -> Self {
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self { dims: vec![rows.len(), cols], data }
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

    /// Leading dimension (1 for vectors).
    pub fn rows(&self) -> usize {
        if self.dims.len() == 1 {
            1
        } else {
            self.dims[0]
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        *self.dims.last().expect("tensor has at least one dim")
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != self.data.len() {
            bail!(Shape, "cannot reshape {:?} into {:?}", self.dims, dims);
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|x| !x.is_finite()) {
            bail!(Invariant, "{what}: non-finite value {} at flat index {pos}", self.data[pos]);
        }
        Ok(())
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.dims.len() != 2 {
            bail!(Shape, "transpose needs a 2-D tensor, got {:?}", self.dims);
        }
        let (r, c) = (self.dims[0], self.dims[1]);
        let mut out = vec![0.0; r * c];
        kernels::transpose(&self.data, r, c, &mut out);
        Ok(Self { dims: vec![c, r], data: out })
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|&x| x as f64 * x as f64).sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &x| m.max(x.abs()))
    }

    /// Bitwise equality (distinguishes -0.0 from 0.0, unlike `==`).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.dims == other.dims
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// `a[m×k] · b[k×n]`; every output is an `f64` dot product accumulated in
/// `k` order and rounded once, so grouping rows into a batch never changes a
/// result bit.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims.len() > 2 || b.dims.len() != 2 {
        bail!(Shape, "matmul operands must be 2-D (or a 1-D lhs), got {:?}·{:?}", a.dims, b.dims);
    }
    let (m, k) = if a.dims.len() == 1 { (1, a.dims[0]) } else { (a.dims[0], a.dims[1]) };
    let (k2, n) = (b.dims[0], b.dims[1]);
    if k != k2 {
        bail!(Shape, "matmul inner dims differ: {:?}·{:?}", a.dims, b.dims);
    }
    let mut out = vec![0.0; m * n];
    kernels::matmul(&a.data, &b.data, m, k, n, &mut out);
    let dims = if a.dims.len() == 1 { vec![n] } else { vec![m, n] };
    Ok(Tensor { dims, data: out })
}

/// Row-wise softmax at `temperature`; `0` yields the lowest-index argmax one-hot.
pub fn softmax_rows(x: &Tensor, temperature: f32) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for (src, dst) in x.data.chunks(c).zip(out.data.chunks_mut(c)) {
        kernels::softmax_row(src, temperature, dst);
    }
    out
}

/// `x / sqrt(mean(x²) + 1e-6) ⊙ gain`, applied to every row.
pub fn rmsnorm(x: &Tensor, gain: &Tensor) -> Result<Tensor> {
    if gain.numel() != x.cols() {
        bail!(Shape, "rmsnorm gain has {} values for rows of {}", gain.numel(), x.cols());
    }
    let c = x.cols();
    let mut out = x.clone();
    for (src, dst) in x.data.chunks(c).zip(out.data.chunks_mut(c)) {
        kernels::rmsnorm_row(src, &gain.data, dst);
    }
    Ok(out)
}
