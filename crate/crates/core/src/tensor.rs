//! Dense row-major f64 tensors and the matrix kernels built on them.
//!
//! Shapes are dynamic (a `Vec<usize>`), storage is a flat `Vec<f64>`, and the
//! last axis varies fastest. All compute inside the engine happens in f64;
//! only serialized artifacts drop to f32. The matmul kernel parallelizes
//! over disjoint row blocks, so results are bit-identical for any thread
//! count.

use crate::error::{CoreError, Result};
use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Identity matrix of side n.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    /// Length of the last axis, treating the tensor as a stack of rows.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has no axes")
    }

    /// Number of rows when viewed as [rows, last_dim].
    pub fn n_rows(&self) -> usize {
        if self.shape.is_empty() {
            0
        } else {
            self.numel() / self.last_dim()
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(CoreError::Shape(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.data.len(),
                shape,
                numel
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.last_dim();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.last_dim();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(CoreError::Shape(format!(
                "elementwise op on mismatched shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    /// self += alpha * other. Shapes must match exactly.
    pub fn add_scaled(&mut self, other: &Tensor, alpha: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(CoreError::Shape(format!(
                "add_scaled on mismatched shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.data {
            *a *= alpha;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    /// Sum over rows of a rank-2 tensor, yielding shape [cols].
    pub fn col_sum(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(CoreError::Shape(format!(
                "col_sum needs rank 2, got {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, &v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        Tensor::new(vec![c], out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Maximum absolute entry, 0 for an empty tensor.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(i) => Err(CoreError::Numeric(format!(
                "non-finite value {} at flat index {} in {} (shape {:?})",
                self.data[i], i, context, self.shape
            ))),
        }
    }
}

/// out[block] += a[block] * b for a block of rows. Shared by the sequential
/// and parallel matmul paths so both produce identical bits.
fn matmul_block(a: &[f64], b: &[f64], out: &mut [f64], k: usize, q: usize) {
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(q)) {
        for (l, &av) in arow.iter().enumerate() {
            // Masked inputs produce whole zero rows; skipping them is free.
            if av != 0.0 {
                let brow = &b[l * q..l * q + q];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// Work size below which threading overhead dominates.
const PAR_FLOP_THRESHOLD: usize = 4_000_000;

/// C = A · B for rank-2 tensors [m,k] · [k,q] -> [m,q].
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(CoreError::Shape(format!(
            "matmul needs rank-2 operands, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, q) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(CoreError::Shape(format!(
            "matmul inner dims differ: [{m},{k}] x [{k2},{q}]"
        )));
    }
    let mut out = vec![0.0; m * q];
    let work = m.saturating_mul(k).saturating_mul(q);
    let threads = rayon::current_num_threads();
    if work >= PAR_FLOP_THRESHOLD && threads > 1 && m > 1 && q > 0 {
        let rows_per_chunk = m.div_ceil(threads * 4).max(1);
        out.par_chunks_mut(rows_per_chunk * q)
            .enumerate()
            .for_each(|(ci, oc)| {
                let r0 = ci * rows_per_chunk;
                let rows = oc.len() / q;
                matmul_block(&a.data[r0 * k..(r0 + rows) * k], &b.data, oc, k, q);
            });
    } else {
        matmul_block(&a.data, &b.data, &mut out, k, q);
    }
    Tensor::new(vec![m, q], out)
}

/// Transpose of a rank-2 tensor, materialized.
pub fn transpose2d(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(CoreError::Shape(format!(
            "transpose2d needs rank 2, got {:?}",
            a.shape
        )));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for j in 0..k {
            out[j * m + i] = a.data[i * k + j];
        }
    }
    Tensor::new(vec![k, m], out)
}

/// A^T · B without materializing the transpose. Used for weight gradients.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(CoreError::Shape(format!(
            "matmul_tn needs rank-2 operands, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (m2, q) = (b.shape[0], b.shape[1]);
    if m != m2 {
        return Err(CoreError::Shape(format!(
            "matmul_tn outer dims differ: [{m},{k}]^T x [{m2},{q}]"
        )));
    }
    // out[l, j] = sum_i a[i, l] * b[i, j]; accumulate row by row so the
    // inner loop stays contiguous in both operands.
    let mut out = vec![0.0; k * q];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let brow = &b.data[i * q..(i + 1) * q];
        for (l, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let orow = &mut out[l * q..(l + 1) * q];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    Tensor::new(vec![k, q], out)
}

/// A · B^T. Used for input gradients where B is a weight matrix.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(CoreError::Shape(format!(
            "matmul_nt needs rank-2 operands, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (q, k2) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(CoreError::Shape(format!(
            "matmul_nt inner dims differ: [{m},{k}] x [{q},{k2}]^T"
        )));
    }
    let mut out = vec![0.0; m * q];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * q..(i + 1) * q];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o = acc;
        }
    }
    Tensor::new(vec![m, q], out)
}

/// A learnable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(&value.shape);
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}
