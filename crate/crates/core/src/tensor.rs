//! Dense row-major `f64` tensors.
//!
//! There is no autodiff here. Every backward rule lives with the code that
//! owns the forward computation. Loops run in a fixed order so results are
//! bitwise reproducible from run to run.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::RngState;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Parameter(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension {
                op: "new",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor::zeros(&other.shape)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Parameter("ragged rows".into()));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Width of the trailing dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Dimension {
                op,
                left: self.shape.clone(),
                right: vec![],
            }),
        }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// `self (m×k) · other (k×n)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.expect_matrix("matmul")?;
        let (k2, n) = other.expect_matrix("matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let out = gemm(m, k, n, &self.data, (k, 1), &other.data, (n, 1));
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `selfᵀ · other` for `self (k×m)`, `other (k×n)`.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = self.expect_matrix("matmul_tn")?;
        let (k2, n) = other.expect_matrix("matmul_tn")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_tn",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let out = gemm(m, k, n, &self.data, (1, m), &other.data, (n, 1));
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `self · otherᵀ` for `self (m×k)`, `other (n×k)`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.expect_matrix("matmul_nt")?;
        let (n, k2) = other.expect_matrix("matmul_nt")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_nt",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let out = gemm(m, k, n, &self.data, (k, 1), &other.data, (1, k));
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.expect_matrix("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.same_shape(other, op)?;
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

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "dot")?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    /// Column sums of a matrix.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (r, c) = self.expect_matrix("sum_rows")?;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, &x) in out.iter_mut().zip(&self.data[i * c..(i + 1) * c]) {
                *o += x;
            }
        }
        Ok(Tensor {
            shape: vec![c],
            data: out,
        })
    }

    /// Rows `[start, start + count)` of a matrix.
    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Tensor> {
        let (r, c) = self.expect_matrix("slice_rows")?;
        if start + count > r || count == 0 {
            return Err(Error::Index(format!(
                "rows {start}..{} of {r}",
                start + count
            )));
        }
        Ok(Tensor {
            shape: vec![count, c],
            data: self.data[start * c..(start + count) * c].to_vec(),
        })
    }

    /// Columns `[start, start + count)` of a matrix.
    pub fn slice_cols(&self, start: usize, count: usize) -> Result<Tensor> {
        let (r, c) = self.expect_matrix("slice_cols")?;
        if start + count > c || count == 0 {
            return Err(Error::Index(format!(
                "cols {start}..{} of {c}",
                start + count
            )));
        }
        let mut data = Vec::with_capacity(r * count);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + start + count]);
        }
        Ok(Tensor {
            shape: vec![r, count],
            data,
        })
    }

    /// Writes `block` into columns starting at `start`.
    pub fn set_cols(&mut self, start: usize, block: &Tensor) -> Result<()> {
        let (r, c) = self.expect_matrix("set_cols")?;
        let (br, bc) = block.expect_matrix("set_cols")?;
        if br != r || start + bc > c {
            return Err(Error::Dimension {
                op: "set_cols",
                left: self.shape.clone(),
                right: block.shape.clone(),
            });
        }
        for i in 0..r {
            self.data[i * c + start..i * c + start + bc]
                .copy_from_slice(&block.data[i * bc..(i + 1) * bc]);
        }
        Ok(())
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (r, c) = self.expect_matrix("softmax_rows")?;
        let mut out = self.data.clone();
        for i in 0..r {
            softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        Ok(Tensor {
            shape: vec![r, c],
            data: out,
        })
    }
}

/// `A (m×k) · B (k×n)` with operands given by (row, column) strides.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    // SAFETY: the strides address exactly the `m×k` and `k×n` elements of
    // `a` and `b`, whose lengths the callers checked against their shapes,
    // and `out` is a dense `m×n` buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

/// Elementwise product; shapes must match.
pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.hadamard(b)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.matmul(b)
}

/// I.i.d. `N(0, std²)` samples. Samples are drawn as standard normals and
/// then scaled, so two calls that differ only in `std` are exact multiples.
pub fn gaussian(rng: &mut RngState, shape: &[usize], std: f64) -> Result<Tensor> {
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::Parameter(format!("std must be positive, got {std}")));
    }
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng.inner());
            z * std
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Mean token cross-entropy and its gradient with respect to the logits.
///
/// The returned error signal is `(softmax(logits) - onehot(targets)) / t`,
/// which is exactly `∂loss/∂logits`.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    let (t, v) = logits.expect_matrix("softmax_cross_entropy")?;
    if targets.len() != t {
        return Err(Error::Dimension {
            op: "softmax_cross_entropy",
            left: logits.shape.clone(),
            right: vec![targets.len()],
        });
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
        return Err(Error::Index(format!("target {bad} outside vocabulary of {v}")));
    }
    let inv_t = 1.0 / t as f64;
    let mut grad = vec![0.0; t * v];
    let mut loss = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        let row = &logits.data[i * v..(i + 1) * v];
        let (arg, max) = row
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (j, x)| if x > acc.1 { (j, x) } else { acc });
        // Sums exclude the max entry (and the target) so that tiny losses and
        // gradients keep full relative precision.
        let mut rest = 0.0;
        let mut not_target = 0.0;
        for (j, &x) in row.iter().enumerate() {
            let ex = (x - max).exp();
            if j != arg {
                rest += ex;
            }
            if j != y {
                not_target += ex;
            }
        }
        let log_z = rest.ln_1p();
        let z = 1.0 + rest;
        loss += (max - row[y]) + log_z;
        let g = &mut grad[i * v..(i + 1) * v];
        for (gj, &x) in g.iter_mut().zip(row) {
            *gj = (x - max - log_z).exp() * inv_t;
        }
        g[y] = -(not_target / z) * inv_t;
    }
    Ok((
        loss * inv_t,
        Tensor {
            shape: vec![t, v],
            data: grad,
        },
    ))
}
