//! Dense f64 math kernel: row-major matrices, activations, losses, and the
//! analytic backward rules everything downstream builds on.
//!
//! All tensors are two-dimensional; batching always rides the row dimension.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Row-major real matrix, the carrier for all activations and parameters.
///
/// Values are immutable once produced by an operation; operations return new
/// tensors instead of mutating their inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "tensor dims must be >= 1");
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert!(rows >= 1 && cols >= 1, "tensor dims must be >= 1");
        assert_eq!(
            data.len(),
            rows * cols,
            "data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Tensor2 { rows, cols, data }
    }

    /// Build from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "need at least one row");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor2::from_vec(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor2::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // rows >= 1 and cols >= 1 by construction
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Standard matrix product; `self.cols` must equal `other.rows`.
    pub fn matmul(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut out = Tensor2::zeros(self.rows, other.cols);
        // ikj loop order keeps the inner loop contiguous in both operands.
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Computes `self^T * other` without materializing the transpose.
    pub fn matmul_at(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul_at",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut out = Tensor2::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            for i in 0..self.cols {
                let a = self.data[r * self.cols + i];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[r * other.cols..(r + 1) * other.cols];
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Computes `self * other^T` without materializing the transpose.
    pub fn matmul_bt(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "matmul_bt",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut out = Tensor2::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let arow = &self.data[i * self.cols..(i + 1) * self.cols];
            for j in 0..other.rows {
                let brow = &other.data[j * other.cols..(j + 1) * other.cols];
                let mut acc = 0.0;
                for (&a, &b) in arow.iter().zip(brow) {
                    acc += a * b;
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn add(&self, other: &Tensor2) -> Result<Tensor2> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor2) -> Result<Tensor2> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor2) -> Result<Tensor2> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    fn zip_with(&self, other: &Tensor2, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor2> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Tensor2 {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    /// Adds a 1xC row vector to every row.
    pub fn add_row(&self, bias: &Tensor2) -> Result<Tensor2> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(),
                rhs: bias.shape(),
            });
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] += bias.data[c];
            }
        }
        Ok(out)
    }

    /// Column sums as a 1xC tensor.
    pub fn col_sums(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(1, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c] += self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Elementwise max(0, x).
    pub fn relu(&self) -> Tensor2 {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v.max(0.0)).collect(),
        }
    }

    /// 1.0 where the entry is strictly positive, else 0.0; the relu mask.
    pub fn positive_mask(&self) -> Tensor2 {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    /// Copies `len` columns starting at `start` into a new tensor.
    pub fn col_block(&self, start: usize, len: usize) -> Tensor2 {
        assert!(start + len <= self.cols);
        let mut out = Tensor2::zeros(self.rows, len);
        for r in 0..self.rows {
            out.data[r * len..(r + 1) * len]
                .copy_from_slice(&self.data[r * self.cols + start..r * self.cols + start + len]);
        }
        out
    }

    /// Adds `block` into the columns starting at `start`.
    pub fn add_col_block(&mut self, start: usize, block: &Tensor2) {
        assert_eq!(self.rows, block.rows);
        assert!(start + block.cols <= self.cols);
        for r in 0..self.rows {
            for c in 0..block.cols {
                self.data[r * self.cols + start + c] += block.data[r * block.cols + c];
            }
        }
    }

    /// Gathers the given rows into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor2 {
        assert!(!idx.is_empty());
        let mut out = Tensor2::zeros(idx.len(), self.cols);
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(r));
        }
        out
    }
}

/// Trainable tensor paired with its accumulated gradient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub value: Tensor2,
    pub grad: Tensor2,
}

impl Param {
    pub fn new(value: Tensor2) -> Self {
        let grad = Tensor2::zeros(value.rows(), value.cols());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    /// Adds `g` into the accumulated gradient.
    pub fn accumulate(&mut self, g: &Tensor2) -> Result<()> {
        if self.grad.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "grad accumulate",
                lhs: self.grad.shape(),
                rhs: g.shape(),
            });
        }
        for (a, &b) in self.grad.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
        Ok(())
    }
}

/// Row-wise softmax with max-subtraction; each output row sums to 1.
pub fn softmax_rows(a: &Tensor2) -> Result<Tensor2> {
    if !a.is_finite() {
        return Err(Error::NonFinite("softmax_rows input"));
    }
    let mut out = a.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Backward rule for a row-wise softmax: given the softmax output and the
/// gradient w.r.t. it, returns the gradient w.r.t. the logits.
pub fn softmax_rows_backward(softmax_out: &Tensor2, upstream: &Tensor2) -> Result<Tensor2> {
    if softmax_out.shape() != upstream.shape() {
        return Err(Error::ShapeMismatch {
            op: "softmax_rows_backward",
            lhs: softmax_out.shape(),
            rhs: upstream.shape(),
        });
    }
    let mut out = Tensor2::zeros(softmax_out.rows(), softmax_out.cols());
    for r in 0..out.rows() {
        let s = softmax_out.row(r);
        let g = upstream.row(r);
        let dot: f64 = s.iter().zip(g).map(|(&si, &gi)| si * gi).sum();
        for (o, (&si, &gi)) in out.row_mut(r).iter_mut().zip(s.iter().zip(g)) {
            *o = si * (gi - dot);
        }
    }
    Ok(out)
}

/// Mean negative log-likelihood over rows plus its gradient w.r.t. the logits.
///
/// The gradient is `(softmax - one_hot) / rows`, ready for direct accumulation.
pub fn cross_entropy_logits(logits: &Tensor2, labels: &[usize]) -> Result<(f64, Tensor2)> {
    if labels.len() != logits.rows() {
        return Err(Error::Validation(format!(
            "got {} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("cross_entropy logits"));
    }
    for (row, &label) in labels.iter().enumerate() {
        if label >= logits.cols() {
            return Err(Error::LabelOutOfRange {
                row,
                label,
                num_classes: logits.cols(),
            });
        }
    }
    let probs = softmax_rows(logits)?;
    let n = logits.rows() as f64;
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (r, &label) in labels.iter().enumerate() {
        // log softmax computed from the stable form: log p = z - max - log sum exp
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let logsum: f64 = row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
        loss += logsum - row[label];
        let g = grad.row_mut(r);
        g[label] -= 1.0;
        for v in g.iter_mut() {
            *v /= n;
        }
    }
    Ok((loss / n, grad))
}
