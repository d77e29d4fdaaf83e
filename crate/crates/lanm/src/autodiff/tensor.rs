//! Dense row-major 2-D tensors of `f64`.

use crate::error::{Error, Result};

/// A dense matrix of 64-bit floats, stored row-major.
///
/// External inputs are validated at construction: the data length must match
/// `rows * cols` and every entry must be finite. Results of internal tape
/// arithmetic bypass the finiteness check (overflow is surfaced where a
/// contract demands it, e.g. when a training loss turns non-finite).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    /// Validated constructor for external data.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Data(format!(
                "tensor data length {} does not match shape {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor entry {v}")));
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Internal constructor for computed values; skips the finiteness check.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor::from_raw(rows, cols, vec![value; rows * cols])
    }

    /// 1x1 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Tensor::from_raw(1, 1, vec![value])
    }

    /// Build from nested rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Data("ragged rows in tensor literal".into()));
        }
        Tensor::new(r, c, rows.concat())
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
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
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// The single value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            (self.rows, self.cols),
            (1, 1),
            "item() requires a 1x1 tensor"
        );
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Stack a set of equally wide tensors on top of each other.
    pub fn vstack(parts: &[&Tensor]) -> Result<Tensor> {
        let cols = parts.first().map_or(0, |t| t.cols);
        if parts.iter().any(|t| t.cols != cols) {
            return Err(Error::Data("vstack: column counts differ".into()));
        }
        let rows = parts.iter().map(|t| t.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for t in parts {
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor::from_raw(rows, cols, data))
    }
}

// ── Matmul kernels ───────────────────────────────────────────────────────
//
// The training loop is dominated by these three products, so each uses a
// loop order that keeps the inner loop over contiguous memory.

/// C = A * B, shapes (r x k) * (k x c).
pub(crate) fn mm_nn(a: &Tensor, b: &Tensor) -> Tensor {
    let (r, k) = (a.rows, a.cols);
    let c = b.cols;
    debug_assert_eq!(k, b.rows);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * c..(i + 1) * c];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * c..(p + 1) * c];
            for j in 0..c {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::from_raw(r, c, out)
}

/// C = A * B^T, shapes (r x k) * (c x k). Inner loop is a dot of two rows.
pub(crate) fn mm_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (r, k) = (a.rows, a.cols);
    let c = b.rows;
    debug_assert_eq!(k, b.cols);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..c {
            let brow = &b.data[j * k..(j + 1) * k];
            // Four accumulators so the reduction vectorizes.
            let mut s0 = 0.0;
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            let mut s3 = 0.0;
            let chunks = k / 4;
            for p in 0..chunks {
                let q = p * 4;
                s0 += arow[q] * brow[q];
                s1 += arow[q + 1] * brow[q + 1];
                s2 += arow[q + 2] * brow[q + 2];
                s3 += arow[q + 3] * brow[q + 3];
            }
            let mut s = (s0 + s1) + (s2 + s3);
            for q in chunks * 4..k {
                s += arow[q] * brow[q];
            }
            out[i * c + j] = s;
        }
    }
    Tensor::from_raw(r, c, out)
}

/// C = A^T * B, shapes (k x r) * (k x c). Rank-1 update per row of A/B.
pub(crate) fn mm_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, r) = (a.rows, a.cols);
    let c = b.cols;
    debug_assert_eq!(k, b.rows);
    let mut out = vec![0.0; r * c];
    for p in 0..k {
        let arow = &a.data[p * r..(p + 1) * r];
        let brow = &b.data[p * c..(p + 1) * c];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::from_raw(r, c, out)
}
