//! Dense row-major tensors in double precision, plus the three matrix
//! product layouts the backward passes need. Sizes here are desk-scale, so
//! clarity and checkability win over raw speed; the inner loops are still
//! written to auto-vectorize.

use std::fmt;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a scalar loss, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("{op}: index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("parameter {0:?} is already registered")]
    DuplicateParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major tensor; scalars use shape `[1]`, vectors `[n]`, matrices
/// `[rows, cols]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, NnError> {
        let count: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || count != data.len() {
            return Err(NnError::ShapeMismatch {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let count: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; count],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let count: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; count],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Rows/cols view; 1-D tensors read as a single row.
    pub(crate) fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("tensor of shape {:?} used as a matrix", self.shape),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        let (_, cols) = self.dims2();
        self.data[row * cols + col]
    }

    pub(crate) fn row_slice(&self, row: usize) -> &[f64] {
        let (_, cols) = self.dims2();
        &self.data[row * cols..(row + 1) * cols]
    }

    pub(crate) fn add_in_place(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

impl fmt::Display for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tensor{:?}", self.shape)
    }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize), NnError> {
    if t.shape.len() == 2 {
        Ok((t.shape[0], t.shape[1]))
    } else {
        Err(NnError::ShapeMismatch {
            op,
            lhs: t.shape.clone(),
            rhs: vec![],
        })
    }
}

/// `A[m×k] · B[k×n]`. The shared dimension is walked four rows of `B` at a
/// time so every pass over the output row carries four products, which
/// multiplies the arithmetic per memory access. The grouping is fixed, so
/// results are deterministic across runs and platforms with IEEE f64.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
    let (m, ka) = require_2d("matmul", a)?;
    let (kb, n) = require_2d("matmul", b)?;
    if ka != kb {
        return Err(NnError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    let blocks = ka / 4 * 4;
    for i in 0..m {
        let a_row = &a.data[i * ka..(i + 1) * ka];
        let out_row = &mut out[i * n..(i + 1) * n];
        let mut k = 0;
        while k < blocks {
            let (a0, a1, a2, a3) = (a_row[k], a_row[k + 1], a_row[k + 2], a_row[k + 3]);
            let rows = &b.data[k * n..(k + 4) * n];
            let (b0, rest) = rows.split_at(n);
            let (b1, rest) = rest.split_at(n);
            let (b2, b3) = rest.split_at(n);
            for j in 0..n {
                out_row[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            k += 4;
        }
        for (k, &a_ik) in a_row.iter().enumerate().skip(blocks) {
            let b_row = &b.data[k * n..(k + 1) * n];
            for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
                *o += a_ik * b_kj;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// `A[m×n] · Bᵀ` for `B[k×n]`: row-by-row dot products, four independent
/// accumulators at a time so one pass over the `A` row feeds four outputs.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
    let (m, na) = require_2d("matmul_nt", a)?;
    let (k, nb) = require_2d("matmul_nt", b)?;
    if na != nb {
        return Err(NnError::ShapeMismatch {
            op: "matmul_nt",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * k];
    let blocks = k / 4 * 4;
    for i in 0..m {
        let a_row = &a.data[i * na..(i + 1) * na];
        let out_row = &mut out[i * k..(i + 1) * k];
        let mut j = 0;
        while j < blocks {
            let rows = &b.data[j * nb..(j + 4) * nb];
            let (b0, rest) = rows.split_at(nb);
            let (b1, rest) = rest.split_at(nb);
            let (b2, b3) = rest.split_at(nb);
            let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
            for (x, &v) in a_row.iter().enumerate() {
                s0 += v * b0[x];
                s1 += v * b1[x];
                s2 += v * b2[x];
                s3 += v * b3[x];
            }
            out_row[j] = s0;
            out_row[j + 1] = s1;
            out_row[j + 2] = s2;
            out_row[j + 3] = s3;
            j += 4;
        }
        for j in blocks..k {
            let b_row = &b.data[j * nb..(j + 1) * nb];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out_row[j] = acc;
        }
    }
    Tensor::new(&[m, k], out)
}

/// `Aᵀ · B` for `A[m×k]`, `B[m×n]`: outer products accumulated four rows of
/// the shared dimension per pass over the output, with the same fixed
/// deterministic grouping as [`matmul`].
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
    let (ma, k) = require_2d("matmul_tn", a)?;
    let (mb, n) = require_2d("matmul_tn", b)?;
    if ma != mb {
        return Err(NnError::ShapeMismatch {
            op: "matmul_tn",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; k * n];
    let blocks = ma / 4 * 4;
    let mut l = 0;
    while l < blocks {
        let a_rows = &a.data[l * k..(l + 4) * k];
        let (a0, rest) = a_rows.split_at(k);
        let (a1, rest) = rest.split_at(k);
        let (a2, a3) = rest.split_at(k);
        let b_rows = &b.data[l * n..(l + 4) * n];
        let (b0, rest) = b_rows.split_at(n);
        let (b1, rest) = rest.split_at(n);
        let (b2, b3) = rest.split_at(n);
        for i in 0..k {
            let (c0, c1, c2, c3) = (a0[i], a1[i], a2[i], a3[i]);
            let out_row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                out_row[j] += c0 * b0[j] + c1 * b1[j] + c2 * b2[j] + c3 * b3[j];
            }
        }
        l += 4;
    }
    for l in blocks..ma {
        let a_row = &a.data[l * k..(l + 1) * k];
        let b_row = &b.data[l * n..(l + 1) * n];
        for (i, &a_li) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &b_lj) in out_row.iter_mut().zip(b_row) {
                *o += a_li * b_lj;
            }
        }
    }
    Tensor::new(&[k, n], out)
}
