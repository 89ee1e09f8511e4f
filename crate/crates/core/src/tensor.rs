//! Dense 2-way and 3-way arrays and the tensor-algebra primitives the fusion
//! operators are defined against.
//!
//! Storage is row-major with the last index fastest. For a [`Tensor3`] with
//! dims `(d1, d2, d3)` entry `[i, j, k]` lives at `(i * d2 + j) * d3 + k`.
//! Every constructor rejects zero-sized dimensions and non-finite data.

use std::fmt;

use crate::error::{check_dim, Error, Result};

/// One of the three modes of a [`Tensor3`], numbered from 1 as in the usual
/// `T ×ₙ M` notation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    One,
    Two,
    Three,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::One, Mode::Two, Mode::Three];

    /// 0-based axis index.
    pub fn axis(self) -> usize {
        match self {
            Mode::One => 0,
            Mode::Two => 1,
            Mode::Three => 2,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "mode {}", self.axis() + 1)
    }
}

fn ensure_finite(context: &str, data: &[f64]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context.to_string()))
    }
}

/// Row-major `rows × cols` matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Zero matrix. Panics on a zero dimension; use [`Matrix::from_vec`] for
    /// checked construction from untrusted sizes.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dims must be positive");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::ZeroDimension(format!("matrix {rows}x{cols}")));
        }
        check_dim("matrix data length", rows * cols, data.len())?;
        ensure_finite("matrix construction", &data)?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            check_dim("matrix row length", cols, row.len())?;
            data.extend_from_slice(row);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        Matrix::diag(&vec![1.0; n])
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &x) in values.iter().enumerate() {
            m.data[i * n + i] = x;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `M x`, contracting the column index.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("matvec input", self.cols, x.len())?;
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `xᵀ M`, contracting the row index.
    pub fn vecmat(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("vecmat input", self.rows, x.len())?;
        let mut out = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            axpy(xr, self.row(r), &mut out);
        }
        Ok(out)
    }

    /// `self += alpha · a ⊗ b`.
    pub fn add_outer(&mut self, alpha: f64, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            axpy(alpha * ar, b, self.row_mut(r));
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }
}

/// Dense 3-way array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    /// Zero tensor. Panics on a zero dimension.
    pub fn zeros(dims: [usize; 3]) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "tensor dims must be positive");
        Tensor3 {
            dims,
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::ZeroDimension(format!("tensor {dims:?}")));
        }
        check_dim("tensor data length", dims.iter().product(), data.len())?;
        ensure_finite("tensor construction", &data)?;
        Ok(Tensor3 { dims, data })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut t = Tensor3::zeros(dims);
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    t.set(i, j, k, f(i, j, k));
                }
            }
        }
        t
    }

    /// The diagonal identity tensor `I[l, m, k] = 1 iff l = m = k`.
    pub fn identity(n: usize) -> Self {
        let mut t = Tensor3::zeros([n, n, n]);
        for i in 0..n {
            t.set(i, i, i, 1.0);
        }
        t
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn dim(&self, mode: Mode) -> usize {
        self.dims[mode.axis()]
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.offset(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, value: f64) {
        let o = self.offset(i, j, k);
        self.data[o] = value;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// The mode-3 slice `T[:, :, k]` as a `d1 × d2` matrix.
    pub fn slice3(&self, k: usize) -> Matrix {
        let [d1, d2, _] = self.dims;
        let mut m = Matrix::zeros(d1, d2);
        for i in 0..d1 {
            for j in 0..d2 {
                m.set(i, j, self.get(i, j, k));
            }
        }
        m
    }

    /// `T ×ₙ M`: contracts the column index of `M` (shape `new × old`) with
    /// mode `n`, so `out[.., j, ..] = Σᵢ M[j, i] · T[.., i, ..]`.
    pub fn mode_product(&self, m: &Matrix, mode: Mode) -> Result<Tensor3> {
        let axis = mode.axis();
        if m.cols() != self.dims[axis] {
            return Err(Error::DimensionMismatch {
                context: format!("{mode} product (matrix cols vs tensor dim)"),
                expected: self.dims[axis],
                actual: m.cols(),
            });
        }
        let mut out_dims = self.dims;
        out_dims[axis] = m.rows();
        let mut out = Tensor3::zeros(out_dims);
        let [d1, d2, d3] = self.dims;
        for i in 0..d1 {
            for j in 0..d2 {
                for k in 0..d3 {
                    let t = self.get(i, j, k);
                    let idx = [i, j, k];
                    let old = idx[axis];
                    for new in 0..m.rows() {
                        let mut o = idx;
                        o[axis] = new;
                        let off = out.offset(o[0], o[1], o[2]);
                        out.data[off] += m.get(new, old) * t;
                    }
                }
            }
        }
        ensure_finite("mode product", &out.data)?;
        Ok(out)
    }

    /// `T ×ₙ x`: contracts mode `n` with a vector and drops it. The result is
    /// indexed by the two remaining modes in their original order.
    pub fn mode_vector_product(&self, x: &[f64], mode: Mode) -> Result<Matrix> {
        let axis = mode.axis();
        if x.len() != self.dims[axis] {
            return Err(Error::DimensionMismatch {
                context: format!("{mode} vector product"),
                expected: self.dims[axis],
                actual: x.len(),
            });
        }
        let [d1, d2, d3] = self.dims;
        let (rows, cols) = match mode {
            Mode::One => (d2, d3),
            Mode::Two => (d1, d3),
            Mode::Three => (d1, d2),
        };
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..d1 {
            for j in 0..d2 {
                for k in 0..d3 {
                    let t = self.get(i, j, k);
                    let (xi, r, c) = match mode {
                        Mode::One => (i, j, k),
                        Mode::Two => (j, i, k),
                        Mode::Three => (k, i, j),
                    };
                    let off = r * cols + c;
                    out.data[off] += x[xi] * t;
                }
            }
        }
        ensure_finite("mode vector product", &out.data)?;
        Ok(out)
    }

    /// Bilinear contraction `(T ×₁ q) ×₂ v`, returning a vector over mode 3.
    pub fn bilinear(&self, q: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let tq = self.mode_vector_product(q, Mode::One)?;
        tq.vecmat(v)
    }
}

/// Tucker reconstruction `((Tc ×₁ Wq) ×₂ Wv) ×₃ Wo`.
pub fn tucker_reconstruct(core: &Tensor3, wq: &Matrix, wv: &Matrix, wo: &Matrix) -> Result<Tensor3> {
    core.mode_product(wq, Mode::One)?
        .mode_product(wv, Mode::Two)?
        .mode_product(wo, Mode::Three)
}

/// `a ⊗ b` as an `|a| × |b|` matrix.
pub fn outer_product(a: &[f64], b: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(a.len(), b.len());
    m.add_outer(1.0, a, b);
    m
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Softmax with the maximum subtracted before exponentiation.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}
