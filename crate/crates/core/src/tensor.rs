//! Dense matrices and order-3 tensors with matricization and n-mode products.
//!
//! Both types store `f64` values in row-major order; for [`Tensor3`] the
//! third index varies fastest. Matricization follows the convention in which
//! the mode-`j` fibers become columns and the remaining indices cycle with
//! the lower-numbered remaining mode varying fastest.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from a row-major value slice; `data.len()` must equal
    /// `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
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

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let src = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        out
    }

    /// `self * other^T` without materializing the transpose.
    pub fn matmul_transposed(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.cols,
            "matmul_transposed: {}x{} * ({}x{})^T",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                let b = other.row(j);
                let mut s = 0.0;
                for (x, y) in a.iter().zip(b) {
                    s += x * y;
                }
                out.data[i * other.rows + j] = s;
            }
        }
        out
    }

    /// Columns `[start, start + len)` as a new matrix.
    pub fn col_block(&self, start: usize, len: usize) -> Matrix {
        assert!(start + len <= self.cols);
        let mut out = Matrix::zeros(self.rows, len);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + len]);
        }
        out
    }

    /// Rows `[start, start + len)` as a new matrix.
    pub fn row_block(&self, start: usize, len: usize) -> Matrix {
        assert!(start + len <= self.rows);
        let mut out = Matrix::zeros(len, self.cols);
        for r in 0..len {
            out.row_mut(r).copy_from_slice(self.row(start + r));
        }
        out
    }

    /// Overwrite columns `[start, ...)` with the contents of `block`.
    pub fn set_col_block(&mut self, start: usize, block: &Matrix) {
        assert_eq!(self.rows, block.rows);
        assert!(start + block.cols <= self.cols);
        for r in 0..self.rows {
            let dst = r * self.cols + start;
            self.data[dst..dst + block.cols].copy_from_slice(block.row(r));
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= s;
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut out = self.clone();
        for (d, s) in out.data.iter_mut().zip(&other.data) {
            *d += s;
        }
        out
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut out = self.clone();
        for (d, s) in out.data.iter_mut().zip(&other.data) {
            *d -= s;
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        math::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(math::abs(*v)))
    }

    /// Largest entrywise |self - other|.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max(math::abs(a - b)))
    }

    /// ||self - other||_F / max(||other||_F, 1), a relative error that stays
    /// meaningful near zero.
    pub fn rel_frobenius_diff(&self, other: &Matrix) -> f64 {
        self.sub(other).frobenius_norm() / other.frobenius_norm().max(1.0)
    }

    /// Deviation of `self^T self` from the identity, in Frobenius norm.
    pub fn gram_identity_deviation(&self) -> f64 {
        let gram = self.transpose().matmul(self);
        gram.sub(&Matrix::identity(self.cols)).frobenius_norm()
    }
}

/// Dense order-3 tensor, row-major with the third index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: (usize, usize, usize),
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.0 * dims.1 * dims.2],
        }
    }

    pub fn from_vec(dims: (usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::ShapeMismatch(format!(
                "tensor data length {} does not match {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    /// Dimension of `mode` (1-based).
    pub fn dim(&self, mode: usize) -> usize {
        match mode {
            1 => self.dims.0,
            2 => self.dims.1,
            3 => self.dims.2,
            _ => panic!("mode {mode} out of range"),
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize, c: usize) -> f64 {
        self.data[(a * self.dims.1 + b) * self.dims.2 + c]
    }

    #[inline]
    pub fn set(&mut self, a: usize, b: usize, c: usize, v: f64) {
        self.data[(a * self.dims.1 + b) * self.dims.2 + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Slice `a` along the first mode as a `dims.1 x dims.2` matrix.
    pub fn slice1(&self, a: usize) -> Matrix {
        assert!(a < self.dims.0);
        let n = self.dims.1 * self.dims.2;
        Matrix::from_vec(self.dims.1, self.dims.2, self.data[a * n..(a + 1) * n].to_vec())
            .expect("slice length")
    }

    /// Overwrite slice `a` of the first mode.
    pub fn set_slice1(&mut self, a: usize, m: &Matrix) {
        assert!(a < self.dims.0);
        assert_eq!((m.rows(), m.cols()), (self.dims.1, self.dims.2));
        let n = self.dims.1 * self.dims.2;
        self.data[a * n..(a + 1) * n].copy_from_slice(m.data());
    }

    pub fn scale(&self, s: f64) -> Tensor3 {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= s;
        }
        out
    }

    pub fn sub(&self, other: &Tensor3) -> Tensor3 {
        assert_eq!(self.dims, other.dims);
        let mut out = self.clone();
        for (d, s) in out.data.iter_mut().zip(&other.data) {
            *d -= s;
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        math::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max(math::abs(a - b)))
    }

    pub fn rel_frobenius_diff(&self, other: &Tensor3) -> f64 {
        self.sub(other).frobenius_norm() / other.frobenius_norm().max(1.0)
    }
}

/// Mode-`mode` unfolding of `t` (1-based mode).
///
/// Row index is the mode-`mode` index; the remaining two indices form the
/// column index with the lower-numbered one varying fastest:
///
/// - mode 1: `col = i2 + i3 * I2`
/// - mode 2: `col = i1 + i3 * I1`
/// - mode 3: `col = i1 + i2 * I1`
pub fn matricize(t: &Tensor3, mode: usize) -> Result<Matrix> {
    let (i1, i2, i3) = t.dims();
    let (rows, cols) = match mode {
        1 => (i1, i2 * i3),
        2 => (i2, i1 * i3),
        3 => (i3, i1 * i2),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "matricization mode must be 1, 2, or 3, got {mode}"
            )))
        }
    };
    let mut out = Matrix::zeros(rows, cols);
    for a in 0..i1 {
        for b in 0..i2 {
            for c in 0..i3 {
                let v = t.get(a, b, c);
                match mode {
                    1 => out.set(a, b + c * i2, v),
                    2 => out.set(b, a + c * i1, v),
                    _ => out.set(c, a + b * i1, v),
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`matricize`]: fold a mode-`mode` unfolding back into a tensor
/// with the given dims.
pub fn fold(m: &Matrix, mode: usize, dims: (usize, usize, usize)) -> Result<Tensor3> {
    let (i1, i2, i3) = dims;
    let (rows, cols) = match mode {
        1 => (i1, i2 * i3),
        2 => (i2, i1 * i3),
        3 => (i3, i1 * i2),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "fold mode must be 1, 2, or 3, got {mode}"
            )))
        }
    };
    if (m.rows(), m.cols()) != (rows, cols) {
        return Err(Error::ShapeMismatch(format!(
            "fold: expected {rows}x{cols} unfolding for dims {dims:?} mode {mode}, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let mut t = Tensor3::zeros(dims);
    for a in 0..i1 {
        for b in 0..i2 {
            for c in 0..i3 {
                let v = match mode {
                    1 => m.get(a, b + c * i2),
                    2 => m.get(b, a + c * i1),
                    _ => m.get(c, a + b * i1),
                };
                t.set(a, b, c, v);
            }
        }
    }
    Ok(t)
}

/// n-mode product `t x_mode m`: contracts `m` (shape `J x I_mode`) against
/// the mode-`mode` fibers, replacing that dimension with `J`.
pub fn mode_product(t: &Tensor3, m: &Matrix, mode: usize) -> Result<Tensor3> {
    if !(1..=3).contains(&mode) {
        return Err(Error::InvalidArgument(format!(
            "mode-product mode must be 1, 2, or 3, got {mode}"
        )));
    }
    if m.cols() != t.dim(mode) {
        return Err(Error::ShapeMismatch(format!(
            "mode-{mode} product: matrix is {}x{} but tensor dim is {}",
            m.rows(),
            m.cols(),
            t.dim(mode)
        )));
    }
    let (i1, i2, i3) = t.dims();
    let j = m.rows();
    let out_dims = match mode {
        1 => (j, i2, i3),
        2 => (i1, j, i3),
        _ => (i1, i2, j),
    };
    let mut out = Tensor3::zeros(out_dims);
    match mode {
        1 => {
            // out[p,b,c] = sum_a m[p,a] t[a,b,c]; whole slices combine at once
            let n = i2 * i3;
            for p in 0..j {
                for a in 0..i1 {
                    let w = m.get(p, a);
                    if w == 0.0 {
                        continue;
                    }
                    let src = &t.data()[a * n..(a + 1) * n];
                    let dst = &mut out.data_mut()[p * n..(p + 1) * n];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
        }
        2 => {
            for a in 0..i1 {
                for p in 0..j {
                    for b in 0..i2 {
                        let w = m.get(p, b);
                        if w == 0.0 {
                            continue;
                        }
                        for c in 0..i3 {
                            let v = out.get(a, p, c) + w * t.get(a, b, c);
                            out.set(a, p, c, v);
                        }
                    }
                }
            }
        }
        _ => {
            for a in 0..i1 {
                for b in 0..i2 {
                    for p in 0..j {
                        let mut s = 0.0;
                        for c in 0..i3 {
                            s += m.get(p, c) * t.get(a, b, c);
                        }
                        out.set(a, b, p, s);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Rank-1 tensor `a (outer) b (outer) c`.
pub fn outer3(a: &[f64], b: &[f64], c: &[f64]) -> Tensor3 {
    let mut t = Tensor3::zeros((a.len(), b.len(), c.len()));
    for (ia, &va) in a.iter().enumerate() {
        for (ib, &vb) in b.iter().enumerate() {
            for (ic, &vc) in c.iter().enumerate() {
                t.set(ia, ib, ic, va * vb * vc);
            }
        }
    }
    t
}
