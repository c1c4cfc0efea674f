//! Dense small-matrix arithmetic.
//!
//! Every value flowing through a candidate program is a [`Matrix`]. Sizes are
//! tiny (2×2, 2×1, 1×1 in practice) so storage is inline for up to four
//! entries and only spills to the heap beyond that.
//!
//! All fallible operations check their result for non-finite entries, so a
//! NaN or infinity never leaks out silently; it surfaces as
//! [`MatrixError::NonFinite`].

use std::fmt;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

/// Pivots smaller than this (relative to the largest entry) count as singular.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// Floor applied before taking a logarithm.
pub const LOG_FLOOR: f64 = 1e-8;

/// Largest dimension a matrix may take.
pub const MAX_DIM: usize = 16;

type Storage = SmallVec<[f64; 4]>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MatrixError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op} needs a square matrix, got {shape:?}")]
    NotSquare { op: &'static str, shape: (usize, usize) },
    #[error("matrix is singular")]
    Singular,
    #[error("{op} produced a non-finite entry")]
    NonFinite { op: &'static str },
    #[error("dimension {0} exceeds the limit of {MAX_DIM}")]
    TooLarge(usize),
}

pub type Result<T> = std::result::Result<T, MatrixError>;

/// Entrywise functions available to programs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnaryOp {
    Tanh,
    Sin,
    Cos,
    /// `log(max(x, 1e-8))`
    Log,
    Exp,
    Abs,
    Square,
}

impl UnaryOp {
    pub const ALL: [UnaryOp; 7] = [
        UnaryOp::Tanh,
        UnaryOp::Sin,
        UnaryOp::Cos,
        UnaryOp::Log,
        UnaryOp::Exp,
        UnaryOp::Abs,
        UnaryOp::Square,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Tanh => "tanh",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Log => "log",
            UnaryOp::Exp => "exp",
            UnaryOp::Abs => "abs",
            UnaryOp::Square => "square",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.name() == name)
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Sin => x.sin(),
            UnaryOp::Cos => x.cos(),
            UnaryOp::Log => x.max(LOG_FLOOR).ln(),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Abs => x.abs(),
            UnaryOp::Square => x * x,
        }
    }
}

/// Operations combining a matrix with a scalar constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalarOp {
    Scale,
    AddScalar,
    MaxWithScalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    /// Minimum of every row, returned as a column.
    RowMinColumn,
    MeanAll,
    FrobeniusNorm,
}

/// A dense row-major matrix of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Storage,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix{}x{}{:?}", self.rows, self.cols, self.to_rows())
    }
}

impl fmt::Display for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for r in 0..self.rows {
            if r > 0 {
                write!(f, ", ")?;
            }
            write!(f, "[")?;
            for c in 0..self.cols {
                if c > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{}", self.get(r, c))?;
            }
            write!(f, "]")?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data.
    ///
    /// Panics if `data.len() != rows * cols` or either dimension is zero.
    pub fn new(rows: usize, cols: usize, data: impl IntoIterator<Item = f64>) -> Self {
        let data: Storage = data.into_iter().collect();
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        assert_eq!(data.len(), rows * cols, "data length must equal rows*cols");
        Self { rows, cols, data }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let n = rows.len();
        let m = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        for r in rows {
            assert_eq!(r.as_ref().len(), m, "ragged rows");
        }
        Self::new(n, m, rows.iter().flat_map(|r| r.as_ref().iter().copied()))
    }

    pub fn column(values: &[f64]) -> Self {
        Self::new(values.len(), 1, values.iter().copied())
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(1, 1, [value])
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, std::iter::repeat_n(0.0, rows * cols))
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols).map(|c| c.to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// The single entry of a 1×1 matrix.
    pub fn as_scalar(&self) -> Option<f64> {
        (self.rows == 1 && self.cols == 1).then(|| self.data[0])
    }

    /// Largest absolute entrywise difference; `INFINITY` if shapes differ.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    fn checked(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(MatrixError::NonFinite { op })
        }
    }

    pub fn matmul(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.rows {
            return Err(MatrixError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: b.shape(),
            });
        }
        let (n, k, m) = (self.rows, self.cols, b.cols);
        let mut out: Storage = SmallVec::with_capacity(n * m);
        for i in 0..n {
            let row = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let mut acc = 0.0;
                for (l, a) in row.iter().enumerate() {
                    acc += a * b.data[l * m + j];
                }
                out.push(acc);
            }
        }
        Matrix { rows: n, cols: m, data: out }.checked("matmul")
    }

    pub fn add(&self, b: &Matrix) -> Result<Matrix> {
        self.zip_broadcast(b, "add", |x, y| x + y)
    }

    pub fn sub(&self, b: &Matrix) -> Result<Matrix> {
        self.zip_broadcast(b, "sub", |x, y| x - y)
    }

    /// Elementwise combination. Besides identical shapes, three broadcasts
    /// are accepted: a 1×1 operand acts as a scalar, an `r×1` column is
    /// repeated across the columns of an `r×n` operand, and a `1×n` row is
    /// repeated down the rows of an `r×n` operand.
    fn zip_broadcast(&self, b: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        let (ar, ac) = self.shape();
        let (br, bc) = b.shape();
        let (rows, cols) = if (ar, ac) == (br, bc) {
            (ar, ac)
        } else if (ar, ac) == (1, 1) {
            (br, bc)
        } else if (br, bc) == (1, 1) {
            (ar, ac)
        } else if ar == br && (ac == 1 || bc == 1) {
            (ar, ac.max(bc))
        } else if ac == bc && (ar == 1 || br == 1) {
            (ar.max(br), ac)
        } else {
            return Err(MatrixError::ShapeMismatch { op, left: (ar, ac), right: (br, bc) });
        };
        let pick = |m: &Matrix, r: usize, c: usize| -> f64 {
            let rr = if m.rows == 1 { 0 } else { r };
            let cc = if m.cols == 1 { 0 } else { c };
            m.data[rr * m.cols + cc]
        };
        let mut out: Storage = SmallVec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                out.push(f(pick(self, r, c), pick(b, r, c)));
            }
        }
        Matrix { rows, cols, data: out }.checked(op)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out: Storage = SmallVec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                out.push(self.data[r * self.cols + c]);
            }
        }
        Matrix { rows: self.cols, cols: self.rows, data: out }
    }

    /// Gauss-Jordan inversion with partial pivoting.
    pub fn invert(&self) -> Result<Matrix> {
        if self.rows != self.cols {
            return Err(MatrixError::NotSquare { op: "inv", shape: self.shape() });
        }
        let n = self.rows;
        let scale = self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 || !scale.is_finite() {
            return Err(MatrixError::Singular);
        }
        let tol = PIVOT_TOLERANCE * scale;
        let mut a = self.data.clone();
        let mut inv = Matrix::identity(n).data;
        for col in 0..n {
            let (pivot_row, pivot_abs) = (col..n)
                .map(|r| (r, a[r * n + col].abs()))
                .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pivot_abs < tol {
                return Err(MatrixError::Singular);
            }
            if pivot_row != col {
                for j in 0..n {
                    a.swap(col * n + j, pivot_row * n + j);
                    inv.swap(col * n + j, pivot_row * n + j);
                }
            }
            let p = a[col * n + col];
            for j in 0..n {
                a[col * n + j] /= p;
                inv[col * n + j] /= p;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let factor = a[r * n + col];
                if factor == 0.0 {
                    continue;
                }
                for j in 0..n {
                    a[r * n + j] -= factor * a[col * n + j];
                    inv[r * n + j] -= factor * inv[col * n + j];
                }
            }
        }
        Matrix { rows: n, cols: n, data: inv }.checked("inv")
    }

    pub fn map(&self, op: UnaryOp) -> Result<Matrix> {
        let data = self.data.iter().map(|&v| op.apply(v)).collect();
        Matrix { rows: self.rows, cols: self.cols, data }.checked(op.name())
    }

    pub fn scalar_op(&self, op: ScalarOp, s: f64) -> Result<Matrix> {
        let f = |v: f64| match op {
            ScalarOp::Scale => v * s,
            ScalarOp::AddScalar => v + s,
            ScalarOp::MaxWithScalar => v.max(s),
        };
        let data = self.data.iter().map(|&v| f(v)).collect();
        Matrix { rows: self.rows, cols: self.cols, data }.checked("scalar op")
    }

    pub fn scale(&self, s: f64) -> Result<Matrix> {
        self.scalar_op(ScalarOp::Scale, s)
    }

    pub fn reduce(&self, kind: Reduction) -> Result<Matrix> {
        match kind {
            Reduction::RowMinColumn => {
                let data = self
                    .data
                    .chunks(self.cols)
                    .map(|row| row.iter().copied().fold(f64::INFINITY, f64::min))
                    .collect();
                Matrix { rows: self.rows, cols: 1, data }.checked("rowmin")
            }
            Reduction::MeanAll => {
                let mean = self.data.iter().sum::<f64>() / self.data.len() as f64;
                Matrix::scalar(mean).checked("mean")
            }
            Reduction::FrobeniusNorm => Matrix::scalar(self.squared_norm().sqrt()).checked("norm"),
        }
    }

    pub fn symmetrized(&self) -> Result<Matrix> {
        self.add(&self.transpose())?.scale(0.5)
    }

    /// Whether a square matrix is symmetric within `tol` and has no
    /// eigenvalue below `-tol`. Only 1×1 and 2×2 are checked exactly;
    /// larger matrices fall back to a diagonal/Gershgorin test.
    pub fn is_symmetric_psd(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        let n = self.rows;
        for i in 0..n {
            for j in 0..i {
                if (self.get(i, j) - self.get(j, i)).abs() > tol {
                    return false;
                }
            }
        }
        match n {
            1 => self.data[0] >= -tol,
            2 => {
                let (a, b, d) = (self.get(0, 0), 0.5 * (self.get(0, 1) + self.get(1, 0)), self.get(1, 1));
                let tr = a + d;
                let disc = ((a - d) * (a - d) + 4.0 * b * b).sqrt();
                0.5 * (tr - disc) >= -tol
            }
            _ => (0..n).all(|i| {
                let off: f64 = (0..n).filter(|&j| j != i).map(|j| self.get(i, j).abs()).sum();
                self.get(i, i) - off >= -tol
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows)
    }

    #[test]
    fn matmul_examples() {
        let b = m(&[&[5.0], &[6.0]]);
        assert_eq!(Matrix::identity(2).matmul(&b).unwrap(), b);
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(a.matmul(&b).unwrap(), m(&[&[17.0], &[39.0]]));
        let err = a.matmul(&Matrix::zeros(3, 1)).unwrap_err();
        assert_eq!(
            err,
            MatrixError::ShapeMismatch { op: "matmul", left: (2, 2), right: (3, 1) }
        );
    }

    #[test]
    fn add_sub_examples() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(a.add(&Matrix::zeros(2, 2)).unwrap(), a);
        assert_eq!(a.sub(&a).unwrap(), Matrix::zeros(2, 2));
        let s = m(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(Matrix::identity(2).add(&s).unwrap(), m(&[&[1.0, 1.0], &[1.0, 1.0]]));
        assert!(a.add(&Matrix::zeros(1, 3)).is_err());
        assert!(a.add(&Matrix::zeros(3, 3)).is_err());
        assert_eq!(a.add(&m(&[&[10.0, 20.0]])).unwrap(), m(&[&[11.0, 22.0], &[13.0, 24.0]]));
    }

    #[test]
    fn column_and_scalar_broadcast() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let col = Matrix::column(&[10.0, 20.0]);
        assert_eq!(a.add(&col).unwrap(), m(&[&[11.0, 12.0], &[23.0, 24.0]]));
        assert_eq!(col.sub(&a).unwrap(), m(&[&[9.0, 8.0], &[17.0, 16.0]]));
        assert_eq!(a.add(&Matrix::scalar(1.0)).unwrap(), m(&[&[2.0, 3.0], &[4.0, 5.0]]));
    }

    #[test]
    fn invert_examples() {
        let inv = Matrix::diag(&[2.0, 4.0]).invert().unwrap();
        assert_eq!(inv, Matrix::diag(&[0.5, 0.25]));
        assert_eq!(m(&[&[1.0, 1.0], &[1.0, 1.0]]).invert(), Err(MatrixError::Singular));
        assert!(matches!(Matrix::zeros(2, 1).invert(), Err(MatrixError::NotSquare { .. })));
        let a = Matrix::identity(2).add(&m(&[&[0.0, 1.0], &[1.0, 0.0]]).scale(0.1).unwrap()).unwrap();
        let prod = a.matmul(&a.invert().unwrap()).unwrap();
        assert!(prod.max_abs_diff(&Matrix::identity(2)) < 1e-10);
        assert_eq!(Matrix::zeros(2, 2).invert(), Err(MatrixError::Singular));
    }

    #[test]
    fn transpose_examples() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(a.transpose(), m(&[&[1.0, 3.0], &[2.0, 4.0]]));
        assert_eq!(a.transpose().transpose(), a);
        assert_eq!(Matrix::zeros(2, 1).transpose().shape(), (1, 2));
    }

    #[test]
    fn elementwise_examples() {
        let z = Matrix::zeros(2, 2);
        assert_eq!(z.map(UnaryOp::Tanh).unwrap(), z);
        assert_eq!(z.map(UnaryOp::Sin).unwrap(), z);
        let l = Matrix::scalar(0.0).map(UnaryOp::Log).unwrap().as_scalar().unwrap();
        assert!((l - (-18.420680743952367)).abs() < 1e-12);
        assert!(matches!(
            Matrix::scalar(1000.0).map(UnaryOp::Exp),
            Err(MatrixError::NonFinite { .. })
        ));
    }

    #[test]
    fn scalar_op_examples() {
        let a = m(&[&[1.0, -2.0]]);
        assert_eq!(a.scale(1.0).unwrap(), a);
        let s = m(&[&[2.0, 4.0]]).scale(0.85).unwrap();
        assert!(s.max_abs_diff(&m(&[&[1.7, 3.4]])) < 1e-15);
        let c = m(&[&[-1.0, 2.0]]).scalar_op(ScalarOp::MaxWithScalar, 0.0).unwrap();
        assert_eq!(c, m(&[&[0.0, 2.0]]));
        assert_eq!(a.scalar_op(ScalarOp::AddScalar, 1.0).unwrap(), m(&[&[2.0, -1.0]]));
    }

    #[test]
    fn reduction_examples() {
        let a = m(&[&[3.0, 1.0], &[2.0, 5.0]]);
        assert_eq!(a.reduce(Reduction::RowMinColumn).unwrap(), Matrix::column(&[1.0, 2.0]));
        assert_eq!(Matrix::zeros(2, 2).reduce(Reduction::MeanAll).unwrap(), Matrix::scalar(0.0));
        assert_eq!(m(&[&[3.0, 4.0]]).reduce(Reduction::FrobeniusNorm).unwrap(), Matrix::scalar(5.0));
    }

    #[test]
    fn identity_examples() {
        assert_eq!(Matrix::identity(1), Matrix::scalar(1.0));
        assert_eq!(Matrix::identity(2), m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let a = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        assert_eq!(a.matmul(&Matrix::identity(3)).unwrap(), a);
    }

    #[test]
    fn psd_check() {
        assert!(Matrix::identity(2).is_symmetric_psd(1e-9));
        assert!(!Matrix::diag(&[1.0, -1.0]).is_symmetric_psd(1e-9));
        assert!(!m(&[&[1.0, 0.5], &[0.0, 1.0]]).is_symmetric_psd(1e-9));
    }
}
