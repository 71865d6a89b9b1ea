//! Local dense linear algebra.
//!
//! Everything a single rank computes goes through [`DenseMatrix`]: panel
//! updates, checksum sums and the residual test used to validate a finished
//! product. Storage is row-major `f64`.

use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

/// Default pass threshold for [`residual_check`].
pub const RESIDUAL_THRESHOLD: f64 = 100.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DenseError {
    #[error("dimension mismatch: {what} ({lhs:?} vs {rhs:?})")]
    Dimension {
        what: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("data length {len} does not match {rows}x{cols}")]
    Length { rows: usize, cols: usize, len: usize },
    #[error("degenerate norm in residual check (|C| = {c_norm}, |x| = {x_norm})")]
    DegenerateNorm { c_norm: f64, x_norm: f64 },
    #[error("parse error: {0}")]
    Parse(String),
}

/// Row-major dense block of `f64`.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, DenseError> {
        if data.len() != rows * cols {
            return Err(DenseError::Length {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    /// Builds a matrix from row slices. Panics on ragged input; meant for
    /// literals in tests and fixtures.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        DenseMatrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// Entries drawn uniformly from `[-1, 1)`.
    pub fn random<G: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut G) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        DenseMatrix { rows, cols, data }
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

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Copies the `rows x cols` window starting at `(r0, c0)`.
    pub fn submatrix(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> DenseMatrix {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols, "window out of range");
        let mut out = DenseMatrix::zeros(rows, cols);
        for i in 0..rows {
            let src = &self.data[(r0 + i) * self.cols + c0..(r0 + i) * self.cols + c0 + cols];
            out.data[i * cols..(i + 1) * cols].copy_from_slice(src);
        }
        out
    }

    /// Writes `block` with its top-left corner at `(r0, c0)`.
    pub fn set_submatrix(&mut self, r0: usize, c0: usize, block: &DenseMatrix) {
        assert!(
            r0 + block.rows <= self.rows && c0 + block.cols <= self.cols,
            "window out of range"
        );
        for i in 0..block.rows {
            let dst = (r0 + i) * self.cols + c0;
            self.data[dst..dst + block.cols].copy_from_slice(block.row(i));
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &DenseMatrix) -> Result<(), DenseError> {
        if self.shape() != other.shape() {
            return Err(DenseError::Dimension {
                what: "axpy operands",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        for (d, s) in self.data.iter_mut().zip(&other.data) {
            *d += alpha * s;
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| alpha * v).collect(),
        }
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix, DenseError> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>, DenseError> {
        if x.len() != self.cols {
            return Err(DenseError::Dimension {
                what: "matrix-vector",
                lhs: self.shape(),
                rhs: (x.len(), 1),
            });
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Fixture text form: a `rows cols` header followed by one line per row.
    /// Floats are printed in shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.rows, self.cols);
        for i in 0..self.rows {
            let line: Vec<String> = self.row(i).iter().map(|v| format!("{v:?}")).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }
}

impl FromStr for DenseMatrix {
    type Err = DenseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut lines = s.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| DenseError::Parse("missing header".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| DenseError::Parse(format!("bad header {header:?}: {e}")))?;
        let [rows, cols] = dims[..] else {
            return Err(DenseError::Parse(format!("bad header {header:?}")));
        };
        let mut data = Vec::with_capacity(rows * cols);
        for (i, line) in lines.enumerate() {
            let before = data.len();
            for tok in line.split_whitespace() {
                data.push(
                    tok.parse::<f64>()
                        .map_err(|e| DenseError::Parse(format!("row {i}: {tok:?}: {e}")))?,
                );
            }
            if data.len() - before != cols {
                return Err(DenseError::Parse(format!(
                    "row {i} has {} entries, expected {cols}",
                    data.len() - before
                )));
            }
        }
        DenseMatrix::from_vec(rows, cols, data)
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

/// Rank-k update `c += a * b`, in place.
///
/// The loop order is fixed (k outermost, then i, then j) so every entry of
/// `c` sees its products added in increasing k. Two runs on the same inputs
/// are bit-identical.
pub fn gemm_update(c: &mut DenseMatrix, a: &DenseMatrix, b: &DenseMatrix) -> Result<(), DenseError> {
    if a.cols != b.rows {
        return Err(DenseError::Dimension {
            what: "A block cols vs B block rows",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    if c.rows != a.rows || c.cols != b.cols {
        return Err(DenseError::Dimension {
            what: "C vs A*B",
            lhs: c.shape(),
            rhs: (a.rows, b.cols),
        });
    }
    let n = c.cols;
    for k in 0..a.cols {
        let b_row = &b.data[k * n..(k + 1) * n];
        for i in 0..a.rows {
            let aik = a.data[i * a.cols + k];
            let c_row = &mut c.data[i * n..(i + 1) * n];
            for (cij, bkj) in c_row.iter_mut().zip(b_row) {
                *cij += aik * bkj;
            }
        }
    }
    Ok(())
}

/// `a * b` into a fresh matrix.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, DenseError> {
    let mut c = DenseMatrix::zeros(a.rows, b.cols);
    gemm_update(&mut c, a, b)?;
    Ok(c)
}

pub fn frobenius_norm(m: &DenseMatrix) -> f64 {
    vector_norm2(m.as_slice())
}

pub fn vector_norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualReport {
    pub residual: f64,
    pub threshold: f64,
    pub passed: bool,
}

/// Randomized product check `|Cx - A(Bx)| / (n eps |C|_F |x|)` with the
/// default threshold.
pub fn residual_check(
    a: &DenseMatrix,
    b: &DenseMatrix,
    c: &DenseMatrix,
    x: &[f64],
    eps: f64,
) -> Result<ResidualReport, DenseError> {
    residual_check_with_threshold(a, b, c, x, eps, RESIDUAL_THRESHOLD)
}

pub fn residual_check_with_threshold(
    a: &DenseMatrix,
    b: &DenseMatrix,
    c: &DenseMatrix,
    x: &[f64],
    eps: f64,
    threshold: f64,
) -> Result<ResidualReport, DenseError> {
    if a.cols != b.rows || c.rows != a.rows || c.cols != b.cols {
        return Err(DenseError::Dimension {
            what: "residual operands",
            lhs: c.shape(),
            rhs: (a.rows, b.cols),
        });
    }
    let cx = c.matvec(x)?;
    let abx = a.matvec(&b.matvec(x)?)?;
    let diff: Vec<f64> = cx.iter().zip(&abx).map(|(u, v)| u - v).collect();
    let num = vector_norm2(&diff);
    if num == 0.0 {
        return Ok(ResidualReport {
            residual: 0.0,
            threshold,
            passed: true,
        });
    }
    let c_norm = frobenius_norm(c);
    let x_norm = vector_norm2(x);
    if c_norm == 0.0 || x_norm == 0.0 {
        return Err(DenseError::DegenerateNorm { c_norm, x_norm });
    }
    let n = a.rows.max(a.cols).max(b.cols) as f64;
    let residual = num / (n * eps * c_norm * x_norm);
    Ok(ResidualReport {
        residual,
        threshold,
        passed: residual <= threshold,
    })
}
