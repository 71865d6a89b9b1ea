//! Floating-point checksum algebra.
//!
//! A [`ChecksumScheme`] holds an `f x p` weight matrix: `p` data holders are
//! protected by `f` checksums `y_i = sum_j w_ij x_j`. Any `f` erasures can be
//! undone as long as every `f x f` column subset of the weights is
//! nonsingular. Matrices are encoded per process block in both directions
//! (row sums, column sums and the corner cross sum), which is what lets a
//! single corrupted entry be located and corrected.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dense::{frobenius_norm, DenseError, DenseMatrix};

/// Multiplier in the consistency tolerance `50 * n * eps * |core|_F`.
pub const CONSISTENCY_FACTOR: f64 = 50.0;

const MAX_SCHEME_DRAWS: usize = 64;
const MAX_SUBSETS_CHECKED: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("invalid scheme: f = {f}, p = {p} (need 1 <= f <= p)")]
    InvalidScheme { f: usize, p: usize },
    #[error("could not draw well-conditioned weights for f = {f}, p = {p}")]
    IllConditioned { f: usize, p: usize },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("{lost} erasures exceed tolerance f = {f}")]
    TooManyErasures { lost: usize, f: usize },
    #[error("uncorrectable: recovery submatrix for lost set {lost:?} is singular (cond {cond:e})")]
    Singular { lost: Vec<usize>, cond: f64 },
    #[error("scheme parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Dense(#[from] DenseError),
}

/// Weight matrix plus the consistency tolerance policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ChecksumScheme {
    f: usize,
    p: usize,
    seed: u64,
    weights: DenseMatrix,
    tolerance_factor: f64,
}

impl ChecksumScheme {
    /// Wraps an explicit `f x p` weight matrix.
    pub fn from_weights(weights: DenseMatrix, seed: u64) -> Result<Self, CodecError> {
        let (f, p) = weights.shape();
        if f == 0 || f > p {
            return Err(CodecError::InvalidScheme { f, p });
        }
        Ok(ChecksumScheme {
            f,
            p,
            seed,
            weights,
            tolerance_factor: CONSISTENCY_FACTOR,
        })
    }

    pub fn f(&self) -> usize {
        self.f
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &DenseMatrix {
        &self.weights
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[(i, j)]
    }

    pub fn tolerance_factor(&self) -> f64 {
        self.tolerance_factor
    }

    /// Consistency threshold for data of dimension `n` and Frobenius norm
    /// `norm`.
    pub fn tolerance(&self, n: usize, norm: f64) -> f64 {
        self.tolerance_factor * n as f64 * f64::EPSILON * norm
    }

    /// `f p seed` header followed by one line of weights per checksum.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {} {}\n", self.f, self.p, self.seed);
        for i in 0..self.f {
            let row: Vec<String> = self.weights.row(i).iter().map(|w| format!("{w:?}")).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }
}

impl FromStr for ChecksumScheme {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut lines = s.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| CodecError::Parse("empty input".into()))?;
        let toks: Vec<&str> = header.split_whitespace().collect();
        let [f, p, seed] = toks[..] else {
            return Err(CodecError::Parse(format!("bad header {header:?}")));
        };
        let parse_usize = |t: &str| t.parse::<usize>().map_err(|e| CodecError::Parse(format!("{t:?}: {e}")));
        let (f, p) = (parse_usize(f)?, parse_usize(p)?);
        let seed = seed
            .parse::<u64>()
            .map_err(|e| CodecError::Parse(format!("{seed:?}: {e}")))?;
        let mut text = format!("{f} {p}\n");
        for line in lines {
            text.push_str(line);
            text.push('\n');
        }
        let weights: DenseMatrix = text.parse()?;
        ChecksumScheme::from_weights(weights, seed)
    }
}

/// Builds an `f`-failure scheme over `p` holders.
///
/// `f = 1` gives plain sums. For `f > 1` weights are drawn uniformly from
/// `[0.5, 1.5)` and the draw is accepted only if every sampled `f x f`
/// column subset has condition number below `1/eps`.
pub fn make_scheme(f: usize, p: usize, seed: u64) -> Result<ChecksumScheme, CodecError> {
    if f == 0 || f > p {
        return Err(CodecError::InvalidScheme { f, p });
    }
    if f == 1 {
        let ones = DenseMatrix::from_vec(1, p, vec![1.0; p])?;
        return ChecksumScheme::from_weights(ones, seed);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_SCHEME_DRAWS {
        let data = (0..f * p).map(|_| rng.gen_range(0.5..1.5)).collect();
        let weights = DenseMatrix::from_vec(f, p, data)?;
        if subsets_well_conditioned(&weights, &mut rng) {
            return ChecksumScheme::from_weights(weights, seed);
        }
    }
    Err(CodecError::IllConditioned { f, p })
}

fn subsets_well_conditioned(weights: &DenseMatrix, rng: &mut ChaCha8Rng) -> bool {
    let (f, p) = weights.shape();
    let limit = 1.0 / f64::EPSILON;
    let check = |cols: &[usize]| condition_number(&restrict(weights, cols)) < limit;
    if binomial(p, f) <= MAX_SUBSETS_CHECKED as u128 {
        let mut ok = true;
        for_each_subset(p, f, &mut |cols| ok &= check(cols));
        ok
    } else {
        (0..MAX_SUBSETS_CHECKED).all(|_| {
            let mut cols = sample(rng, p, f).into_vec();
            cols.sort_unstable();
            check(&cols)
        })
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

fn for_each_subset(n: usize, k: usize, visit: &mut dyn FnMut(&[usize])) {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
        if cur.len() == k {
            visit(cur);
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, visit);
            cur.pop();
        }
    }
    rec(0, n, k, &mut Vec::with_capacity(k), visit);
}

/// Square matrix made of the first `cols.len()` weight rows restricted to
/// `cols`.
fn restrict(weights: &DenseMatrix, cols: &[usize]) -> DenseMatrix {
    let m = cols.len();
    let mut out = DenseMatrix::zeros(m, m);
    for i in 0..m {
        for (j, &c) in cols.iter().enumerate() {
            out[(i, j)] = weights[(i, c)];
        }
    }
    out
}

/// LU factors with complete pivoting of a small square system.
struct PivotedLu {
    lu: DenseMatrix,
    row_perm: Vec<usize>,
    col_perm: Vec<usize>,
    singular: bool,
}

impl PivotedLu {
    fn new(m: &DenseMatrix) -> Self {
        let n = m.rows();
        let mut lu = m.clone();
        let mut row_perm: Vec<usize> = (0..n).collect();
        let mut col_perm: Vec<usize> = (0..n).collect();
        let mut singular = false;
        for k in 0..n {
            let (mut pr, mut pc, mut best) = (k, k, 0.0);
            for i in k..n {
                for j in k..n {
                    if lu[(i, j)].abs() > best {
                        best = lu[(i, j)].abs();
                        pr = i;
                        pc = j;
                    }
                }
            }
            if best == 0.0 {
                singular = true;
                break;
            }
            if pr != k {
                for j in 0..n {
                    let t = lu[(k, j)];
                    lu[(k, j)] = lu[(pr, j)];
                    lu[(pr, j)] = t;
                }
                row_perm.swap(k, pr);
            }
            if pc != k {
                for i in 0..n {
                    let t = lu[(i, k)];
                    lu[(i, k)] = lu[(i, pc)];
                    lu[(i, pc)] = t;
                }
                col_perm.swap(k, pc);
            }
            let piv = lu[(k, k)];
            for i in k + 1..n {
                let l = lu[(i, k)] / piv;
                lu[(i, k)] = l;
                for j in k + 1..n {
                    let v = lu[(k, j)];
                    lu[(i, j)] -= l * v;
                }
            }
        }
        PivotedLu {
            lu,
            row_perm,
            col_perm,
            singular,
        }
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = rhs.len();
        let mut y: Vec<f64> = self.row_perm.iter().map(|&r| rhs[r]).collect();
        for i in 0..n {
            for j in 0..i {
                y[i] -= self.lu[(i, j)] * y[j];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                y[i] -= self.lu[(i, j)] * y[j];
            }
            y[i] /= self.lu[(i, i)];
        }
        let mut x = vec![0.0; n];
        for (k, &c) in self.col_perm.iter().enumerate() {
            x[c] = y[k];
        }
        x
    }
}

fn norm1(m: &DenseMatrix) -> f64 {
    (0..m.cols())
        .map(|j| (0..m.rows()).map(|i| m[(i, j)].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// 1-norm condition number; infinite for singular input.
pub fn condition_number(m: &DenseMatrix) -> f64 {
    let n = m.rows();
    if n == 0 {
        return 1.0;
    }
    let lu = PivotedLu::new(m);
    if lu.singular {
        return f64::INFINITY;
    }
    let mut inv = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = lu.solve(&e);
        for i in 0..n {
            inv[(i, j)] = col[i];
        }
    }
    norm1(m) * norm1(&inv)
}

/// `y_i = sum_j w_ij x_j`, accumulated in increasing `j`.
pub fn encode_vector<V: AsRef<[f64]>>(parts: &[V], scheme: &ChecksumScheme) -> Result<Vec<Vec<f64>>, CodecError> {
    if parts.len() != scheme.p {
        return Err(CodecError::Dimension(format!(
            "{} parts for a scheme over {} holders",
            parts.len(),
            scheme.p
        )));
    }
    let len = parts.first().map_or(0, |x| x.as_ref().len());
    if let Some(j) = parts.iter().position(|x| x.as_ref().len() != len) {
        return Err(CodecError::Dimension(format!(
            "ragged parts: part {j} has length {}, part 0 has {len}",
            parts[j].as_ref().len()
        )));
    }
    Ok((0..scheme.f)
        .map(|i| {
            let mut y = vec![0.0; len];
            for (j, x) in parts.iter().enumerate() {
                let w = scheme.weight(i, j);
                for (yk, xk) in y.iter_mut().zip(x.as_ref()) {
                    *yk += w * xk;
                }
            }
            y
        })
        .collect())
}

/// Reconstructs erased parts from survivors and checksums.
///
/// Uses the first `|lost|` checksums. The `|lost| x |lost|` weight
/// restriction is solved once with complete pivoting and applied to every
/// element position.
pub fn recover_erasures(
    surviving: &BTreeMap<usize, Vec<f64>>,
    checksums: &[Vec<f64>],
    lost: &BTreeSet<usize>,
    scheme: &ChecksumScheme,
) -> Result<BTreeMap<usize, Vec<f64>>, CodecError> {
    if lost.is_empty() {
        return Ok(BTreeMap::new());
    }
    if lost.len() > scheme.f {
        return Err(CodecError::TooManyErasures {
            lost: lost.len(),
            f: scheme.f,
        });
    }
    if checksums.len() < lost.len() {
        return Err(CodecError::Dimension(format!(
            "{} checksums supplied for {} erasures",
            checksums.len(),
            lost.len()
        )));
    }
    for j in 0..scheme.p {
        if surviving.contains_key(&j) == lost.contains(&j) {
            return Err(CodecError::Dimension(format!(
                "holder {j} must be exactly one of surviving or lost"
            )));
        }
    }
    if let Some(&bad) = surviving.keys().chain(lost.iter()).find(|&&j| j >= scheme.p) {
        return Err(CodecError::Dimension(format!("holder index {bad} out of range")));
    }
    let len = checksums[0].len();
    if surviving.values().chain(checksums.iter()).any(|v| v.len() != len) {
        return Err(CodecError::Dimension("ragged parts or checksums".into()));
    }

    let lost_idx: Vec<usize> = lost.iter().copied().collect();
    let m = lost_idx.len();
    let system = restrict(&scheme.weights, &lost_idx);
    let cond = condition_number(&system);
    if !(cond < 1.0 / f64::EPSILON) {
        return Err(CodecError::Singular { lost: lost_idx, cond });
    }
    let lu = PivotedLu::new(&system);

    // rhs_i = y_i - sum over survivors of w_ij x_j
    let mut rhs: Vec<Vec<f64>> = checksums[..m].to_vec();
    for (i, r) in rhs.iter_mut().enumerate() {
        for (&j, x) in surviving {
            let w = scheme.weight(i, j);
            for (rk, xk) in r.iter_mut().zip(x) {
                *rk -= w * xk;
            }
        }
    }
    let mut out: BTreeMap<usize, Vec<f64>> = lost_idx.iter().map(|&j| (j, vec![0.0; len])).collect();
    let mut col = vec![0.0; m];
    for k in 0..len {
        for (ci, row) in col.iter_mut().zip(&rhs) {
            *ci = row[k];
        }
        let sol = lu.solve(&col);
        for (t, &j) in lost_idx.iter().enumerate() {
            out.get_mut(&j).expect("lost index")[k] = sol[t];
        }
    }
    Ok(out)
}

/// Partition of a matrix into a `grid_rows x grid_cols` array of equal
/// blocks; one block per process of a checksum group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Blocking {
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl Blocking {
    pub fn new(grid_rows: usize, grid_cols: usize) -> Self {
        Blocking { grid_rows, grid_cols }
    }

    fn block_dims(&self, m: &DenseMatrix) -> Result<(usize, usize), CodecError> {
        if self.grid_rows == 0
            || self.grid_cols == 0
            || !m.rows().is_multiple_of(self.grid_rows)
            || !m.cols().is_multiple_of(self.grid_cols)
        {
            return Err(CodecError::Dimension(format!(
                "{}x{} matrix does not split into a {}x{} block grid",
                m.rows(),
                m.cols(),
                self.grid_rows,
                self.grid_cols
            )));
        }
        Ok((m.rows() / self.grid_rows, m.cols() / self.grid_cols))
    }
}

/// Full checksum form: data, row sums `core * C_R`, column sums
/// `C_C^T * core` and the cross term `C_C^T * core * C_R`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedMatrix {
    pub core: DenseMatrix,
    pub rowsum: DenseMatrix,
    pub colsum: DenseMatrix,
    pub cross: DenseMatrix,
    pub blocking: Blocking,
}

/// `core * C_R`: for each checksum `i`, the weighted sum of the block columns.
fn row_checksums(core: &DenseMatrix, scheme: &ChecksumScheme, bc: usize) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(core.rows(), scheme.f * bc);
    for i in 0..scheme.f {
        for r in 0..core.rows() {
            let row = core.row(r);
            for j in 0..scheme.p {
                let w = scheme.weight(i, j);
                for t in 0..bc {
                    out[(r, i * bc + t)] += w * row[j * bc + t];
                }
            }
        }
    }
    out
}

/// `C_C^T * core`: for each checksum `i`, the weighted sum of the block rows.
fn col_checksums(core: &DenseMatrix, scheme: &ChecksumScheme, br: usize) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(scheme.f * br, core.cols());
    for i in 0..scheme.f {
        for j in 0..scheme.p {
            let w = scheme.weight(i, j);
            for t in 0..br {
                let src = core.row(j * br + t);
                let dst = (i * br + t) * core.cols();
                for (d, s) in out.as_mut_slice()[dst..dst + core.cols()].iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }
    out
}

pub fn encode_matrix(
    a: &DenseMatrix,
    scheme_rows: &ChecksumScheme,
    scheme_cols: &ChecksumScheme,
    blocking: Blocking,
) -> Result<EncodedMatrix, CodecError> {
    let (br, bc) = blocking.block_dims(a)?;
    check_schemes(blocking, scheme_rows, scheme_cols)?;
    let rowsum = row_checksums(a, scheme_rows, bc);
    let colsum = col_checksums(a, scheme_cols, br);
    let cross = row_checksums(&colsum, scheme_rows, bc);
    Ok(EncodedMatrix {
        core: a.clone(),
        rowsum,
        colsum,
        cross,
        blocking,
    })
}

fn check_schemes(blocking: Blocking, rows: &ChecksumScheme, cols: &ChecksumScheme) -> Result<(), CodecError> {
    if rows.p != blocking.grid_cols || cols.p != blocking.grid_rows {
        return Err(CodecError::Dimension(format!(
            "schemes over {}x{} holders do not fit a {}x{} block grid",
            cols.p, rows.p, blocking.grid_rows, blocking.grid_cols
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagnosisStatus {
    Consistent,
    Corrected,
    Uncorrectable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorDiagnosis {
    pub status: DiagnosisStatus,
    /// Row and column in core coordinates.
    pub location: Option<(usize, usize)>,
    pub magnitude: f64,
}

impl ErrorDiagnosis {
    pub fn is_consistent(&self) -> bool {
        self.status == DiagnosisStatus::Consistent
    }
}

struct Residuals {
    row: DenseMatrix,
    col: DenseMatrix,
    cross: DenseMatrix,
    tau: f64,
}

impl Residuals {
    fn compute(e: &EncodedMatrix, rs: &ChecksumScheme, cs: &ChecksumScheme) -> Result<Self, CodecError> {
        let (br, bc) = e.blocking.block_dims(&e.core)?;
        check_schemes(e.blocking, rs, cs)?;
        let expect = |what: &str, m: &DenseMatrix, shape: (usize, usize)| {
            if m.shape() != shape {
                Err(CodecError::Dimension(format!(
                    "{what} has shape {:?}, expected {shape:?}",
                    m.shape()
                )))
            } else {
                Ok(())
            }
        };
        expect("rowsum", &e.rowsum, (e.core.rows(), rs.f * bc))?;
        expect("colsum", &e.colsum, (cs.f * br, e.core.cols()))?;
        expect("cross", &e.cross, (cs.f * br, rs.f * bc))?;
        let row = row_checksums(&e.core, rs, bc).sub(&e.rowsum)?;
        let col = col_checksums(&e.core, cs, br).sub(&e.colsum)?;
        let cross = row_checksums(&e.colsum, rs, bc).sub(&e.cross)?;
        let n = e.core.rows().max(e.core.cols());
        let tau = rs.tolerance(n, frobenius_norm(&e.core));
        Ok(Residuals { row, col, cross, tau })
    }

    fn above(m: &DenseMatrix, tau: f64) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..m.rows() {
            for (j, v) in m.row(i).iter().enumerate() {
                // NaN counts as above
                if !(v.abs() <= tau) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    fn clean(&self) -> bool {
        Self::above(&self.row, self.tau).is_empty()
            && Self::above(&self.col, self.tau).is_empty()
            && Self::above(&self.cross, self.tau).is_empty()
    }
}

/// Read-only check: both residuals and the cross term below tolerance.
pub fn is_consistent(
    e: &EncodedMatrix,
    scheme_rows: &ChecksumScheme,
    scheme_cols: &ChecksumScheme,
) -> Result<bool, CodecError> {
    Ok(Residuals::compute(e, scheme_rows, scheme_cols)?.clean())
}

/// Checks the checksum relations and repairs a single corrupted core entry.
///
/// A lone bad entry at `(i, j)` shows up as exactly one row-residual entry
/// `(i, j mod bc)` and one column-residual entry `(i mod br, j)`. When both
/// schemes are single-checksum and the two agree, the entry is corrected in
/// place and the matrix re-verified. Any other pattern above tolerance is
/// reported as uncorrectable and `e` is left untouched.
pub fn verify_consistency(
    e: &mut EncodedMatrix,
    scheme_rows: &ChecksumScheme,
    scheme_cols: &ChecksumScheme,
) -> Result<ErrorDiagnosis, CodecError> {
    let res = Residuals::compute(e, scheme_rows, scheme_cols)?;
    if res.clean() {
        return Ok(ErrorDiagnosis {
            status: DiagnosisStatus::Consistent,
            location: None,
            magnitude: 0.0,
        });
    }
    let uncorrectable = ErrorDiagnosis {
        status: DiagnosisStatus::Uncorrectable,
        location: None,
        magnitude: 0.0,
    };
    if scheme_rows.f != 1 || scheme_cols.f != 1 {
        return Ok(uncorrectable);
    }
    let (br, bc) = e.blocking.block_dims(&e.core)?;
    let rows_bad = Residuals::above(&res.row, res.tau);
    let cols_bad = Residuals::above(&res.col, res.tau);
    let cross_bad = Residuals::above(&res.cross, res.tau);
    let ([(i, jj)], [(ii, j)], []) = (&rows_bad[..], &cols_bad[..], &cross_bad[..]) else {
        return Ok(uncorrectable);
    };
    let (i, jj, ii, j) = (*i, *jj, *ii, *j);
    if i % br != ii || j % bc != jj {
        return Ok(uncorrectable);
    }
    let magnitude = res.row[(i, jj)] / scheme_rows.weight(0, j / bc);
    let original = e.core[(i, j)];
    e.core[(i, j)] -= magnitude;
    if !Residuals::compute(e, scheme_rows, scheme_cols)?.clean() {
        e.core[(i, j)] = original;
        return Ok(uncorrectable);
    }
    Ok(ErrorDiagnosis {
        status: DiagnosisStatus::Corrected,
        location: Some((i, j)),
        magnitude,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::matmul;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn single_failure_scheme_is_all_ones() {
        let s = make_scheme(1, 4, 0).unwrap();
        assert_eq!(s.weights().as_slice(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn f_greater_than_p_rejected() {
        assert_eq!(make_scheme(3, 2, 1), Err(CodecError::InvalidScheme { f: 3, p: 2 }));
        assert!(make_scheme(0, 2, 1).is_err());
    }

    #[test]
    fn two_by_three_minors_nonzero() {
        let s = make_scheme(2, 3, 42).unwrap();
        let w = s.weights();
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            let det = w[(0, a)] * w[(1, b)] - w[(0, b)] * w[(1, a)];
            assert!(det.abs() > 1e-12, "minor ({a},{b}) = {det}");
        }
        for v in w.as_slice() {
            assert!((0.5..1.5).contains(v));
        }
    }

    #[test]
    fn scheme_determinism_and_text() {
        let a = make_scheme(3, 7, 9).unwrap();
        let b = make_scheme(3, 7, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.weights(), make_scheme(3, 7, 10).unwrap().weights());
        let back: ChecksumScheme = a.to_text().parse().unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn encode_sum() {
        let s = make_scheme(1, 3, 0).unwrap();
        let y = encode_vector(&[vec![1.0], vec![2.0], vec![3.0]], &s).unwrap();
        assert_eq!(y, vec![vec![6.0]]);
        let z = encode_vector(&[vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]], &s).unwrap();
        assert_eq!(z, vec![vec![0.0; 4]]);
    }

    #[test]
    fn encode_matches_dense_matvec() {
        let s = make_scheme(2, 5, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let parts: Vec<Vec<f64>> = (0..5).map(|_| rand_vec(&mut rng, 6)).collect();
        let y = encode_vector(&parts, &s).unwrap();
        // stack parts as a 5x6 matrix X; checksums = W * X
        let x = DenseMatrix::from_rows(&parts);
        let oracle = matmul(s.weights(), &x).unwrap();
        for i in 0..2 {
            for k in 0..6 {
                assert!((y[i][k] - oracle[(i, k)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn ragged_parts_rejected() {
        let s = make_scheme(1, 2, 0).unwrap();
        assert!(matches!(
            encode_vector(&[vec![1.0], vec![1.0, 2.0]], &s),
            Err(CodecError::Dimension(_))
        ));
    }

    #[test]
    fn recover_single_sum() {
        let s = make_scheme(1, 3, 0).unwrap();
        let surviving = BTreeMap::from([(0, vec![1.0]), (2, vec![3.0])]);
        let out = recover_erasures(&surviving, &[vec![6.0]], &BTreeSet::from([1]), &s).unwrap();
        assert_eq!(out, BTreeMap::from([(1, vec![2.0])]));
    }

    #[test]
    fn recover_nothing_lost() {
        let s = make_scheme(1, 2, 0).unwrap();
        let surviving = BTreeMap::from([(0, vec![1.0]), (1, vec![3.0])]);
        assert!(recover_erasures(&surviving, &[vec![4.0]], &BTreeSet::new(), &s)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn recover_two_of_f2() {
        let s = make_scheme(2, 6, 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let parts: Vec<Vec<f64>> = (0..6).map(|_| rand_vec(&mut rng, 8)).collect();
        let y = encode_vector(&parts, &s).unwrap();
        let lost = BTreeSet::from([1, 4]);
        let surviving = parts
            .iter()
            .cloned()
            .enumerate()
            .filter(|(j, _)| !lost.contains(j))
            .collect();
        let out = recover_erasures(&surviving, &y, &lost, &s).unwrap();
        for j in lost {
            for (a, b) in out[&j].iter().zip(&parts[j]) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn too_many_erasures_and_singular() {
        let s = make_scheme(1, 3, 0).unwrap();
        let surviving = BTreeMap::from([(0, vec![1.0])]);
        assert!(matches!(
            recover_erasures(&surviving, &[vec![6.0]], &BTreeSet::from([1, 2]), &s),
            Err(CodecError::TooManyErasures { lost: 2, f: 1 })
        ));
        let w = DenseMatrix::from_rows(&[[1.0, 1.0, 1.0], [1.0, 1.0, 2.0]]);
        let s = ChecksumScheme::from_weights(w, 0).unwrap();
        let err = recover_erasures(&surviving, &[vec![1.0], vec![1.0]], &BTreeSet::from([1, 2]), &s);
        assert!(err.is_ok());
        let surviving = BTreeMap::from([(2, vec![1.0])]);
        let err = recover_erasures(&surviving, &[vec![1.0], vec![1.0]], &BTreeSet::from([0, 1]), &s).unwrap_err();
        assert!(matches!(err, CodecError::Singular { ref lost, .. } if lost == &vec![0, 1]));
    }

    #[test]
    fn encode_scalar_grid() {
        let ones = make_scheme(1, 2, 0).unwrap();
        let a = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let e = encode_matrix(&a, &ones, &ones, Blocking::new(2, 2)).unwrap();
        assert_eq!(e.rowsum, DenseMatrix::from_rows(&[[3.0], [7.0]]));
        assert_eq!(e.colsum, DenseMatrix::from_rows(&[[4.0, 6.0]]));
        assert_eq!(e.cross, DenseMatrix::from_rows(&[[10.0]]));
        let z = encode_matrix(&DenseMatrix::zeros(2, 2), &ones, &ones, Blocking::new(2, 2)).unwrap();
        assert!(z
            .rowsum
            .as_slice()
            .iter()
            .chain(z.colsum.as_slice())
            .chain(z.cross.as_slice())
            .all(|v| *v == 0.0));
    }

    #[test]
    fn nonconformal_blocking_rejected() {
        let ones = make_scheme(1, 3, 0).unwrap();
        assert!(matches!(
            encode_matrix(&DenseMatrix::zeros(4, 4), &ones, &ones, Blocking::new(3, 3)),
            Err(CodecError::Dimension(_))
        ));
    }

    fn encoded_random(n: usize, grid: usize, seed: u64) -> (EncodedMatrix, ChecksumScheme) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ones = make_scheme(1, grid, 0).unwrap();
        let a = DenseMatrix::random(n, n, &mut rng);
        (
            encode_matrix(&a, &ones, &ones, Blocking::new(grid, grid)).unwrap(),
            ones,
        )
    }

    #[test]
    fn random_encoding_is_consistent() {
        let (mut e, s) = encoded_random(6, 3, 1);
        assert!(verify_consistency(&mut e, &s, &s).unwrap().is_consistent());
        let (mut e, s) = encoded_random(8, 2, 2);
        assert!(verify_consistency(&mut e, &s, &s).unwrap().is_consistent());
    }

    #[test]
    fn single_flip_located_and_corrected() {
        let (mut e, s) = encoded_random(8, 2, 3);
        let clean = e.core.clone();
        e.core[(2, 5)] += 1.0;
        let d = verify_consistency(&mut e, &s, &s).unwrap();
        assert_eq!(d.status, DiagnosisStatus::Corrected);
        assert_eq!(d.location, Some((2, 5)));
        assert!((d.magnitude - 1.0).abs() < 1e-10);
        assert!(e.core.max_abs_diff(&clean) < 1e-12);
        assert!(is_consistent(&e, &s, &s).unwrap());
    }

    #[test]
    fn two_flips_uncorrectable() {
        let (mut e, s) = encoded_random(8, 2, 4);
        e.core[(1, 2)] += 1.0;
        e.core[(6, 7)] -= 0.5;
        let before = e.clone();
        let d = verify_consistency(&mut e, &s, &s).unwrap();
        assert_eq!(d.status, DiagnosisStatus::Uncorrectable);
        assert_eq!(e, before);
    }

    #[test]
    fn corrupted_checksum_is_not_a_core_error() {
        let (mut e, s) = encoded_random(8, 2, 5);
        e.rowsum[(3, 1)] += 1.0;
        assert_eq!(
            verify_consistency(&mut e, &s, &s).unwrap().status,
            DiagnosisStatus::Uncorrectable
        );
    }

    #[test]
    fn weighted_single_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rs = ChecksumScheme::from_weights(DenseMatrix::from_rows(&[[0.7, 1.3, 1.1]]), 0).unwrap();
        let cs = ChecksumScheme::from_weights(DenseMatrix::from_rows(&[[1.2, 0.6, 0.9]]), 0).unwrap();
        let a = DenseMatrix::random(9, 9, &mut rng);
        let mut e = encode_matrix(&a, &rs, &cs, Blocking::new(3, 3)).unwrap();
        e.core[(7, 4)] -= 0.25;
        let d = verify_consistency(&mut e, &rs, &cs).unwrap();
        assert_eq!(d.location, Some((7, 4)));
        assert!((d.magnitude + 0.25).abs() < 1e-10);
    }

    proptest! {
        #[test]
        fn erase_and_recover(f in 1usize..4, extra in 0usize..6, len in 1usize..32, seed in any::<u64>()) {
            let p = f + extra;
            let s = make_scheme(f, p, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let parts: Vec<Vec<f64>> = (0..p).map(|_| rand_vec(&mut rng, len)).collect();
            let y = encode_vector(&parts, &s).unwrap();
            let lost: BTreeSet<usize> = sample(&mut rng, p, f).into_iter().collect();
            let surviving = parts.iter().cloned().enumerate().filter(|(j, _)| !lost.contains(j)).collect();
            let out = recover_erasures(&surviving, &y, &lost, &s).unwrap();
            for j in &lost {
                let norm = crate::dense::vector_norm2(&parts[*j]).max(1e-300);
                let err: f64 = out[j].iter().zip(&parts[*j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                prop_assert!(err / norm <= 1e-10);
            }
        }

        #[test]
        fn checksum_is_linear(f in 1usize..4, len in 1usize..16, seed in any::<u64>()) {
            let p = f + 3;
            let s = make_scheme(f, p, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs: Vec<Vec<f64>> = (0..p).map(|_| rand_vec(&mut rng, len)).collect();
            let ys: Vec<Vec<f64>> = (0..p).map(|_| rand_vec(&mut rng, len)).collect();
            let zs: Vec<Vec<f64>> = xs.iter().zip(&ys).map(|(x, y)| x.iter().zip(y).map(|(a, b)| a + b).collect()).collect();
            let (ex, ey, ez) = (encode_vector(&xs, &s).unwrap(), encode_vector(&ys, &s).unwrap(), encode_vector(&zs, &s).unwrap());
            for i in 0..f {
                let scale: f64 = (0..p)
                    .map(|j| s.weight(i, j).abs() * (crate::dense::vector_norm2(&xs[j]) + crate::dense::vector_norm2(&ys[j])))
                    .sum();
                for k in 0..len {
                    prop_assert!((ex[i][k] + ey[i][k] - ez[i][k]).abs() <= 4.0 * f64::EPSILON * scale);
                }
            }
        }

        #[test]
        fn large_flips_located_exactly(i in 0usize..12, j in 0usize..12, mag in 1e-3f64..10.0, neg in any::<bool>(), seed in any::<u64>()) {
            let (mut e, s) = encoded_random(12, 3, seed);
            let delta = if neg { -mag } else { mag };
            e.core[(i, j)] += delta;
            let d = verify_consistency(&mut e, &s, &s).unwrap();
            prop_assert_eq!(d.status, DiagnosisStatus::Corrected);
            prop_assert_eq!(d.location, Some((i, j)));
        }
    }
}
