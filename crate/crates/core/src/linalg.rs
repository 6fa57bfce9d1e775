//! Deterministic dense linear algebra: row-major matrices, symmetric EVD with
//! descending eigenvalues, thin SVD with a fixed sign convention, and Gram
//! accumulation. Everything downstream builds on these primitives.
//!
//! All computation is 64-bit internally; Gram accumulation over long token
//! streams loses too much precision in 32-bit.

use nalgebra::DMatrix;
use thiserror::Error;

/// Relative tolerance for the symmetry check in [`sym_evd`].
const SYMMETRY_RTOL: f64 = 1e-6;
/// Negative eigenvalues with |lambda| <= PSD_CLAMP_RTOL * lambda_max are
/// treated as roundoff and clamped to zero.
const PSD_CLAMP_RTOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("data length {len} does not match {rows}x{cols}")]
    ShapeMismatch { rows: usize, cols: usize, len: usize },
    #[error("matrix has a non-finite entry at ({row}, {col})")]
    NonFiniteEntry { row: usize, col: usize },
    #[error("dimension mismatch: {context} expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("matrix is {rows}x{cols}, expected square")]
    NonSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric: |S - S^T|_F = {deviation:.3e} exceeds {tolerance:.3e}")]
    NotSymmetric { deviation: f64, tolerance: f64 },
    #[error("eigenvalue {value:.6e} is negative beyond the PSD roundoff tolerance {tolerance:.6e}")]
    IndefiniteBeyondTolerance { value: f64, tolerance: f64 },
    #[error("decomposition did not converge within the iteration budget")]
    ConvergenceFailure,
}

/// Dense 2-D real matrix, row-major, `f64` storage.
///
/// The universal carrier for weights, activations, Grams, and factors.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix, validating shape and finiteness of every entry.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(LinalgError::ShapeMismatch {
                rows,
                cols,
                len: data.len(),
            });
        }
        for (i, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(LinalgError::NonFiniteEntry {
                    row: i / cols,
                    col: i % cols,
                });
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// Internal constructor for values produced by finite arithmetic.
    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_parts(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_parts(rows, cols, data)
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
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        &mut self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, col)).collect()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self * other`, plain triple loop in i-k-j order so the inner loop
    /// walks contiguous rows of both operands.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::DimensionMismatch {
                context: "matmul inner dimension",
                expected: self.cols,
                got: other.rows,
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix::from_parts(m, n, out))
    }

    /// `self^T * other` without materializing the transpose.
    pub fn matmul_transposed_self(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.rows != other.rows {
            return Err(LinalgError::DimensionMismatch {
                context: "matmul_transposed_self inner dimension",
                expected: self.rows,
                got: other.rows,
            });
        }
        let (m, k, n) = (self.cols, self.rows, other.cols);
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let arow = &self.data[p * m..(p + 1) * m];
            let brow = &other.data[p * n..(p + 1) * n];
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix::from_parts(m, n, out))
    }

    /// Matrix-vector product `self * v`.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if v.len() != self.cols {
            return Err(LinalgError::DimensionMismatch {
                context: "mul_vec length",
                expected: self.cols,
                got: v.len(),
            });
        }
        Ok((0..self.rows)
            .map(|i| dot(self.row(i), v))
            .collect())
    }

    /// Scales column `j` by `s[j]` (right-multiplication by `diag(s)`).
    pub fn scale_columns(&self, s: &[f64]) -> Result<Matrix, LinalgError> {
        if s.len() != self.cols {
            return Err(LinalgError::DimensionMismatch {
                context: "scale_columns length",
                expected: self.cols,
                got: s.len(),
            });
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for (v, scale) in out.row_mut(i).iter_mut().zip(s) {
                *v *= scale;
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LinalgError::DimensionMismatch {
                context: "sub shape",
                expected: self.rows * self.cols,
                got: other.rows * other.cols,
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix::from_parts(self.rows, self.cols, data))
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        let data = self.data.iter().map(|v| v * factor).collect();
        Matrix::from_parts(self.rows, self.cols, data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        let n = self.rows.min(self.cols);
        (0..n).map(|i| self.get(i, i)).sum()
    }

    /// Keeps the first `k` columns.
    pub fn take_columns(&self, k: usize) -> Matrix {
        debug_assert!(k <= self.cols);
        let mut out = Matrix::zeros(self.rows, k);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[..k]);
        }
        out
    }

    /// Keeps the first `k` rows.
    pub fn take_rows(&self, k: usize) -> Matrix {
        debug_assert!(k <= self.rows);
        Matrix::from_parts(k, self.cols, self.data[..k * self.cols].to_vec())
    }

    /// Extracts rows `[start, end)`.
    pub fn row_block(&self, start: usize, end: usize) -> Matrix {
        debug_assert!(start <= end && end <= self.rows);
        Matrix::from_parts(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    /// Stacks `top` over `bottom` (row-wise concatenation).
    pub fn vstack(top: &Matrix, bottom: &Matrix) -> Result<Matrix, LinalgError> {
        if top.cols != bottom.cols {
            return Err(LinalgError::DimensionMismatch {
                context: "vstack column count",
                expected: top.cols,
                got: bottom.cols,
            });
        }
        let mut data = Vec::with_capacity((top.rows + bottom.rows) * top.cols);
        data.extend_from_slice(&top.data);
        data.extend_from_slice(&bottom.data);
        Ok(Matrix::from_parts(top.rows + bottom.rows, top.cols, data))
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Symmetric eigendecomposition result. Columns of `eigvecs` are the
/// eigenvectors, paired with `eigvals` sorted non-increasing.
#[derive(Debug, Clone)]
pub struct EvdResult {
    pub eigvecs: Matrix,
    pub eigvals: Vec<f64>,
}

/// Thin SVD result: `u` is `d_out x k`, `vt` is `k x d_in`,
/// `k = min(d_out, d_in)`, singular values non-increasing.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub singvals: Vec<f64>,
    pub vt: Matrix,
}

fn to_dmatrix(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows, m.cols, &m.data)
}

fn from_dmatrix(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Flips sign so the largest-magnitude entry of each column of `u` is
/// positive, ties broken by lowest row index. `paired_rows`, when present,
/// gets its rows flipped in lockstep (the V^T rows of an SVD).
fn fix_column_signs(u: &mut Matrix, mut paired_rows: Option<&mut Matrix>) {
    for j in 0..u.cols() {
        let mut best_row = 0;
        let mut best_abs = -1.0;
        for i in 0..u.rows() {
            let a = u.get(i, j).abs();
            if a > best_abs {
                best_abs = a;
                best_row = i;
            }
        }
        if u.get(best_row, j) < 0.0 {
            for i in 0..u.rows() {
                let v = u.get(i, j);
                u.set(i, j, -v);
            }
            if let Some(vt) = paired_rows.as_deref_mut() {
                for v in vt.row_mut(j) {
                    *v = -*v;
                }
            }
        }
    }
}

/// Symmetric PSD eigendecomposition with descending eigenvalues.
///
/// The input is symmetrized as `(S + S^T) / 2` after an `|S - S^T|_F`
/// tolerance check. Negative eigenvalues within roundoff of zero are clamped;
/// anything more negative is rejected.
pub fn sym_evd(s: &Matrix) -> Result<EvdResult, LinalgError> {
    if s.rows() != s.cols() {
        return Err(LinalgError::NonSquare {
            rows: s.rows(),
            cols: s.cols(),
        });
    }
    let n = s.rows();
    let norm = s.frobenius_norm();
    let mut asym = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = s.get(i, j) - s.get(j, i);
            asym += 2.0 * d * d;
        }
    }
    let asym = asym.sqrt();
    let tolerance = SYMMETRY_RTOL * norm;
    if asym > tolerance {
        return Err(LinalgError::NotSymmetric {
            deviation: asym,
            tolerance,
        });
    }

    let mut dm = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            dm[(i, j)] = 0.5 * (s.get(i, j) + s.get(j, i));
        }
    }
    let eig = nalgebra::SymmetricEigen::try_new(dm, f64::EPSILON, 10_000)
        .ok_or(LinalgError::ConvergenceFailure)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let lambda_max = order
        .first()
        .map(|&i| eig.eigenvalues[i])
        .unwrap_or(0.0)
        .max(0.0);
    let clamp_floor = -PSD_CLAMP_RTOL * lambda_max;
    let mut eigvals = Vec::with_capacity(n);
    for &idx in &order {
        let v = eig.eigenvalues[idx];
        if v < clamp_floor {
            return Err(LinalgError::IndefiniteBeyondTolerance {
                value: v,
                tolerance: clamp_floor,
            });
        }
        eigvals.push(v.max(0.0));
    }

    let mut eigvecs = Matrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    fix_column_signs(&mut eigvecs, None);
    Ok(EvdResult { eigvecs, eigvals })
}

/// Full thin SVD with descending singular values and the fixed sign
/// convention (largest-magnitude entry of each left singular vector positive,
/// ties broken by lowest row index).
pub fn svd(m: &Matrix) -> Result<SvdResult, LinalgError> {
    let dm = to_dmatrix(m);
    let res = nalgebra::linalg::SVD::try_new(dm, true, true, f64::EPSILON, 10_000)
        .ok_or(LinalgError::ConvergenceFailure)?;
    let u_raw = from_dmatrix(res.u.as_ref().ok_or(LinalgError::ConvergenceFailure)?);
    let vt_raw = from_dmatrix(res.v_t.as_ref().ok_or(LinalgError::ConvergenceFailure)?);
    let k = res.singular_values.len();

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        res.singular_values[b]
            .partial_cmp(&res.singular_values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let singvals: Vec<f64> = order
        .iter()
        .map(|&i| res.singular_values[i].max(0.0))
        .collect();
    let mut u = Matrix::from_fn(u_raw.rows(), k, |i, j| u_raw.get(i, order[j]));
    let mut vt = Matrix::from_fn(k, vt_raw.cols(), |i, j| vt_raw.get(order[i], j));
    fix_column_signs(&mut u, Some(&mut vt));
    Ok(SvdResult { u, singvals, vt })
}

/// Returns `acc + x * x^T`. Row-major layout makes each Gram entry a
/// contiguous dot product of two channel rows.
pub fn gram_accumulate(acc: &Matrix, x: &Matrix) -> Result<Matrix, LinalgError> {
    if acc.rows() != acc.cols() {
        return Err(LinalgError::NonSquare {
            rows: acc.rows(),
            cols: acc.cols(),
        });
    }
    if acc.rows() != x.rows() {
        return Err(LinalgError::DimensionMismatch {
            context: "gram_accumulate row count",
            expected: acc.rows(),
            got: x.rows(),
        });
    }
    let mut out = acc.clone();
    gram_accumulate_into(&mut out, x);
    Ok(out)
}

/// In-place variant of [`gram_accumulate`]; dimensions must already agree.
pub(crate) fn gram_accumulate_into(acc: &mut Matrix, x: &Matrix) {
    let d = x.rows();
    debug_assert_eq!(acc.rows(), d);
    debug_assert_eq!(acc.cols(), d);
    for i in 0..d {
        for j in i..d {
            let v = dot(x.row(i), x.row(j));
            let a = acc.get(i, j) + v;
            acc.set(i, j, a);
            if i != j {
                let b = acc.get(j, i) + v;
                acc.set(j, i, b);
            }
        }
    }
    // Mirror exactly so the accumulator stays bit-symmetric.
    for i in 0..d {
        for j in (i + 1)..d {
            let v = acc.get(i, j);
            acc.set(j, i, v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent cyclic Jacobi eigenvalue iteration, used only as a test
    /// oracle against the production EVD path.
    fn jacobi_eigvals(s: &Matrix) -> Vec<f64> {
        let n = s.rows();
        assert_eq!(n, s.cols());
        let mut a: Vec<Vec<f64>> = (0..n).map(|i| s.row(i).to_vec()).collect();
        for _sweep in 0..200 {
            let mut off = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    off += a[i][j] * a[i][j];
                }
            }
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let sn = t * c;
                    for k in 0..n {
                        let akp = a[k][p];
                        let akq = a[k][q];
                        a[k][p] = c * akp - sn * akq;
                        a[k][q] = sn * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p][k];
                        let aqk = a[q][k];
                        a[p][k] = c * apk - sn * aqk;
                        a[q][k] = sn * apk + c * aqk;
                    }
                }
            }
        }
        let mut vals: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        vals.sort_by(|x, y| y.partial_cmp(x).unwrap());
        vals
    }

    fn seeded_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        // Small multiplicative congruential stream, enough for test inputs.
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        Matrix::from_fn(rows, cols, |_, _| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn matrix_rejects_bad_shape_and_nonfinite() {
        assert!(matches!(
            Matrix::new(2, 2, vec![1.0, 2.0, 3.0]),
            Err(LinalgError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(LinalgError::NonFiniteEntry { row: 0, col: 1 })
        ));
        assert!(matches!(
            Matrix::new(1, 2, vec![f64::INFINITY, 0.0]),
            Err(LinalgError::NonFiniteEntry { row: 0, col: 0 })
        ));
    }

    #[test]
    fn sym_evd_diagonal_case() {
        let s = Matrix::diag(&[1.0, 4.0]);
        let evd = sym_evd(&s).unwrap();
        assert!((evd.eigvals[0] - 4.0).abs() < 1e-12);
        assert!((evd.eigvals[1] - 1.0).abs() < 1e-12);
        // Eigenvectors are a permutation of identity columns.
        for j in 0..2 {
            let col = evd.eigvecs.column(j);
            let big: Vec<usize> = (0..2).filter(|&i| col[i].abs() > 0.5).collect();
            assert_eq!(big.len(), 1);
            assert!((col[big[0]] - 1.0).abs() < 1e-10);
        }
        assert!((evd.eigvecs.get(1, 0) - 1.0).abs() < 1e-10);
        assert!((evd.eigvecs.get(0, 1) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn sym_evd_rank_one_projector() {
        let inv = 1.0 / 2.0_f64.sqrt();
        let v = [inv, inv];
        let s = Matrix::from_fn(2, 2, |i, j| v[i] * v[j]);
        let evd = sym_evd(&s).unwrap();
        assert!((evd.eigvals[0] - 1.0).abs() < 1e-12);
        assert!(evd.eigvals[1].abs() < 1e-12);
    }

    #[test]
    fn sym_evd_matches_jacobi_oracle_on_seeded_psd() {
        let b = seeded_matrix(8, 8, 11);
        let s = gram_accumulate(&Matrix::zeros(8, 8), &b).unwrap();
        let evd = sym_evd(&s).unwrap();
        let oracle = jacobi_eigvals(&s);
        for (got, want) in evd.eigvals.iter().zip(&oracle) {
            assert!(
                (got - want).abs() <= 1e-8 * want.abs().max(1.0),
                "eigenvalue mismatch: {got} vs oracle {want}"
            );
        }
    }

    #[test]
    fn sym_evd_reconstructs_and_is_orthonormal() {
        let b = seeded_matrix(12, 12, 3);
        let s = gram_accumulate(&Matrix::zeros(12, 12), &b).unwrap();
        let evd = sym_evd(&s).unwrap();
        let n = s.rows();

        let utu = evd.eigvecs.matmul_transposed_self(&evd.eigvecs).unwrap();
        let dev = utu.sub(&Matrix::identity(n)).unwrap().frobenius_norm();
        assert!(dev <= 1e-8 * n as f64, "orthonormality deviation {dev}");

        let lam = Matrix::diag(&evd.eigvals);
        let rec = evd
            .eigvecs
            .matmul(&lam)
            .unwrap()
            .matmul(&evd.eigvecs.transpose())
            .unwrap();
        let err = rec.sub(&s).unwrap().frobenius_norm();
        assert!(err <= 1e-6 * s.frobenius_norm());
    }

    #[test]
    fn sym_evd_trace_equals_eigval_sum() {
        for seed in 0..5 {
            let b = seeded_matrix(9, 9, 100 + seed);
            let s = gram_accumulate(&Matrix::zeros(9, 9), &b).unwrap();
            let evd = sym_evd(&s).unwrap();
            let sum: f64 = evd.eigvals.iter().sum();
            assert!((sum - s.trace()).abs() <= 1e-8 * s.trace());
        }
    }

    #[test]
    fn sym_evd_error_paths() {
        let rect = Matrix::zeros(2, 3);
        assert!(matches!(
            sym_evd(&rect),
            Err(LinalgError::NonSquare { rows: 2, cols: 3 })
        ));

        let skew = Matrix::new(2, 2, vec![1.0, 5.0, -5.0, 1.0]).unwrap();
        assert!(matches!(sym_evd(&skew), Err(LinalgError::NotSymmetric { .. })));

        let indefinite = Matrix::diag(&[1.0, -0.5]);
        assert!(matches!(
            sym_evd(&indefinite),
            Err(LinalgError::IndefiniteBeyondTolerance { .. })
        ));
    }

    #[test]
    fn sym_evd_clamps_roundoff_negatives() {
        let s = Matrix::diag(&[1.0, -1e-12]);
        let evd = sym_evd(&s).unwrap();
        assert_eq!(evd.eigvals[1], 0.0);
    }

    #[test]
    fn svd_identity_and_diagonal() {
        let evd = svd(&Matrix::identity(3)).unwrap();
        for s in &evd.singvals {
            assert!((s - 1.0).abs() < 1e-12);
        }

        let d = svd(&Matrix::diag(&[3.0, 0.0])).unwrap();
        assert!((d.singvals[0] - 3.0).abs() < 1e-12);
        assert!(d.singvals[1].abs() < 1e-12);
    }

    #[test]
    fn svd_squared_singvals_match_gram_eigvals() {
        let m = seeded_matrix(5, 3, 7);
        let res = svd(&m).unwrap();
        let mt = m.transpose();
        let gram = mt.matmul(&m).unwrap(); // M^T M, 3x3
        let evd = sym_evd(&gram).unwrap();
        for (s, lam) in res.singvals.iter().zip(&evd.eigvals) {
            assert!(
                (s * s - lam).abs() <= 1e-8 * lam.max(1.0),
                "sigma^2 {} vs eigenvalue {}",
                s * s,
                lam
            );
        }
    }

    #[test]
    fn svd_reconstruction_and_frobenius_identity() {
        let m = seeded_matrix(7, 4, 21);
        let res = svd(&m).unwrap();
        let rec = res
            .u
            .matmul(&Matrix::diag(&res.singvals))
            .unwrap()
            .matmul(&res.vt)
            .unwrap();
        let err = rec.sub(&m).unwrap().frobenius_norm();
        assert!(err <= 1e-6 * m.frobenius_norm());

        let f2 = m.frobenius_norm().powi(2);
        let s2: f64 = res.singvals.iter().map(|s| s * s).sum();
        assert!((f2 - s2).abs() <= 1e-8 * f2);
    }

    #[test]
    fn svd_sign_convention_is_deterministic() {
        let m = seeded_matrix(6, 6, 42);
        let a = svd(&m).unwrap();
        let b = svd(&m).unwrap();
        assert_eq!(a.u.data(), b.u.data());
        assert_eq!(a.vt.data(), b.vt.data());
        assert_eq!(a.singvals, b.singvals);
        for j in 0..a.u.cols() {
            let col = a.u.column(j);
            let mut best = 0;
            for i in 0..col.len() {
                if col[i].abs() > col[best].abs() {
                    best = i;
                }
            }
            assert!(col[best] > 0.0, "column {j} sign convention violated");
        }
    }

    #[test]
    fn evd_determinism_is_bitwise() {
        let b = seeded_matrix(10, 10, 5);
        let s = gram_accumulate(&Matrix::zeros(10, 10), &b).unwrap();
        let a = sym_evd(&s).unwrap();
        let c = sym_evd(&s).unwrap();
        assert_eq!(a.eigvals, c.eigvals);
        assert_eq!(a.eigvecs.data(), c.eigvecs.data());
    }

    #[test]
    fn gram_accumulate_examples() {
        let acc = Matrix::zeros(2, 2);
        let x = Matrix::new(2, 1, vec![1.0, 0.0]).unwrap();
        let g = gram_accumulate(&acc, &x).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);

        let id = Matrix::identity(2);
        let zero_batch = Matrix::zeros(2, 3);
        let g2 = gram_accumulate(&id, &zero_batch).unwrap();
        assert_eq!(g2.data(), id.data());
    }

    #[test]
    fn gram_accumulate_batches_match_concatenation() {
        let x1 = seeded_matrix(4, 5, 1);
        let x2 = seeded_matrix(4, 7, 2);
        let mut concat_data = Vec::new();
        for i in 0..4 {
            concat_data.extend_from_slice(x1.row(i));
            concat_data.extend_from_slice(x2.row(i));
        }
        let concat = Matrix::new(4, 12, concat_data).unwrap();

        let batched = gram_accumulate(&gram_accumulate(&Matrix::zeros(4, 4), &x1).unwrap(), &x2).unwrap();
        let oneshot = gram_accumulate(&Matrix::zeros(4, 4), &concat).unwrap();
        for (a, b) in batched.data().iter().zip(oneshot.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gram_accumulate_dimension_check() {
        let acc = Matrix::zeros(3, 3);
        let x = Matrix::zeros(2, 4);
        assert!(matches!(
            gram_accumulate(&acc, &x),
            Err(LinalgError::DimensionMismatch { .. })
        ));
    }
}
