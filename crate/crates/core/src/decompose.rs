//! Low-rank decomposition backends producing factor-pair replacements, plus
//! energy-profile construction for both the eigenvalue and squared-singular-
//! value regimes.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Matrix, LinalgError};

/// Dead input channels would blow up `diag(s)^-1`; scales are clamped here.
pub const SCALE_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecomposeError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("compression ratio {0} outside [0, 1)")]
    RatioOutOfRange(f64),
    #[error("rank {rank} too large for a {d_out}x{d_in} matrix (max {max})")]
    RankTooLarge {
        rank: usize,
        d_out: usize,
        d_in: usize,
        max: usize,
    },
    #[error("scale vector length {got} does not match input dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("query and key matrices must share a shape: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("spectrum is all zero; nothing to allocate")]
    AllZeroSpectrum,
    #[error("covariance needs at least 2 tokens, got {0}")]
    InsufficientTokens(u64),
}

/// Which backend produced a factor pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Svd,
    Asvd,
    Awsvd,
    Pca,
    Afm,
    #[serde(rename = "joint_pca", alias = "joint_qk")]
    JointQk,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Method::Svd => "svd",
            Method::Asvd => "asvd",
            Method::Awsvd => "awsvd",
            Method::Pca => "pca",
            Method::Afm => "afm",
            Method::JointQk => "joint_pca",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "svd" => Ok(Method::Svd),
            "asvd" => Ok(Method::Asvd),
            "awsvd" => Ok(Method::Awsvd),
            "pca" => Ok(Method::Pca),
            "afm" => Ok(Method::Afm),
            "joint_pca" | "joint_qk" => Ok(Method::JointQk),
            other => Err(format!("unknown method '{other}'")),
        }
    }
}

/// Low-rank replacement for one weight matrix: the rewritten layer computes
/// `l * (r_mat * x) + bias_correction` without ever materializing `l * r_mat`.
#[derive(Debug, Clone)]
pub struct FactorPair {
    pub l: Matrix,
    pub r_mat: Matrix,
    pub rank: usize,
    pub bias_correction: Option<Vec<f64>>,
    pub method: Method,
}

impl FactorPair {
    pub fn new(
        l: Matrix,
        r_mat: Matrix,
        bias_correction: Option<Vec<f64>>,
        method: Method,
    ) -> Result<Self, DecomposeError> {
        let rank = l.cols();
        if r_mat.rows() != rank {
            return Err(DecomposeError::DimensionMismatch {
                expected: rank,
                got: r_mat.rows(),
            });
        }
        if let Some(b) = &bias_correction {
            if b.len() != l.rows() {
                return Err(DecomposeError::DimensionMismatch {
                    expected: l.rows(),
                    got: b.len(),
                });
            }
        }
        Ok(Self {
            l,
            r_mat,
            rank,
            bias_correction,
            method,
        })
    }

    pub fn d_out(&self) -> usize {
        self.l.rows()
    }

    pub fn d_in(&self) -> usize {
        self.r_mat.cols()
    }

    /// Stored factor parameters, bias excluded (it is not part of the
    /// rank-budget accounting).
    pub fn param_count(&self) -> u64 {
        (self.rank * (self.d_in() + self.d_out())) as u64
    }

    /// Applies the factored map to a `d_in x L` batch.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix, LinalgError> {
        let mid = self.r_mat.matmul(x)?;
        let mut out = self.l.matmul(&mid)?;
        if let Some(bias) = &self.bias_correction {
            for i in 0..out.rows() {
                let b = bias[i];
                for v in out.row_mut(i) {
                    *v += b;
                }
            }
        }
        Ok(out)
    }

    /// Materializes `l * r_mat`; test and reporting use only.
    pub fn reconstruct(&self) -> Matrix {
        self.l.matmul(&self.r_mat).expect("factor shapes agree")
    }
}

/// Whether a spectrum came from Gram eigenvalues or squared singular values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyKind {
    Eigen,
    SingularSquared,
}

/// Descending non-negative spectrum with its cumulative normalized energy
/// vector `c`; `c[r]` (1-based rank) is the fraction of total energy kept by
/// the top `r` directions.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyProfile {
    energies: Vec<f64>,
    cumulative: Vec<f64>,
    total: f64,
    kind: EnergyKind,
}

impl EnergyProfile {
    pub fn new(energies_raw: &[f64], kind: EnergyKind) -> Result<Self, DecomposeError> {
        let max = energies_raw.iter().cloned().fold(0.0_f64, f64::max);
        let clamp_floor = -1e-10 * max;
        let mut energies = Vec::with_capacity(energies_raw.len());
        for &e in energies_raw {
            if e < clamp_floor {
                return Err(DecomposeError::AllZeroSpectrum);
            }
            energies.push(e.max(0.0));
        }
        energies.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        let total: f64 = energies.iter().sum();
        if !(total > 0.0) {
            return Err(DecomposeError::AllZeroSpectrum);
        }
        let mut cumulative = Vec::with_capacity(energies.len());
        let mut running = 0.0;
        for e in &energies {
            running += e;
            cumulative.push(running / total);
        }
        Ok(Self {
            energies,
            cumulative,
            total,
            kind,
        })
    }

    pub fn kind(&self) -> EnergyKind {
        self.kind
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    /// Retained energy fraction at a 1-based rank; rank 0 keeps nothing.
    pub fn retained_at(&self, rank: usize) -> f64 {
        if rank == 0 {
            0.0
        } else {
            self.cumulative[(rank - 1).min(self.cumulative.len() - 1)]
        }
    }

    /// Raw energy dropped beyond a 1-based rank.
    pub fn tail_after(&self, rank: usize) -> f64 {
        if rank >= self.energies.len() {
            0.0
        } else {
            self.energies[rank..].iter().sum()
        }
    }

    /// Smallest 1-based rank whose retained fraction reaches `tau`, capped at
    /// the spectrum length.
    pub fn min_rank_reaching(&self, tau: f64) -> usize {
        let idx = self.cumulative.partition_point(|&c| c < tau);
        (idx + 1).min(self.cumulative.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleKind {
    MeanAbs,
    L2Norm,
}

/// Per-input-channel positive scaling, the diagonal weighting of the
/// activation-aware backends. Entries are clamped at [`SCALE_FLOOR`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleVector {
    scales: Vec<f64>,
    kind: ScaleKind,
}

impl ScaleVector {
    pub fn new(raw: Vec<f64>, kind: ScaleKind) -> Self {
        let scales = raw.into_iter().map(|v| v.max(SCALE_FLOOR)).collect();
        Self { scales, kind }
    }

    pub fn ones(len: usize, kind: ScaleKind) -> Self {
        Self {
            scales: vec![1.0; len],
            kind,
        }
    }

    pub fn kind(&self) -> ScaleKind {
        self.kind
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }
}

/// Retained rank for a `d_out x d_in` matrix at compression ratio `p`:
/// `floor(d_in * d_out * (1 - p) / (d_in + d_out))`, clamped to
/// `[1, min(d_in, d_out)]` so the factorization neither vanishes nor
/// inflates past the original parameter count.
pub fn rank_for_ratio(d_in: usize, d_out: usize, p: f64) -> Result<usize, DecomposeError> {
    if !(0.0..1.0).contains(&p) {
        return Err(DecomposeError::RatioOutOfRange(p));
    }
    let raw = (d_in as f64) * (d_out as f64) * (1.0 - p) / ((d_in + d_out) as f64);
    let r = raw.floor() as usize;
    Ok(r.clamp(1, d_in.min(d_out)))
}

fn check_rank(rank: usize, d_out: usize, d_in: usize) -> Result<(), DecomposeError> {
    let max = d_out.min(d_in);
    if rank == 0 || rank > max {
        return Err(DecomposeError::RankTooLarge {
            rank,
            d_out,
            d_in,
            max,
        });
    }
    Ok(())
}

/// Truncated SVD of the weight matrix itself: `L = U_r S_r`, `R = V_r^T`.
pub fn plain_svd_decompose(
    w: &Matrix,
    r: usize,
) -> Result<(FactorPair, EnergyProfile), DecomposeError> {
    check_rank(r, w.rows(), w.cols())?;
    let res = linalg::svd(w)?;
    let profile = profile_from_singvals(&res.singvals)?;
    let pair = svd_truncate(&res, r, None, Method::Svd)?;
    Ok((pair, profile))
}

/// Truncated SVD of `W * diag(s)` with the inverse scaling folded back into
/// `R`, so `L * R` approximates `W` where the inputs carry the most energy.
pub fn weighted_svd_decompose(
    w: &Matrix,
    s: &ScaleVector,
    r: usize,
) -> Result<(FactorPair, EnergyProfile), DecomposeError> {
    check_rank(r, w.rows(), w.cols())?;
    if s.len() != w.cols() {
        return Err(DecomposeError::DimensionMismatch {
            expected: w.cols(),
            got: s.len(),
        });
    }
    let ws = w.scale_columns(s.scales())?;
    let res = linalg::svd(&ws)?;
    let profile = profile_from_singvals(&res.singvals)?;
    let method = match s.kind() {
        ScaleKind::MeanAbs => Method::Asvd,
        ScaleKind::L2Norm => Method::Awsvd,
    };
    let pair = svd_truncate(&res, r, Some(s.scales()), method)?;
    Ok((pair, profile))
}

fn svd_truncate(
    res: &linalg::SvdResult,
    r: usize,
    inverse_scales: Option<&[f64]>,
    method: Method,
) -> Result<FactorPair, DecomposeError> {
    let ur = res.u.take_columns(r);
    let mut l = ur;
    for i in 0..l.rows() {
        for (j, v) in l.row_mut(i).iter_mut().enumerate() {
            *v *= res.singvals[j];
        }
    }
    let mut r_mat = res.vt.take_rows(r);
    if let Some(scales) = inverse_scales {
        for i in 0..r_mat.rows() {
            for (v, s) in r_mat.row_mut(i).iter_mut().zip(scales) {
                *v /= s;
            }
        }
    }
    FactorPair::new(l, r_mat, None, method)
}

/// Feature-space decomposition: EVD of the accumulated output Gram `Y Y^T`
/// gives the principal directions; `L = U_r`, `R = U_r^T W`. The predicted
/// calibration loss is exactly the truncated eigenvalue sum.
pub fn pca_decompose(
    w: &Matrix,
    gram_y: &Matrix,
    r: usize,
) -> Result<(FactorPair, EnergyProfile, f64), DecomposeError> {
    check_rank(r, w.rows(), w.cols())?;
    let evd = linalg::sym_evd(gram_y)?;
    let profile = EnergyProfile::new(&evd.eigvals, EnergyKind::Eigen)?;
    let ur = evd.eigvecs.take_columns(r);
    let r_mat = ur.matmul_transposed_self(w)?;
    let predicted_loss: f64 = evd.eigvals[r.min(evd.eigvals.len())..].iter().sum();
    let pair = FactorPair::new(ur, r_mat, None, Method::Pca)?;
    Ok((pair, profile, predicted_loss))
}

/// Covariance-space variant: EVD of `gram_y / n - mean * mean^T`. The output
/// mean is preserved exactly through the bias correction, so the rewritten
/// layer computes `L R x + bias`.
pub fn afm_decompose(
    w: &Matrix,
    gram_y: &Matrix,
    mean_y: &[f64],
    token_count: u64,
    r: usize,
) -> Result<(FactorPair, EnergyProfile), DecomposeError> {
    if token_count < 2 {
        return Err(DecomposeError::InsufficientTokens(token_count));
    }
    check_rank(r, w.rows(), w.cols())?;
    let d = w.rows();
    if gram_y.rows() != d || mean_y.len() != d {
        return Err(DecomposeError::DimensionMismatch {
            expected: d,
            got: mean_y.len(),
        });
    }
    let n = token_count as f64;
    let cov = Matrix::from_fn(d, d, |i, j| gram_y.get(i, j) / n - mean_y[i] * mean_y[j]);
    let evd = linalg::sym_evd(&cov)?;
    let profile = EnergyProfile::new(&evd.eigvals, EnergyKind::Eigen)?;
    let ur = evd.eigvecs.take_columns(r);
    let r_mat = ur.matmul_transposed_self(w)?;

    let zero_mean = mean_y.iter().all(|&v| v == 0.0);
    let bias = if zero_mean {
        None
    } else {
        let proj = ur.mul_vec(&ur.transpose().mul_vec(mean_y)?)?;
        Some(mean_y.iter().zip(&proj).map(|(m, p)| m - p).collect())
    };
    let pair = FactorPair::new(ur, r_mat, bias, Method::Afm)?;
    Ok((pair, profile))
}

/// Joint factorization of the row-wise stacked `[wq; wk]`. With a stacked
/// output Gram the principal directions come from that Gram (feature-space
/// route); otherwise from a plain SVD of the stacked matrix. Both returned
/// pairs carry identical `R` factors.
pub fn joint_qk_decompose(
    wq: &Matrix,
    wk: &Matrix,
    stacked_gram: Option<&Matrix>,
    r: usize,
) -> Result<(FactorPair, FactorPair), DecomposeError> {
    if wq.rows() != wk.rows() || wq.cols() != wk.cols() {
        return Err(DecomposeError::ShapeMismatch(
            wq.rows(),
            wq.cols(),
            wk.rows(),
            wk.cols(),
        ));
    }
    let stacked = Matrix::vstack(wq, wk)?;
    check_rank(r, stacked.rows(), stacked.cols())?;

    let (l, r_mat) = match stacked_gram {
        Some(gram) => {
            if gram.rows() != stacked.rows() {
                return Err(DecomposeError::DimensionMismatch {
                    expected: stacked.rows(),
                    got: gram.rows(),
                });
            }
            let evd = linalg::sym_evd(gram)?;
            let ur = evd.eigvecs.take_columns(r);
            let r_mat = ur.matmul_transposed_self(&stacked)?;
            (ur, r_mat)
        }
        None => {
            let res = linalg::svd(&stacked)?;
            let pair = svd_truncate(&res, r, None, Method::JointQk)?;
            (pair.l, pair.r_mat)
        }
    };

    let d = wq.rows();
    let l_q = l.row_block(0, d);
    let l_k = l.row_block(d, 2 * d);
    let pair_q = FactorPair::new(l_q, r_mat.clone(), None, Method::JointQk)?;
    let pair_k = FactorPair::new(l_k, r_mat, None, Method::JointQk)?;
    Ok((pair_q, pair_k))
}

/// Builds the cumulative-energy profile for a raw spectrum.
pub fn energy_profile(
    energies_raw: &[f64],
    kind: EnergyKind,
) -> Result<EnergyProfile, DecomposeError> {
    EnergyProfile::new(energies_raw, kind)
}

fn profile_from_singvals(singvals: &[f64]) -> Result<EnergyProfile, DecomposeError> {
    let sq: Vec<f64> = singvals.iter().map(|s| s * s).collect();
    EnergyProfile::new(&sq, EnergyKind::SingularSquared)
}

/// Eigenvalue spectrum of an accumulated output Gram.
pub fn eigen_spectrum(gram_y: &Matrix) -> Result<Vec<f64>, DecomposeError> {
    Ok(linalg::sym_evd(gram_y)?.eigvals)
}

/// Eigenvalue spectrum of the covariance derived from a Gram and mean.
pub fn covariance_spectrum(
    gram_y: &Matrix,
    mean_y: &[f64],
    token_count: u64,
) -> Result<Vec<f64>, DecomposeError> {
    if token_count < 2 {
        return Err(DecomposeError::InsufficientTokens(token_count));
    }
    let d = gram_y.rows();
    let n = token_count as f64;
    let cov = Matrix::from_fn(d, d, |i, j| gram_y.get(i, j) / n - mean_y[i] * mean_y[j]);
    Ok(linalg::sym_evd(&cov)?.eigvals)
}

/// Squared singular values of `w`, optionally column-scaled first.
pub fn squared_singular_spectrum(
    w: &Matrix,
    scales: Option<&ScaleVector>,
) -> Result<Vec<f64>, DecomposeError> {
    let target = match scales {
        Some(s) => {
            if s.len() != w.cols() {
                return Err(DecomposeError::DimensionMismatch {
                    expected: w.cols(),
                    got: s.len(),
                });
            }
            w.scale_columns(s.scales())?
        }
        None => w.clone(),
    };
    let res = linalg::svd(&target)?;
    Ok(res.singvals.iter().map(|s| s * s).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gram_accumulate;

    fn seeded_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(7);
        Matrix::from_fn(rows, cols, |_, _| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn rank_for_ratio_examples() {
        assert_eq!(rank_for_ratio(4096, 4096, 0.5).unwrap(), 1024);
        assert_eq!(rank_for_ratio(64, 64, 0.0).unwrap(), 32);
        assert_eq!(rank_for_ratio(172, 64, 0.3).unwrap(), 32);
        assert!(matches!(
            rank_for_ratio(8, 8, 1.0),
            Err(DecomposeError::RatioOutOfRange(_))
        ));
        assert!(matches!(
            rank_for_ratio(8, 8, -0.1),
            Err(DecomposeError::RatioOutOfRange(_))
        ));
    }

    #[test]
    fn rank_for_ratio_parameter_bound() {
        for &(d_in, d_out) in &[(64usize, 64usize), (172, 64), (64, 172), (7, 31)] {
            for p in [0.0, 0.1, 0.25, 0.5, 0.8, 0.99] {
                let r = rank_for_ratio(d_in, d_out, p).unwrap();
                let params = r * (d_in + d_out);
                let bound = (1.0 - p) * (d_in * d_out) as f64 + (d_in + d_out) as f64;
                assert!(params as f64 <= bound, "({d_in},{d_out},{p}) -> {r}");
                assert!(r >= 1 && r <= d_in.min(d_out));
            }
        }
    }

    #[test]
    fn energy_profile_examples() {
        let p = energy_profile(&[4.0, 1.0], EnergyKind::Eigen).unwrap();
        assert!((p.cumulative()[0] - 0.8).abs() < 1e-15);
        assert!((p.cumulative()[1] - 1.0).abs() < 1e-15);

        let single = energy_profile(&[1.0], EnergyKind::Eigen).unwrap();
        assert_eq!(single.cumulative(), &[1.0]);

        // Geometric spectrum 2^-i for i = 0..7 has a closed-form cumulative.
        let geo: Vec<f64> = (0..8).map(|i| 2f64.powi(-i)).collect();
        let prof = energy_profile(&geo, EnergyKind::Eigen).unwrap();
        let denom = 2.0 - 2f64.powi(-7);
        for (i, c) in prof.cumulative().iter().enumerate() {
            let expect = (2.0 - 2f64.powi(-(i as i32))) / denom;
            assert!((c - expect).abs() < 1e-12, "i={i}: {c} vs {expect}");
        }
    }

    #[test]
    fn energy_profile_rejects_all_zero() {
        assert!(matches!(
            energy_profile(&[0.0, 0.0], EnergyKind::Eigen),
            Err(DecomposeError::AllZeroSpectrum)
        ));
    }

    #[test]
    fn energy_profile_cumulative_invariants() {
        let prof = energy_profile(&[5.0, 3.0, 1.0, 0.5, 0.0], EnergyKind::Eigen).unwrap();
        let c = prof.cumulative();
        for w in c.windows(2) {
            assert!(w[1] >= w[0]);
        }
        assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(*c.last().unwrap(), 1.0);
    }

    #[test]
    fn pca_diagonal_spectrum_case() {
        let w = Matrix::identity(2);
        let gram = Matrix::diag(&[4.0, 1.0]);
        let (pair, _, loss) = pca_decompose(&w, &gram, 1).unwrap();
        assert!((loss - 1.0).abs() < 1e-12);
        assert!((pair.l.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(pair.l.get(1, 0).abs() < 1e-12);
        assert!((pair.r_mat.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(pair.r_mat.get(0, 1).abs() < 1e-12);
    }

    #[test]
    fn pca_full_rank_has_zero_loss() {
        let w = seeded_matrix(6, 6, 5);
        let x = seeded_matrix(6, 40, 6);
        let y = w.matmul(&x).unwrap();
        let gram = gram_accumulate(&Matrix::zeros(6, 6), &y).unwrap();

        let (pair, _, loss) = pca_decompose(&w, &gram, 6).unwrap();
        assert!(loss.abs() < 1e-9 * gram.trace());
        let evd = linalg::sym_evd(&gram).unwrap();
        let proj = evd.eigvecs.matmul(&evd.eigvecs.transpose()).unwrap();
        let pw = proj.matmul(&w).unwrap();
        let err = pair.reconstruct().sub(&pw).unwrap().frobenius_norm();
        assert!(err <= 1e-8);
    }

    #[test]
    fn pca_loss_identity_on_seeded_batch() {
        let w = seeded_matrix(8, 8, 17);
        let x = seeded_matrix(8, 256, 18);
        let y = w.matmul(&x).unwrap();
        let gram = gram_accumulate(&Matrix::zeros(8, 8), &y).unwrap();
        for r in [1usize, 2, 4, 7] {
            let (pair, _, predicted) = pca_decompose(&w, &gram, r).unwrap();
            let lrx = pair.apply(&x).unwrap();
            let measured = y.sub(&lrx).unwrap().frobenius_norm().powi(2);
            assert!(
                (measured - predicted).abs() <= 1e-6 * predicted.max(1e-12),
                "rank {r}: measured {measured} vs predicted {predicted}"
            );
        }
    }

    #[test]
    fn weighted_with_unit_scales_matches_plain() {
        let w = seeded_matrix(6, 6, 9);
        let ones = ScaleVector::ones(6, ScaleKind::MeanAbs);
        let (wp, _) = weighted_svd_decompose(&w, &ones, 3).unwrap();
        let (pp, _) = plain_svd_decompose(&w, 3).unwrap();
        for (a, b) in wp.l.data().iter().zip(pp.l.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in wp.r_mat.data().iter().zip(pp.r_mat.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_two_by_two_hand_case() {
        let w = Matrix::diag(&[2.0, 1.0]);
        let s = ScaleVector::new(vec![1.0, 10.0], ScaleKind::MeanAbs);
        let (pair, _) = weighted_svd_decompose(&w, &s, 1).unwrap();
        let lr = pair.reconstruct();
        assert!(lr.get(0, 0).abs() < 1e-12);
        assert!(lr.get(0, 1).abs() < 1e-12);
        assert!(lr.get(1, 0).abs() < 1e-12);
        assert!((lr.get(1, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_full_rank_exactness() {
        let w = seeded_matrix(6, 6, 31);
        let s = ScaleVector::new(
            (0..6).map(|i| 0.5 + i as f64).collect(),
            ScaleKind::L2Norm,
        );
        let (pair, _) = weighted_svd_decompose(&w, &s, 6).unwrap();
        let err = pair.reconstruct().sub(&w).unwrap().frobenius_norm();
        assert!(err <= 1e-8 * w.frobenius_norm());
    }

    #[test]
    fn weighted_scale_inverse_correctness() {
        let w = seeded_matrix(5, 7, 77);
        let s = ScaleVector::new((0..7).map(|i| 0.2 + 0.3 * i as f64).collect(), ScaleKind::L2Norm);
        let r = 3;
        let (pair, _) = weighted_svd_decompose(&w, &s, r).unwrap();
        let ws = w.scale_columns(s.scales()).unwrap();
        let res = linalg::svd(&ws).unwrap();
        let mut trunc = Matrix::zeros(5, 7);
        for i in 0..5 {
            for j in 0..7 {
                let mut acc = 0.0;
                for t in 0..r {
                    acc += res.u.get(i, t) * res.singvals[t] * res.vt.get(t, j);
                }
                trunc.set(i, j, acc);
            }
        }
        let lr_scaled = pair.reconstruct().scale_columns(s.scales()).unwrap();
        let err = lr_scaled.sub(&trunc).unwrap().frobenius_norm();
        assert!(err <= 1e-8 * trunc.frobenius_norm().max(1e-12));
    }

    #[test]
    fn plain_svd_examples() {
        let w = Matrix::diag(&[3.0, 2.0, 1.0]);
        let (pair, profile) = plain_svd_decompose(&w, 2).unwrap();
        let err2 = pair.reconstruct().sub(&w).unwrap().frobenius_norm().powi(2);
        assert!((err2 - 1.0).abs() < 1e-10);
        assert!((profile.tail_after(2) - 1.0).abs() < 1e-10);

        let any = seeded_matrix(4, 6, 2);
        let (full, _) = plain_svd_decompose(&any, 4).unwrap();
        let err = full.reconstruct().sub(&any).unwrap().frobenius_norm();
        assert!(err <= 1e-8 * any.frobenius_norm());
    }

    #[test]
    fn plain_svd_tail_matches_gram_eigenvalue_tail() {
        let w = seeded_matrix(5, 7, 55);
        let r = 3;
        let (pair, _) = plain_svd_decompose(&w, r).unwrap();
        let err2 = pair.reconstruct().sub(&w).unwrap().frobenius_norm().powi(2);
        let gram = w.transpose().matmul(&w).unwrap();
        let evd = linalg::sym_evd(&gram).unwrap();
        let tail: f64 = evd.eigvals[r..].iter().sum();
        assert!((err2 - tail).abs() <= 1e-8 * tail.max(1e-12));
    }

    #[test]
    fn afm_zero_mean_reduces_to_pca() {
        let w = seeded_matrix(6, 6, 41);
        let x = seeded_matrix(6, 64, 42);
        let y = w.matmul(&x).unwrap();
        let gram = gram_accumulate(&Matrix::zeros(6, 6), &y).unwrap();
        let zero_mean = vec![0.0; 6];
        let (afm, _) = afm_decompose(&w, &gram, &zero_mean, 64, 3).unwrap();
        let (pca, _, _) = pca_decompose(&w, &gram, 3).unwrap();
        assert!(afm.bias_correction.is_none());
        for (a, b) in afm.l.data().iter().zip(pca.l.data()) {
            assert!((a - b).abs() < 1e-8);
        }
        for (a, b) in afm.r_mat.data().iter().zip(pca.r_mat.data()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn afm_full_rank_bias_vanishes() {
        let w = seeded_matrix(5, 5, 43);
        let x = seeded_matrix(5, 32, 44);
        let y = w.matmul(&x).unwrap();
        let gram = gram_accumulate(&Matrix::zeros(5, 5), &y).unwrap();
        let mean: Vec<f64> = (0..5)
            .map(|i| y.row(i).iter().sum::<f64>() / 32.0)
            .collect();
        let (pair, _) = afm_decompose(&w, &gram, &mean, 32, 5).unwrap();
        let bias = pair.bias_correction.unwrap();
        assert!(bias.iter().all(|b| b.abs() < 1e-10));
    }

    #[test]
    fn afm_preserves_output_mean() {
        let w = seeded_matrix(8, 8, 45);
        // Shift the inputs so outputs have a clearly nonzero mean.
        let mut x = seeded_matrix(8, 128, 46);
        for v in x.data_mut() {
            *v += 0.5;
        }
        let y = w.matmul(&x).unwrap();
        let gram = gram_accumulate(&Matrix::zeros(8, 8), &y).unwrap();
        let n = 128.0;
        let mean: Vec<f64> = (0..8).map(|i| y.row(i).iter().sum::<f64>() / n).collect();
        let (pair, _) = afm_decompose(&w, &gram, &mean, 128, 3).unwrap();
        let yc = pair.apply(&x).unwrap();
        for i in 0..8 {
            let mc = yc.row(i).iter().sum::<f64>() / n;
            assert!(
                (mc - mean[i]).abs() < 1e-6,
                "row {i}: compressed mean {mc} vs original {}",
                mean[i]
            );
        }
    }

    #[test]
    fn afm_rejects_single_token() {
        let w = Matrix::identity(2);
        let gram = Matrix::identity(2);
        assert!(matches!(
            afm_decompose(&w, &gram, &[0.0, 0.0], 1, 1),
            Err(DecomposeError::InsufficientTokens(1))
        ));
    }

    #[test]
    fn joint_duplicated_rows_and_full_rank() {
        let wq = seeded_matrix(4, 4, 50);
        let wk = wq.clone();
        let rank = 4; // stacked [wq; wq] has rank <= 4
        let (pq, pk) = joint_qk_decompose(&wq, &wk, None, rank).unwrap();
        assert!(pq.reconstruct().sub(&wq).unwrap().frobenius_norm() <= 1e-8);
        assert!(pk.reconstruct().sub(&wk).unwrap().frobenius_norm() <= 1e-8);

        let wk2 = seeded_matrix(4, 4, 51);
        let (q2, k2) = joint_qk_decompose(&wq, &wk2, None, 4).unwrap();
        assert!(q2.reconstruct().sub(&wq).unwrap().frobenius_norm() <= 1e-8);
        assert!(k2.reconstruct().sub(&wk2).unwrap().frobenius_norm() <= 1e-8);
        assert_eq!(q2.r_mat.data(), k2.r_mat.data());
    }

    #[test]
    fn joint_error_matches_stacked_tail() {
        let wq = seeded_matrix(8, 8, 60);
        let wk = seeded_matrix(8, 8, 61);
        let r = 4;
        let (pq, pk) = joint_qk_decompose(&wq, &wk, None, r).unwrap();
        let eq = pq.reconstruct().sub(&wq).unwrap().frobenius_norm().powi(2);
        let ek = pk.reconstruct().sub(&wk).unwrap().frobenius_norm().powi(2);
        let stacked = Matrix::vstack(&wq, &wk).unwrap();
        let res = linalg::svd(&stacked).unwrap();
        let tail: f64 = res.singvals[r..].iter().map(|s| s * s).sum();
        assert!(((eq + ek) - tail).abs() <= 1e-8 * tail.max(1e-12));
    }

    #[test]
    fn joint_rejects_shape_mismatch() {
        let wq = Matrix::zeros(4, 4);
        let wk = Matrix::zeros(4, 5);
        assert!(matches!(
            joint_qk_decompose(&wq, &wk, None, 2),
            Err(DecomposeError::ShapeMismatch(..))
        ));
    }

    #[test]
    fn loss_is_monotone_in_rank() {
        let w = seeded_matrix(8, 8, 70);
        let x = seeded_matrix(8, 64, 71);
        let y = w.matmul(&x).unwrap();
        let gram = gram_accumulate(&Matrix::zeros(8, 8), &y).unwrap();
        let s = ScaleVector::new(
            (0..8).map(|i| 0.1 + 0.2 * i as f64).collect(),
            ScaleKind::MeanAbs,
        );
        let mut last_pca = f64::INFINITY;
        let mut last_svd = f64::INFINITY;
        let mut last_wsvd = f64::INFINITY;
        for r in 1..=8 {
            let (_, _, pca_loss) = pca_decompose(&w, &gram, r).unwrap();
            let (_, prof_svd) = plain_svd_decompose(&w, r).unwrap();
            let (_, prof_w) = weighted_svd_decompose(&w, &s, r).unwrap();
            let svd_loss = prof_svd.tail_after(r);
            let wsvd_loss = prof_w.tail_after(r);
            assert!(pca_loss <= last_pca + 1e-12);
            assert!(svd_loss <= last_svd + 1e-12);
            assert!(wsvd_loss <= last_wsvd + 1e-12);
            last_pca = pca_loss;
            last_svd = svd_loss;
            last_wsvd = wsvd_loss;
        }
    }

    #[test]
    fn rank_too_large_is_rejected() {
        let w = Matrix::zeros(4, 6);
        assert!(matches!(
            plain_svd_decompose(&w, 5),
            Err(DecomposeError::RankTooLarge { .. })
        ));
        assert!(matches!(
            plain_svd_decompose(&w, 0),
            Err(DecomposeError::RankTooLarge { .. })
        ));
    }
}
