//! Representation-geometry analysis.
//!
//! Everything downstream of a trained network reduces to eigenvalues of
//! per-class second-moment matrices:
//!
//! * [`class_covariance`] — unbiased covariance of representation rows,
//! * [`correlation_matrix`] — the same after per-dimension normalization,
//!   whose trace is exactly the dimension `d`,
//! * [`sym_eigenvalues`] — a cyclic Jacobi eigensolver (values only),
//! * [`alpha_curve`] — cumulative eigenvalue mass `alpha_k`, the dominance
//!   measure of the top `k` directions,
//! * [`l_shape`] — variance of the spectrum around its mean, which for a
//!   correlation matrix equals `||K||_F^2 - d` ([`spectrum_variance_residual`]),
//! * [`conditional_mi_estimate`] / [`log_volume_proxy`] — Gaussian proxies
//!   built from summed log-eigenvalues. Their additive constants are
//!   dropped, so only differences across runs are meaningful.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Default floor applied to eigenvalues before taking logs.
pub const MI_EIGENVALUE_FLOOR: f64 = 1e-8;

/// Eigenvalues this far below zero are treated as rounding noise and
/// clamped; anything more negative is a real PSD violation.
pub const NEGATIVE_EIGENVALUE_TOLERANCE: f64 = 1e-9;

/// Whether a spectrum came from a raw covariance or a correlation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumSource {
    Covariance,
    Correlation,
}

impl std::fmt::Display for SpectrumSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SpectrumSource::Covariance => write!(f, "covariance"),
            SpectrumSource::Correlation => write!(f, "correlation"),
        }
    }
}

/// Per-class spectral summary of a batch of representations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub class_id: usize,
    pub sample_count: usize,
    /// Eigenvalues, descending, clamped to be nonnegative.
    pub eigenvalues: Vec<f64>,
    /// `alpha_k` for `k = 1..=d`; nondecreasing with final entry 1.
    pub alpha: Vec<f64>,
    pub frobenius_sq: f64,
    /// `sum_i log(max(lambda_i, floor))` with the floor used recorded below.
    pub log_eig_sum: f64,
    pub eigenvalue_floor: f64,
    pub source: SpectrumSource,
}

impl SpectrumReport {
    /// Computes the full report for one class's representation rows.
    pub fn from_representations(
        class_id: usize,
        reps: &Mat,
        source: SpectrumSource,
        eps: f64,
    ) -> Result<SpectrumReport> {
        let d = reps.cols();
        let matrix = match source {
            SpectrumSource::Covariance => class_covariance(reps)?,
            SpectrumSource::Correlation => correlation_matrix(reps, eps)?,
        };
        let eigenvalues = sym_eigenvalues(&matrix)?;
        if source == SpectrumSource::Correlation {
            let trace: f64 = eigenvalues.iter().sum();
            if (trace - d as f64).abs() > 1e-6 * d as f64 {
                return Err(Error::Numeric {
                    op: "SpectrumReport",
                    message: format!("correlation spectrum sums to {trace}, expected {d}"),
                });
            }
            // The Frobenius identity is asserted on every correlation
            // matrix produced, not only in test fixtures.
            let residual = variance_identity_residual(&matrix, &eigenvalues);
            if residual > 1e-8 * d as f64 {
                return Err(Error::Numeric {
                    op: "SpectrumReport",
                    message: format!("spectrum-variance identity residual {residual} for d={d}"),
                });
            }
        }
        let alpha = alpha_curve(&eigenvalues)?;
        let log_eig_sum = log_eig_sum(&eigenvalues, MI_EIGENVALUE_FLOOR);
        Ok(SpectrumReport {
            class_id,
            sample_count: reps.rows(),
            frobenius_sq: matrix.frobenius_sq(),
            eigenvalues,
            alpha,
            log_eig_sum,
            eigenvalue_floor: MI_EIGENVALUE_FLOOR,
            source,
        })
    }

    /// `alpha_k` at a 1-based `k`.
    pub fn alpha_at(&self, k: usize) -> f64 {
        self.alpha[k - 1]
    }
}

/// Unbiased covariance `sum_i (z_i - mean)(z_i - mean)^T / (n - 1)` of the
/// rows of an `n x d` matrix, symmetrized against rounding.
pub fn class_covariance(reps: &Mat) -> Result<Mat> {
    let n = reps.rows();
    let d = reps.cols();
    if n < 2 {
        return Err(Error::InsufficientSamples {
            op: "class_covariance",
            required: 2,
            got: n,
        });
    }
    let mean = reps.col_mean();
    let mut cov = Mat::zeros(d, d);
    for i in 0..n {
        let row = reps.row(i);
        for a in 0..d {
            let da = row[a] - mean[a];
            if da == 0.0 {
                continue;
            }
            for b in 0..d {
                cov[(a, b)] += da * (row[b] - mean[b]);
            }
        }
    }
    let scale = 1.0 / (n - 1) as f64;
    for v in cov.data_mut() {
        *v *= scale;
    }
    // Average with the transpose so the eigensolver's symmetry contract
    // holds to machine precision.
    for a in 0..d {
        for b in (a + 1)..d {
            let s = 0.5 * (cov[(a, b)] + cov[(b, a)]);
            cov[(a, b)] = s;
            cov[(b, a)] = s;
        }
    }
    Ok(cov)
}

/// Covariance of per-dimension standardized rows: subtract the column mean
/// and divide by the unbiased column standard deviation plus `eps`. The
/// result is a correlation matrix up to the `eps` guard, so its diagonal
/// entries sit in `[0, 1]` and its trace is `d` up to the guard.
pub fn correlation_matrix(reps: &Mat, eps: f64) -> Result<Mat> {
    let n = reps.rows();
    let d = reps.cols();
    if n < 2 {
        return Err(Error::InsufficientSamples {
            op: "correlation_matrix",
            required: 2,
            got: n,
        });
    }
    let mean = reps.col_mean();
    let mut std = vec![0.0; d];
    for i in 0..n {
        let row = reps.row(i);
        for (j, s) in std.iter_mut().enumerate() {
            let c = row[j] - mean[j];
            *s += c * c;
        }
    }
    for s in &mut std {
        *s = (*s / (n - 1) as f64).sqrt() + eps;
    }
    let mut normalized = Mat::zeros(n, d);
    for i in 0..n {
        let row = reps.row(i);
        for j in 0..d {
            normalized[(i, j)] = (row[j] - mean[j]) / std[j];
        }
    }
    class_covariance(&normalized)
}

/// Eigenvalues of a symmetric matrix in descending order, by cyclic Jacobi
/// rotations. Eigenvectors are never formed. Convergence is declared when
/// the largest off-diagonal entry falls below `1e-10` relative to the
/// largest input magnitude (absolute for matrices with entries of order
/// one); 100 sweeps without convergence is a numeric error.
pub fn sym_eigenvalues(m: &Mat) -> Result<Vec<f64>> {
    let d = m.rows();
    if d != m.cols() {
        return Err(Error::Contract {
            op: "sym_eigenvalues",
            message: format!("matrix is {}x{}, not square", m.rows(), m.cols()),
        });
    }
    let mut defect = 0.0f64;
    for i in 0..d {
        for j in (i + 1)..d {
            defect = defect.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if defect >= 1e-8 {
        return Err(Error::Contract {
            op: "sym_eigenvalues",
            message: format!("symmetry defect {defect} exceeds 1e-8"),
        });
    }
    if d == 1 {
        return Ok(vec![m[(0, 0)]]);
    }

    let trace: f64 = (0..d).map(|i| m[(i, i)]).sum();
    let tol = 1e-10 * m.max_abs().max(1.0);
    let mut a = m.clone();
    let mut converged = false;
    for _sweep in 0..100 {
        let mut max_off = 0.0f64;
        for p in 0..d - 1 {
            for q in (p + 1)..d {
                max_off = max_off.max(a[(p, q)].abs());
            }
        }
        if max_off < tol {
            converged = true;
            break;
        }
        for p in 0..d - 1 {
            for q in (p + 1)..d {
                let apq = a[(p, q)];
                if apq.abs() < tol {
                    continue;
                }
                // Classic Jacobi rotation annihilating a[(p, q)].
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    if !converged {
        let mut residual = 0.0f64;
        for p in 0..d - 1 {
            for q in (p + 1)..d {
                residual = residual.max(a[(p, q)].abs());
            }
        }
        if residual >= tol {
            return Err(Error::Numeric {
                op: "sym_eigenvalues",
                message: format!("no convergence after 100 sweeps, off-diagonal residual {residual}"),
            });
        }
    }

    let mut eigs: Vec<f64> = (0..d).map(|i| a[(i, i)]).collect();
    eigs.sort_by(|x, y| y.partial_cmp(x).expect("eigenvalues are finite"));
    let eig_sum: f64 = eigs.iter().sum();
    if (eig_sum - trace).abs() > 1e-8 * (d as f64) * trace.abs().max(1.0) {
        return Err(Error::Numeric {
            op: "sym_eigenvalues",
            message: format!("eigenvalue sum {eig_sum} drifted from trace {trace}"),
        });
    }
    Ok(eigs)
}

/// Clamps tiny negative eigenvalues (rounding noise from PSD matrices) to
/// zero; genuinely negative values are an error.
pub fn clamp_spectrum(eigs: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(eigs.len());
    for &e in eigs {
        if e < -NEGATIVE_EIGENVALUE_TOLERANCE {
            return Err(Error::Numeric {
                op: "clamp_spectrum",
                message: format!("eigenvalue {e} below tolerance {NEGATIVE_EIGENVALUE_TOLERANCE}"),
            });
        }
        out.push(e.max(0.0));
    }
    Ok(out)
}

/// Cumulative eigenvalue mass `alpha_k = sum_{i<=k} lambda_i / sum_i
/// lambda_i` for `k = 1..=d`, over a descending nonnegative spectrum.
pub fn alpha_curve(eigs: &[f64]) -> Result<Vec<f64>> {
    let eigs = clamp_spectrum(eigs)?;
    let total: f64 = eigs.iter().sum();
    if total <= 0.0 {
        return Err(Error::Numeric {
            op: "alpha_curve",
            message: "degenerate all-zero spectrum".into(),
        });
    }
    let mut acc = 0.0;
    Ok(eigs
        .iter()
        .map(|e| {
            acc += e;
            acc / total
        })
        .collect())
}

/// Variance of the spectrum around its mean, `(1/d) sum_i (lambda_i -
/// mean)^2`. Small when the eigenvalues are flat, large when a few
/// directions dominate.
pub fn l_shape(eigs: &[f64]) -> f64 {
    let d = eigs.len() as f64;
    let mean = eigs.iter().sum::<f64>() / d;
    eigs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / d
}

/// Residual of the identity `sum_i (lambda_i - mean)^2 = ||K||_F^2 - d` for
/// a correlation matrix `K`. Exact in real arithmetic; the return value is
/// numerical noise only.
pub fn spectrum_variance_residual(correlation: &Mat) -> Result<f64> {
    let eigs = sym_eigenvalues(correlation)?;
    Ok(variance_identity_residual(correlation, &eigs))
}

fn variance_identity_residual(correlation: &Mat, eigs: &[f64]) -> f64 {
    let d = correlation.rows() as f64;
    let mean = eigs.iter().sum::<f64>() / d;
    let lhs: f64 = eigs.iter().map(|e| (e - mean) * (e - mean)).sum();
    let rhs = correlation.frobenius_sq() - d;
    (lhs - rhs).abs()
}

fn log_eig_sum(eigs: &[f64], floor: f64) -> f64 {
    eigs.iter().map(|&e| e.max(floor).ln()).sum()
}

/// Class-averaged sum of log covariance eigenvalues,
/// `(1/C) sum_c sum_i log max(lambda_i^(c), floor)`.
///
/// Under a Gaussian assumption this is proportional to the conditional
/// mutual information between inputs and representations given the label;
/// the dropped proportionality constants mean only differences across runs
/// carry meaning.
pub fn conditional_mi_estimate(spectra: &[SpectrumReport], floor: f64) -> Result<f64> {
    if spectra.is_empty() {
        return Err(Error::Contract {
            op: "conditional_mi_estimate",
            message: "needs at least one class spectrum".into(),
        });
    }
    if floor <= 0.0 {
        return Err(Error::Contract {
            op: "conditional_mi_estimate",
            message: format!("floor must be positive, got {floor}"),
        });
    }
    let total: f64 = spectra
        .iter()
        .map(|s| log_eig_sum(&s.eigenvalues, floor))
        .sum();
    Ok(total / spectra.len() as f64)
}

/// One class's term of [`conditional_mi_estimate`]: the log of the volume
/// (up to constants) occupied by that class's representations.
pub fn log_volume_proxy(spectrum: &SpectrumReport, floor: f64) -> Result<f64> {
    if floor <= 0.0 {
        return Err(Error::Contract {
            op: "log_volume_proxy",
            message: format!("floor must be positive, got {floor}"),
        });
    }
    Ok(log_eig_sum(&spectrum.eigenvalues, floor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Mat {
        Mat::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    /// Brute-force covariance: explicit double loop over the definition.
    fn naive_covariance(reps: &Mat) -> Mat {
        let (n, d) = (reps.rows(), reps.cols());
        let mean = reps.col_mean();
        let mut cov = Mat::zeros(d, d);
        for a in 0..d {
            for b in 0..d {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += (reps[(i, a)] - mean[a]) * (reps[(i, b)] - mean[b]);
                }
                cov[(a, b)] = acc / (n - 1) as f64;
            }
        }
        cov
    }

    fn random_mat(rng: &mut SplitMix64, rows: usize, cols: usize, lo: f64, hi: f64) -> Mat {
        let data = (0..rows * cols).map(|_| rng.uniform(lo, hi)).collect();
        Mat::from_vec(rows, cols, data).unwrap()
    }

    /// Random correlation matrix obtained by standardizing random data.
    fn random_correlation(rng: &mut SplitMix64, n: usize, d: usize) -> Mat {
        let reps = random_mat(rng, n, d, -2.0, 2.0);
        correlation_matrix(&reps, 1e-12).unwrap()
    }

    #[test]
    fn covariance_hand_case() {
        // rows [1,0] and [-1,0]: mean [0,0], n-1 = 1.
        let r = mat(2, 2, &[1.0, 0.0, -1.0, 0.0]);
        let k = class_covariance(&r).unwrap();
        assert_eq!(k.data(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn covariance_of_constant_rows_is_zero() {
        let r = mat(4, 3, &[7.0, -1.0, 2.5, 7.0, -1.0, 2.5, 7.0, -1.0, 2.5, 7.0, -1.0, 2.5]);
        let k = class_covariance(&r).unwrap();
        assert!(k.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn covariance_matches_naive_oracle() {
        let mut rng = SplitMix64::new(3);
        let r = random_mat(&mut rng, 5, 3, -4.0, 4.0);
        let fast = class_covariance(&r).unwrap();
        let slow = naive_covariance(&r);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn covariance_needs_two_samples() {
        let r = mat(1, 2, &[1.0, 2.0]);
        assert!(matches!(
            class_covariance(&r),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn correlation_is_scale_invariant() {
        let mut rng = SplitMix64::new(8);
        let r = random_mat(&mut rng, 20, 4, -1.0, 1.0);
        let mut scaled = r.clone();
        let factors = [3.0, 0.25, 10.0, 1.0];
        for i in 0..scaled.rows() {
            for j in 0..scaled.cols() {
                scaled[(i, j)] *= factors[j];
            }
        }
        let k1 = correlation_matrix(&r, 1e-12).unwrap();
        let k2 = correlation_matrix(&scaled, 1e-12).unwrap();
        for (a, b) in k1.data().iter().zip(k2.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn correlation_of_perfectly_correlated_data() {
        // rows (t, t) for t in {1,2,3}.
        let r = mat(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let k = correlation_matrix(&r, 1e-12).unwrap();
        for &v in k.data() {
            assert!((v - 1.0).abs() < 1e-6, "entry {v}");
        }
    }

    #[test]
    fn correlation_trace_equals_dimension() {
        let mut rng = SplitMix64::new(21);
        for d in [2, 5, 16] {
            let r = random_mat(&mut rng, 30, d, -5.0, 5.0);
            let k = correlation_matrix(&r, 1e-12).unwrap();
            let trace: f64 = (0..d).map(|i| k[(i, i)]).sum();
            assert!((trace - d as f64).abs() < 1e-6 * d as f64);
            for i in 0..d {
                assert!(k[(i, i)] <= 1.0 + 1e-12 && k[(i, i)] > 1.0 - 1e-6);
                for j in 0..d {
                    assert!(k[(i, j)] >= -1.0 - 1e-9 && k[(i, j)] <= 1.0 + 1e-9);
                }
            }
        }
    }

    #[test]
    fn eigenvalues_of_diagonal() {
        let m = mat(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        assert_eq!(sym_eigenvalues(&m).unwrap(), vec![2.0, 1.0]);
    }

    #[test]
    fn eigenvalues_of_ones_matrix() {
        // Characteristic polynomial lambda^2 - 2 lambda = 0.
        let m = mat(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let e = sym_eigenvalues(&m).unwrap();
        assert!((e[0] - 2.0).abs() < 1e-10);
        assert!(e[1].abs() < 1e-10);
    }

    #[test]
    fn eigenvalue_trace_and_frobenius_identities() {
        let mut rng = SplitMix64::new(17);
        let raw = random_mat(&mut rng, 8, 8, -1.0, 1.0);
        // Symmetrize.
        let mut m = Mat::zeros(8, 8);
        for i in 0..8 {
            for j in 0..8 {
                m[(i, j)] = 0.5 * (raw[(i, j)] + raw[(j, i)]);
            }
        }
        let eigs = sym_eigenvalues(&m).unwrap();
        let trace: f64 = (0..8).map(|i| m[(i, i)]).sum();
        let sum: f64 = eigs.iter().sum();
        let sum_sq: f64 = eigs.iter().map(|e| e * e).sum();
        assert!((sum - trace).abs() < 1e-8);
        assert!((sum_sq - m.frobenius_sq()).abs() < 1e-8);
    }

    #[test]
    fn eigenvalues_reject_asymmetry() {
        let m = mat(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(sym_eigenvalues(&m), Err(Error::Contract { .. })));
    }

    #[test]
    fn two_by_two_closed_form_oracle() {
        // Full pipeline against the quadratic formula for d = 2.
        let mut rng = SplitMix64::new(29);
        for _ in 0..50 {
            let r = random_mat(&mut rng, 12, 2, -3.0, 3.0);
            let k = class_covariance(&r).unwrap();
            let (a, b, c) = (k[(0, 0)], k[(0, 1)], k[(1, 1)]);
            let disc = ((a - c) * (a - c) + 4.0 * b * b).sqrt();
            let hi = 0.5 * (a + c + disc);
            let lo = 0.5 * (a + c - disc);
            let eigs = sym_eigenvalues(&k).unwrap();
            assert!((eigs[0] - hi).abs() < 1e-10, "{} vs {hi}", eigs[0]);
            assert!((eigs[1] - lo).abs() < 1e-10, "{} vs {lo}", eigs[1]);
        }
    }

    #[test]
    fn alpha_curve_identity_spectrum() {
        let alpha = alpha_curve(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(alpha, vec![0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn alpha_curve_top_heavy() {
        let alpha = alpha_curve(&[3.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(alpha, vec![0.75, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn alpha_curve_is_monotone_with_unit_tail() {
        let mut rng = SplitMix64::new(31);
        for _ in 0..20 {
            let mut eigs: Vec<f64> = (0..10).map(|_| rng.uniform(0.0, 5.0)).collect();
            eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let alpha = alpha_curve(&eigs).unwrap();
            for w in alpha.windows(2) {
                assert!(w[1] >= w[0] - 1e-15);
            }
            assert!((alpha.last().unwrap() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn alpha_curve_rejects_zero_spectrum() {
        assert!(alpha_curve(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn l_shape_hand_cases() {
        assert_eq!(l_shape(&[2.0, 2.0, 2.0]), 0.0);
        // Correlation spectrum [2, 0]: (1/2)((2-1)^2 + (0-1)^2) = 1.
        assert_eq!(l_shape(&[2.0, 0.0]), 1.0);
    }

    #[test]
    fn l_shape_matches_naive_variance() {
        let mut rng = SplitMix64::new(41);
        let eigs: Vec<f64> = (0..16).map(|_| rng.uniform(0.0, 3.0)).collect();
        let mean = eigs.iter().sum::<f64>() / 16.0;
        let naive = eigs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / 16.0;
        assert!((l_shape(&eigs) - naive).abs() < 1e-12);
    }

    #[test]
    fn variance_identity_hand_cases() {
        assert!(spectrum_variance_residual(&Mat::identity(5)).unwrap() < 1e-12);
        // K = [[1,1],[1,1]]: LHS 2, RHS 4 - 2 = 2.
        let k = mat(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(spectrum_variance_residual(&k).unwrap() < 1e-9);
    }

    #[test]
    fn variance_identity_random_sweep() {
        let mut rng = SplitMix64::new(1993);
        for trial in 0..100 {
            let d = 2 + rng.below(63);
            let n = d + 1 + rng.below(40);
            let k = random_correlation(&mut rng, n, d);
            let residual = spectrum_variance_residual(&k).unwrap();
            assert!(
                residual < 1e-8 * d as f64,
                "trial {trial}: residual {residual} at d={d}"
            );
        }
    }

    #[test]
    fn mi_estimate_identity_covariance() {
        let report = SpectrumReport {
            class_id: 0,
            sample_count: 10,
            eigenvalues: vec![1.0; 4],
            alpha: vec![0.25, 0.5, 0.75, 1.0],
            frobenius_sq: 4.0,
            log_eig_sum: 0.0,
            eigenvalue_floor: MI_EIGENVALUE_FLOOR,
            source: SpectrumSource::Covariance,
        };
        let mi = conditional_mi_estimate(&[report], MI_EIGENVALUE_FLOOR).unwrap();
        assert!(mi.abs() < 1e-12);
    }

    #[test]
    fn mi_estimate_all_e_spectrum() {
        let e = std::f64::consts::E;
        let report = SpectrumReport {
            class_id: 0,
            sample_count: 10,
            eigenvalues: vec![e, e, e],
            alpha: vec![1.0 / 3.0, 2.0 / 3.0, 1.0],
            frobenius_sq: 0.0,
            log_eig_sum: 3.0,
            eigenvalue_floor: MI_EIGENVALUE_FLOOR,
            source: SpectrumSource::Covariance,
        };
        let mi = conditional_mi_estimate(&[report], MI_EIGENVALUE_FLOOR).unwrap();
        assert!((mi - 3.0).abs() < 1e-12);
    }

    #[test]
    fn doubling_representations_shifts_mi_by_d_ln4() {
        let mut rng = SplitMix64::new(55);
        let d = 3;
        let r = random_mat(&mut rng, 40, d, -1.0, 1.0);
        let mut doubled = r.clone();
        for v in doubled.data_mut() {
            *v *= 2.0;
        }
        let s1 =
            SpectrumReport::from_representations(0, &r, SpectrumSource::Covariance, 1e-5).unwrap();
        let s2 = SpectrumReport::from_representations(0, &doubled, SpectrumSource::Covariance, 1e-5)
            .unwrap();
        let m1 = conditional_mi_estimate(&[s1], MI_EIGENVALUE_FLOOR).unwrap();
        let m2 = conditional_mi_estimate(&[s2], MI_EIGENVALUE_FLOOR).unwrap();
        assert!((m2 - m1 - d as f64 * 4.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn mi_estimate_rejects_empty_input() {
        assert!(conditional_mi_estimate(&[], MI_EIGENVALUE_FLOOR).is_err());
    }

    #[test]
    fn log_volume_matches_single_class_mi() {
        let mut rng = SplitMix64::new(61);
        let r = random_mat(&mut rng, 25, 4, -2.0, 2.0);
        let s =
            SpectrumReport::from_representations(3, &r, SpectrumSource::Covariance, 1e-5).unwrap();
        let v = log_volume_proxy(&s, MI_EIGENVALUE_FLOOR).unwrap();
        let mi = conditional_mi_estimate(&[s], MI_EIGENVALUE_FLOOR).unwrap();
        assert_eq!(v, mi);
    }

    #[test]
    fn report_alpha_invariant_to_row_permutation() {
        let mut rng = SplitMix64::new(71);
        let r = random_mat(&mut rng, 15, 5, -1.0, 1.0);
        let mut indices: Vec<usize> = (0..15).collect();
        rng.shuffle(&mut indices);
        let permuted = r.select_rows(&indices);
        let a = SpectrumReport::from_representations(0, &r, SpectrumSource::Covariance, 1e-5)
            .unwrap();
        let b = SpectrumReport::from_representations(0, &permuted, SpectrumSource::Covariance, 1e-5)
            .unwrap();
        for (x, y) in a.alpha.iter().zip(&b.alpha) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn clamp_rejects_large_negative() {
        assert!(clamp_spectrum(&[1.0, -1e-6]).is_err());
        assert_eq!(clamp_spectrum(&[1.0, -1e-10]).unwrap(), vec![1.0, 0.0]);
    }
}
