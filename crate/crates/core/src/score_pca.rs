//! Relative score PCA: estimate `H = E_γ[x h(x)ᵀ]` with `h = ∇log p + x`,
//! diagonalize it, and rotate onto its leading eigenvectors. Also hosts the
//! Haar sampler and the projected Fisher information bounds.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{normal_batch, RandomStream};
use crate::target::{GaussianTarget, TargetDistribution};
use crate::transforms::Rotation;

pub const JACOBI_MAX_SWEEPS: usize = 100;
pub const JACOBI_TOL: f64 = 1e-12;
/// Candidates whose residual norm falls below this are skipped during basis
/// completion.
pub const COMPLETION_SKIP: f64 = 1e-8;

/// Symmetrized Monte Carlo estimate of `H` with per-entry standard errors.
#[derive(Debug, Clone)]
pub struct HMatrix {
    pub matrix: DMatrix<f64>,
    pub sample_size: usize,
    pub std_errors: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    /// Sorted by descending magnitude.
    pub values: Vec<f64>,
    /// Eigenvectors as columns, in the order of `values`.
    pub vectors: DMatrix<f64>,
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the signs
/// of `diag(R)` folded into `Q`.
pub fn sample_haar_matrix(d: usize, rng: &mut RandomStream) -> DMatrix<f64> {
    assert!(d >= 1, "dimension must be positive");
    let rows = normal_batch(rng, d, d);
    let g = DMatrix::from_fn(d, d, |i, j| rows[i][j]);
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub fn sample_haar_rotation(d: usize, rng: &mut RandomStream) -> Rotation {
    Rotation::Dense(sample_haar_matrix(d, rng))
}

/// `Ĥ = sym((1/N) Σ x_i h(x_i)ᵀ)` with `x_i ~ N(0, I)`.
///
/// Samples are drawn sequentially from `rng`; scores are evaluated in parallel
/// and reduced in sample order, so the result does not depend on the thread
/// count.
pub fn estimate_h(p: &dyn TargetDistribution, n: usize, rng: &mut RandomStream) -> HMatrix {
    assert!(n >= 2, "need at least two samples");
    let d = p.dim();
    let xs = normal_batch(rng, n, d);
    let hs: Vec<Vec<f64>> = xs
        .par_iter()
        .map(|x| {
            let mut s = p.score(x);
            s.iter_mut().zip(x).for_each(|(si, xi)| *si += xi);
            s
        })
        .collect();
    let mut sum = DMatrix::<f64>::zeros(d, d);
    let mut sumsq = DMatrix::<f64>::zeros(d, d);
    for (x, h) in xs.iter().zip(&hs) {
        for a in 0..d {
            for b in a..d {
                let v = 0.5 * (x[a] * h[b] + x[b] * h[a]);
                sum[(a, b)] += v;
                sumsq[(a, b)] += v * v;
            }
        }
    }
    let nf = n as f64;
    let mut matrix = DMatrix::zeros(d, d);
    let mut std_errors = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let mean = sum[(a, b)] / nf;
            let var = ((sumsq[(a, b)] - nf * mean * mean) / (nf - 1.0)).max(0.0);
            matrix[(a, b)] = mean;
            matrix[(b, a)] = mean;
            std_errors[(a, b)] = (var / nf).sqrt();
            std_errors[(b, a)] = std_errors[(a, b)];
        }
    }
    HMatrix { matrix, sample_size: n, std_errors }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Eigenpairs are sorted by descending `|ν|`; magnitudes equal to relative
/// `1e-12` are ordered by signed value (positive first), then by position.
/// Each eigenvector is signed so its largest-magnitude entry (first on ties)
/// is positive.
pub fn eig_sym(h: &DMatrix<f64>) -> Result<EigenDecomposition> {
    assert!(h.is_square(), "matrix must be square");
    let d = h.nrows();
    let mut a = (h + h.transpose()) * 0.5;
    let mut v = DMatrix::<f64>::identity(d, d);
    let norm = a.norm();
    let off = |a: &DMatrix<f64>| {
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    s += a[(i, j)] * a[(i, j)];
                }
            }
        }
        s.sqrt()
    };
    let mut converged = norm == 0.0 || off(&a) <= JACOBI_TOL * norm;
    let mut sweeps = 0;
    while !converged {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::EigenNoConvergence { sweeps });
        }
        sweeps += 1;
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        converged = off(&a) <= JACOBI_TOL * norm;
    }
    let raw: Vec<f64> = (0..d).map(|i| a[(i, i)]).collect();
    let scale = raw.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let tie = JACOBI_TOL * scale;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| {
        let (x, y) = (raw[i], raw[j]);
        if (x.abs() - y.abs()).abs() > tie {
            y.abs().total_cmp(&x.abs())
        } else if (x - y).abs() > tie {
            y.total_cmp(&x)
        } else {
            i.cmp(&j)
        }
    });
    let values = order.iter().map(|&i| raw[i]).collect();
    let mut vectors = DMatrix::zeros(d, d);
    for (c, &i) in order.iter().enumerate() {
        let mut col = v.column(i).into_owned();
        let big = col.amax();
        let lead = (0..d).find(|&k| col[k].abs() >= big * (1.0 - 1e-12)).unwrap_or(0);
        if col[lead] < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(c, &col);
    }
    Ok(EigenDecomposition { values, vectors })
}

/// Smallest `r` whose leading eigenvalues explain `threshold` of `Σ ν_i²`.
/// Zero when every eigenvalue vanishes.
pub fn explained_rank(values: &[f64], threshold: f64) -> usize {
    assert!(threshold > 0.0 && threshold <= 1.0, "threshold must lie in (0, 1]");
    let total: f64 = values.iter().map(|v| v * v).sum();
    if total == 0.0 {
        return 0;
    }
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v * v;
        // Guard against rounding: 9/10 must reach a 0.9 threshold.
        if acc / total >= threshold * (1.0 - 1e-12) {
            return i + 1;
        }
    }
    values.len()
}

/// Orthonormal `d×d` basis whose first columns are `cols`, completed by
/// Gram–Schmidt against the standard basis.
pub fn complete_basis(cols: &DMatrix<f64>) -> DMatrix<f64> {
    let (d, r) = cols.shape();
    let mut basis: Vec<nalgebra::DVector<f64>> = (0..r).map(|j| cols.column(j).into_owned()).collect();
    for i in 0..d {
        if basis.len() == d {
            break;
        }
        let mut v = nalgebra::DVector::<f64>::zeros(d);
        v[i] = 1.0;
        for _ in 0..2 {
            for q in &basis {
                let dot = q.dot(&v);
                v.axpy(-dot, q, 1.0);
            }
        }
        let n = v.norm();
        if n > COMPLETION_SKIP {
            basis.push(v / n);
        }
    }
    DMatrix::from_columns(&basis)
}

/// Rotation whose rows are the top-`r` eigenvectors (then a completion), with
/// `r` chosen by [`explained_rank`]. Identity with `r = 0` when `H = 0`.
pub fn select_rotation(e: &EigenDecomposition, var_threshold: f64) -> (Rotation, usize) {
    let d = e.vectors.nrows();
    let r = explained_rank(&e.values, var_threshold);
    if r == 0 {
        return (Rotation::identity(d), 0);
    }
    let rt = complete_basis(&e.vectors.columns(0, r).into_owned());
    (Rotation::Dense(rt.transpose()), r)
}

/// Theorem-style lower bound `Σ_i (R H Rᵀ)_ii²` on the projected Fisher
/// information of the rotated target.
pub fn pfi_lower_bound(h: &DMatrix<f64>, r: &Rotation) -> f64 {
    let m = r.to_dense();
    assert_eq!(m.nrows(), h.nrows(), "dimension mismatch");
    (0..m.nrows())
        .map(|i| {
            let row = m.row(i);
            let v = (row * h * row.transpose())[(0, 0)];
            v * v
        })
        .sum()
}

/// Closed-form projected Fisher information `Σ_i (P_ii - 1)²` of a centered
/// Gaussian with precision `P`.
pub fn gaussian_projected_fi(t: &GaussianTarget) -> f64 {
    assert!(t.mean().iter().all(|m| *m == 0.0), "projected FI formula requires a centered Gaussian");
    let p = t.precision();
    (0..p.nrows()).map(|i| (p[(i, i)] - 1.0).powi(2)).sum()
}

/// `E_R Σ_i (R H Rᵀ)_ii²` over Haar `R`: `(2 Σ ν² + (Σ ν)²) / (d + 2)`.
pub fn random_rotation_bound(values: &[f64]) -> f64 {
    let d = values.len() as f64;
    let s2: f64 = values.iter().map(|v| v * v).sum();
    let s1: f64 = values.iter().sum();
    (2.0 * s2 + s1 * s1) / (d + 2.0)
}

/// Stein discrepancy over linear test functions along `θ`: `|θᵀ H θ|`.
pub fn stein_linear(h: &DMatrix<f64>, theta: &[f64]) -> f64 {
    let n: f64 = theta.iter().map(|t| t * t).sum::<f64>().sqrt();
    assert!((n - 1.0).abs() <= 1e-10, "theta must be a unit vector");
    let t = nalgebra::DVector::from_column_slice(theta);
    (t.transpose() * h * &t)[(0, 0)].abs()
}
