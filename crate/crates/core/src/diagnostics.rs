//! Evaluation metrics and the exact Gaussian mean-field recursion.
//!
//! Kernel choices: MMD uses a Gaussian RBF kernel `exp(-r²/(2h²))` with `h`
//! the median pairwise distance of the pooled sample; KSD uses the
//! inverse multiquadric `(1 + r²)^{-1/2}`. Both are recorded in CLI output.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::mfvi::Estimate;
use crate::rng::{normal_vec, substream, RandomStream};
use crate::score_pca::{eig_sym, sample_haar_rotation, select_rotation};
use crate::target::{make_conditioned_gaussian, std_normal_log_density, GaussianTarget, TargetDistribution};
use crate::transforms::{CoordMap, Rotation, TransportChain};
use crate::RotationStrategy;

pub const MMD_BANDWIDTH_FLOOR: f64 = 1e-12;
pub const ITERATION_CAP: usize = 10_000;

/// `KL(γ ‖ N(0, Σ))` from the eigenvalues of `Σ`.
pub fn kl_gaussian_analytic(sigma_eigvals: &[f64]) -> f64 {
    assert!(sigma_eigvals.iter().all(|l| *l > 0.0), "eigenvalues must be positive");
    0.5 * sigma_eigvals.iter().map(|l| l.ln() + 1.0 / l - 1.0).sum::<f64>()
}

fn log_det_spd(m: &DMatrix<f64>) -> f64 {
    let ch = m.clone().cholesky().expect("matrix must be positive definite");
    2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// `KL(γ ‖ N(0, P⁻¹))` for a precision matrix `P`.
pub fn kl_gaussian_precision(p: &DMatrix<f64>) -> f64 {
    0.5 * (p.trace() - p.nrows() as f64 - log_det_spd(p))
}

/// One exact mean-field step for `N(0, P⁻¹)` under rotation `R`: the rotated
/// precision `RPRᵀ` is rescaled to unit diagonal (the optimal product
/// Gaussian becomes `γ`). Returns the new KL and the new precision.
pub fn gaussian_mf_step(precision: &DMatrix<f64>, r: &Rotation) -> (f64, DMatrix<f64>) {
    let m = r.to_dense();
    let rp = &m * precision * m.transpose();
    let rp = (&rp + rp.transpose()) * 0.5;
    let d = rp.nrows();
    let inv_sqrt: Vec<f64> = (0..d).map(|i| rp[(i, i)].sqrt().recip()).collect();
    let next = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { rp[(i, j)] * inv_sqrt[i] * inv_sqrt[j] });
    let kl = (-0.5 * log_det_spd(&next)).max(0.0);
    (kl, next)
}

/// Exact KL after rotating `N(0, Σ)` by `R` and fitting the optimal product
/// distribution: `½[log det Σ + Σ_i log (R Σ⁻¹ Rᵀ)_ii]`.
///
/// Requires `Σ⁻¹` to have unit diagonal (the mean-field optimum is already `γ`).
pub fn kl_gaussian_after_mf(sigma: &DMatrix<f64>, r: &Rotation) -> f64 {
    let p = sigma.clone().cholesky().expect("covariance must be positive definite").inverse();
    assert!(
        (0..p.nrows()).all(|i| (p[(i, i)] - 1.0).abs() <= 1e-8),
        "precision must have unit diagonal"
    );
    let m = r.to_dense();
    let rp = &m * &p * m.transpose();
    0.5 * (log_det_spd(sigma) + (0..p.nrows()).map(|i| rp[(i, i)].ln()).sum::<f64>())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub mean: f64,
    pub sd: f64,
    pub counts: Vec<usize>,
    /// Replicates that hit [`ITERATION_CAP`] (counted at the cap).
    pub censored: usize,
}

/// Iterations of the exact Gaussian recursion until `KL < threshold`,
/// starting from [`make_conditioned_gaussian`], for one replicate.
pub fn gaussian_iterations(
    d: usize,
    kappa: f64,
    strategy: &RotationStrategy,
    threshold: f64,
    rng: &mut RandomStream,
) -> (usize, bool) {
    let g = make_conditioned_gaussian(d, kappa, rng);
    let mut p = g.precision().clone();
    let mut kl = kl_gaussian_precision(&p);
    let mut k = 0;
    while kl >= threshold {
        if k == ITERATION_CAP {
            return (k, true);
        }
        let r = match strategy {
            RotationStrategy::Identity => Rotation::identity(d),
            RotationStrategy::Random => sample_haar_rotation(d, rng),
            RotationStrategy::Pca { var_threshold, .. } => {
                let h = DMatrix::<f64>::identity(d, d) - &p;
                let e = eig_sym(&h).expect("Jacobi converges on symmetric input");
                select_rotation(&e, *var_threshold).0
            }
        };
        let (next_kl, next) = gaussian_mf_step(&p, &r);
        p = next;
        kl = next_kl;
        k += 1;
        // Identity rotations never improve after the first step.
        if matches!(strategy, RotationStrategy::Identity) && k >= 1 && kl >= threshold {
            return (ITERATION_CAP, true);
        }
    }
    (k, false)
}

/// Mean and standard deviation over `replicates` of [`gaussian_iterations`];
/// replicate `i` uses stream `i` of `seed`.
pub fn iterations_to_threshold(
    d: usize,
    kappa: f64,
    strategy: &RotationStrategy,
    threshold: f64,
    replicates: usize,
    seed: u64,
) -> SweepCell {
    assert!(replicates >= 1, "need at least one replicate");
    let runs: Vec<(usize, bool)> = (0..replicates)
        .into_par_iter()
        .map(|i| gaussian_iterations(d, kappa, strategy, threshold, &mut substream(seed, i as u64)))
        .collect();
    let counts: Vec<usize> = runs.iter().map(|r| r.0).collect();
    let censored = runs.iter().filter(|r| r.1).count();
    let n = replicates as f64;
    let mean = counts.iter().sum::<usize>() as f64 / n;
    let sd = if replicates > 1 {
        (counts.iter().map(|c| (*c as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    SweepCell { mean, sd, counts, censored }
}

/// Reverse KL of `T # γ` from `p` on a fixed batch of `γ` draws, up to the
/// target's log normalizer. Reusing one batch across chains gives common
/// random numbers.
pub fn chain_reverse_kl(chain: &TransportChain, base: &dyn TargetDistribution, z_batch: &[Vec<f64>]) -> Result<Estimate> {
    let terms: Vec<f64> = z_batch
        .par_iter()
        .map(|z| {
            let (x, logdet) = chain.push_forward(z);
            std_normal_log_density(z) - logdet - base.log_density(&x)
        })
        .collect();
    if let Some(i) = terms.iter().position(|t| !t.is_finite()) {
        return Err(crate::Error::NonFiniteTarget { index: i, sample: chain.push_forward(&z_batch[i]).0 });
    }
    Ok(Estimate::from_samples(&terms))
}

/// `E_q[log p - log q]` (unnormalized ELBO) with its standard error.
pub fn elbo(chain: &TransportChain, base: &dyn TargetDistribution, z_batch: &[Vec<f64>]) -> Result<Estimate> {
    let kl = chain_reverse_kl(chain, base, z_batch)?;
    Ok(Estimate { value: -kl.value, std_error: kl.std_error })
}

/// Exact `KL(q ‖ p)` when every map of the chain is affine, so that `q` is
/// Gaussian; `None` otherwise.
pub fn kl_affine_chain_gaussian(chain: &TransportChain, p: &GaussianTarget) -> Option<f64> {
    if !chain.layers().iter().all(|l| matches!(l.map, CoordMap::Affine(_))) {
        return None;
    }
    let d = chain.dim();
    let b = DVector::from_vec(chain.push_forward(&vec![0.0; d]).0);
    let mut a = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut e = vec![0.0; d];
        e[j] = 1.0;
        let col = DVector::from_vec(chain.push_forward(&e).0) - &b;
        a.set_column(j, &col);
    }
    let s = &a * a.transpose();
    let diff = p.mean() - &b;
    let prec = p.precision();
    let quad = (diff.transpose() * prec * &diff)[(0, 0)];
    Some(0.5 * ((prec * &s).trace() + quad - d as f64 + log_det_spd(p.covariance()) - log_det_spd(&s)))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise Euclidean distance, floored at [`MMD_BANDWIDTH_FLOOR`].
pub fn median_bandwidth(pooled: &[&[f64]]) -> f64 {
    let n = pooled.len();
    let mut dists: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| sq_dist(pooled[i], pooled[j]))
        .collect();
    if dists.is_empty() {
        return MMD_BANDWIDTH_FLOOR;
    }
    let m = dists.len();
    let mid = if m % 2 == 1 {
        *dists.select_nth_unstable_by(m / 2, f64::total_cmp).1
    } else {
        let hi = *dists.select_nth_unstable_by(m / 2, f64::total_cmp).1;
        let lo = dists[..m / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    };
    mid.sqrt().max(MMD_BANDWIDTH_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdResult {
    /// Unbiased estimate of MMD²; may be slightly negative.
    pub mmd2: f64,
    pub bandwidth: f64,
}

fn kernel_sum(a: &[Vec<f64>], b: &[Vec<f64>], gamma: f64, skip_diag: bool) -> f64 {
    let rows: Vec<f64> = a
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            b.iter()
                .enumerate()
                .filter(|(j, _)| !(skip_diag && *j == i))
                .map(|(_, y)| (-gamma * sq_dist(x, y)).exp())
                .sum()
        })
        .collect();
    rows.iter().sum()
}

/// Unbiased MMD² with the median-heuristic RBF kernel.
pub fn mmd_unbiased(x: &[Vec<f64>], y: &[Vec<f64>]) -> MmdResult {
    assert!(x.len() >= 2 && y.len() >= 2, "need at least two samples on each side");
    let pooled: Vec<&[f64]> = x.iter().chain(y).map(|v| v.as_slice()).collect();
    let h = median_bandwidth(&pooled);
    mmd_unbiased_with_bandwidth(x, y, h)
}

pub fn mmd_unbiased_with_bandwidth(x: &[Vec<f64>], y: &[Vec<f64>], bandwidth: f64) -> MmdResult {
    let (n, m) = (x.len() as f64, y.len() as f64);
    let gamma = 0.5 / (bandwidth * bandwidth);
    let kxx = kernel_sum(x, x, gamma, true) / (n * (n - 1.0));
    let kyy = kernel_sum(y, y, gamma, true) / (m * (m - 1.0));
    let kxy = kernel_sum(x, y, gamma, false) / (n * m);
    MmdResult { mmd2: kxx + kyy - 2.0 * kxy, bandwidth }
}

/// Stein kernel `u_p(x, y)` for the IMQ base kernel `(1 + ‖x-y‖²)^{-1/2}`.
pub fn stein_kernel(x: &[f64], sx: &[f64], y: &[f64], sy: &[f64]) -> f64 {
    const BETA: f64 = -0.5;
    let d = x.len() as f64;
    let r2 = sq_dist(x, y);
    let q = 1.0 + r2;
    let k = q.powf(BETA);
    let g = 2.0 * BETA * q.powf(BETA - 1.0);
    let mut ss = 0.0;
    let mut cross = 0.0;
    for i in 0..x.len() {
        let r = x[i] - y[i];
        ss += sx[i] * sy[i];
        // s_xᵀ ∇_y k + s_yᵀ ∇_x k with ∇_x k = g r = -∇_y k
        cross += g * r * (sy[i] - sx[i]);
    }
    let trace = -g * d - 4.0 * BETA * (BETA - 1.0) * q.powf(BETA - 2.0) * r2;
    ss * k + cross + trace
}

/// V-statistic `KSD²` of the sample against the target's score.
pub fn ksd_squared(x: &[Vec<f64>], target: &dyn TargetDistribution) -> f64 {
    assert!(x.len() >= 2, "need at least two samples");
    let scores: Vec<Vec<f64>> = x.par_iter().map(|v| target.score(v)).collect();
    let rows: Vec<f64> = (0..x.len())
        .into_par_iter()
        .map(|i| (0..x.len()).map(|j| stein_kernel(&x[i], &scores[i], &x[j], &scores[j])).sum())
        .collect();
    let n = x.len() as f64;
    rows.iter().sum::<f64>() / (n * n)
}

/// Kernelized Stein discrepancy (square root of the V-statistic, clamped at 0).
pub fn ksd(x: &[Vec<f64>], target: &dyn TargetDistribution) -> f64 {
    ksd_squared(x, target).max(0.0).sqrt()
}

/// Effective sample size `(Σw)² / Σw²`; invariant to scaling of `w`.
pub fn ess(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    s * s / s2
}

/// Random-walk Metropolis with proposal `x + (2.38/√d) L ξ`, where `L` is a
/// Cholesky factor of a preconditioning covariance. Returns `n` draws taken
/// every `thin` steps after `burnin`, and the acceptance rate.
pub fn rwm_sample(
    target: &dyn TargetDistribution,
    start: &[f64],
    chol: &DMatrix<f64>,
    n: usize,
    burnin: usize,
    thin: usize,
    rng: &mut RandomStream,
) -> (Vec<Vec<f64>>, f64) {
    let d = start.len();
    let step = 2.38 / (d as f64).sqrt();
    let mut x = start.to_vec();
    let mut lp = target.log_density(&x);
    let mut out = Vec::with_capacity(n);
    let mut accepted = 0usize;
    let total = burnin + n * thin.max(1);
    for t in 0..total {
        let xi = normal_vec(rng, d);
        let prop: Vec<f64> = (0..d).map(|i| x[i] + step * (0..=i).map(|j| chol[(i, j)] * xi[j]).sum::<f64>()).collect();
        let lq = target.log_density(&prop);
        if lq.is_finite() && rng.random::<f64>().ln() < lq - lp {
            x = prop;
            lp = lq;
            accepted += 1;
        }
        if t >= burnin && (t - burnin + 1) % thin.max(1) == 0 {
            out.push(x.clone());
        }
    }
    (out, accepted as f64 / total as f64)
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub k: usize,
    pub elbo: f64,
    pub mmd: f64,
    pub ksd: f64,
    pub ess: f64,
    pub kl_analytic: Option<f64>,
    pub seed: u64,
    pub status: String,
}

pub const METRICS_COLUMNS: [&str; 9] = ["run_id", "k", "elbo", "mmd", "ksd", "ess", "kl_analytic", "seed", "status"];

/// Fixed-width scientific notation with 17 significant digits.
pub fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        [
            self.run_id.clone(),
            self.k.to_string(),
            fmt_float(self.elbo),
            fmt_float(self.mmd),
            fmt_float(self.ksd),
            fmt_float(self.ess),
            self.kl_analytic.map(fmt_float).unwrap_or_default(),
            self.seed.to_string(),
            self.status.clone(),
        ]
        .join(",")
    }

    pub fn failed(run_id: String, k: usize, seed: u64, reason: &str) -> Self {
        Self {
            run_id,
            k,
            elbo: f64::NAN,
            mmd: f64::NAN,
            ksd: f64::NAN,
            ess: f64::NAN,
            kl_analytic: None,
            seed,
            status: format!("failed: {}", reason.replace([',', '\n'], ";")),
        }
    }
}

/// CSV text: one `#` comment line, the header, then one row per record.
pub fn metrics_csv(comment: &str, records: &[MetricsRecord]) -> String {
    let mut s = format!("# {comment}\n{}\n", METRICS_COLUMNS.join(","));
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}
