//! Reverse-KL mean-field VI over coordinatewise maps.
//!
//! The objective for a map `F` against a target `p` is the batch mean of
//! `log γ(z) - log|det ∇F(z)| - log p(F(z))`: the reverse KL up to the
//! target's unknown log normalizer. Training uses one fixed batch of Gaussian
//! draws for every step (a sample-average approximation) and Adam.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng::{normal_batch, stream, RandomStream};
use crate::target::{std_normal_log_density, TargetDistribution};
use crate::transforms::{AffineMap, CoordMap, RqSpline};

/// Samples per parallel work unit. Partial sums are combined in chunk order,
/// so results are independent of the thread count.
const CHUNK: usize = 64;

/// Bins per coordinate in [`mf_optimality_residual`].
pub const RESIDUAL_BINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u32,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { first_moment: vec![0.0; n], second_moment: vec![0.0; n], step_count: 0 }
    }

    /// One bias-corrected Adam step that decreases the objective whose
    /// gradient is `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &AdamConfig) {
        assert_eq!(params.len(), grad.len(), "shape mismatch");
        assert_eq!(params.len(), self.first_moment.len(), "shape mismatch");
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.first_moment[i] = cfg.beta1 * self.first_moment[i] + (1.0 - cfg.beta1) * g;
            self.second_moment[i] = cfg.beta2 * self.second_moment[i] + (1.0 - cfg.beta2) * g * g;
            let m = self.first_moment[i] / c1;
            let v = self.second_moment[i] / c2;
            params[i] -= cfg.learning_rate * m / (v.sqrt() + cfg.eps);
        }
    }
}

/// Which coordinatewise family to fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum MapFamily {
    Affine,
    Spline { knots: usize, bound: f64 },
}

impl Default for MapFamily {
    fn default() -> Self {
        MapFamily::Spline { knots: 10, bound: 8.0 }
    }
}

impl MapFamily {
    pub fn identity_map(&self, dim: usize) -> CoordMap {
        match *self {
            MapFamily::Affine => CoordMap::Affine(AffineMap::identity(dim)),
            MapFamily::Spline { knots, bound } => CoordMap::Spline(RqSpline::identity(dim, knots, bound)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfviOptions {
    pub mc_batch: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Seeds the fixed training batch.
    pub seed: u64,
}

impl Default for MfviOptions {
    fn default() -> Self {
        Self { mc_batch: 1000, steps: 100, learning_rate: 0.01, adam_beta1: 0.9, adam_beta2: 0.999, adam_eps: 1e-8, seed: 0 }
    }
}

impl MfviOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.mc_batch < 2 {
            return bad("mc_batch must be at least 2");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Self { value: mean, std_error: (var / n).sqrt() }
    }
}

fn check_finite(lp: f64, index: usize, y: &[f64]) -> Result<()> {
    if lp.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteTarget { index, sample: y.to_vec() })
    }
}

/// Per-sample `log γ(z) - log|det ∇F(z)| - log p(F(z))`.
pub fn reverse_kl_terms(map: &CoordMap, target: &dyn TargetDistribution, z_batch: &[Vec<f64>]) -> Result<Vec<f64>> {
    assert!(!z_batch.is_empty(), "batch must be nonempty");
    assert_eq!(map.dim(), target.dim(), "dimension mismatch");
    let chunks: Vec<Result<Vec<f64>>> = z_batch
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, zs)| {
            let mut out = Vec::with_capacity(zs.len());
            let mut y = vec![0.0; map.dim()];
            for (j, z) in zs.iter().enumerate() {
                let logdet = map.forward_into(z, &mut y);
                let lp = target.log_density(&y);
                check_finite(lp, c * CHUNK + j, &y)?;
                out.push(std_normal_log_density(z) - logdet - lp);
            }
            Ok(out)
        })
        .collect();
    let mut terms = Vec::with_capacity(z_batch.len());
    for c in chunks {
        terms.extend(c?);
    }
    Ok(terms)
}

/// Reverse KL of `F#γ` from `p`, up to the target's log normalizer. Its
/// negation is the (unnormalized) ELBO.
pub fn reverse_kl_estimate(map: &CoordMap, target: &dyn TargetDistribution, z_batch: &[Vec<f64>]) -> Result<Estimate> {
    Ok(Estimate::from_samples(&reverse_kl_terms(map, target, z_batch)?))
}

/// Objective and its gradient over the map's raw parameters on a fixed batch.
pub fn reverse_kl_gradient(
    map: &CoordMap,
    target: &dyn TargetDistribution,
    z_batch: &[Vec<f64>],
) -> Result<(f64, Vec<f64>)> {
    assert!(!z_batch.is_empty(), "batch must be nonempty");
    assert_eq!(map.dim(), target.dim(), "dimension mismatch");
    let d = map.dim();
    let np = map.num_params();
    let partial: Vec<Result<(f64, Vec<f64>)>> = z_batch
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, zs)| {
            let mut loss = 0.0;
            let mut grad = vec![0.0; np];
            let (mut y, mut s, mut scratch) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
            for (j, z) in zs.iter().enumerate() {
                map.forward_into(z, &mut y);
                let lp = target.log_density_and_score(&y, &mut s);
                check_finite(lp, c * CHUNK + j, &y)?;
                let logdet = map.accumulate_grads(z, &s, &mut scratch, &mut grad);
                loss += std_normal_log_density(z) - logdet - lp;
            }
            Ok((loss, grad))
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; np];
    for p in partial {
        let (l, g) = p?;
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    let n = z_batch.len() as f64;
    grad.iter_mut().for_each(|g| *g = -*g / n);
    Ok((loss / n, grad))
}

#[derive(Debug, Clone)]
pub struct MfviResult {
    pub map: CoordMap,
    /// Objective before each step, then after the last one (`steps + 1` values).
    pub loss_trace: Vec<f64>,
    /// True when the divergence guard halved the learning rate and restarted.
    pub restarted: bool,
}

impl MfviResult {
    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().expect("trace is nonempty")
    }
}

/// Divergence: the objective climbs more than ten times its initial
/// magnitude above the starting value.
fn diverged(loss: f64, initial: f64) -> bool {
    loss > initial + 10.0 * initial.abs().max(1.0)
}

/// Fit a map from `family` by Adam on one fixed batch, starting at the
/// identity. On divergence the learning rate is halved once and training
/// restarts from the identity.
pub fn train_mfvi(target: &dyn TargetDistribution, family: &MapFamily, opts: &MfviOptions) -> Result<MfviResult> {
    opts.validate()?;
    let d = target.dim();
    let batch = normal_batch(&mut stream(opts.seed), opts.mc_batch, d);
    let mut cfg = opts.adam();
    let mut restarted = false;
    loop {
        match train_once(target, family, opts.steps, &batch, &cfg)? {
            Ok((map, loss_trace)) => return Ok(MfviResult { map, loss_trace, restarted }),
            Err((loss, initial)) => {
                if restarted {
                    return Err(Error::Diverged { loss, initial });
                }
                warn!("MFVI diverged (loss {loss:.4e} from {initial:.4e}); halving learning rate and restarting");
                cfg.learning_rate *= 0.5;
                restarted = true;
            }
        }
    }
}

type Attempt = std::result::Result<(CoordMap, Vec<f64>), (f64, f64)>;

fn train_once(
    target: &dyn TargetDistribution,
    family: &MapFamily,
    steps: usize,
    batch: &[Vec<f64>],
    cfg: &AdamConfig,
) -> Result<Attempt> {
    let mut map = family.identity_map(target.dim());
    let mut params = map.params();
    let mut adam = AdamState::new(params.len());
    let mut trace = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let (loss, grad) = reverse_kl_gradient(&map, target, batch)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            trace.push(loss);
            return Err(Error::NonFiniteLoss { step, value: loss, trace });
        }
        trace.push(loss);
        if diverged(loss, trace[0]) {
            return Ok(Err((loss, trace[0])));
        }
        if step == steps {
            break;
        }
        adam.step(&mut params, &grad, cfg);
        map.set_params(&params);
    }
    Ok(Ok((map, trace)))
}

/// Binned estimate of the projected Fisher information `Ĩ(γ, F⁻¹#p)`, which
/// vanishes exactly at a mean-field optimum.
///
/// Each coordinate `z_i` is binned into [`RESIDUAL_BINS`] equal-probability
/// bins under `N(0,1)`, and `h_i = ∂_i log(F⁻¹#p)(z) + z_i` is averaged within
/// bins. The standard error is the delete-one jackknife.
pub fn mf_optimality_residual(
    map: &CoordMap,
    target: &dyn TargetDistribution,
    n: usize,
    rng: &mut RandomStream,
) -> Estimate {
    assert!(n >= 1000, "residual needs at least 1000 samples");
    let d = target.dim();
    let zs = normal_batch(rng, n, d);
    let hs: Vec<Vec<f64>> = zs
        .par_iter()
        .map(|z| {
            let (mut y, mut der, mut dl, mut s) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
            map.forward_with_derivs(z, &mut y, &mut der, &mut dl);
            target.score_into(&y, &mut s);
            (0..d).map(|i| s[i] * der[i] + dl[i] + z[i]).collect()
        })
        .collect();
    let normal = Normal::standard();
    let bin = |x: f64| ((normal.cdf(x) * RESIDUAL_BINS as f64) as usize).min(RESIDUAL_BINS - 1);
    let nf = n as f64;
    let mut bins = vec![0usize; n * d];
    let mut sums = vec![[0.0f64; RESIDUAL_BINS]; d];
    let mut counts = vec![[0usize; RESIDUAL_BINS]; d];
    for (s, (z, h)) in zs.iter().zip(&hs).enumerate() {
        for i in 0..d {
            let b = bin(z[i]);
            bins[s * d + i] = b;
            sums[i][b] += h[i];
            counts[i][b] += 1;
        }
    }
    // Σ_b S_b² / n_b per coordinate; the statistic is its total over N.
    let inner: Vec<f64> = (0..d)
        .map(|i| (0..RESIDUAL_BINS).filter(|&b| counts[i][b] > 0).map(|b| sums[i][b].powi(2) / counts[i][b] as f64).sum())
        .collect();
    let value = inner.iter().sum::<f64>() / nf;
    let loo: Vec<f64> = (0..n)
        .map(|s| {
            let mut t = 0.0;
            for i in 0..d {
                let b = bins[s * d + i];
                let (sb, nb) = (sums[i][b], counts[i][b] as f64);
                let mut v = inner[i] - sb * sb / nb;
                if nb > 1.0 {
                    v += (sb - hs[s][i]).powi(2) / (nb - 1.0);
                }
                t += v;
            }
            t / (nf - 1.0)
        })
        .collect();
    let mean = loo.iter().sum::<f64>() / nf;
    let var = loo.iter().map(|t| (t - mean).powi(2)).sum::<f64>() * (nf - 1.0) / nf;
    Estimate { value, std_error: var.sqrt() }
}
