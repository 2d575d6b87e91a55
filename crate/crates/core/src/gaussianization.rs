//! The iterative driver: rotate the current target, fit a mean-field map in
//! the rotated frame, append the layer, repeat.

use std::sync::Arc;

use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::mfvi::{train_mfvi, MapFamily, MfviOptions};
use crate::rng::{normal_batch, substream, RandomStream};
use crate::score_pca::{eig_sym, estimate_h, explained_rank, sample_haar_rotation, select_rotation};
use crate::target::{laplace_standardize, std_normal_log_density, OptimizerOptions, TargetDistribution};
use crate::transforms::{
    chain_from_value, chain_to_value, AffineMap, ChainTarget, CoordMap, RotatedTarget, Rotation, TransportChain,
    TransportLayer,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum RotationStrategy {
    Pca { var_threshold: f64, h_samples: usize },
    Random,
    Identity,
}

impl Default for RotationStrategy {
    fn default() -> Self {
        RotationStrategy::Pca { var_threshold: 0.95, h_samples: 1000 }
    }
}

impl RotationStrategy {
    pub fn validate(&self) -> Result<()> {
        if let RotationStrategy::Pca { var_threshold, h_samples } = *self {
            if !(var_threshold > 0.0 && var_threshold <= 1.0) {
                return Err(Error::Config("var_threshold must lie in (0, 1]".into()));
            }
            if h_samples < 2 {
                return Err(Error::Config("h_samples must be at least 2".into()));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            RotationStrategy::Pca { .. } => "pca",
            RotationStrategy::Random => "random",
            RotationStrategy::Identity => "identity",
        }
    }
}

/// Everything one iteration needs besides the run itself.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationSettings {
    pub strategy: RotationStrategy,
    pub family: MapFamily,
    pub mfvi: MfviOptions,
    /// Stop early once every PCA eigenvalue magnitude is below this.
    pub early_stop: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// `"laplace"`, or the rotation strategy name.
    pub kind: String,
    /// Number of selected eigenvectors (PCA), otherwise the dimension or 0.
    pub rank: usize,
    pub eigenvalues: Vec<f64>,
    pub loss_trace: Vec<f64>,
    /// Negated final training objective on the fixed batch (unnormalized).
    pub elbo: Option<f64>,
    pub restarted: bool,
}

/// A transport chain under construction for a fixed base target.
///
/// The chain always defines `q = T # γ` in the base target's coordinates. When
/// Laplace standardization is used it occupies the first layer (identity
/// rotation, affine map) so no separate bookkeeping is needed.
#[derive(Clone)]
pub struct GaussianizationRun {
    base: Arc<dyn TargetDistribution>,
    chain: TransportChain,
    records: Vec<IterationRecord>,
    seed: u64,
}

impl GaussianizationRun {
    pub fn new(base: Arc<dyn TargetDistribution>, seed: u64) -> Self {
        let d = base.dim();
        Self { base, chain: TransportChain::new(d), records: Vec::new(), seed }
    }

    /// Starts from the Laplace standardization of `base`.
    pub fn with_laplace(base: Arc<dyn TargetDistribution>, seed: u64, opts: &OptimizerOptions) -> Self {
        let lap = laplace_standardize(base.clone(), opts);
        let d = base.dim();
        let mut run = Self::new(base, seed);
        let log_scale = lap.scale.iter().map(|s| s.ln()).collect();
        run.chain.push(TransportLayer::new(
            Rotation::identity(d),
            CoordMap::Affine(AffineMap::new(lap.shift.clone(), log_scale)),
        ));
        run.records.push(IterationRecord {
            kind: "laplace".into(),
            rank: 0,
            eigenvalues: Vec::new(),
            loss_trace: Vec::new(),
            elbo: None,
            restarted: false,
        });
        run
    }

    pub fn from_parts(base: Arc<dyn TargetDistribution>, chain: TransportChain, records: Vec<IterationRecord>, seed: u64) -> Result<Self> {
        if records.len() != chain.len() {
            return Err(Error::Format("record count differs from chain length".into()));
        }
        if base.dim() != chain.dim() {
            return Err(Error::Format("chain dimension differs from target".into()));
        }
        Ok(Self { base, chain, records, seed })
    }

    pub fn base(&self) -> &Arc<dyn TargetDistribution> {
        &self.base
    }
    pub fn chain(&self) -> &TransportChain {
        &self.chain
    }
    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn dim(&self) -> usize {
        self.chain.dim()
    }

    /// The run as it stood after its first `layers` layers.
    pub fn truncated(&self, layers: usize) -> Self {
        Self {
            base: self.base.clone(),
            chain: self.chain.prefix(layers),
            records: self.records[..layers].to_vec(),
            seed: self.seed,
        }
    }

    /// Iterations excluding a Laplace layer.
    pub fn iterations(&self) -> usize {
        self.records.iter().filter(|r| r.kind != "laplace").count()
    }

    /// `p^(k)`: the base target pulled back through the current chain.
    pub fn current_target(&self) -> ChainTarget {
        ChainTarget::new(self.base.clone(), self.chain.clone())
    }

    /// One step of the algorithm. Iteration `j` (counting layers) draws all its
    /// randomness from stream `j` of the run seed, so extending a run matches a
    /// longer fresh run. On failure the run is left unchanged.
    ///
    /// Returns `false` when the early-stop rule fired and no layer was added.
    pub fn run_iteration(&mut self, s: &IterationSettings) -> Result<bool> {
        s.strategy.validate()?;
        let d = self.dim();
        let index = self.chain.len() as u64;
        let mut rng = substream(self.seed, index);
        let current = self.current_target();
        let (rotation, rank, eigenvalues) = match s.strategy {
            RotationStrategy::Identity => (Rotation::identity(d), 0, Vec::new()),
            RotationStrategy::Random => (sample_haar_rotation(d, &mut rng), d, Vec::new()),
            RotationStrategy::Pca { var_threshold, h_samples } => {
                let h = estimate_h(&current, h_samples, &mut rng);
                let e = eig_sym(&h.matrix)?;
                if let Some(tol) = s.early_stop {
                    if e.values.iter().all(|v| v.abs() < tol) {
                        info!("early stop: all H eigenvalues below {tol:e}");
                        return Ok(false);
                    }
                }
                let r = explained_rank(&e.values, var_threshold);
                let rotation = if r > 0 && 2 * r <= d {
                    Rotation::householder_from_columns(&e.vectors.columns(0, r).into_owned())
                } else {
                    select_rotation(&e, var_threshold).0
                };
                (rotation, r, e.values)
            }
        };
        let mfvi = MfviOptions { seed: rng.random(), ..s.mfvi.clone() };
        let rotated = RotatedTarget::new(current, rotation.clone());
        let res = train_mfvi(&rotated, &s.family, &mfvi)?;
        let elbo = -res.final_loss();
        self.chain.push(TransportLayer::new(rotation, res.map));
        self.records.push(IterationRecord {
            kind: s.strategy.name().into(),
            rank,
            eigenvalues,
            loss_trace: res.loss_trace,
            elbo: Some(elbo),
            restarted: res.restarted,
        });
        Ok(true)
    }

    /// Adds up to `k` iterations; returns how many were added.
    pub fn extend(&mut self, k: usize, s: &IterationSettings) -> Result<usize> {
        for done in 0..k {
            if !self.run_iteration(s)? {
                return Ok(done);
            }
        }
        Ok(k)
    }

    /// `n` draws from `q` with their log-densities.
    pub fn sample_q(&self, n: usize, rng: &mut RandomStream) -> (Vec<Vec<f64>>, Vec<f64>) {
        assert!(n >= 1, "need at least one sample");
        let zs = normal_batch(rng, n, self.dim());
        let mut xs = Vec::with_capacity(n);
        let mut lq = Vec::with_capacity(n);
        for z in &zs {
            let (x, logdet) = self.chain.push_forward(z);
            xs.push(x);
            lq.push(std_normal_log_density(z) - logdet);
        }
        (xs, lq)
    }

    pub fn log_q(&self, x: &[f64]) -> f64 {
        self.chain.log_q(x)
    }

    /// Self-normalized importance weights `∝ p(x_i) / q(x_i)`.
    pub fn importance_weights(&self, samples: &[Vec<f64>]) -> Result<Vec<f64>> {
        let lr: Vec<f64> = samples.iter().map(|x| self.base.log_density(x) - self.log_q(x)).collect();
        normalize_log_weights(&lr)
    }

    pub fn to_json_value(&self) -> Value {
        json!({
            "chain": chain_to_value(&self.chain),
            "metadata": {
                "seed": self.seed,
                "iterations": self.records,
            }
        })
    }

    pub fn from_json_value(base: Arc<dyn TargetDistribution>, v: Value) -> Result<Self> {
        let chain = chain_from_value(v.get("chain").cloned().ok_or_else(|| Error::Format("missing chain".into()))?)?;
        let meta = v.get("metadata").ok_or_else(|| Error::Format("missing metadata".into()))?;
        let seed = meta.get("seed").and_then(Value::as_u64).ok_or_else(|| Error::Format("missing seed".into()))?;
        let records = serde_json::from_value(meta.get("iterations").cloned().unwrap_or(Value::Null))?;
        Self::from_parts(base, chain, records, seed)
    }
}

/// Runs `k` iterations from an empty chain (optionally Laplace-initialized).
pub fn run(
    base: Arc<dyn TargetDistribution>,
    k: usize,
    settings: &IterationSettings,
    seed: u64,
    laplace: Option<&OptimizerOptions>,
) -> Result<GaussianizationRun> {
    let mut r = match laplace {
        Some(o) => GaussianizationRun::with_laplace(base, seed, o),
        None => GaussianizationRun::new(base, seed),
    };
    r.extend(k, settings)?;
    Ok(r)
}

/// Normalizes `exp(log_ratios)` to sum to one, stabilized by the maximum.
pub fn normalize_log_weights(log_ratios: &[f64]) -> Result<Vec<f64>> {
    let m = log_ratios.iter().copied().filter(|v| !v.is_nan()).fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    let w: Vec<f64> = log_ratios.iter().map(|v| if v.is_nan() { 0.0 } else { (v - m).exp() }).collect();
    let s: f64 = w.iter().sum();
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::DegenerateWeights);
    }
    Ok(w.into_iter().map(|x| x / s).collect())
}
