//! Experiment configuration: JSON with defaults, unknown keys rejected.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gaussianization::RotationStrategy;
use crate::mfvi::{MapFamily, MfviOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    GaussianSweep,
    Logistic,
    Custom,
}

/// Rotation strategies by name, for the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    Pca,
    Random,
    Identity,
}

impl StrategyName {
    pub fn as_str(&self) -> &'static str {
        match self {
            StrategyName::Pca => "pca",
            StrategyName::Random => "random",
            StrategyName::Identity => "identity",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    /// Centered Gaussian from `make_conditioned_gaussian`, drawn from the run seed.
    Gaussian { dim: usize, kappa: f64 },
    /// The n = 20, d = 10 Bayesian logistic regression with random data.
    PaperLogistic,
    /// External process answering line-delimited JSON score requests.
    Oracle { command: Vec<String>, dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceConfig {
    pub samples: usize,
    pub burnin: usize,
    pub thin: usize,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self { samples: 2000, burnin: 5000, thin: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub seed: u64,
    /// Defaults to 30 for the sweep and 20 otherwise.
    pub replicates: Option<usize>,
    pub output_dir: Option<String>,
    pub threads: Option<usize>,

    // gaussian_sweep
    pub dims: Vec<usize>,
    pub kappas: Vec<f64>,
    pub strategies: Vec<StrategyName>,
    /// Explained-variance threshold for PCA in the sweep.
    pub sweep_var_threshold: f64,
    pub kl_threshold: f64,

    // logistic / custom
    pub family: MapFamily,
    pub mfvi: MfviOptions,
    pub var_threshold: f64,
    pub h_samples: usize,
    /// Iteration counts of the random-rotation runs `R_k`.
    pub rk: Vec<usize>,
    pub eval_samples: usize,
    pub reference: ReferenceConfig,
    pub laplace: bool,
    /// Reuse one dataset (drawn from `seed`) across replicates.
    pub fixed_data: bool,

    // custom
    pub target: Option<TargetSpec>,
    pub strategy: StrategyName,
    pub iterations: usize,
    pub early_stop: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::Custom,
            seed: 0,
            replicates: None,
            output_dir: None,
            threads: None,
            dims: vec![2, 4, 8, 16],
            kappas: vec![4.0],
            strategies: vec![StrategyName::Random, StrategyName::Pca],
            sweep_var_threshold: 0.5,
            kl_threshold: 0.01,
            family: MapFamily::default(),
            mfvi: MfviOptions::default(),
            var_threshold: 0.95,
            h_samples: 1000,
            rk: vec![1, 3, 5, 7],
            eval_samples: 2000,
            reference: ReferenceConfig::default(),
            laplace: true,
            fixed_data: false,
            target: None,
            strategy: StrategyName::Pca,
            iterations: 1,
            early_stop: None,
        }
    }
}

fn bad<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn replicates(&self) -> usize {
        self.replicates.unwrap_or(match self.experiment {
            Experiment::GaussianSweep => 30,
            _ => 20,
        })
    }

    /// Hex SHA-256 of the canonical (compact, field-ordered) serialization.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(canon.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn rotation_strategy(&self, name: StrategyName, var_threshold: f64) -> RotationStrategy {
        match name {
            StrategyName::Pca => RotationStrategy::Pca { var_threshold, h_samples: self.h_samples },
            StrategyName::Random => RotationStrategy::Random,
            StrategyName::Identity => RotationStrategy::Identity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == Some(0) {
            return bad("replicates must be positive");
        }
        if self.threads == Some(0) {
            return bad("threads must be positive");
        }
        for t in [self.sweep_var_threshold, self.var_threshold] {
            if !(t > 0.0 && t <= 1.0) {
                return bad("variance thresholds must lie in (0, 1]");
            }
        }
        if !(self.kl_threshold > 0.0) {
            return bad("kl_threshold must be positive");
        }
        if self.h_samples < 2 {
            return bad("h_samples must be at least 2");
        }
        if let MapFamily::Spline { knots, bound } = self.family {
            if knots < 2 || !(bound > 0.0 && bound.is_finite()) {
                return bad("spline needs knots >= 2 and a positive bound");
            }
        }
        self.mfvi.validate()?;
        if self.mfvi.steps == 0 {
            return bad("mfvi.steps must be positive");
        }
        if self.eval_samples < 2 || self.reference.samples < 2 || self.reference.thin == 0 {
            return bad("evaluation needs at least two samples and thin >= 1");
        }
        if let Some(e) = self.early_stop {
            if !(e > 0.0) {
                return bad("early_stop must be positive");
            }
        }
        match self.experiment {
            Experiment::GaussianSweep => {
                if self.dims.is_empty() || self.dims.iter().any(|d| *d < 2) {
                    return bad("dims must be a nonempty list of integers >= 2");
                }
                if self.kappas.is_empty() || self.kappas.iter().any(|k| !(*k >= 1.0 && k.is_finite())) {
                    return bad("kappas must be a nonempty list of values >= 1");
                }
                if self.strategies.is_empty() {
                    return bad("strategies must be nonempty");
                }
            }
            Experiment::Logistic => {
                if self.rk.iter().any(|k| *k == 0) {
                    return bad("rk entries must be positive");
                }
            }
            Experiment::Custom => match &self.target {
                None => return bad("custom runs need a target"),
                Some(TargetSpec::Gaussian { dim, kappa }) => {
                    if *dim < 2 || !(*kappa >= 1.0 && kappa.is_finite()) {
                        return bad("gaussian target needs dim >= 2 and kappa >= 1");
                    }
                }
                Some(TargetSpec::Oracle { command, dim }) => {
                    if command.is_empty() || *dim == 0 {
                        return bad("oracle target needs a command and a positive dim");
                    }
                }
                Some(TargetSpec::PaperLogistic) => {}
            },
        }
        Ok(())
    }
}
