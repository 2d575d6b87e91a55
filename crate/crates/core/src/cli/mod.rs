//! Command-line front end: configuration, experiment drivers and artifacts.

pub mod commands;
pub mod config;
pub mod oracle;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::target::{make_conditioned_gaussian, make_paper_logistic, GaussianTarget, TargetDistribution};

pub use commands::{
    cmd_eval, cmd_gaussian_sweep, cmd_logistic, cmd_run_custom, logistic_replicate, LogisticReplicate, SweepRow,
};
pub use config::{Experiment, ReferenceConfig, RunConfig, StrategyName, TargetSpec};
pub use oracle::OracleTarget;

/// Process exit status for an error: 2 configuration, 3 oracle, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Oracle(_) => 3,
        _ => 1,
    }
}

/// A target built from a [`TargetSpec`], keeping the concrete kinds that
/// evaluation needs (exact samples, oracle failure state).
#[derive(Clone)]
pub enum BuiltTarget {
    Gaussian(Arc<GaussianTarget>),
    Other(Arc<dyn TargetDistribution>),
    Oracle(Arc<OracleTarget>),
}

impl BuiltTarget {
    pub fn as_dyn(&self) -> Arc<dyn TargetDistribution> {
        match self {
            BuiltTarget::Gaussian(g) => g.clone(),
            BuiltTarget::Other(t) => t.clone(),
            BuiltTarget::Oracle(o) => o.clone(),
        }
    }

    /// Fails with an oracle error if the oracle misbehaved at any point.
    pub fn check_oracle(&self) -> Result<()> {
        if let BuiltTarget::Oracle(o) = self {
            if let Some(msg) = o.failure() {
                return Err(Error::Oracle(msg));
            }
        }
        Ok(())
    }
}

/// Random targets are drawn from stream 0 of `seed`.
pub fn build_target(spec: &TargetSpec, seed: u64) -> Result<BuiltTarget> {
    Ok(match spec {
        TargetSpec::Gaussian { dim, kappa } => {
            BuiltTarget::Gaussian(Arc::new(make_conditioned_gaussian(*dim, *kappa, &mut substream(seed, 0))))
        }
        TargetSpec::PaperLogistic => BuiltTarget::Other(Arc::new(make_paper_logistic(&mut substream(seed, 0)))),
        TargetSpec::Oracle { command, dim } => BuiltTarget::Oracle(Arc::new(OracleTarget::spawn(command, *dim)?)),
    })
}
