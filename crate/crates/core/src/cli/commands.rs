//! Experiment drivers. Every file written here carries the config hash and
//! seed; rows are assembled in replicate order so output is byte-stable.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use super::config::{RunConfig, StrategyName, TargetSpec};
use super::{build_target, BuiltTarget};
use crate::diagnostics::{
    ess, fmt_float, iterations_to_threshold, kl_affine_chain_gaussian, ksd, metrics_csv, mmd_unbiased, rwm_sample,
    MetricsRecord,
};
use crate::error::{Error, Result};
use crate::gaussianization::{normalize_log_weights, GaussianizationRun, IterationSettings};
use crate::rng::{substream, RandomStream};
use crate::target::{laplace_standardize, make_paper_logistic, LogisticRegressionTarget, OptimizerOptions, TargetDistribution};

pub const SWEEP_COLUMNS: [&str; 7] = ["d", "kappa", "strategy", "mean_iters", "sd_iters", "replicates", "censored"];

// Stream indices under a replicate seed.
const DATA_STREAM: u64 = 0;
const REFERENCE_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;
const RUN_STREAM_BASE: u64 = 16;

const KERNEL_NOTE: &str = "mmd_kernel=rbf(exp(-r^2/(2h^2));h=median_pairwise_distance) \
ksd_kernel=imq((1+r^2)^-0.5) elbo=unnormalized";

fn header(kind: &str, cfg: &RunConfig) -> String {
    format!("itergauss {kind} v1 config_hash={} seed={}", cfg.hash(), cfg.seed)
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn write_common(cfg: &RunConfig, out: &Path, command: &str, files: &[String]) -> Result<()> {
    let mut c: Value = serde_json::from_str(&cfg.to_json())?;
    c["config_hash"] = json!(cfg.hash());
    write_json(&out.join("config.json"), &c)?;
    write_json(
        &out.join("manifest.json"),
        &json!({
            "library": "itergauss",
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "files": files,
        }),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub d: usize,
    pub kappa: f64,
    pub strategy: StrategyName,
    pub mean_iters: f64,
    pub sd_iters: f64,
    pub replicates: usize,
    pub censored: usize,
}

impl SweepRow {
    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.d,
            fmt_float(self.kappa),
            self.strategy.as_str(),
            fmt_float(self.mean_iters),
            fmt_float(self.sd_iters),
            self.replicates,
            self.censored
        )
    }
}

/// Iterations to reach `kl_threshold` under the exact Gaussian recursion, for
/// every (d, κ, strategy) cell. All cells share replicate streams, so the
/// strategies are compared on the same Gaussians.
pub fn cmd_gaussian_sweep(cfg: &RunConfig, out: Option<&Path>) -> Result<Vec<SweepRow>> {
    let reps = cfg.replicates();
    let mut rows = Vec::new();
    for &d in &cfg.dims {
        for &kappa in &cfg.kappas {
            for &s in &cfg.strategies {
                let strat = cfg.rotation_strategy(s, cfg.sweep_var_threshold);
                let cell = iterations_to_threshold(d, kappa, &strat, cfg.kl_threshold, reps, cfg.seed);
                info!("sweep d={d} kappa={kappa} {}: mean {:.2}", s.as_str(), cell.mean);
                rows.push(SweepRow {
                    d,
                    kappa,
                    strategy: s,
                    mean_iters: cell.mean,
                    sd_iters: cell.sd,
                    replicates: reps,
                    censored: cell.censored,
                });
            }
        }
    }
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        let mut csv = format!("# {}\n{}\n", header("sweep", cfg), SWEEP_COLUMNS.join(","));
        for r in &rows {
            csv.push_str(&r.csv());
            csv.push('\n');
        }
        fs::write(out.join("sweep.csv"), csv)?;
        write_common(cfg, out, "gaussian-sweep", &["sweep.csv".into(), "config.json".into()])?;
    }
    Ok(rows)
}

/// Metrics of one run against a reference sample, plus auxiliary values that
/// go to the metadata sidecar.
pub struct Evaluation {
    pub record: MetricsRecord,
    pub elbo_se: f64,
    pub bandwidth: f64,
}

pub fn evaluate_run(
    run: &GaussianizationRun,
    run_id: String,
    k: usize,
    reference: &[Vec<f64>],
    n: usize,
    rng: &mut RandomStream,
    kl_analytic: Option<f64>,
) -> Result<Evaluation> {
    let (xs, logq) = run.sample_q(n, rng);
    let base = run.base();
    let lp: Vec<f64> = xs.par_iter().map(|x| base.log_density(x)).collect();
    if let Some(i) = lp.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteTarget { index: i, sample: xs[i].clone() });
    }
    let lr: Vec<f64> = lp.iter().zip(&logq).map(|(a, b)| a - b).collect();
    let est = crate::mfvi::Estimate::from_samples(&lr);
    let w = normalize_log_weights(&lr)?;
    let mmd = mmd_unbiased(&xs, reference);
    let record = MetricsRecord {
        run_id,
        k,
        elbo: est.value,
        mmd: mmd.mmd2,
        ksd: ksd(&xs, base.as_ref()),
        ess: ess(&w),
        kl_analytic,
        seed: run.seed(),
        status: "ok".into(),
    };
    Ok(Evaluation { record, elbo_se: est.std_error, bandwidth: mmd.bandwidth })
}

fn laplace_options() -> OptimizerOptions {
    OptimizerOptions::default()
}

fn settings(cfg: &RunConfig, name: StrategyName) -> IterationSettings {
    IterationSettings {
        strategy: cfg.rotation_strategy(name, cfg.var_threshold),
        family: cfg.family,
        mfvi: cfg.mfvi.clone(),
        early_stop: cfg.early_stop,
    }
}

/// Reference draws by preconditioned random-walk Metropolis started at the
/// Laplace mode.
fn reference_sample(cfg: &RunConfig, target: Arc<dyn TargetDistribution>, rng: &mut RandomStream) -> (Vec<Vec<f64>>, f64) {
    let lap = laplace_standardize(target.clone(), &laplace_options());
    let d = target.dim();
    let chol = lap
        .covariance
        .and_then(|c| c.cholesky())
        .map(|c| c.l())
        .unwrap_or_else(|| DMatrix::from_diagonal(&nalgebra::DVector::from_vec(lap.scale.clone())));
    debug_assert_eq!(chol.nrows(), d);
    let r = &cfg.reference;
    rwm_sample(target.as_ref(), &lap.shift, &chol, r.samples, r.burnin, r.thin, rng)
}

pub struct LogisticReplicate {
    pub index: usize,
    pub seed: u64,
    pub target: Arc<LogisticRegressionTarget>,
    /// `(run_id, run)` for every persisted run; failed runs are absent.
    pub runs: Vec<(String, GaussianizationRun)>,
    pub records: Vec<MetricsRecord>,
    pub meta: Vec<Value>,
    pub reference_acceptance: f64,
}

/// One replicate of the logistic study: one-step identity/random/PCA runs and
/// the random-rotation iterative runs `R_k`, which share a single chain.
pub fn logistic_replicate(cfg: &RunConfig, index: usize) -> LogisticReplicate {
    let seed = cfg.seed.wrapping_add(index as u64);
    let data_seed = if cfg.fixed_data { cfg.seed } else { seed };
    let target = Arc::new(make_paper_logistic(&mut substream(data_seed, DATA_STREAM)));
    let base: Arc<dyn TargetDistribution> = target.clone();
    let (reference, acc) = reference_sample(cfg, base.clone(), &mut substream(seed, REFERENCE_STREAM));

    let start = if cfg.laplace {
        GaussianizationRun::with_laplace(base.clone(), 0, &laplace_options())
    } else {
        GaussianizationRun::new(base.clone(), 0)
    };
    let offset = start.chain().len();
    let with_seed = |s: u64| {
        GaussianizationRun::from_parts(base.clone(), start.chain().clone(), start.records().to_vec(), s)
            .expect("consistent parts")
    };

    let mut rep = LogisticReplicate {
        index,
        seed,
        target,
        runs: Vec::new(),
        records: Vec::new(),
        meta: Vec::new(),
        reference_acceptance: acc,
    };
    let record = |rep: &mut LogisticReplicate, id: String, k: usize, run: std::result::Result<GaussianizationRun, String>, run_seed: u64| {
        let evaluated = run.and_then(|r| {
            let mut rng = substream(seed, EVAL_STREAM);
            evaluate_run(&r, id.clone(), k, &reference, cfg.eval_samples, &mut rng, None)
                .map(|e| (r, e))
                .map_err(|e| e.to_string())
        });
        match evaluated {
            Ok((r, e)) => {
                rep.meta.push(json!({
                    "run_id": id,
                    "k": k,
                    "seed": run_seed,
                    "elbo_se": fmt_float(e.elbo_se),
                    "mmd_bandwidth": fmt_float(e.bandwidth),
                    "ranks": r.records().iter().map(|x| x.rank).collect::<Vec<_>>(),
                }));
                rep.records.push(e.record);
                rep.runs.push((id, r));
            }
            Err(err) => {
                warn!("{id} failed: {err}");
                rep.meta.push(json!({ "run_id": id, "k": k, "seed": run_seed, "error": err }));
                rep.records.push(MetricsRecord::failed(id, k, run_seed, &err));
            }
        }
    };

    for (v, name) in [StrategyName::Identity, StrategyName::Random, StrategyName::Pca].into_iter().enumerate() {
        let run_seed = substream(seed, RUN_STREAM_BASE + v as u64).random::<u64>();
        let mut run = with_seed(run_seed);
        let res = run.extend(1, &settings(cfg, name)).map(|_| run).map_err(|e| e.to_string());
        record(&mut rep, format!("r{index:02}-{}", name.as_str()), 1, res, run_seed);
    }

    let mut ks = cfg.rk.clone();
    ks.sort_unstable();
    ks.dedup();
    let run_seed = substream(seed, RUN_STREAM_BASE + 3).random::<u64>();
    let mut run = with_seed(run_seed);
    let s = settings(cfg, StrategyName::Random);
    let mut broken: Option<String> = None;
    for k in ks {
        let res = match &broken {
            Some(e) => Err(format!("earlier iteration failed: {e}")),
            None => match run.extend(k - run.iterations(), &s) {
                Ok(_) => Ok(run.truncated(offset + k)),
                Err(e) => {
                    broken = Some(e.to_string());
                    Err(e.to_string())
                }
            },
        };
        record(&mut rep, format!("r{index:02}-R{k}"), k, res, run_seed);
    }
    rep
}

/// The logistic study. Writes `metrics.csv`, `metrics.meta.json`,
/// `chains/<run_id>.json`, `config.json` and `manifest.json` when `out` is set.
pub fn cmd_logistic(cfg: &RunConfig, out: Option<&Path>) -> Result<Vec<LogisticReplicate>> {
    let reps: Vec<LogisticReplicate> = (0..cfg.replicates())
        .into_par_iter()
        .map(|i| {
            let r = logistic_replicate(cfg, i);
            info!("replicate {i} done");
            r
        })
        .collect();
    if let Some(out) = out {
        let hash = cfg.hash();
        fs::create_dir_all(out.join("chains"))?;
        let records: Vec<MetricsRecord> = reps.iter().flat_map(|r| r.records.clone()).collect();
        let comment = format!("{} {KERNEL_NOTE}", header("metrics", cfg));
        fs::write(out.join("metrics.csv"), metrics_csv(&comment, &records))?;
        let mut files = vec!["metrics.csv".to_string(), "metrics.meta.json".into(), "config.json".into()];
        for rep in &reps {
            for (id, run) in &rep.runs {
                let mut v = run.to_json_value();
                v["run_id"] = json!(id);
                v["config_hash"] = json!(hash);
                v["replicate_seed"] = json!(rep.seed);
                let name = format!("chains/{id}.json");
                write_json(&out.join(&name), &v)?;
                files.push(name);
            }
        }
        let meta = json!({
            "config_hash": hash,
            "seed": cfg.seed,
            "kernels": KERNEL_NOTE,
            "replicates": reps.iter().map(|r| json!({
                "index": r.index,
                "seed": r.seed,
                "reference_acceptance": fmt_float(r.reference_acceptance),
                "runs": r.meta,
            })).collect::<Vec<_>>(),
        });
        write_json(&out.join("metrics.meta.json"), &meta)?;
        write_common(cfg, out, "logistic", &files)?;
    }
    Ok(reps)
}

/// Exact draws for Gaussian targets, random-walk Metropolis otherwise.
fn custom_reference(cfg: &RunConfig, t: &BuiltTarget) -> Vec<Vec<f64>> {
    let mut rng = substream(cfg.seed, REFERENCE_STREAM);
    match t {
        BuiltTarget::Gaussian(g) => (0..cfg.reference.samples).map(|_| g.sample(&mut rng)).collect(),
        _ => reference_sample(cfg, t.as_dyn(), &mut rng).0,
    }
}

fn custom_metrics(cfg: &RunConfig, t: &BuiltTarget, run: &GaussianizationRun, reference: &[Vec<f64>], k: usize) -> MetricsRecord {
    let offset = run.records().iter().take_while(|r| r.kind == "laplace").count();
    let prefix = run.truncated(offset + k);
    let kl = match t {
        BuiltTarget::Gaussian(g) => kl_affine_chain_gaussian(prefix.chain(), g),
        _ => None,
    };
    let id = format!("run-k{k}");
    let mut rng = substream(cfg.seed, EVAL_STREAM);
    match evaluate_run(&prefix, id.clone(), k, reference, cfg.eval_samples, &mut rng, kl) {
        Ok(e) => e.record,
        Err(e) => MetricsRecord::failed(id, k, run.seed(), &e.to_string()),
    }
}

fn target_spec(cfg: &RunConfig) -> Result<&TargetSpec> {
    cfg.target.as_ref().ok_or_else(|| Error::Config("custom runs need a target".into()))
}

/// Runs `cfg.iterations` iterations on a user target and records metrics after
/// each. Writes `run.json`, `metrics.csv`, `config.json` and `manifest.json`.
pub fn cmd_run_custom(cfg: &RunConfig, out: Option<&Path>) -> Result<(GaussianizationRun, Vec<MetricsRecord>)> {
    let t = build_target(target_spec(cfg)?, cfg.seed)?;
    let base = t.as_dyn();
    let laplace = cfg.laplace.then(laplace_options);
    let s = settings(cfg, cfg.strategy);
    let mut run = match &laplace {
        Some(o) => GaussianizationRun::with_laplace(base.clone(), cfg.seed, o),
        None => GaussianizationRun::new(base.clone(), cfg.seed),
    };
    t.check_oracle()?;
    let res = run.extend(cfg.iterations, &s);
    t.check_oracle()?;
    if let Err(e) = res {
        warn!("stopped after {} iterations: {e}", run.iterations());
    }
    let reference = custom_reference(cfg, &t);
    let records: Vec<MetricsRecord> = (0..=run.iterations()).map(|k| custom_metrics(cfg, &t, &run, &reference, k)).collect();
    t.check_oracle()?;
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        let mut v = run.to_json_value();
        v["config_hash"] = json!(cfg.hash());
        write_json(&out.join("run.json"), &v)?;
        let comment = format!("{} {KERNEL_NOTE}", header("metrics", cfg));
        fs::write(out.join("metrics.csv"), metrics_csv(&comment, &records))?;
        write_common(cfg, out, "run", &["run.json".into(), "metrics.csv".into(), "config.json".into()])?;
    }
    Ok((run, records))
}

/// Reloads a saved custom run and recomputes its final metrics row.
pub fn cmd_eval(cfg: &RunConfig, run_path: &Path, out: Option<&Path>) -> Result<MetricsRecord> {
    let t = build_target(target_spec(cfg)?, cfg.seed)?;
    let text = fs::read_to_string(run_path)?;
    let run = GaussianizationRun::from_json_value(t.as_dyn(), serde_json::from_str(&text)?)?;
    let reference = custom_reference(cfg, &t);
    let rec = custom_metrics(cfg, &t, &run, &reference, run.iterations());
    t.check_oracle()?;
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        let comment = format!("{} {KERNEL_NOTE}", header("eval", cfg));
        fs::write(out.join("eval_metrics.csv"), metrics_csv(&comment, std::slice::from_ref(&rec)))?;
    }
    Ok(rec)
}

/// Output directory: the flag, else the config, else `./out`.
pub fn output_dir(cfg: &RunConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| cfg.output_dir.as_ref().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("out"))
}
