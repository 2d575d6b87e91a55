use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use itergauss::cli::{self, commands, Experiment, RunConfig};
use itergauss::{Error, Result};

#[derive(Parser)]
#[command(name = "itergauss", version, about = "Iterative Gaussianization with score-based rotations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Iterations-to-threshold sweep over Gaussian targets (exact recursion).
    GaussianSweep(Common),
    /// The Bayesian logistic regression study.
    Logistic(Common),
    /// A run on a built-in or oracle target given in the config.
    Run(Common),
    /// Recompute metrics for a saved run.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Saved `run.json`.
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

fn load(c: &Common, experiment: Experiment) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => RunConfig::default(),
    };
    cfg.experiment = experiment;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if c.replicates.is_some() {
        cfg.replicates = c.replicates;
    }
    if c.threads.is_some() {
        cfg.threads = c.threads;
    }
    cfg.validate()?;
    if let Some(n) = cfg.threads {
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(cfg)
}

fn main_inner(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GaussianSweep(c) => {
            let cfg = load(&c, Experiment::GaussianSweep)?;
            let out = commands::output_dir(&cfg, c.out.clone());
            let rows = commands::cmd_gaussian_sweep(&cfg, Some(&out))?;
            for r in rows {
                println!("d={} kappa={} {}: {:.2} ± {:.2}", r.d, r.kappa, r.strategy.as_str(), r.mean_iters, r.sd_iters);
            }
        }
        Command::Logistic(c) => {
            let cfg = load(&c, Experiment::Logistic)?;
            let out = commands::output_dir(&cfg, c.out.clone());
            let reps = commands::cmd_logistic(&cfg, Some(&out))?;
            let failed = reps.iter().flat_map(|r| &r.records).filter(|r| r.status != "ok").count();
            println!("{} replicates written to {} ({failed} failed rows)", reps.len(), out.display());
        }
        Command::Run(c) => {
            let cfg = load(&c, Experiment::Custom)?;
            let out = commands::output_dir(&cfg, c.out.clone());
            let (run, _) = commands::cmd_run_custom(&cfg, Some(&out))?;
            println!("{} iterations written to {}", run.iterations(), out.display());
        }
        Command::Eval { common, run } => {
            let cfg = load(&common, Experiment::Custom)?;
            let out = commands::output_dir(&cfg, common.out.clone());
            let rec = commands::cmd_eval(&cfg, &run, Some(&out))?;
            println!("{}", rec.csv_row());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
