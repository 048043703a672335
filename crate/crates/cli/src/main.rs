//! Command-line driver for the funnel-library PAC-Bayes pipeline.
//!
//! Exit codes: 0 success, 1 other failure, 2 invalid arguments or config,
//! 3 soundness failure, 4 contract violation, 5 stale artifact.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use funnelpac::pipeline::{self, DatasetRole, ExperimentConfig};
use funnelpac::reachability::Arm;
use funnelpac::{EnvironmentKind, Error};

#[derive(Parser)]
#[command(
    name = "funnelpac",
    version,
    about = "Funnel-library motion planning with PAC-Bayes certificates"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Run directory holding artifacts and manifests.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Funnel or nominal-trajectory library, overriding the config.
    #[arg(long, global = true)]
    arm: Option<Arm>,
    /// Task, overriding the config.
    #[arg(long, global = true)]
    kind: Option<EnvironmentKind>,
}

#[derive(Subcommand)]
enum Command {
    /// Build primitives and funnels, then falsify the funnels by Monte Carlo.
    BuildLibrary,
    /// Sample environment datasets.
    SampleEnvs {
        /// Single dataset to sample; all three when omitted.
        #[arg(long)]
        role: Option<DatasetRole>,
        /// Number of environments for `--role`.
        #[arg(long, requires = "role")]
        count: Option<usize>,
    },
    /// Train the Gaussian prior with evolution strategies.
    TrainPrior,
    /// Sample policies from the prior and optimize the PAC-Bayes posterior.
    Certify,
    /// Deploy the posterior on the test set with and without disturbances.
    Evaluate,
    /// Emit CSV files for plotting.
    PlotData {
        /// Evaluation reports to include in the bar chart data.
        #[arg(long)]
        report: Vec<PathBuf>,
        /// Output directory (defaults to `<out>/plots`).
        #[arg(long)]
        plots: Option<PathBuf>,
    },
    /// Re-run Monte Carlo falsification on a built library.
    VerifyFunnels {
        /// Samples per funnel, overriding the config.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Run every stage in order.
    RunAll,
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::InvalidArgument(_)) => 2,
        Some(Error::Soundness { .. } | Error::Divergence { .. } | Error::TrainingDiverged { .. }) => 3,
        Some(Error::ContractViolation(_) | Error::NoComposablePrimitive { .. }) => 4,
        Some(Error::StaleArtifact { .. }) => 5,
        _ => 1,
    }
}

fn load_config(c: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(a) = c.arm {
        cfg.arm = a;
    }
    if let Some(k) = c.kind {
        cfg.kind = k;
    }
    Ok(cfg.resolved())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.common.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let mut cfg = load_config(&cli.common)?;
    let out = &cli.common.out;
    match cli.command {
        Command::BuildLibrary => {
            pipeline::cmd_build_library(&cfg, out)?;
        }
        Command::SampleEnvs { role, count } => {
            let roles: Vec<(DatasetRole, usize)> = match role {
                Some(r) => {
                    let default = match r {
                        DatasetRole::Prior => cfg.datasets.prior,
                        DatasetRole::Certify => cfg.datasets.certify,
                        DatasetRole::Test => cfg.datasets.test,
                    };
                    vec![(r, count.unwrap_or(default))]
                }
                None => Vec::new(),
            };
            pipeline::cmd_sample_envs(&cfg, out, &roles)?;
        }
        Command::TrainPrior => {
            pipeline::cmd_train_prior(&cfg, out)?;
        }
        Command::Certify => {
            pipeline::cmd_certify(&cfg, out)?;
            let cert: funnelpac::learning::PacCertificate = pipeline::read_artifact(out, pipeline::file::CERTIFICATE)?;
            println!("C_S = {:.6}  KL = {:.6}  C_PAC = {:.6}", cert.c_s, cert.kl, cert.c_pac);
        }
        Command::Evaluate => {
            pipeline::cmd_evaluate(&cfg, out)?;
            print_report(&pipeline::read_artifact(out, pipeline::file::REPORT)?);
        }
        Command::PlotData { report, plots } => {
            let dest = plots.unwrap_or_else(|| out.join("plots"));
            for p in pipeline::cmd_plot_data(out, &report, &dest)? {
                println!("{}", p.display());
            }
        }
        Command::VerifyFunnels { samples } => {
            if let Some(n) = samples {
                cfg.verification.samples = n;
            }
            pipeline::cmd_verify_funnels(&cfg, out)?;
        }
        Command::RunAll => {
            print_report(&pipeline::run_all(&cfg, out)?);
        }
    }
    Ok(())
}

fn print_report(r: &pipeline::EvaluationReport) {
    println!("arm {:?}: C_PAC = {:.4}", r.arm, r.c_pac);
    println!(
        "  funnel cost  {:.4} ± {:.4}",
        r.funnel_cost.mean, r.funnel_cost.standard_error
    );
    println!(
        "  no dist.     {:.4} ± {:.4}",
        r.undisturbed.mean, r.undisturbed.standard_error
    );
    println!(
        "  dist.        {:.4} ± {:.4}",
        r.disturbed.mean, r.disturbed.standard_error
    );
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
