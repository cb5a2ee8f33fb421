use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use firl_core::gradcheck::{DEFAULT_INSTANCES, DEFAULT_TOLERANCE};
use firl_core::io::RunConfig;
use firl_core::runner::{
    run_eval, run_gradcheck_cmd, run_scenario, run_train, run_transfer, Overrides, RunError,
    RunOutput,
};
use firl_core::scenarios::TargetDynamics;
use firl_core::trainer::TrainEstimator;
use firl_core::FDivKind;

const EXIT_CONFIG: u8 = 1;
const EXIT_ACCEPTANCE: u8 = 2;

/// f-divergence inverse RL on tabular MDPs.
#[derive(Debug, Parser)]
#[command(name = "firl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a reward and write its learning curve and heatmap.
    Train(RunArgs),
    /// Check exact gradients against finite differences on random MDPs.
    Gradcheck(GradcheckArgs),
    /// Score a saved reward against the config's expert.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// `reward.json` from an earlier run.
        #[arg(long)]
        reward: PathBuf,
    },
    /// Train and run the scenario's evaluation.
    Scenario(RunArgs),
    /// Train on the source grid and solve on perturbed dynamics.
    Transfer {
        #[command(flatten)]
        run: RunArgs,
        /// Replace the target's slip probability.
        #[arg(long)]
        slip: Option<f64>,
        /// Disable an action on the target (repeatable); replaces the config's list.
        #[arg(long = "disable")]
        disable: Vec<usize>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    estimator: Option<EstimatorArg>,
    #[arg(long, value_enum)]
    divergence: Option<DivergenceArg>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_INSTANCES)]
    instances: usize,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Exact,
    Mc,
    Mixture,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DivergenceArg {
    Fkl,
    Rkl,
    Js,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig, RunError> {
        let mut cfg = RunConfig::load(&self.config)?;
        let overrides = Overrides {
            seed: self.seed,
            estimator: self.estimator.map(|e| match e {
                EstimatorArg::Exact => TrainEstimator::Exact,
                EstimatorArg::Mc => TrainEstimator::Mc,
                EstimatorArg::Mixture => TrainEstimator::Mixture,
            }),
            divergence: self.divergence.map(|d| match d {
                DivergenceArg::Fkl => FDivKind::Fkl,
                DivergenceArg::Rkl => FDivKind::Rkl,
                DivergenceArg::Js => FDivKind::Js,
            }),
        };
        overrides.apply(&mut cfg)?;
        Ok(cfg)
    }

    fn out(&self) -> Option<&Path> {
        self.out.as_deref()
    }
}

fn report(output: RunOutput) {
    if let Some(report) = &output.report {
        println!(
            "{}",
            serde_json::to_string_pretty(report).expect("report serializes")
        );
    }
    println!("wrote {}", output.dir.display());
}

fn run(cli: Cli) -> Result<ExitCode, RunError> {
    match cli.command {
        Command::Train(args) => report(run_train(&args.load()?, args.out())?),
        Command::Scenario(args) => report(run_scenario(&args.load()?, args.out())?),
        Command::Eval { run, reward } => report(run_eval(&run.load()?, &reward, run.out())?),
        Command::Transfer { run, slip, disable } => {
            let cfg = run.load()?;
            let target = (slip.is_some() || !disable.is_empty()).then_some(TargetDynamics {
                slip,
                disabled_actions: disable,
            });
            report(run_transfer(&cfg, target, run.out())?)
        }
        Command::Gradcheck(args) => {
            let out = run_gradcheck_cmd(args.seed, args.instances, args.tol, args.out.as_deref())?;
            print!("{}", out.csv);
            let worst = out.records.iter().map(|r| r.rel_error).fold(0.0, f64::max);
            eprintln!(
                "gradcheck: {} instances, max relative error {worst:.3e}, tolerance {:.1e}: {}",
                out.records.len(),
                args.tol,
                if out.all_pass { "pass" } else { "FAIL" }
            );
            eprintln!("wrote {}", out.dir.display());
            if !out.all_pass {
                return Ok(ExitCode::from(EXIT_ACCEPTANCE));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return if err.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}
