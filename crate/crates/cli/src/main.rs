use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dsde::experiments::{
    compare_policies, compare_report, comparison_csv, correlate, correlation_csv, replay,
    run_experiment, scaling, sweep, sweep_csv, ComparedRun, ExperimentConfig, ExperimentError,
    PolicySpec, DEFAULT_SWEEP,
};

#[derive(Parser)]
#[command(name = "dsde", version, about = "Speculative decoding batch simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML)
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    budget: Option<usize>,
    /// ar | static:K | sweep[:K,K,..] | entropy:THRESHOLD[:BASE] | dsde | dsde-cap
    #[arg(long)]
    policy: Option<String>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, ExperimentError> {
        let mut config = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(b) = self.batch_size {
            config.batch_size = b;
        }
        if let Some(b) = self.budget {
            config.budget_per_sequence = b;
        }
        if let Some(p) = &self.policy {
            config.policy = p.parse()?;
        }
        if let Some(out) = &self.out {
            config.output_dir = Some(out.clone());
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one policy and write its run directory
    Run(Common),
    /// Profile static speculation lengths and mark the fastest
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated lengths; defaults to the config's sweep list
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
    },
    /// Throughput over a series of batch sizes
    Scaling {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64")]
        batch_sizes: Vec<usize>,
    },
    /// Correlate entropy, lagging mean KLD and WVIR with token acceptance
    Correlate {
        #[command(flatten)]
        common: Common,
        /// Analyze a recorded trace instead of the config's workload
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Re-run a run directory from its config echo and check every file
    Replay { run_dir: PathBuf },
    /// Latency, block efficiency and speedup across runs of one workload
    Compare {
        /// Existing run directories
        run_dirs: Vec<PathBuf>,
        /// Run these policies fresh instead (needs --config)
        #[arg(long, value_delimiter = ',')]
        policies: Option<Vec<String>>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn sweep_list(config: &ExperimentConfig, ks: Option<Vec<usize>>) -> Vec<usize> {
    ks.unwrap_or_else(|| match &config.policy {
        PolicySpec::StaticOptSweep { ks } => ks.clone(),
        _ => DEFAULT_SWEEP.to_vec(),
    })
}

fn execute(command: Command) -> Result<(), ExperimentError> {
    match command {
        Command::Run(common) => {
            let config = common.load()?;
            if let PolicySpec::StaticOptSweep { ks } = &config.policy {
                let outcome = sweep(&config, ks, config.output_dir.as_deref())?;
                print!("{}", sweep_csv(&outcome));
            } else {
                let run = run_experiment(&config, None)?;
                print!("{}", run.files()[3].1);
            }
        }
        Command::Sweep { common, ks } => {
            let config = common.load()?;
            let ks = sweep_list(&config, ks);
            let outcome = sweep(&config, &ks, config.output_dir.as_deref())?;
            print!("{}", sweep_csv(&outcome));
            println!("best k: {}", outcome.best_k);
        }
        Command::Scaling {
            common,
            batch_sizes,
        } => {
            let config = common.load()?;
            let rows = scaling(&config, &batch_sizes, config.output_dir.as_deref())?;
            println!("batch_size,throughput,ratio");
            for (p, _) in rows {
                println!("{},{},{}", p.batch_size, p.throughput, p.ratio);
            }
        }
        Command::Correlate { common, trace } => {
            let mut config = common.load()?;
            if let Some(path) = trace {
                config.workload.pairs.clear();
                config.workload.trace = Some(path);
            }
            let outcome = correlate(&config, config.output_dir.as_deref())?;
            print!("{}", correlation_csv(&outcome.reports));
        }
        Command::Replay { run_dir } => {
            let verified = replay(&run_dir)?;
            println!("replay matches: {}", verified.join(", "));
        }
        Command::Compare {
            run_dirs,
            policies,
            config,
            out,
        } => {
            let rows = match (policies, config) {
                (Some(policies), Some(config)) => {
                    if !run_dirs.is_empty() {
                        return Err(usage("give either run directories or --policies"));
                    }
                    let config = ExperimentConfig::load(&config)?;
                    let policies = policies
                        .iter()
                        .map(|p| p.parse())
                        .collect::<Result<Vec<PolicySpec>, _>>()?;
                    compare_policies(&config, &policies, out.as_deref())?
                }
                (Some(_), None) => return Err(usage("--policies needs --config")),
                (None, _) => {
                    let runs = run_dirs
                        .iter()
                        .map(|d| ComparedRun::load(d))
                        .collect::<Result<Vec<_>, _>>()?;
                    let rows = compare_report(&runs)?;
                    if let Some(dir) = &out {
                        write(dir, "comparison.csv", &comparison_csv(&rows))?;
                    }
                    rows
                }
            };
            print!("{}", comparison_csv(&rows));
        }
    }
    Ok(())
}

fn usage(reason: &str) -> ExperimentError {
    ExperimentError::Config {
        field: "arguments".into(),
        reason: reason.into(),
    }
}

fn write(dir: &Path, name: &str, content: &str) -> Result<(), ExperimentError> {
    let io = |source| ExperimentError::Io {
        path: dir.display().to_string(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(io)?;
    std::fs::write(dir.join(name), content).map_err(io)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
