use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lbpo::harness::metrics::{to_csv_string, write_text};
use lbpo::harness::report;
use lbpo::harness::training::metrics_path;
use lbpo::harness::{run_training, sweep_beta, sweep_samples, Algo, EnvConfig, ExperimentConfig};
use lbpo::tabular_oracle::run_oracle_suite;
use lbpo::{Error, Execution, Result};

#[derive(Parser)]
#[command(name = "lbpo", version, about = "Lyapunov barrier policy optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one policy and write its metrics CSV.
    Train(Common),
    /// Final-epoch cost and return of LBPO across barrier strengths.
    SweepBeta {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [0.005, 0.01, 0.02])]
        betas: Vec<f64>,
        /// Defaults to five consecutive seeds starting at the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Violation counts across algorithms and trajectories per epoch.
    SweepSamples {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [10, 30, 100])]
        samples: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values = ["lbpo", "backtrack"])]
        algos: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Check the Lyapunov safety guarantee on random tabular CMDPs.
    VerifyOracle {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        instances: usize,
        #[arg(long, default_value_t = 50)]
        policies: usize,
        #[arg(long)]
        sequential: bool,
    },
    /// Summarize every metrics.csv under a directory.
    Report {
        path: PathBuf,
        /// Write the summary here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    beta: Option<f64>,
    /// `didactic` or `gridworld` with default parameters.
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    trajectories: Option<usize>,
    /// Run everything on the calling thread.
    #[arg(long)]
    sequential: bool,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.out {
            cfg.out = Some(v.clone());
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = &self.env {
            cfg.env = EnvConfig::by_name(v)?;
        }
        if let Some(v) = &self.algo {
            cfg.algo = Algo::parse(v)?;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.trajectories {
            cfg.trajectories_per_epoch = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn exec(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::default()
        }
    }
}

fn seeds_or_default(seeds: Vec<u64>, cfg: &ExperimentConfig) -> Vec<u64> {
    if seeds.is_empty() {
        (cfg.seed..cfg.seed + 5).collect()
    } else {
        seeds
    }
}

fn emit(out: Option<&PathBuf>, name: &str, text: &str) -> Result<()> {
    match out {
        Some(dir) => eprintln!("wrote {}", dir.join(name).display()),
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.config()?;
            let run = run_training(&cfg, common.exec())?;
            match &cfg.out {
                Some(dir) => {
                    write_text(&dir.join("config.json"), &cfg.to_json())?;
                    eprintln!("wrote {}", metrics_path(dir).display());
                }
                None => print!("{}", to_csv_string(&run.rows)),
            }
        }
        Command::SweepBeta { common, betas, seeds } => {
            let cfg = common.config()?;
            let seeds = seeds_or_default(seeds, &cfg);
            let sweep = sweep_beta(&cfg, &betas, &seeds, common.exec())?;
            emit(cfg.out.as_ref(), "sweep_beta.csv", &sweep.to_csv())?;
        }
        Command::SweepSamples { common, samples, algos, seeds } => {
            let cfg = common.config()?;
            let seeds = seeds_or_default(seeds, &cfg);
            let algos = algos.iter().map(|a| Algo::parse(a)).collect::<Result<Vec<_>>>()?;
            let sweep = sweep_samples(&cfg, &algos, &samples, &seeds, common.exec())?;
            emit(cfg.out.as_ref(), "sweep_samples.csv", &sweep.to_csv())?;
        }
        Command::VerifyOracle { seed, instances, policies, sequential } => {
            let exec = if sequential { Execution::Sequential } else { Execution::default() };
            let r = run_oracle_suite(seed, instances, policies, exec)?;
            println!("instances {}", r.instances);
            println!("certified_policies {}", r.certified_policies);
            println!("safety_exceptions {}", r.safety_exceptions);
            println!("max_cost_excess {:e}", r.max_cost_excess);
            println!("max_offset_deviation {:e}", r.max_offset_deviation);
            println!("max_start_excess {:e}", r.max_start_excess);
            println!("max_visitation_error {:e}", r.max_visitation_error);
            println!("{}", if r.passed() { "PASS" } else { "FAIL" });
            return Ok(r.passed());
        }
        Command::Report { path, out } => {
            let text = report::to_csv(&report::summarize(&path)?);
            match out {
                Some(file) => write_text(&file, &text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Config(_) | Error::Json(_)) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
