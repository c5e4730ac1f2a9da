//! `fedrod` command-line front end.

mod compare;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedrod::config::parse_override_value;
use fedrod::ExperimentConfig;

#[derive(Parser)]
#[command(name = "fedrod", version, about = "Federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment for every configured seed.
    Run(RunArgs),
    /// Tabulate final-round metrics of several runs.
    Compare(compare::CompareArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the client partition as JSON without training.
    PartitionReport {
        #[command(flatten)]
        config: ConfigArgs,
        /// Write the report here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory (overrides output.dir).
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; omitted keys take their defaults.
    config: Option<PathBuf>,
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    participation: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repetitions: Option<usize>,
    /// Arbitrary override, e.g. `--set loss.kind=bsm` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

/// Writes to stdout, ignoring a closed pipe (e.g. output piped into `head`).
pub fn out(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
    Assertion(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Assertion(_) => 3,
        }
    }
}

impl From<fedrod::Error> for Failure {
    fn from(e: fedrod::Error) -> Self {
        match e {
            fedrod::Error::Config(_) => Failure::Validation(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, Failure> {
        let mut overrides: Vec<(String, toml::Value)> = Vec::new();
        let mut put = |k: &str, v: toml::Value| overrides.push((k.to_string(), v));
        if let Some(a) = &self.algorithm {
            put("algorithm", toml::Value::String(a.clone()));
        }
        if let Some(v) = self.alpha {
            put("alpha", toml::Value::Float(v));
        }
        if let Some(v) = self.rounds {
            put("rounds", toml::Value::Integer(v as i64));
        }
        if let Some(v) = self.clients {
            put("clients", toml::Value::Integer(v as i64));
        }
        if let Some(v) = self.participation {
            put("participation", toml::Value::Float(v));
        }
        if let Some(v) = self.seed {
            put("seed", toml::Value::Integer(v as i64));
            if self.repetitions.is_none() {
                put("seeds", toml::Value::Array(vec![toml::Value::Integer(v as i64)]));
            }
        }
        if let Some(v) = self.repetitions {
            put("repetitions", toml::Value::Integer(v as i64));
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                Failure::Validation(anyhow::anyhow!("--set expects KEY=VALUE, got `{kv}`"))
            })?;
            put(k.trim(), parse_override_value(v.trim()));
        }
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Failure::Validation(anyhow::anyhow!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut config = ExperimentConfig::from_toml_str(&text, &overrides)?;
        if let Some(r) = self.repetitions {
            // the flag replaces any explicit seed list from the file
            config.seeds = None;
            config.repetitions = r;
            config = config.resolve()?;
        }
        Ok(config)
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run(args) => {
            let mut config = args.config.resolve()?;
            if let Some(o) = args.output {
                config.output.dir = o;
            }
            run::run(&config, args.force)
        }
        Command::Compare(args) => compare::compare(&args),
        Command::Gradcheck { points, seed } => {
            let reports = fedrod::gradcheck::run_suite(points, seed)?;
            let mut ok = true;
            for r in &reports {
                out(&format!(
                    "{} {:<24} max_rel_error={:.3e} points={}\n",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.max_rel_error,
                    r.points
                ));
                ok &= r.passed;
            }
            if ok {
                Ok(())
            } else {
                Err(Failure::Assertion("gradient check failed".into()))
            }
        }
        Command::PartitionReport { config, output } => {
            let config = config.resolve()?;
            let exp = fedrod::fed::Experiment::build(&config, config.seed_list()[0])?;
            let json = serde_json::to_string_pretty(&exp.partition.report())
                .map_err(|e| Failure::Runtime(e.into()))?;
            match output {
                Some(p) => std::fs::write(&p, json + "\n")
                    .map_err(|e| Failure::Runtime(anyhow::anyhow!("{}: {e}", p.display())))?,
                None => out(&(json + "\n")),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Validation(e) | Failure::Runtime(e) => eprintln!("error: {e:#}"),
                Failure::Assertion(msg) => eprintln!("assertion failed: {msg}"),
            }
            ExitCode::from(f.code())
        }
    }
}
