use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tda_cli::config::{schema, Overrides};
use tda_cli::pipeline::{Pipeline, TruthKind};
use tda_cli::report::{run_report, Uncertainty};
use tda_cli::{exit, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "tda", version, about = "Training-data attribution benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the attribution-side model(s) and write checkpoints.
    Train(Common),
    /// Generate (or reuse) a ground-truth bundle.
    Truth {
        #[arg(value_enum)]
        kind: Kind,
        #[command(flatten)]
        common: Common,
    },
    /// Sweep the method's hyperparameter grid and write score files.
    Attribute(Common),
    /// Score every grid point against the configured ground truth.
    Evaluate(Common),
    /// Repeat the pipeline over seeds and report mean and standard error.
    Report {
        #[arg(long, value_enum, default_value = "none")]
        uncertainty: Uncertainty,
        #[command(flatten)]
        common: Common,
    },
    /// Print the JSON schema of the run config.
    Schema {
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Loo,
    Lds,
    Noisy,
}

#[derive(Args)]
struct Common {
    /// Run config (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed_train: Option<u64>,
    #[arg(long)]
    seed_truth: Option<u64>,
    #[arg(long)]
    seed_method: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, CliError> {
        let o = Overrides {
            output_dir: self.output_dir.clone(),
            seed_train: self.seed_train,
            seed_truth: self.seed_truth,
            seed_method: self.seed_method,
        };
        RunConfig::load(&self.config, &o)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(c) => Pipeline::new(c.load()?)?.train(),
        Command::Truth { kind, common } => {
            let kind = match kind {
                Kind::Loo => TruthKind::Loo,
                Kind::Lds => TruthKind::Lds,
                Kind::Noisy => TruthKind::Noisy,
            };
            Pipeline::new(common.load()?)?.truth(kind).map(|_| ())
        }
        Command::Attribute(c) => {
            let sweep = Pipeline::new(c.load()?)?.attribute()?;
            let bad = sweep.points.iter().filter(|p| p.message.is_some()).count();
            if bad > 0 {
                log::warn!("{bad} of {} grid points produced no scores", sweep.points.len());
            }
            Ok(())
        }
        Command::Evaluate(c) => {
            let eval = Pipeline::new(c.load()?)?.evaluate()?;
            for b in &eval.best {
                println!("{} {} best {} = {:.4} ± {:.4}", eval.method, b.metric.name(), b.grid_point, b.aggregate, b.stderr);
            }
            Ok(())
        }
        Command::Report { uncertainty, common } => {
            let report = run_report(&common.load()?, uncertainty)?;
            for r in &report.rows {
                println!("{} {} {} {:.4} ± {:.4}", r.method, r.run, r.metric.name(), r.aggregate, r.stderr);
            }
            Ok(())
        }
        Command::Schema { output } => {
            let text = serde_json::to_string_pretty(&schema()).map_err(|e| CliError::Other(e.to_string()))?;
            match output {
                Some(p) => std::fs::write(&p, text).map_err(|e| tda_core::Error::io(&p, e).into()),
                None => {
                    println!("{text}");
                    Ok(())
                }
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
