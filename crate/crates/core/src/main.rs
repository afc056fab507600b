use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fermikms::cli::{exit_code, run, Experiment, ScenarioConfig, Status};
use fermikms::Error;

#[derive(Parser)]
#[command(name = "fermikms", version, about = "Perturbed KMS states of lattice Dirac fermions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiments named in a scenario file.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run only this experiment.
        #[arg(long)]
        experiment: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let Command::Run {
        config,
        out,
        experiment,
        seed,
    } = Cli::parse().command;
    let result = (|| {
        let text = std::fs::read_to_string(&config).map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
        let cfg = ScenarioConfig::from_json(&text)?;
        let only = experiment.as_deref().map(Experiment::parse).transpose()?;
        let dir = out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
        run(&cfg, &dir, only, seed)
    })();
    match &result {
        Ok(rep) => {
            for e in &rep.experiments {
                println!("{:<22} {:?}", e.name, e.status);
                for c in e.checks.iter().filter(|c| c.status != Status::Pass) {
                    println!("  {} {:?} (value {:?} {} {:e})", c.name, c.status, c.value, c.relation, c.tolerance);
                }
            }
        }
        Err(Error::Hypothesis(m)) => eprintln!("hypothesis violated: {m}"),
        Err(e) => eprintln!("error: {e}"),
    }
    ExitCode::from(exit_code(&result) as u8)
}
