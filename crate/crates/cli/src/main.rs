use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rr_cli::commands::{self, display_score};
use rr_cli::{CliError, RunConfig};
use rr_core::subspace::DEFAULT_TOP_K;
use rr_core::unlearn::sig6;

#[derive(Parser)]
#[command(name = "rr", version, about = "Forget-data generation and adapter-based unlearning")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search for instructions and harvest a forget dataset.
    GenData,
    /// Run the alternating subtract/add schedule.
    Unlearn,
    /// Compare the update subspaces of two adapter directories.
    Subspace {
        #[arg(long)]
        retain: PathBuf,
        #[arg(long)]
        forget: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        k: usize,
        /// Multiply by √k so identical subspaces score 1.
        #[arg(long)]
        normalized: bool,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Vendi score of the non-blank lines of a text file.
    Vendi { file: PathBuf },
    /// Fold a merge plan into a single adapter.
    Merge {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "merged")]
        name: String,
    },
    /// End-to-end run on the built-in toy model.
    ToyDemo,
}

fn load(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut run = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::parse("{}")?,
    };
    if let Some(seed) = cli.seed {
        run.seed = seed;
    }
    if let Some(dir) = &cli.output_dir {
        run.output_dir = Some(dir.clone());
    }
    run.validate()?;
    Ok(run)
}

fn out_dir(run: &RunConfig) -> PathBuf {
    run.output_dir.clone().unwrap_or_else(|| PathBuf::from("rr-out"))
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let run = load(cli)?;
    match &cli.command {
        Command::GenData => {
            let s = commands::gen_data(&run, &out_dir(&run))?;
            println!("{} records, vendi {}, written to {}", s.records, sig6(s.vendi), s.dataset.display());
        }
        Command::Unlearn => {
            let dir = out_dir(&run);
            let outcome = commands::unlearn(&run, &dir)?;
            print!("{}", outcome.log.to_csv());
            println!("stop: {:?}", outcome.stop);
            println!("merge plan: {}", dir.join(commands::PLAN_FILE).display());
        }
        Command::Subspace { retain, forget, k, normalized, out } => {
            let result = commands::subspace(retain, forget, *k, *normalized, out.as_deref())?;
            if out.is_none() {
                print!("{}", result.to_json());
            }
        }
        Command::Vendi { file } => println!("{}", display_score(commands::vendi(&run, file)?)),
        Command::Merge { plan, out, name } => {
            let merged = commands::merge(plan, out, name)?;
            println!("{} layers written to {}", merged.layers.len(), out.display());
        }
        Command::ToyDemo => {
            let report = commands::toy_demo(run.seed, cli.output_dir.as_deref().map(Path::new))?;
            print!("{}", report.text);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
