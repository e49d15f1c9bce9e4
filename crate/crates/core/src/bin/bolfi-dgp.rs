use std::path::PathBuf;
use std::process::ExitCode;

use bolfi_dgp::harness::{compare_models, read_records, reference_for, run_experiment, write_comparison, ExperimentConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bolfi-dgp", version, about = "BOLFI with GP and latent-variable deep GP surrogates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `base_seed` (runs) or `reference.seed` (reference).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every repetition and write runs.csv, comparison.csv and posterior files.
    Run(Common),
    /// Build or load the cached rejection-ABC reference.
    Reference(Common),
    /// Rebuild comparison.csv from one or more runs tables.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Runs tables; `<out>/runs.csv` by default.
        runs: Vec<PathBuf>,
    },
    /// Check a config and print it with all defaults filled in.
    ValidateConfig(Common),
}

fn load(common: &Common) -> bolfi_dgp::Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(w) = common.workers {
        config.workers = w;
    }
    if let Some(o) = &common.out {
        config.output_dir = o.clone();
    }
    config.validate()?;
    Ok(config)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> bolfi_dgp::Result<()> {
    match cli.command {
        Command::Run(common) => {
            let mut config = load(&common)?;
            if let Some(s) = common.seed {
                config.base_seed = s;
            }
            let out = run_experiment(&config)?;
            let failed = out.records.iter().filter(|r| !r.succeeded()).count();
            println!("{} runs written to {} ({failed} failed)", out.records.len(), config.output_dir.display());
            for row in out.comparison.iter().flatten() {
                println!("{:8} median raw {:.4}  scaled CI {}", row.surrogate.as_str(), row.median_raw, row.interval);
            }
        }
        Command::Reference(common) => {
            let mut config = load(&common)?;
            if let Some(s) = common.seed {
                config.reference.seed = s;
            }
            let sim = config.simulator_spec()?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(config.workers)
                .build()
                .map_err(|e| bolfi_dgp::Error::Config(e.to_string()))?;
            let samples = pool.install(|| reference_for(&config, &sim))?;
            println!("{} reference samples for {} cached", samples.len(), config.simulator);
        }
        Command::Compare { common, runs } => {
            let config = load(&common)?;
            let runs = if runs.is_empty() { vec![config.output_dir.join("runs.csv")] } else { runs };
            let mut records = Vec::new();
            for path in &runs {
                records.extend(read_records(std::fs::File::open(path)?)?);
            }
            let rows = compare_models(&records)?;
            std::fs::create_dir_all(&config.output_dir)?;
            write_comparison(std::fs::File::create(config.output_dir.join("comparison.csv"))?, &config.scale_header(), &rows)?;
            for row in &rows {
                println!("{:8} median raw {:.4}  scaled CI {}", row.surrogate.as_str(), row.median_raw, row.interval);
            }
        }
        Command::ValidateConfig(common) => {
            let config = load(&common)?;
            print!("{}", config.effective_toml()?);
        }
    }
    Ok(())
}
