use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rds_lab::{presets, validate, ExperimentConfig, Lab, LabError, Overrides};

#[derive(Parser)]
#[command(name = "rds-lab", version, about = "Quenched random dynamics experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override the Ulam resolution.
    #[arg(long = "n-bins", global = true)]
    n_bins: Option<usize>,
    /// Also write dump/ CSVs.
    #[arg(long, global = true)]
    dump: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run a config file, or a preset given as `preset:<name>`.
    Run { config: String },
    /// Report every problem with a config without running it.
    Validate { config: String },
    /// List the built-in presets.
    Presets {
        /// Print the TOML of one preset.
        #[arg(long)]
        show: Option<String>,
    },
}

fn load(arg: &str) -> Result<ExperimentConfig, LabError> {
    match arg.strip_prefix("preset:") {
        Some(name) => presets::load(name),
        None => ExperimentConfig::load(&PathBuf::from(arg)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let overrides = Overrides { seed: cli.seed, out: cli.out, threads: cli.threads, n_bins: cli.n_bins, dump: cli.dump };
    match cli.command {
        Command::Presets { show: Some(name) } => match presets::find(&name) {
            Ok(p) => {
                print!("{}", p.toml.trim_start());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
        Command::Presets { show: None } => {
            for p in presets::list() {
                println!("{:<30} {}", p.name, p.description);
            }
            ExitCode::SUCCESS
        }
        Command::Validate { config } => {
            let mut cfg = match load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            overrides.apply(&mut cfg);
            let problems = validate(&cfg);
            if problems.is_empty() {
                println!("ok {}", cfg.hash());
                ExitCode::SUCCESS
            } else {
                for p in &problems {
                    println!("{p}");
                }
                ExitCode::from(2)
            }
        }
        Command::Run { config } => {
            let mut cfg = match load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            overrides.apply(&mut cfg);
            let threads = cfg.threads.unwrap_or(0);
            let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
                Ok(p) => p,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            let dir = rds_lab::output::output_dir(&cfg);
            log::info!("running {} into {}", cfg.scenario.name(), dir.display());
            match pool.install(|| Lab::new().run(&cfg)) {
                Ok(summary) => {
                    for c in &summary.criteria {
                        println!(
                            "{} {:<32} value={:.6e} tol={:.3e} se={:.3e}",
                            if c.pass { "PASS" } else { "FAIL" },
                            c.name,
                            c.value,
                            c.tolerance,
                            c.stderr
                        );
                    }
                    for n in &summary.notes {
                        println!("note: {n}");
                    }
                    println!("results in {}", dir.display());
                    if summary.pass {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(1)
                    }
                }
                Err(e @ (LabError::Invalid(_) | LabError::Parse(_))) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
    }
}
