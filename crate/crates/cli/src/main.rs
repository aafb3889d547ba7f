use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use edgeserve_core::catalog::{parse_catalog, CatalogError};
use edgeserve_core::experiment::{
    calibration_report, comparison_csv, format_calibration, ranking, reports, run_all, run_policy,
    summary_csv, summary_table, thread_cap_from_env, write_atomic, write_first_trace,
    write_request_logs,
};
use edgeserve_core::{Catalog, ExperimentConfig, ExperimentError, PolicyRegistry};

/// Trace-driven simulator for caching foundation models on an edge server.
#[derive(Parser)]
#[command(name = "edgeserve-sim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the request trace of the first seed.
    GenTrace {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (writes trace.csv) or a .csv file path.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run one policy over every seed and write metrics.json.
    Simulate(RunArgs),
    /// Run every configured policy over every seed and write comparison.csv.
    Compare(RunArgs),
    /// Print the fitted accuracy curves of a catalog.
    Calibrate {
        /// Catalog file, or an experiment config whose catalog is used.
        /// Defaults to the builtin catalog.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Policy name; overrides the config.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Also write a per-request log for every run.
    #[arg(long)]
    log: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<(), ExperimentError> {
    let registry = PolicyRegistry::builtin();
    match command {
        Command::GenTrace { config, out } => {
            let cfg = ExperimentConfig::load(&config, &registry)?;
            let path = if out.extension().is_some_and(|e| e == "csv") {
                if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                    create_dir(parent)?;
                }
                out
            } else {
                create_dir(&out)?;
                out.join("trace.csv")
            };
            let count = write_first_trace(&cfg, &path)?;
            println!("{count}");
            Ok(())
        }
        Command::Simulate(args) => {
            let mut cfg = ExperimentConfig::load(&args.config, &registry)?;
            cfg.scenario.options.log |= args.log;
            let policy = match (args.policy, cfg.policies.as_slice()) {
                (Some(p), _) => p,
                (None, [only]) => only.clone(),
                (None, _) => {
                    return Err(ExperimentError::Config {
                        path: "policy".into(),
                        message: "simulate runs one policy; pass --policy or list a single policy"
                            .into(),
                    })
                }
            };
            let threads = thread_cap_from_env()?;
            let (report, runs) = run_policy(&cfg, &registry, &policy, threads)?;
            create_dir(&args.out)?;
            write_atomic(args.out.join("metrics.json"), report.to_json().as_bytes())?;
            write_request_logs(&args.out, &runs)?;
            print!("{}", summary_table(std::slice::from_ref(&report)));
            Ok(())
        }
        Command::Compare(args) => {
            let mut cfg = ExperimentConfig::load(&args.config, &registry)?;
            cfg.scenario.options.log |= args.log;
            if let Some(p) = args.policy {
                cfg.policies = vec![registry
                    .canonical(&p)
                    .map_err(|_| ExperimentError::UnknownPolicy {
                        name: p.clone(),
                        known: registry.names().collect::<Vec<_>>().join(", "),
                    })?
                    .to_string()];
            }
            let threads = thread_cap_from_env()?;
            let runs = run_all(&cfg, &registry, &cfg.policies, threads)?;
            let table = reports(&cfg, &cfg.policies, &runs);
            create_dir(&args.out)?;
            write_atomic(
                args.out.join("comparison.csv"),
                comparison_csv(&table).as_bytes(),
            )?;
            write_atomic(args.out.join("summary.csv"), summary_csv(&table).as_bytes())?;
            write_request_logs(&args.out, &runs)?;
            print!("{}", summary_table(&table));
            println!();
            println!("ranking by mean system cost:");
            for (i, (name, cost)) in ranking(&table).iter().enumerate() {
                println!("{:>2}. {name:<8} {cost:.4}", i + 1);
            }
            Ok(())
        }
        Command::Calibrate { config } => {
            let catalog = match config {
                None => Catalog::builtin(),
                Some(path) => catalog_from(&path, &registry)?,
            };
            print!("{}", format_calibration(&calibration_report(&catalog)));
            Ok(())
        }
    }
}

/// Accepts a bare catalog document or an experiment config.
fn catalog_from(path: &Path, registry: &PolicyRegistry) -> Result<Catalog, ExperimentError> {
    let text = fs::read_to_string(path).map_err(|e| ExperimentError::Config {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let is_catalog = serde_json::from_str::<serde_json::Value>(&text)
        .map(|v| v.get("models").is_some())
        .unwrap_or(false);
    if !is_catalog {
        return ExperimentConfig::load(path, registry).map(|cfg| cfg.scenario.catalog);
    }
    let to_config = |e: CatalogError| match e {
        CatalogError::Schema { path, message } | CatalogError::Invariant { path, message } => {
            ExperimentError::Config { path, message }
        }
        other => ExperimentError::Config {
            path: path.display().to_string(),
            message: other.to_string(),
        },
    };
    parse_catalog(&text)
        .and_then(Catalog::new)
        .map_err(to_config)
}

fn create_dir(dir: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
        path: dir.display().to_string(),
        source,
    })
}
