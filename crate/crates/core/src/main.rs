use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use declora::harness::{self, validate_config, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "declora",
    version,
    about = "Decentralized LoRA training simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the acceptance checks and print one line per criterion.
    Verify {
        /// Print the report as JSON instead.
        #[arg(long)]
        json: bool,
    },
    /// Print n, beta, rho and degree statistics of the configured topology.
    TopologyReport {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load(path: &PathBuf) -> Result<ExperimentConfig, String> {
    let raw = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    validate_config(&raw).map_err(|e| format!("invalid config {}:\n{e}", path.display()))
}

fn run(cli: Cli) -> Result<bool, String> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = load(&config)?;
            let summary =
                harness::run_experiment(&cfg, out.as_deref()).map_err(|e| e.to_string())?;
            let dir = out.unwrap_or(cfg.output.clone());
            for p in &summary.points {
                let label = match (p.axis, p.value) {
                    (Some(a), Some(v)) => format!("{a}={v}"),
                    _ => "run".to_string(),
                };
                println!(
                    "{label}: mean final loss {:.6}, mean stationarity {:.4e}",
                    p.mean_final_loss, p.mean_stationarity
                );
            }
            if let Some(s) = summary.stationarity_slope {
                println!("stationarity slope vs T: {s:.4}");
            }
            let v = summary.total_bound_violations;
            if v.dev_a + v.dev_b > 0 {
                eprintln!(
                    "WARN: deviation exceeded its plug-in bound in {} (A) and {} (B) rounds",
                    v.dev_a, v.dev_b
                );
            }
            println!("wrote {}", dir.display());
            Ok(true)
        }
        Command::Verify { json } => {
            let mut all = true;
            let mut reports = Vec::new();
            for (_, check) in harness::verify::CRITERIA {
                let r = check();
                all &= r.passed;
                if !json {
                    println!("{}", r.line());
                }
                reports.push(r);
            }
            if json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&reports).map_err(|e| e.to_string())?
                );
            }
            Ok(all)
        }
        Command::TopologyReport { config } => {
            let cfg = load(&config)?;
            let r = harness::topology_report(&cfg).map_err(|e| e.to_string())?;
            println!("topology: {}", r.kind);
            println!("n: {}", r.n);
            println!("edges: {}", r.edges);
            println!("beta: {:.10}", r.beta);
            println!("rho: {:.10}", r.rho);
            println!(
                "degree: min {} max {} mean {:.3}",
                r.min_degree, r.max_degree, r.mean_degree
            );
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
