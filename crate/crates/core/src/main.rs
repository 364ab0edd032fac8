use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use splitme::harness::{compare, run, write_outputs, ExperimentConfig, HarnessError};
use splitme::protocol::Protocol;

const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "splitme", version, about = "Split federated learning simulator for O-RAN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a TOML configuration.
    Run {
        config: PathBuf,
        /// Overrides the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; relative paths resolve against the output root.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        protocol: Option<Protocol>,
        /// Root for relative output directories.
        #[arg(long, env = "SPLITME_OUT")]
        out_root: Option<PathBuf>,
    },
    /// Tabulate finished runs that share a dataset seed.
    Compare {
        #[arg(required = true, num_args = 2..)]
        dirs: Vec<PathBuf>,
        /// Table destination.
        #[arg(long, default_value = "comparison.csv")]
        out: PathBuf,
    },
}

fn exit_for(e: &HarnessError) -> u8 {
    match e {
        HarnessError::Config(_) => EXIT_CONFIG,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            protocol,
            out_root,
        } => {
            let mut cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(p) = protocol {
                cfg.protocol = p;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            if let Some(root) = out_root.filter(|_| cfg.output_dir.is_relative()) {
                cfg.output_dir = root.join(&cfg.output_dir);
            }
            let report = match run(&cfg) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(exit_for(&e));
                }
            };
            if let Err(e) = write_outputs(&report, &cfg.output_dir) {
                eprintln!("error: {e}");
                return ExitCode::from(exit_for(&e));
            }
            let s = &report.summary;
            println!(
                "{}: {} rounds ({} skipped), accuracy {:.4}, volume {:.3} MB, time {:.3} s -> {}",
                s.protocol,
                s.rounds_executed + s.rounds_skipped,
                s.rounds_skipped,
                s.final_accuracy,
                s.total_volume_mb,
                s.total_time_ms / 1000.0,
                cfg.output_dir.display()
            );
            if let Some(f) = &s.failure {
                eprintln!("error: {f}");
                return ExitCode::from(EXIT_DIVERGED);
            }
            ExitCode::SUCCESS
        }
        Command::Compare { dirs, out } => {
            let refs: Vec<&std::path::Path> = dirs.iter().map(|d| d.as_path()).collect();
            match compare(&refs, &out) {
                Ok(rows) => {
                    println!("protocol,mean_k,volume_mb,time_s,comm_cost,rounds_to_target,events_per_client_round");
                    for r in rows {
                        println!(
                            "{},{:.2},{:.3},{:.3},{:.6e},{},{:.2}",
                            r.protocol,
                            r.mean_k,
                            r.volume_mb,
                            r.time_s,
                            r.comm_cost,
                            r.rounds_to_target.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
                            r.events_per_client_round
                        );
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(exit_for(&e))
                }
            }
        }
    }
}
