use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pnca_cli::commands::{inspect, report_to_csv};
use pnca_cli::{exit, exit_code, resolve, run_experiment, RunArgs};

#[derive(Parser)]
#[command(
    name = "pnca",
    version,
    about = "Train and evaluate PNCA and baseline classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train over several trials and write confidence reports
    Run(Box<RunArgs>),
    /// Convert a JSON report to CSV
    Report {
        input: PathBuf,
        /// Write here instead of stdout
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Describe a dataset, model file, report or image directory
    Inspect {
        path: PathBuf,
        /// IDX labels matching an IDX image file
        #[arg(long)]
        labels: Option<PathBuf>,
    },
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("PNCA_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("PNCA_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn code(c: i32) -> ExitCode {
    ExitCode::from(c as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return code(if e.use_stderr() {
                exit::USAGE
            } else {
                exit::OK
            });
        }
    };
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return code(exit::USAGE);
    }
    match cli.command {
        Command::Run(args) => {
            let cfg = match resolve(&args) {
                Ok(cfg) => cfg,
                Err(e) => {
                    eprintln!("error: {e}");
                    return code(exit::USAGE);
                }
            };
            match run_experiment(&cfg) {
                Ok(report) => {
                    for (set, metrics) in &report.summary {
                        for (metric, s) in metrics {
                            if !metric.starts_with("count_") {
                                println!("{set:8} {metric:26} {:.4} ± {:.4}", s.mean, s.std);
                            }
                        }
                    }
                    println!("reports written to {}", cfg.output.display());
                    code(exit::OK)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    code(exit_code(&e))
                }
            }
        }
        Command::Report { input, output } => {
            let csv = match report_to_csv(&input) {
                Ok(csv) => csv,
                Err(e) => {
                    eprintln!("error: {e}");
                    return code(exit_code(&e));
                }
            };
            match output {
                None => {
                    print!("{csv}");
                    code(exit::OK)
                }
                Some(p) => match std::fs::write(&p, csv) {
                    Ok(()) => code(exit::OK),
                    Err(e) => {
                        eprintln!("error: {}: {e}", p.display());
                        code(exit::DATA)
                    }
                },
            }
        }
        Command::Inspect { path, labels } => match inspect(&path, labels.as_deref()) {
            Ok(text) => {
                print!("{text}");
                code(exit::OK)
            }
            Err(e) => {
                eprintln!("error: {e}");
                code(exit_code(&e))
            }
        },
    }
}
