use clap::{Parser, Subcommand, ValueEnum};
use mfsbi_cli::report::{long_csv, monotonicity_warnings, pivot_csv, summarize};
use mfsbi_cli::{cmd_reference, cmd_run, cmd_sbc, cmd_simulate, read_rows, Algorithm, ExperimentConfig, Fidelity, TaskId};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Multifidelity simulation-based inference experiments.
#[derive(Parser)]
#[command(name = "mfsbi", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate prior draws at one fidelity and write a dataset file.
    Simulate {
        #[arg(long)]
        task: TaskId,
        #[arg(long, default_value = "high")]
        fidelity: Fidelity,
        /// Number of rows.
        #[arg(short, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; `.bin` selects the binary format.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Task options such as `delta=0.5` or `blob_side=64`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train and evaluate every (budget, seed) cell of a configuration.
    Run {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Generate or refresh the cached reference posteriors.
    Reference {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Aggregate a results directory into CSV.
    Report {
        results: PathBuf,
        #[arg(long, value_enum, default_value = "pivot")]
        format: Format,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulation-based calibration of the configured amortized estimator.
    Sbc {
        config: PathBuf,
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
        #[arg(long, default_value_t = 99)]
        draws: usize,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run the configuration with the MF-ABC baseline.
    Mfabc {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Pivot,
    Long,
}

fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut cfg = ExperimentConfig::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    cfg.apply_overrides(overrides).map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn print_summary(cfg: &ExperimentConfig, rows: &[mfsbi_core::metrics::MetricResult]) -> Result<(), String> {
    let cells = summarize(rows).map_err(|e| e.to_string())?;
    println!("{:<8} {:>10} {:<22} {:>10} {:>10} {:>4}", "metric", "hf_budget", "algorithm", "mean", "ci95", "n");
    for c in &cells {
        let flag = if c.n == 1 { " (n=1)" } else { "" };
        println!("{:<8} {:>10} {:<22} {:>10.4} {:>10.4} {:>4}{flag}", c.metric, c.hf_budget, c.label, c.mean, c.ci95, c.n);
    }
    for w in monotonicity_warnings(&cells) {
        log::warn!("{w}");
    }
    println!("results in {}", cfg.output.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Simulate { task, fidelity, n, seed, out, overrides } => {
            let mut cfg = ExperimentConfig { task, ..Default::default() };
            cfg.apply_overrides(&overrides).map_err(|e| e.to_string())?;
            let ext = if task == TaskId::Blob { "bin" } else { "csv" };
            let fid = match fidelity {
                Fidelity::Low => "low",
                Fidelity::Mid => "mid",
                Fidelity::High => "high",
            };
            let out = out.unwrap_or_else(|| PathBuf::from(format!("{task}-{fid}-{n}-s{seed}.{ext}")));
            let r = cmd_simulate(&cfg, fidelity, n as usize, seed, &out).map_err(|e| e.to_string())?;
            println!("{}", r.path.display());
            println!("rows {} replacements {} wall time {:.2}s", r.rows, r.replacements, r.seconds);
        }
        Command::Run { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            let r = cmd_run(&cfg).map_err(|e| e.to_string())?;
            log::info!("{} cells run, {} cached", r.executed, r.cached);
            print_summary(&cfg, &r.rows)?;
        }
        Command::Mfabc { config, overrides } => {
            let mut cfg = load(&config, &overrides)?;
            cfg.algorithm = Algorithm::MfAbc;
            let r = cmd_run(&cfg).map_err(|e| e.to_string())?;
            print_summary(&cfg, &r.rows)?;
        }
        Command::Reference { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            for p in cmd_reference(&cfg).map_err(|e| e.to_string())? {
                println!("{}", p.display());
            }
        }
        Command::Report { results, format, out } => {
            let rows: Vec<_> = read_rows(&results).map_err(|e| e.to_string())?.into_iter().map(|r| r.row).collect();
            let text = match format {
                Format::Pivot => {
                    let cells = summarize(&rows).map_err(|e| e.to_string())?;
                    for w in monotonicity_warnings(&cells) {
                        log::warn!("{w}");
                    }
                    pivot_csv(&cells)
                }
                Format::Long => long_csv(&rows),
            }
            .map_err(|e| e.to_string())?;
            match out {
                Some(p) => std::fs::write(&p, text).map_err(|e| format!("{}: {e}", p.display()))?,
                None => print!("{text}"),
            }
        }
        Command::Sbc { config, pairs, draws, overrides } => {
            let cfg = load(&config, &overrides)?;
            let r = cmd_sbc(&cfg, pairs, draws).map_err(|e| e.to_string())?;
            for (j, (p, h)) in r.p_values.iter().zip(&r.histograms).enumerate() {
                println!("θ{j}: chi2 p = {p:.4} histogram {h:?}");
            }
            println!("min p = {:.4}", r.min_p_value());
        }
    }
    Ok(())
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
