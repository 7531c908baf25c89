use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fedsim_core::config::defaults_table;
use fedsim_core::harness::{run_with, RunOptions, Simulation};
use fedsim_core::report::{render_svg, write_csv, CsvTable};
use fedsim_core::{selftest, AlgorithmKind, RoundMetrics, RunConfig};

#[derive(Parser)]
#[command(
    name = "fedsim",
    version,
    about = "Deterministic federated learning simulator",
    after_help = after_help()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its per-round CSV to `output_path`.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. `--set rounds=10`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run several algorithms on one base config with identical seeds.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        algorithms: Vec<AlgorithmKind>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print per-client shard sizes and label histograms.
    PartitionInspect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Draw CSV columns against `round` as an SVG line chart.
    Plot {
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        columns: Vec<String>,
        #[arg(long, default_value = "round")]
        x: String,
    },
    /// Run the built-in invariant batteries.
    Selftest,
}

fn after_help() -> String {
    format!(
        "Config keys and defaults:\n{}\nThe FEDSIM_THREADS environment variable caps the worker pool.",
        defaults_table()
    )
}

fn load(config: &Path, overrides: &[String]) -> Result<RunConfig> {
    RunConfig::from_path_with_overrides(config, overrides)
        .with_context(|| format!("reading config {}", config.display()))
}

fn final_accuracy(metrics: &[RoundMetrics]) -> Option<f64> {
    metrics.iter().rev().find_map(|m| m.test_accuracy)
}

fn run_one(cfg: &RunConfig) -> Result<Vec<RoundMetrics>> {
    let out = run_with(cfg, RunOptions::default())?;
    write_csv(&out.metrics, &cfg.output_path)
        .with_context(|| format!("writing {}", cfg.output_path.display()))?;
    Ok(out.metrics)
}

/// `dir/metrics.csv` becomes `dir/metrics_fedavg.csv`.
fn suffixed(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    path.with_file_name(format!("{stem}_{tag}.{ext}"))
}

fn fmt_acc(acc: Option<f64>) -> String {
    acc.map_or_else(|| "-".to_string(), |a| format!("{:.2}%", 100.0 * a))
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            let metrics = run_one(&cfg)?;
            println!(
                "{}: {} rounds, final accuracy {}, wrote {}",
                cfg.algorithm,
                metrics.len(),
                fmt_acc(final_accuracy(&metrics)),
                cfg.output_path.display()
            );
        }
        Command::Compare {
            config,
            algorithms,
            overrides,
        } => {
            let base = load(&config, &overrides)?;
            println!("{:<12} {:>10}  csv", "algorithm", "accuracy");
            for kind in algorithms {
                let cfg = RunConfig {
                    algorithm: kind,
                    output_path: suffixed(&base.output_path, kind.name()),
                    ..base.clone()
                };
                let metrics = run_one(&cfg)?;
                println!(
                    "{:<12} {:>10}  {}",
                    kind.name(),
                    fmt_acc(final_accuracy(&metrics)),
                    cfg.output_path.display()
                );
            }
        }
        Command::PartitionInspect { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            let sim = Simulation::new(cfg)?;
            let labels = sim.train_set().labels();
            let classes = sim.train_set().num_classes();
            let mut out = String::from("client,size,histogram\n");
            for (id, shard) in sim.shards().iter().enumerate() {
                let hist = shard.label_histogram(labels, classes);
                let hist: Vec<String> = hist.iter().map(usize::to_string).collect();
                out.push_str(&format!("{id},{},{}\n", shard.len(), hist.join(" ")));
            }
            match std::io::stdout().write_all(out.as_bytes()) {
                Err(e) if e.kind() != ErrorKind::BrokenPipe => return Err(e.into()),
                _ => {}
            }
        }
        Command::Plot {
            csv,
            out,
            columns,
            x,
        } => {
            let table = CsvTable::read(&csv).with_context(|| format!("reading {}", csv.display()))?;
            let series = columns
                .iter()
                .map(|c| table.series(&x, c))
                .collect::<fedsim_core::Result<Vec<_>>>()?;
            render_svg(&series, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Selftest => {
            let reports = selftest::run_all();
            let mut ok = true;
            for r in &reports {
                let status = if r.passed { "PASS" } else { "FAIL" };
                println!("{status} {:<12} {:>8.1} ms {}", r.name, r.elapsed.as_secs_f64() * 1e3, r.detail);
                ok &= r.passed;
            }
            if !ok {
                bail!("selftest failed");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
