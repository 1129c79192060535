use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use unireg::harness::{
    collect_run_dirs, diagnose_dump, export_plot_data, run, run_id, sweep, Config,
};

#[derive(Parser)]
#[command(name = "unireg", version, about = "Adversarial uniformity regularization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one seeded experiment from a config file
    Train {
        /// Path to a key=value config file
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (default: runs/<run_id>)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override a config key, e.g. --override regularizer.gamma=0.2
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run one experiment across consecutive seeds
    Sweep {
        /// Path to a key=value config file
        config: PathBuf,
        /// First seed; runs use seed, seed+1, ...
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of seeded runs
        #[arg(long, default_value_t = 5)]
        runs: usize,
        /// Output directory (default: runs/sweep_<experiment>)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override a config key, e.g. --override regularizer.gamma=0.2
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print a distribution report for an embedding dump
    Diagnose {
        /// Path to an embeddings.txt dump
        embedding_file: PathBuf,
        /// Also write the JSON report to this file
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge run metric histories into one plot-ready TSV
    ExportPlots {
        /// A run directory, or a directory of run directories
        run_dir: PathBuf,
        /// Output TSV path (default: <run_dir>/plot_data.tsv)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Print one line, exiting quietly if the reader of a pipe has gone away.
fn emit(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    if let Err(e) = writeln!(out, "{text}") {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
    }
}

fn load_config(path: &Path, overrides: &[String]) -> Result<Config> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut config = Config::parse(&text)?;
    for entry in overrides {
        let (key, value) = entry
            .split_once('=')
            .with_context(|| format!("--override expects KEY=VALUE, got {entry:?}"))?;
        config.set(key.trim(), value.trim())?;
    }
    Ok(config)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, seed, out, overrides } => {
            let config = load_config(&config, &overrides)?;
            let out_dir =
                out.unwrap_or_else(|| PathBuf::from("runs").join(run_id(&config, seed)));
            let manifest = run(&config, seed, &out_dir)?;
            emit(&format!(
                "run {} finished in {:.1}s -> {}",
                manifest.run_id,
                manifest.wall_clock_seconds,
                out_dir.display()
            ));
            for (metric, value) in &manifest.summary {
                emit(&format!("  {metric} = {value}"));
            }
        }
        Command::Sweep { config, seed, runs, out, overrides } => {
            let config = load_config(&config, &overrides)?;
            let out_dir = out.unwrap_or_else(|| {
                PathBuf::from("runs").join(format!("sweep_{}", config.experiment().as_str()))
            });
            let manifests = sweep(&config, seed, runs, &out_dir)?;
            emit(&format!("{} runs -> {}", manifests.len(), out_dir.display()));
            for manifest in &manifests {
                emit(&format!("  {} ({:.1}s)", manifest.run_id, manifest.wall_clock_seconds));
            }
        }
        Command::Diagnose { embedding_file, out } => {
            let report = diagnose_dump(&embedding_file)?;
            let json = serde_json::to_string_pretty(&report)?;
            if let Some(out) = out {
                std::fs::write(&out, format!("{json}\n"))
                    .with_context(|| format!("writing {}", out.display()))?;
            }
            emit(&json);
        }
        Command::ExportPlots { run_dir, out } => {
            let dirs = collect_run_dirs(&run_dir)?;
            let refs: Vec<&Path> = dirs.iter().map(|p| p.as_path()).collect();
            let out_path = out.unwrap_or_else(|| run_dir.join("plot_data.tsv"));
            export_plot_data(&refs, &out_path)?;
            emit(&format!("wrote {} ({} runs)", out_path.display(), refs.len()));
        }
    }
    Ok(())
}
