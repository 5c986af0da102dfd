use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use serde::Deserialize;
use vistabnet::bench::{
    emit_plot_data, read_report, run_experiment, write_outputs, ExperimentConfig, Mode, PlotKind, RunOptions,
};
use vistabnet::Error;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    Bench,
    Fewshot,
    Ablate,
    Backbone,
    Pretrain,
    Plot,
}

impl Command {
    fn mode(self) -> Option<Mode> {
        match self {
            Command::Bench => Some(Mode::Benchmark),
            Command::Fewshot => Some(Mode::Fewshot),
            Command::Ablate => Some(Mode::AblateLayers),
            Command::Backbone => Some(Mode::BackboneStudy),
            Command::Pretrain => Some(Mode::PretrainTiny),
            Command::Plot => None,
        }
    }
}

/// Benchmarks a frozen vision-transformer encoder on tabular data.
#[derive(Debug, Parser)]
#[command(name = "vistab", version)]
struct Cli {
    command: Command,
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Offset added to every run seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Concurrent (dataset, seed) runs.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// Sequential runs with zeroed timings for reproducible reports.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlotConfig {
    report: PathBuf,
    #[serde(default = "all_kinds")]
    kinds: Vec<PlotKind>,
}

fn all_kinds() -> Vec<PlotKind> {
    PlotKind::ALL.to_vec()
}

fn plot(config: &Path, out: &Path) -> vistabnet::Result<()> {
    let text = fs::read_to_string(config).map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
    let mut cfg: PlotConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
    if cfg.report.is_relative() {
        cfg.report = config.parent().unwrap_or(Path::new(".")).join(&cfg.report);
    }
    if !cfg.report.exists() {
        return Err(Error::Config(format!("file not found: {}", cfg.report.display())));
    }
    let report = read_report(&cfg.report)?;
    let dir = out.join("plotdata");
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    for kind in cfg.kinds {
        emit_plot_data(&report, kind, dir.join(kind.file_name()))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> vistabnet::Result<()> {
    let Some(mode) = cli.command.mode() else {
        return plot(&cli.config, &cli.out);
    };
    let mut cfg = ExperimentConfig::load(&cli.config)?;
    for s in &mut cfg.seeds {
        *s = s.wrapping_add(cli.seed);
    }
    cfg.validate(mode)?;
    let opts = RunOptions {
        parallel: cli.parallel,
        deterministic: cli.deterministic,
        checkpoint_dir: Some(cli.out.join("checkpoints")),
    };
    let report = run_experiment(mode, &cfg, &opts)?;
    write_outputs(&report, &cli.out)?;
    for f in &report.failures {
        eprintln!("warning: {} / {} / seed {}: {}", f.dataset, f.method, f.seed, f.error);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Config(_)) { 2 } else { 3 })
        }
    }
}
