//! Experiment driver: dataset generation, grid runs, dataset analyses and
//! report generation, all from declarative JSON configs.
//!
//! Exit codes: 0 success, 1 when some grid cells failed, 2 for config or
//! environment errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use moodcast_core::analysis;
use moodcast_core::data::class_counts;
use moodcast_core::error::ExpError;
use moodcast_core::exp::{self, RunStatus, RunSummary};
use moodcast_core::io;
use moodcast_core::schema::FeatureSchema;
use moodcast_core::syngen::{self, GeneratorConfig};

#[derive(Parser)]
#[command(
    name = "moodcast",
    version,
    about = "Benchmark harness for forecasting mental-health severity from passive sensing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset CSV plus manifest.
    Generate {
        /// Generator config JSON; omitted, the reference configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every (model, feature config, seed) cell of an experiment.
    Run {
        /// Experiment config JSON.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for result records and artifacts.
        #[arg(long)]
        out: PathBuf,
        /// Worker processes; 0 or 1 runs cells in this process.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Replace the config's seed list with this single seed.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Run the grid with the expanding-window protocol (T = 7..=14) on.
    Early {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Dataset analyses: class-similarity matrix and per-user feature
    /// importance dispersion, written as CSV.
    Analyze {
        /// Dataset CSV (as written by generate).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize stored result records as markdown and CSV tables.
    Report {
        /// Experiment output directory holding results/.
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute one grid cell by index; spawned by the worker pool.
    #[command(hide = true, name = "run-cell")]
    RunCell {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cell: usize,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode, ExpError> {
    match command {
        Command::Generate { config, out } => generate(config.as_deref(), &out),
        Command::Run { config, out, workers, seed_override } => {
            run(&config, &out, workers, seed_override, false)
        }
        Command::Early { config, out, workers, seed_override } => {
            run(&config, &out, workers, seed_override, true)
        }
        Command::Analyze { data, out } => analyze(&data, &out),
        Command::Report { out } => report(&out),
        Command::RunCell { config, out, cell } => {
            let cfg = exp::load_config(&config)?;
            let record = exp::run_cell(&cfg, &out, cell)?;
            Ok(match record.status {
                RunStatus::Ok => ExitCode::SUCCESS,
                RunStatus::Failed => ExitCode::from(1),
            })
        }
    }
}

fn generate(config: Option<&Path>, out: &Path) -> Result<ExitCode, ExpError> {
    let generator = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str::<GeneratorConfig>(&text)?
        }
        None => GeneratorConfig::default(),
    };
    let dataset = syngen::generate(&generator)?;
    io::export_csv(&dataset, FeatureSchema::canonical(), out)?;
    let counts = class_counts(&dataset);
    println!(
        "wrote {}: {} windows across {} participants, class counts {:?}, fingerprint {}",
        out.display(),
        dataset.len(),
        dataset.users().count(),
        counts,
        dataset.fingerprint()
    );
    Ok(ExitCode::SUCCESS)
}

fn run(
    config_path: &Path,
    out: &Path,
    workers: usize,
    seed_override: Option<u64>,
    early: bool,
) -> Result<ExitCode, ExpError> {
    let mut config = exp::parse_config(config_path)?;
    if early {
        config.protocols.early_curve = true;
    }
    if let Some(seed) = seed_override {
        config.seeds = vec![seed];
    }
    let summary = if workers <= 1 {
        exp::run_grid(&config, out)?
    } else {
        exp::run_grid_processes(&config, out, workers)?
    };
    print_summary(&summary);
    Ok(if summary.failed > 0 { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn print_summary(summary: &RunSummary) {
    println!(
        "{} cells: {} executed, {} cached, {} failed",
        summary.total, summary.executed, summary.skipped, summary.failed
    );
}

fn analyze(data: &Path, out: &Path) -> Result<ExitCode, ExpError> {
    let imported = io::import_csv(data)?;
    let dataset = imported.dataset;
    std::fs::create_dir_all(out)?;

    let all: Vec<usize> = (0..dataset.len()).collect();
    let similarity = analysis::class_similarity_matrix(&dataset, &all)
        .map_err(|e| ExpError::Config(format!("similarity analysis: {e}")))?;
    io::write_text(&out.join("class_similarity.csv"), &similarity.to_csv())?;

    let dispersion = analysis::importance_dispersion(&dataset, FeatureSchema::canonical())
        .map_err(|e| ExpError::Config(format!("importance analysis: {e}")))?;
    io::write_text(&out.join("importance_dispersion.csv"), &dispersion.to_csv())?;
    io::write_text(&out.join("importance_per_user.csv"), &dispersion.per_user_csv())?;

    println!(
        "analyzed {} windows: similarity matrix and importances for {} participants \
         ({} skipped) written to {}",
        dataset.len(),
        dispersion.users.len(),
        dispersion.skipped.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn report(out: &Path) -> Result<ExitCode, ExpError> {
    let records = exp::read_records(out)?;
    if records.is_empty() {
        eprintln!("no result records under {}", exp::results_dir(out).display());
        return Ok(ExitCode::from(2));
    }
    let tables = exp::report_tables(&records);
    io::write_text(&out.join("report.md"), &tables.markdown)?;
    io::write_text(&out.join("report.csv"), &tables.csv)?;
    print!("{}", tables.markdown);
    Ok(ExitCode::SUCCESS)
}
