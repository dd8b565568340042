//! Command-line driver for the cellcast pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 configuration or data error,
//! 3 training divergence.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use cellcast_core::config::RunConfig;
use cellcast_core::run::{
    run_all, stage_cluster, stage_evaluate, stage_ingest, stage_report, stage_synth, stage_train,
    OutPaths,
};
use cellcast_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "cellcast",
    version,
    about = "POI-clustered cellular traffic forecasting"
)]
struct Cli {
    /// Run configuration TOML. Built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Override the configured run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for training; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its planted-label sidecar.
    Synth,
    /// Validate a raw corpus into the canonical dataset.
    Ingest {
        /// Raw corpus CSV; defaults to the synthesized one in the out dir.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Fit the scaler and the per-POI clusterings.
    Cluster {
        /// Override the configured clusters per POI.
        #[arg(long)]
        k: Option<usize>,
        /// Override the configured retention ratio.
        #[arg(long)]
        retention_ratio: Option<f64>,
    },
    /// Train one forecaster per retained cluster.
    Train,
    /// Score test windows against the persistence baseline.
    Evaluate,
    /// Render the per-POI error table.
    Report,
    /// Run every stage in order.
    RunAll {
        /// Override the configured clusters per POI.
        #[arg(long)]
        k: Option<usize>,
        /// Override the configured retention ratio.
        #[arg(long)]
        retention_ratio: Option<f64>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        let code = match err {
            Error::Diverged(_) => 3,
            _ => 2,
        };
        std::process::exit(code);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
        if let Some(synth) = &mut config.synth {
            synth.seed = seed;
        }
    }
    let out = cli.out.as_path();
    let paths = OutPaths::new(out);

    match cli.command {
        Command::Synth => {
            let n_cells = stage_synth(&config, out)?;
            println!(
                "synthesized {n_cells} cells into {}",
                paths.corpus_csv().display()
            );
        }
        Command::Ingest { input } => {
            let (dataset, report) = stage_ingest(&config, out, input.as_deref())?;
            println!(
                "kept {} of {} cells ({} rows read)",
                report.cells_kept, report.cells_seen, report.rows_read
            );
            for (reason, count) in report.drop_counts() {
                println!("  dropped {count} ({reason})");
            }
            println!(
                "{} POI categories -> {}",
                dataset.taxonomy().categories().len(),
                paths.dataset_csv().display()
            );
        }
        Command::Cluster { k, retention_ratio } => {
            apply_cluster_overrides(&mut config, k, retention_ratio);
            let models = stage_cluster(&config, out)?;
            let total: usize = models.values().map(|m| m.k).sum();
            let retained: usize = models.values().map(|m| m.retained.len()).sum();
            println!(
                "clustered {} POIs: retained {retained} of {total} clusters -> {}",
                models.len(),
                paths.clusters_csv().display()
            );
        }
        Command::Train => {
            let manifest = stage_train(&config, out, cli.jobs)?;
            println!(
                "trained {} cluster models -> {}",
                manifest.entries.len(),
                paths.models_dir().display()
            );
        }
        Command::Evaluate => {
            let report = stage_evaluate(&config, out)?;
            println!(
                "overall MAPE: model {:.2} vs naive {:.2} ({} unmodeled cells)",
                report.overall_model_mape, report.overall_naive_mape, report.unmodeled_cells
            );
        }
        Command::Report => {
            print!("{}", stage_report(&config, out)?);
        }
        Command::RunAll { k, retention_ratio } => {
            apply_cluster_overrides(&mut config, k, retention_ratio);
            let summary = run_all(&config, out, cli.jobs)?;
            println!(
                "synthesized {} cells, kept {}, {} POIs, {} models trained",
                summary.cells_synthesized, summary.cells_kept, summary.n_pois, summary.n_models
            );
            println!();
            print!("{}", summary.table);
        }
    }
    Ok(())
}

fn apply_cluster_overrides(config: &mut RunConfig, k: Option<usize>, ratio: Option<f64>) {
    if let Some(k) = k {
        config.clustering.k = k;
    }
    if let Some(ratio) = ratio {
        config.clustering.retention_ratio = ratio;
    }
}
