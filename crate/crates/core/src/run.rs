//! Stage orchestration over an artifact directory.
//!
//! Every stage reads its inputs from the output directory, verifies they are
//! present and consistent with the active configuration, and writes its own
//! artifacts back. Stages therefore compose either as one `run_all` call or
//! as separate invocations across processes; missing or out-of-date inputs
//! surface as [`Error::StaleArtifact`] rather than silent recomputation.
//!
//! Layout under the output directory:
//!
//! ```text
//! config.toml            resolved configuration snapshot (run_all only)
//! corpus.csv             synthesized raw corpus
//! planted.csv            generator's cell -> shape sidecar
//! dataset.csv            canonical retained corpus
//! ingest_report.json     drop accounting
//! scaler.json            per-cell standardization statistics
//! clusters.json          per-POI clustering models
//! clusters.csv           per-cluster size/retention table
//! models/<poi>/<c>.model one checkpoint per retained cluster
//! models/manifest.json   checkpoint index with the architecture hash
//! report.json            full evaluation report
//! report.csv             per-POI MAPE table
//! predictions.csv        per-window forecasts in original units
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{self, mix_seed, ClusterModel, KMeansParams};
use crate::config::RunConfig;
use crate::dataset::{ingest_csv, IngestConfig, IngestReport, Region, TrafficDataset};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_pipeline, write_predictions_csv, EvaluationReport};
use crate::nbeats::{
    load_model_matching, save_model, train_cluster_model, CheckpointHeader, NBeatsNet, TrainParams,
};
use crate::preprocess::{make_windows, Scaler, Window};
use crate::synth;

/// Artifact locations under one output directory.
#[derive(Debug, Clone)]
pub struct OutPaths {
    root: PathBuf,
}

impl OutPaths {
    pub fn new(root: &Path) -> OutPaths {
        OutPaths {
            root: root.to_path_buf(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_toml(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn corpus_csv(&self) -> PathBuf {
        self.root.join("corpus.csv")
    }

    pub fn planted_csv(&self) -> PathBuf {
        self.root.join("planted.csv")
    }

    pub fn dataset_csv(&self) -> PathBuf {
        self.root.join("dataset.csv")
    }

    pub fn ingest_report_json(&self) -> PathBuf {
        self.root.join("ingest_report.json")
    }

    pub fn scaler_json(&self) -> PathBuf {
        self.root.join("scaler.json")
    }

    pub fn clusters_json(&self) -> PathBuf {
        self.root.join("clusters.json")
    }

    pub fn clusters_csv(&self) -> PathBuf {
        self.root.join("clusters.csv")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn model_file(&self, poi: u16, cluster: usize) -> PathBuf {
        self.models_dir()
            .join(poi.to_string())
            .join(format!("{cluster}.model"))
    }

    pub fn models_manifest_json(&self) -> PathBuf {
        self.models_dir().join("manifest.json")
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report.csv")
    }

    pub fn predictions_csv(&self) -> PathBuf {
        self.root.join("predictions.csv")
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path, produced_by: &str) -> Result<String> {
    if !path.exists() {
        return Err(Error::StaleArtifact(format!(
            "{} is missing; run the {produced_by} stage first",
            path.display()
        )));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Generate the corpus and its planted-label sidecar. Returns the cell count.
pub fn stage_synth(config: &RunConfig, out: &Path) -> Result<usize> {
    config.validate()?;
    let paths = OutPaths::new(out);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let synth_config = config.synth_config();
    if synth_config.n_weeks != config.dataset.n_weeks {
        return Err(Error::Config(format!(
            "synth n_weeks ({}) disagrees with dataset n_weeks ({})",
            synth_config.n_weeks, config.dataset.n_weeks
        )));
    }
    let output = synth::generate(&synth_config)?;
    write_file(&paths.corpus_csv(), output.corpus_csv.as_bytes())?;
    write_file(&paths.planted_csv(), output.planted_csv.as_bytes())?;
    Ok(output.n_cells)
}

/// Ingest a raw corpus (default: the synthesized one) into the canonical
/// retained dataset.
pub fn stage_ingest(
    config: &RunConfig,
    out: &Path,
    input: Option<&Path>,
) -> Result<(TrafficDataset, IngestReport)> {
    config.validate()?;
    let paths = OutPaths::new(out);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let default_input = paths.corpus_csv();
    let source = input.unwrap_or(&default_input);
    if !source.exists() {
        return Err(Error::StaleArtifact(format!(
            "{} is missing; run the synth stage or pass an input corpus",
            source.display()
        )));
    }
    let (dataset, report) = ingest_csv(source, &config.dataset)?;
    let bytes = dataset.write_csv(Vec::new())?;
    write_file(&paths.dataset_csv(), &bytes)?;
    let report_json =
        serde_json::to_string_pretty(&report).map_err(|e| Error::Serde(e.to_string()))?;
    write_file(&paths.ingest_report_json(), report_json.as_bytes())?;
    Ok((dataset, report))
}

/// Reload the canonical dataset. The canonical file is already filtered and
/// carries resolved category names, so bucketing and outlier trimming are
/// disabled on the way back in.
pub fn load_dataset(config: &RunConfig, out: &Path) -> Result<TrafficDataset> {
    let paths = OutPaths::new(out);
    let path = paths.dataset_csv();
    if !path.exists() {
        return Err(Error::StaleArtifact(format!(
            "{} is missing; run the ingest stage first",
            path.display()
        )));
    }
    let relaxed = IngestConfig {
        epoch: None,
        coverage: 1.0,
        extreme_percentile: 100.0,
        poi_labels: None,
        others_fallback: false,
        ..config.dataset.clone()
    };
    let (dataset, _) = ingest_csv(&path, &relaxed)?;
    Ok(dataset)
}

fn load_scaler(config: &RunConfig, paths: &OutPaths) -> Result<Scaler> {
    let scaler = Scaler::from_json(&read_file(&paths.scaler_json(), "cluster")?)?;
    if scaler.train_weeks != config.dataset.train_weeks {
        return Err(Error::StaleArtifact(format!(
            "scaler was fit on {} training weeks, configuration says {}",
            scaler.train_weeks, config.dataset.train_weeks
        )));
    }
    Ok(scaler)
}

fn load_clusters(paths: &OutPaths) -> Result<BTreeMap<u16, ClusterModel>> {
    serde_json::from_str(&read_file(&paths.clusters_json(), "cluster")?)
        .map_err(|e| Error::Serde(e.to_string()))
}

/// Fit the scaler and the per-POI clusterings.
pub fn stage_cluster(config: &RunConfig, out: &Path) -> Result<BTreeMap<u16, ClusterModel>> {
    config.validate()?;
    let paths = OutPaths::new(out);
    let dataset = load_dataset(config, out)?;
    let scaler = Scaler::fit(&dataset);
    write_file(&paths.scaler_json(), scaler.to_json().as_bytes())?;
    let params = KMeansParams {
        k: config.clustering.k,
        seed: config.seed,
        max_iter: config.clustering.max_iter,
        tol: config.clustering.tol,
    };
    let models = clustering::cluster_pipeline(
        &dataset,
        &scaler,
        &params,
        config.clustering.retention_ratio,
    )?;
    let json = serde_json::to_string_pretty(&models).map_err(|e| Error::Serde(e.to_string()))?;
    write_file(&paths.clusters_json(), json.as_bytes())?;
    let csv = clustering::write_cluster_report(&models, Vec::new())?;
    write_file(&paths.clusters_csv(), &csv)?;
    Ok(models)
}

/// One checkpoint the training stage produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub poi: u16,
    pub cluster: usize,
    /// Path relative to the models directory.
    pub file: String,
    pub seed: u64,
    pub n_windows: usize,
    pub epochs_trained: usize,
    pub best_val_loss: f64,
}

/// Index over every checkpoint of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelsManifest {
    /// Content hash of the bound architecture; evaluation refuses to load
    /// checkpoints trained under a different one.
    pub config_hash: String,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

/// Train one forecaster per retained cluster. `jobs` bounds the worker
/// threads (0 picks the environment default); results are identical either
/// way because every cluster owns a derived seed.
pub fn stage_train(config: &RunConfig, out: &Path, jobs: usize) -> Result<ModelsManifest> {
    config.validate()?;
    let paths = OutPaths::new(out);
    let dataset = load_dataset(config, out)?;
    let scaler = load_scaler(config, &paths)?;
    let clusters = load_clusters(&paths)?;
    let windows = make_windows(&dataset, &scaler, Region::Train)?;

    let mut tasks: BTreeMap<(u16, usize), Vec<Window>> = BTreeMap::new();
    for window in &windows.windows {
        let cell = &dataset.cells()[window.cell_index];
        let model = clusters.get(&cell.poi.id).ok_or_else(|| {
            Error::StaleArtifact(format!("clusters carry no POI id {}", cell.poi.id))
        })?;
        let cluster = *model.assignments.get(&cell.cell_id).ok_or_else(|| {
            Error::StaleArtifact(format!("clusters carry no cell {}", cell.cell_id))
        })?;
        if model.retained.contains(&cluster) {
            tasks
                .entry((cell.poi.id, cluster))
                .or_default()
                .push(window.clone());
        }
    }

    for poi in clusters.keys() {
        let dir = paths.models_dir().join(poi.to_string());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }

    let nbeats_config = config.nbeats_config();
    let task_list: Vec<(&(u16, usize), &Vec<Window>)> = tasks.iter().collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let entries: Vec<ManifestEntry> = pool.install(|| {
        task_list
            .par_iter()
            .map(|((poi, cluster), cluster_windows)| {
                let params = TrainParams {
                    seed: mix_seed(config.seed, *poi as u64, *cluster as u64 + 1),
                    ..config.training
                };
                let (net, log) = train_cluster_model(cluster_windows, &nbeats_config, &params)?;
                let header = CheckpointHeader {
                    config: nbeats_config.clone(),
                    seed: params.seed,
                    poi_id: *poi,
                    cluster: *cluster,
                    param_count: net.param_count(),
                    epochs_trained: log.epochs.len(),
                    best_val_loss: log.best_val_loss,
                };
                save_model(&paths.model_file(*poi, *cluster), &net, &header)?;
                Ok(ManifestEntry {
                    poi: *poi,
                    cluster: *cluster,
                    file: format!("{poi}/{cluster}.model"),
                    seed: params.seed,
                    n_windows: cluster_windows.len(),
                    epochs_trained: log.epochs.len(),
                    best_val_loss: log.best_val_loss,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let manifest = ModelsManifest {
        config_hash: nbeats_config.content_hash(),
        seed: config.seed,
        entries,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
    write_file(&paths.models_manifest_json(), json.as_bytes())?;
    Ok(manifest)
}

fn load_models(
    config: &RunConfig,
    paths: &OutPaths,
    clusters: &BTreeMap<u16, ClusterModel>,
) -> Result<BTreeMap<(u16, usize), NBeatsNet>> {
    let manifest: ModelsManifest =
        serde_json::from_str(&read_file(&paths.models_manifest_json(), "train")?)
            .map_err(|e| Error::Serde(e.to_string()))?;
    let expected = config.nbeats_config();
    if manifest.config_hash != expected.content_hash() {
        return Err(Error::StaleArtifact(
            "checkpoints were trained under a different architecture; retrain".into(),
        ));
    }
    let mut models = BTreeMap::new();
    for (poi, model) in clusters {
        for &cluster in &model.retained {
            let path = paths.model_file(*poi, cluster);
            if !path.exists() {
                return Err(Error::MissingModel { poi: *poi, cluster });
            }
            let (net, header) = load_model_matching(&path, &expected)?;
            if header.poi_id != *poi || header.cluster != cluster {
                return Err(Error::StaleArtifact(format!(
                    "{} belongs to POI {} cluster {}",
                    path.display(),
                    header.poi_id,
                    header.cluster
                )));
            }
            models.insert((*poi, cluster), net);
        }
    }
    Ok(models)
}

/// Score every modeled test window against the persistence baseline.
pub fn stage_evaluate(config: &RunConfig, out: &Path) -> Result<EvaluationReport> {
    config.validate()?;
    let paths = OutPaths::new(out);
    let dataset = load_dataset(config, out)?;
    let scaler = load_scaler(config, &paths)?;
    let clusters = load_clusters(&paths)?;
    let models = load_models(config, &paths, &clusters)?;
    let (report, predictions) =
        evaluate_pipeline(&dataset, &scaler, &clusters, &models, &config.evaluation)?;
    write_file(&paths.report_json(), report.to_json().as_bytes())?;
    let csv = write_predictions_csv(&predictions, Vec::new())?;
    write_file(&paths.predictions_csv(), &csv)?;
    Ok(report)
}

/// Fixed-width rendering of the evaluation table.
pub fn render_report(report: &EvaluationReport) -> String {
    let name_width = report
        .rows
        .iter()
        .map(|r| r.poi.len())
        .chain([7])
        .max()
        .unwrap_or(7);
    let mut out = String::new();
    out.push_str(&format!(
        "{:<name_width$}  {:>10} {:>10} {:>7} {:>8}\n",
        "poi", "model", "naive", "cells", "windows"
    ));
    for row in &report.rows {
        out.push_str(&format!(
            "{:<name_width$}  {:>10.2} {:>10.2} {:>7} {:>8}\n",
            row.poi, row.model_mape, row.naive_mape, row.n_cells, row.n_windows
        ));
    }
    let n_cells: usize = report.rows.iter().map(|r| r.n_cells).sum();
    let n_windows: usize = report.rows.iter().map(|r| r.n_windows).sum();
    out.push_str(&format!(
        "{:<name_width$}  {:>10.2} {:>10.2} {:>7} {:>8}\n",
        "Overall", report.overall_model_mape, report.overall_naive_mape, n_cells, n_windows
    ));
    if report.unmodeled_cells > 0 {
        out.push_str(&format!(
            "({} cells in unretained clusters were not modeled)\n",
            report.unmodeled_cells
        ));
    }
    out
}

/// Write the per-POI table CSV from the stored report and return the rendered
/// text form.
pub fn stage_report(config: &RunConfig, out: &Path) -> Result<String> {
    config.validate()?;
    let paths = OutPaths::new(out);
    let report = EvaluationReport::from_json(&read_file(&paths.report_json(), "evaluate")?)?;
    let csv = report.write_csv(Vec::new())?;
    write_file(&paths.report_csv(), &csv)?;
    Ok(render_report(&report))
}

/// Everything a complete run produced.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub cells_synthesized: usize,
    pub cells_kept: usize,
    pub n_pois: usize,
    pub n_models: usize,
    pub report: EvaluationReport,
    pub table: String,
}

/// Run every stage in order against one output directory.
pub fn run_all(config: &RunConfig, out: &Path, jobs: usize) -> Result<RunSummary> {
    config.validate()?;
    let paths = OutPaths::new(out);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    config.save(&paths.config_toml())?;
    let cells_synthesized = stage_synth(config, out)?;
    let (dataset, _report) = stage_ingest(config, out, None)?;
    let clusters = stage_cluster(config, out)?;
    let manifest = stage_train(config, out, jobs)?;
    let report = stage_evaluate(config, out)?;
    let table = stage_report(config, out)?;
    Ok(RunSummary {
        cells_synthesized,
        cells_kept: dataset.cells().len(),
        n_pois: clusters.len(),
        n_models: manifest.entries.len(),
        report,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{PoiSpec, SynthConfig};

    fn small_config() -> RunConfig {
        let mut config = RunConfig {
            seed: 11,
            ..RunConfig::default()
        };
        config.dataset.n_weeks = 14;
        config.dataset.train_weeks = 10;
        config.dataset.lookback = 3;
        config.dataset.horizon = 2;
        config.clustering.k = 2;
        config.model.n_stacks = 1;
        config.model.blocks_per_stack = 1;
        config.model.fc_layers_per_block = 1;
        config.model.fc_width = 8;
        config.model.theta_dim = 4;
        config.training.max_epochs = 4;
        config.training.patience = 2;
        config.synth = Some(SynthConfig {
            seed: 11,
            n_weeks: 14,
            poi_specs: vec![
                PoiSpec {
                    name: "Hospital".into(),
                    n_cells: 6,
                    shape_weights: [1.0, 1.0, 0.0, 0.0],
                    noise_scale: 0.05,
                    volume_scale: (50.0, 150.0),
                },
                PoiSpec {
                    name: "Village".into(),
                    n_cells: 5,
                    shape_weights: [0.0, 1.0, 0.0, 1.0],
                    noise_scale: 0.05,
                    volume_scale: (10.0, 40.0),
                },
            ],
            dropout_probability: 0.0,
            zero_week_probability: 0.0,
        });
        config
    }

    fn collect_files(root: &Path) -> BTreeMap<String, Vec<u8>> {
        fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
            for entry in fs::read_dir(dir).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    walk(&path, root, out);
                } else {
                    let rel = path
                        .strip_prefix(root)
                        .unwrap()
                        .to_string_lossy()
                        .into_owned();
                    out.insert(rel, fs::read(&path).unwrap());
                }
            }
        }
        let mut out = BTreeMap::new();
        walk(root, root, &mut out);
        out
    }

    #[test]
    fn run_all_produces_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config();
        let summary = run_all(&config, dir.path(), 1).unwrap();

        let paths = OutPaths::new(dir.path());
        for path in [
            paths.config_toml(),
            paths.corpus_csv(),
            paths.planted_csv(),
            paths.dataset_csv(),
            paths.ingest_report_json(),
            paths.scaler_json(),
            paths.clusters_json(),
            paths.clusters_csv(),
            paths.models_manifest_json(),
            paths.report_json(),
            paths.report_csv(),
            paths.predictions_csv(),
        ] {
            assert!(path.exists(), "{} missing", path.display());
        }

        assert_eq!(summary.cells_synthesized, 11);
        assert_eq!(summary.cells_kept, 11);
        assert_eq!(summary.n_pois, 2);
        assert!(summary.n_models >= 2);
        assert_eq!(summary.report.rows.len(), 2);
        assert!(summary.table.contains("Overall"));

        let modeled: usize = summary.report.rows.iter().map(|r| r.n_cells).sum();
        assert_eq!(modeled + summary.report.unmodeled_cells, 11);
    }

    #[test]
    fn run_all_is_byte_identical_per_seed() {
        let config = small_config();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        run_all(&config, dir_a.path(), 1).unwrap();
        run_all(&config, dir_b.path(), 2).unwrap();
        let files_a = collect_files(dir_a.path());
        let files_b = collect_files(dir_b.path());
        assert_eq!(
            files_a.keys().collect::<Vec<_>>(),
            files_b.keys().collect::<Vec<_>>()
        );
        for (name, bytes) in &files_a {
            assert_eq!(bytes, &files_b[name], "{name} differs between runs");
        }
    }

    #[test]
    fn stages_demand_their_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config();
        assert!(matches!(
            stage_ingest(&config, dir.path(), None),
            Err(Error::StaleArtifact(_))
        ));
        assert!(matches!(
            stage_cluster(&config, dir.path()),
            Err(Error::StaleArtifact(_))
        ));
        assert!(matches!(
            stage_evaluate(&config, dir.path()),
            Err(Error::StaleArtifact(_))
        ));

        stage_synth(&config, dir.path()).unwrap();
        stage_ingest(&config, dir.path(), None).unwrap();
        stage_cluster(&config, dir.path()).unwrap();
        // Models are still missing.
        assert!(matches!(
            stage_evaluate(&config, dir.path()),
            Err(Error::StaleArtifact(_))
        ));
    }

    #[test]
    fn evaluation_rejects_checkpoints_from_other_architectures() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config();
        run_all(&config, dir.path(), 1).unwrap();

        let mut widened = config.clone();
        widened.model.fc_width = 16;
        assert!(matches!(
            stage_evaluate(&widened, dir.path()),
            Err(Error::StaleArtifact(_))
        ));
    }

    #[test]
    fn scaler_from_other_split_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config();
        run_all(&config, dir.path(), 1).unwrap();

        let mut shifted = config.clone();
        shifted.dataset.train_weeks = 9;
        assert!(matches!(
            stage_train(&shifted, dir.path(), 1),
            Err(Error::StaleArtifact(_))
        ));
    }
}
