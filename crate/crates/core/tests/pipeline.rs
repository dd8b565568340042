//! Cross-module flows through the public library API.

use std::collections::BTreeMap;

use cellcast_core::clustering::{cluster_pipeline, fit_kmeans, KMeansParams};
use cellcast_core::dataset::{ingest_reader, Channel, DropReason, IngestConfig, Region};
use cellcast_core::evaluate::{evaluate_pipeline, EvalOptions};
use cellcast_core::nbeats::{
    load_model, save_model, train_cluster_model, CheckpointHeader, NBeatsConfig, TrainParams,
};
use cellcast_core::preprocess::{make_windows, Scaler, Window};
use cellcast_core::synth::{generate, PoiSpec, SynthConfig};

fn corpus_config(n_cells: usize, noise: f64) -> SynthConfig {
    SynthConfig {
        seed: 17,
        n_weeks: 31,
        poi_specs: vec![PoiSpec {
            name: "Hospital".into(),
            n_cells,
            shape_weights: [1.0, 1.0, 0.0, 0.0],
            noise_scale: noise,
            volume_scale: (50.0, 200.0),
        }],
        dropout_probability: 0.0,
        zero_week_probability: 0.0,
    }
}

fn lenient_ingest() -> IngestConfig {
    IngestConfig {
        coverage: 1.0,
        extreme_percentile: 100.0,
        ..IngestConfig::default()
    }
}

#[test]
fn generator_faults_surface_as_ingest_drops() {
    let mut config = corpus_config(40, 0.1);
    config.dropout_probability = 0.3;
    config.zero_week_probability = 0.3;
    let out = generate(&config).unwrap();

    // Predict each cell's fate from the emitted rows alone: a short cell is
    // incomplete, a full cell with a zero week is dropped for the zero.
    let mut weeks_per_cell: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for line in out.corpus_csv.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        weeks_per_cell
            .entry(fields[0].to_string())
            .or_default()
            .push(fields[3].parse().unwrap());
    }
    let mut expect_incomplete = 0;
    let mut expect_zero = 0;
    let mut expect_kept = 0;
    for values in weeks_per_cell.values() {
        if values.len() < 31 {
            expect_incomplete += 1;
        } else if values.contains(&0.0) {
            expect_zero += 1;
        } else {
            expect_kept += 1;
        }
    }
    assert!(
        expect_incomplete > 0 && expect_zero > 0,
        "faults did not fire"
    );

    let (dataset, report) = ingest_reader(out.corpus_csv.as_bytes(), &lenient_ingest()).unwrap();
    let drops = report.drop_counts();
    assert_eq!(
        drops.get(&DropReason::Incomplete).copied().unwrap_or(0),
        expect_incomplete
    );
    assert_eq!(
        drops.get(&DropReason::ZeroDownlink).copied().unwrap_or(0),
        expect_zero
    );
    assert_eq!(dataset.cells().len(), expect_kept);
    assert_eq!(report.cells_seen, 40);
}

#[test]
fn planted_shapes_recovered_through_the_full_preprocessing_path() {
    let out = generate(&corpus_config(24, 0.05)).unwrap();
    let (dataset, _) = ingest_reader(out.corpus_csv.as_bytes(), &lenient_ingest()).unwrap();
    let scaler = Scaler::fit(&dataset);
    let params = KMeansParams {
        k: 2,
        seed: 3,
        ..Default::default()
    };
    let clusters = cluster_pipeline(&dataset, &scaler, &params, 0.2).unwrap();
    let model = clusters.values().next().unwrap();

    let planted: BTreeMap<String, usize> = out
        .planted_csv
        .lines()
        .skip(1)
        .map(|l| {
            let mut fields = l.split(',');
            let id = fields.next().unwrap().to_string();
            (id, fields.next().unwrap().parse().unwrap())
        })
        .collect();

    // Exact recovery up to relabeling: the fitted label must be a bijection
    // of the planted one.
    let mut mapping: BTreeMap<usize, usize> = BTreeMap::new();
    for (cell, &fitted) in &model.assignments {
        let truth = planted[cell.as_str()];
        let entry = mapping.entry(fitted).or_insert(truth);
        assert_eq!(*entry, truth, "cluster {fitted} mixes planted shapes");
    }
    assert_eq!(mapping.len(), 2);
}

#[test]
fn in_memory_pipeline_matches_window_accounting() {
    let out = generate(&corpus_config(12, 0.05)).unwrap();
    let (dataset, _) = ingest_reader(out.corpus_csv.as_bytes(), &lenient_ingest()).unwrap();
    let scaler = Scaler::fit(&dataset);
    let params = KMeansParams {
        k: 2,
        seed: 1,
        ..Default::default()
    };
    let clusters = cluster_pipeline(&dataset, &scaler, &params, 0.2).unwrap();

    let nbeats = NBeatsConfig {
        n_stacks: 1,
        blocks_per_stack: 1,
        fc_layers_per_block: 1,
        fc_width: 8,
        theta_dim: 4,
        ..NBeatsConfig::default()
    };
    let train = TrainParams {
        max_epochs: 5,
        patience: 2,
        ..TrainParams::default()
    };

    let windows = make_windows(&dataset, &scaler, Region::Train).unwrap();
    let mut models = BTreeMap::new();
    for (poi, model) in &clusters {
        for &cluster in &model.retained {
            let cluster_windows: Vec<Window> = windows
                .windows
                .iter()
                .filter(|w| {
                    let cell = &dataset.cells()[w.cell_index];
                    model.assignments[&cell.cell_id] == cluster
                })
                .cloned()
                .collect();
            assert_eq!(cluster_windows.len() % 15, 0, "15 train windows per cell");
            let (net, _) = train_cluster_model(&cluster_windows, &nbeats, &train).unwrap();
            models.insert((*poi, cluster), net);
        }
    }

    let (report, predictions) = evaluate_pipeline(
        &dataset,
        &scaler,
        &clusters,
        &models,
        &EvalOptions::default(),
    )
    .unwrap();
    assert_eq!(report.rows.len(), 1);
    let row = &report.rows[0];
    assert_eq!(row.n_cells + report.unmodeled_cells, 12);
    assert_eq!(row.n_windows, row.n_cells * 10);
    // One prediction row per (window, horizon step, channel).
    assert_eq!(predictions.len(), row.n_cells * 10 * 2 * 2);
    assert!(row.naive_mape > 0.0);
    assert!(row.model_mape.is_finite());
}

#[test]
fn reloaded_checkpoint_scores_bit_identically() {
    let out = generate(&corpus_config(6, 0.05)).unwrap();
    let (dataset, _) = ingest_reader(out.corpus_csv.as_bytes(), &lenient_ingest()).unwrap();
    let scaler = Scaler::fit(&dataset);
    let windows = make_windows(&dataset, &scaler, Region::Train).unwrap();

    let nbeats = NBeatsConfig {
        n_stacks: 1,
        blocks_per_stack: 2,
        fc_layers_per_block: 2,
        fc_width: 8,
        theta_dim: 4,
        ..NBeatsConfig::default()
    };
    let train = TrainParams {
        max_epochs: 6,
        patience: 3,
        ..TrainParams::default()
    };
    let (net, log) = train_cluster_model(&windows.windows, &nbeats, &train).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("0.model");
    let header = CheckpointHeader {
        config: nbeats.clone(),
        seed: train.seed,
        poi_id: 0,
        cluster: 0,
        param_count: net.param_count(),
        epochs_trained: log.epochs.len(),
        best_val_loss: log.best_val_loss,
    };
    save_model(&path, &net, &header).unwrap();
    let (reloaded, _) = load_model(&path).unwrap();

    for window in &windows.windows {
        let a = net.forward_window(window);
        let b = reloaded.forward_window(window);
        for channel in Channel::ALL {
            let xs: Vec<u64> = a[channel.index()].iter().map(|v| v.to_bits()).collect();
            let ys: Vec<u64> = b[channel.index()].iter().map(|v| v.to_bits()).collect();
            assert_eq!(xs, ys);
        }
    }
}

#[test]
fn single_shape_noiseless_poi_collapses_to_one_cluster() {
    let mut config = corpus_config(10, 0.0);
    config.poi_specs[0].shape_weights = [0.0, 1.0, 0.0, 0.0];
    let out = generate(&config).unwrap();
    let (dataset, _) = ingest_reader(out.corpus_csv.as_bytes(), &lenient_ingest()).unwrap();
    let scaler = Scaler::fit(&dataset);
    let profiles: Vec<Vec<f64>> = dataset
        .cells()
        .iter()
        .map(|cell| {
            let cs = scaler.cell(&cell.cell_id).unwrap();
            (0..dataset.train_weeks)
                .map(|w| cs.transform(Channel::Downlink, cell.value(w, Channel::Downlink)))
                .collect()
        })
        .collect();
    // Standardization removes per-cell volume scale, so noiseless cells of
    // one shape share one point.
    let poi = dataset.taxonomy().categories()[0].clone();
    let map: BTreeMap<_, _> = dataset
        .cells()
        .iter()
        .map(|c| c.cell_id.clone())
        .zip(profiles)
        .collect();
    let model = fit_kmeans(
        &poi,
        &map,
        &KMeansParams {
            k: 1,
            seed: 0,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(model.inertia < 1e-12, "inertia {}", model.inertia);
}
