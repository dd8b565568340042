//! Baselines, the MAPE metric, and per-POI / overall evaluation reports.
//!
//! All errors are computed in original units after inverse standardization.
//! The headline metric is downlink-volume MAPE; user-count MAPE is reported
//! alongside. The baseline defaults to persistence (repeat the last observed
//! value), with a seasonal variant behind a config flag.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clustering::ClusterModel;
use crate::dataset::{Channel, Region, TrafficDataset};
use crate::error::{Error, Result};
use crate::nbeats::NBeatsNet;
use crate::preprocess::{make_windows, Scaler, Window};

/// Denominator floor guarding MAPE against zero actuals.
pub const MAPE_FLOOR: f64 = 1e-9;

/// Baseline forecast rule.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "method")]
pub enum NaiveMethod {
    /// Repeat the last observed value across the horizon.
    #[default]
    Persistence,
    /// Repeat the value from `period` steps back; falls back to persistence
    /// when the history is shorter than the period.
    Seasonal { period: usize },
}

/// How per-POI and overall MAPE aggregate individual errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// Mean over all (window, step) errors.
    #[default]
    WindowCount,
    /// Mean per cell first, then mean over cells.
    CellMean,
}

/// Persistence forecast: every entry repeats the last observed value.
pub fn naive_forecast(history: &[f64], horizon: usize) -> Result<Vec<f64>> {
    let last = *history
        .last()
        .ok_or_else(|| Error::Config("naive forecast needs a non-empty history".into()))?;
    Ok(vec![last; horizon])
}

/// Baseline dispatch over [`NaiveMethod`].
pub fn baseline_forecast(history: &[f64], horizon: usize, method: NaiveMethod) -> Result<Vec<f64>> {
    match method {
        NaiveMethod::Persistence => naive_forecast(history, horizon),
        NaiveMethod::Seasonal { period } => {
            if period == 0 {
                return Err(Error::Config("seasonal period must be positive".into()));
            }
            if history.len() < period {
                return naive_forecast(history, horizon);
            }
            let n = history.len();
            Ok((0..horizon)
                .map(|h| history[n - period + (h % period)])
                .collect())
        }
    }
}

/// Mean absolute percentage error:
/// 100 × mean(|actual − predicted| / max(|actual|, floor)).
pub fn mape(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    if actual.len() != predicted.len() {
        return Err(Error::Shape(format!(
            "mape length mismatch: {} vs {}",
            actual.len(),
            predicted.len()
        )));
    }
    if actual.is_empty() {
        return Err(Error::Config("mape on empty vectors".into()));
    }
    let sum: f64 = actual
        .iter()
        .zip(predicted)
        .map(|(a, p)| (a - p).abs() / a.abs().max(MAPE_FLOOR))
        .sum();
    Ok(100.0 * sum / actual.len() as f64)
}

/// Anything that maps a standardized window to per-channel forecasts.
pub trait WindowForecaster {
    fn forecast_window(&self, window: &Window) -> [Vec<f64>; 2];
}

impl WindowForecaster for NBeatsNet {
    fn forecast_window(&self, window: &Window) -> [Vec<f64>; 2] {
        self.forward_window(window)
    }
}

/// Evaluation switches.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub naive: NaiveMethod,
    pub weighting: Weighting,
}

/// One report row; MAPE columns are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoiRow {
    pub poi_id: u16,
    pub poi: String,
    pub model_mape: f64,
    pub naive_mape: f64,
    pub model_mape_users: f64,
    pub naive_mape_users: f64,
    pub n_cells: usize,
    pub n_windows: usize,
}

/// Table-style evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rows: Vec<PoiRow>,
    pub overall_model_mape: f64,
    pub overall_naive_mape: f64,
    pub overall_model_mape_users: f64,
    pub overall_naive_mape_users: f64,
    /// Cells excluded because their cluster was not retained.
    pub unmodeled_cells: usize,
    pub options: EvalOptions,
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(json: &str) -> Result<EvaluationReport> {
        serde_json::from_str(json).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Render the table CSV: one row per POI plus an Overall row, MAPE in
    /// percent with two decimals.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<W> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["poi", "model_mape", "naive_mape", "n_cells", "n_windows"])
            .map_err(|e| Error::Serde(e.to_string()))?;
        for row in &self.rows {
            out.write_record([
                row.poi.as_str(),
                &format!("{:.2}", row.model_mape),
                &format!("{:.2}", row.naive_mape),
                &row.n_cells.to_string(),
                &row.n_windows.to_string(),
            ])
            .map_err(|e| Error::Serde(e.to_string()))?;
        }
        let (cells, windows) = self
            .rows
            .iter()
            .fold((0, 0), |(c, w), r| (c + r.n_cells, w + r.n_windows));
        out.write_record([
            "Overall",
            &format!("{:.2}", self.overall_model_mape),
            &format!("{:.2}", self.overall_naive_mape),
            &cells.to_string(),
            &windows.to_string(),
        ])
        .map_err(|e| Error::Serde(e.to_string()))?;
        out.into_inner().map_err(|e| Error::Serde(e.to_string()))
    }
}

/// One (cell, target week, channel) evaluation record in original units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub cell_id: String,
    pub week: usize,
    pub channel: Channel,
    pub actual: f64,
    pub predicted: f64,
    pub naive: f64,
}

/// Write the per-cell prediction dump.
pub fn write_predictions_csv<W: std::io::Write>(rows: &[PredictionRow], writer: W) -> Result<W> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["cell_id", "week", "channel", "actual", "predicted", "naive"])
        .map_err(|e| Error::Serde(e.to_string()))?;
    for r in rows {
        out.write_record([
            r.cell_id.as_str(),
            &r.week.to_string(),
            r.channel.name(),
            &format!("{}", r.actual),
            &format!("{}", r.predicted),
            &format!("{}", r.naive),
        ])
        .map_err(|e| Error::Serde(e.to_string()))?;
    }
    out.into_inner().map_err(|e| Error::Serde(e.to_string()))
}

// Per-scope error accumulator: one (actual, predicted) pair per
// (window, step), kept separately per channel and per forecaster.
#[derive(Default, Clone)]
struct ErrorBag {
    model: [Vec<f64>; 2],
    naive: [Vec<f64>; 2],
    actual: [Vec<f64>; 2],
}

impl ErrorBag {
    fn push(&mut self, channel: Channel, actual: f64, model: f64, naive: f64) {
        let i = channel.index();
        self.actual[i].push(actual);
        self.model[i].push(model);
        self.naive[i].push(naive);
    }

    fn mape_of(&self, channel: Channel) -> Result<(f64, f64)> {
        let i = channel.index();
        Ok((
            mape(&self.actual[i], &self.model[i])?,
            mape(&self.actual[i], &self.naive[i])?,
        ))
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Evaluate trained models on every test window of every modeled cell.
///
/// `models` maps (POI id, cluster index) to a forecaster; every retained
/// cluster with at least one cell must be covered. Returns the table report
/// plus the per-prediction dump.
pub fn evaluate_pipeline<M: WindowForecaster>(
    dataset: &TrafficDataset,
    scaler: &Scaler,
    clusters: &BTreeMap<u16, ClusterModel>,
    models: &BTreeMap<(u16, usize), M>,
    options: &EvalOptions,
) -> Result<(EvaluationReport, Vec<PredictionRow>)> {
    let test = make_windows(dataset, scaler, Region::Test)?;
    if test.is_empty() {
        return Err(Error::Config("no test windows to evaluate".into()));
    }

    // poi id -> window-level error bags; cell-level bags for CellMean.
    let mut poi_bags: BTreeMap<u16, ErrorBag> = BTreeMap::new();
    let mut poi_cell_mapes: BTreeMap<u16, [Vec<(f64, f64)>; 2]> = BTreeMap::new();
    let mut poi_cells: BTreeMap<u16, usize> = BTreeMap::new();
    let mut poi_windows: BTreeMap<u16, usize> = BTreeMap::new();
    let mut unmodeled_cells = 0usize;
    let mut predictions = Vec::new();

    let mut window_i = 0usize;
    for (cell_index, cell) in dataset.cells().iter().enumerate() {
        let poi_id = cell.poi.id;
        let cluster_model = clusters.get(&poi_id).ok_or_else(|| {
            Error::StaleArtifact(format!("no clustering for POI {}", cell.poi.name))
        })?;
        let cluster = *cluster_model
            .assignments
            .get(&cell.cell_id)
            .ok_or_else(|| {
                Error::StaleArtifact(format!("cell {} missing from clustering", cell.cell_id))
            })?;

        // Windows are cell-major; collect this cell's slice.
        let start = window_i;
        while window_i < test.windows.len() && test.windows[window_i].cell_index == cell_index {
            window_i += 1;
        }
        let cell_windows = &test.windows[start..window_i];

        if !cluster_model.retained.contains(&cluster) {
            unmodeled_cells += 1;
            continue;
        }
        let model = models.get(&(poi_id, cluster)).ok_or(Error::MissingModel {
            poi: poi_id,
            cluster,
        })?;
        let cell_scaler = scaler.cell(&cell.cell_id).ok_or_else(|| {
            Error::StaleArtifact(format!("scaler has no entry for cell {}", cell.cell_id))
        })?;

        *poi_cells.entry(poi_id).or_insert(0) += 1;
        *poi_windows.entry(poi_id).or_insert(0) += cell_windows.len();
        let bag = poi_bags.entry(poi_id).or_default();
        let mut cell_bag = ErrorBag::default();

        for window in cell_windows {
            let forecast = model.forecast_window(window);
            for channel in Channel::ALL {
                let history: Vec<f64> = (window.origin - dataset.lookback..window.origin)
                    .map(|w| cell.value(w, channel))
                    .collect();
                let naive = baseline_forecast(&history, dataset.horizon, options.naive)?;
                for h in 0..dataset.horizon {
                    let actual = cell.value(window.origin + h, channel);
                    let predicted = cell_scaler.inverse(channel, forecast[channel.index()][h]);
                    bag.push(channel, actual, predicted, naive[h]);
                    cell_bag.push(channel, actual, predicted, naive[h]);
                    predictions.push(PredictionRow {
                        cell_id: cell.cell_id.as_str().to_string(),
                        week: window.origin + h,
                        channel,
                        actual,
                        predicted,
                        naive: naive[h],
                    });
                }
            }
        }

        let per_cell = poi_cell_mapes
            .entry(poi_id)
            .or_insert_with(|| [Vec::new(), Vec::new()]);
        for channel in Channel::ALL {
            per_cell[channel.index()].push(cell_bag.mape_of(channel)?);
        }
    }

    if poi_bags.is_empty() {
        return Err(Error::Config(
            "every cell fell in an unretained cluster; nothing to evaluate".into(),
        ));
    }

    let mut rows = Vec::new();
    for (poi_id, bag) in &poi_bags {
        let poi = dataset
            .taxonomy()
            .category(*poi_id)
            .ok_or_else(|| Error::StaleArtifact(format!("unknown POI id {poi_id}")))?;
        let pair = |channel: Channel| -> Result<(f64, f64)> {
            match options.weighting {
                Weighting::WindowCount => bag.mape_of(channel),
                Weighting::CellMean => {
                    let cells = &poi_cell_mapes[poi_id][channel.index()];
                    Ok((
                        mean(&cells.iter().map(|c| c.0).collect::<Vec<_>>()),
                        mean(&cells.iter().map(|c| c.1).collect::<Vec<_>>()),
                    ))
                }
            }
        };
        let (model_mape, naive_mape) = pair(Channel::Downlink)?;
        let (model_mape_users, naive_mape_users) = pair(Channel::UserCount)?;
        rows.push(PoiRow {
            poi_id: *poi_id,
            poi: poi.name.clone(),
            model_mape,
            naive_mape,
            model_mape_users,
            naive_mape_users,
            n_cells: poi_cells[poi_id],
            n_windows: poi_windows[poi_id],
        });
    }

    // Overall aggregates over all evaluated windows (or cells) of all POIs.
    let overall_pair = |channel: Channel| -> Result<(f64, f64)> {
        match options.weighting {
            Weighting::WindowCount => {
                let mut total = ErrorBag::default();
                for bag in poi_bags.values() {
                    let i = channel.index();
                    total.actual[i].extend_from_slice(&bag.actual[i]);
                    total.model[i].extend_from_slice(&bag.model[i]);
                    total.naive[i].extend_from_slice(&bag.naive[i]);
                }
                total.mape_of(channel)
            }
            Weighting::CellMean => {
                let mut pairs = Vec::new();
                for per_cell in poi_cell_mapes.values() {
                    pairs.extend_from_slice(&per_cell[channel.index()]);
                }
                Ok((
                    mean(&pairs.iter().map(|c| c.0).collect::<Vec<_>>()),
                    mean(&pairs.iter().map(|c| c.1).collect::<Vec<_>>()),
                ))
            }
        }
    };
    let (overall_model_mape, overall_naive_mape) = overall_pair(Channel::Downlink)?;
    let (overall_model_mape_users, overall_naive_mape_users) = overall_pair(Channel::UserCount)?;

    Ok((
        EvaluationReport {
            rows,
            overall_model_mape,
            overall_naive_mape,
            overall_model_mape_users,
            overall_naive_mape_users,
            unmodeled_cells,
            options: *options,
        },
        predictions,
    ))
}
