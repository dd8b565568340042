//! Per-cell standardization and sliding-window extraction.
//!
//! Every cell and channel gets its own z-score scaler fitted on the training
//! weeks only, so test weeks never influence the statistics. Windows pair a
//! lookback input `[t-L, t)` with a forecast target `[t, t+H)` in
//! standardized space; evaluation maps predictions back to original units
//! through the inverse transform.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{CellId, Channel, Region, TrafficDataset};
use crate::error::{Error, Result};

/// Standardization statistics for one cell and channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    /// Population standard deviation over the training weeks. A constant
    /// series would make this zero, so it is floored to 1 in that case and
    /// the transform maps the series to all zeros.
    pub std: f64,
}

impl ChannelStats {
    pub fn fit(values: &[f64]) -> ChannelStats {
        assert!(!values.is_empty(), "cannot fit scaler on empty series");
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        ChannelStats {
            mean,
            std: if std < 1e-12 { 1.0 } else { std },
        }
    }

    pub fn transform(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Both channels' statistics for one cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellScaler {
    pub downlink: ChannelStats,
    pub users: ChannelStats,
}

impl CellScaler {
    pub fn channel(&self, channel: Channel) -> &ChannelStats {
        match channel {
            Channel::Downlink => &self.downlink,
            Channel::UserCount => &self.users,
        }
    }

    pub fn transform(&self, channel: Channel, x: f64) -> f64 {
        self.channel(channel).transform(x)
    }

    pub fn inverse(&self, channel: Channel, z: f64) -> f64 {
        self.channel(channel).inverse(z)
    }
}

/// Per-cell scalers fitted on the training weeks of one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub train_weeks: usize,
    cells: BTreeMap<CellId, CellScaler>,
}

impl Scaler {
    /// Fit statistics for every cell using weeks `0..train_weeks` only.
    pub fn fit(dataset: &TrafficDataset) -> Scaler {
        let train = 0..dataset.train_weeks;
        let cells = dataset
            .cells()
            .iter()
            .map(|cell| {
                let scaler = CellScaler {
                    downlink: ChannelStats::fit(&cell.values(Channel::Downlink, train.clone())),
                    users: ChannelStats::fit(&cell.values(Channel::UserCount, train.clone())),
                };
                (cell.cell_id.clone(), scaler)
            })
            .collect();
        Scaler {
            train_weeks: dataset.train_weeks,
            cells,
        }
    }

    pub fn cell(&self, id: &CellId) -> Option<&CellScaler> {
        self.cells.get(id)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scaler serializes")
    }

    pub fn from_json(json: &str) -> Result<Scaler> {
        serde_json::from_str(json).map_err(|e| Error::Serde(e.to_string()))
    }
}

/// One standardized forecasting window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    /// Index into the dataset's cell list.
    pub cell_index: usize,
    /// Forecast origin `t`: input covers `[t-L, t)`, target `[t, t+H)`.
    pub origin: usize,
    input: [Vec<f64>; 2],
    target: [Vec<f64>; 2],
}

impl Window {
    /// Assemble a window from per-channel input and target series.
    ///
    /// Panics if channel lengths disagree.
    pub fn new(
        cell_index: usize,
        origin: usize,
        input: [Vec<f64>; 2],
        target: [Vec<f64>; 2],
    ) -> Window {
        assert_eq!(
            input[0].len(),
            input[1].len(),
            "input channel lengths differ"
        );
        assert_eq!(
            target[0].len(),
            target[1].len(),
            "target channel lengths differ"
        );
        Window {
            cell_index,
            origin,
            input,
            target,
        }
    }

    pub fn input(&self, channel: Channel) -> &[f64] {
        &self.input[channel.index()]
    }

    pub fn target(&self, channel: Channel) -> &[f64] {
        &self.target[channel.index()]
    }

    /// Both input channels concatenated: downlink weeks then user weeks.
    pub fn stacked_input(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.input[0].len() * 2);
        out.extend_from_slice(&self.input[0]);
        out.extend_from_slice(&self.input[1]);
        out
    }
}

/// All windows of one region, cell-major then origin-ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSet {
    pub region: Region,
    pub lookback: usize,
    pub horizon: usize,
    pub windows: Vec<Window>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Debug dump: one row per value with its role and offset.
    pub fn write_csv<W: std::io::Write>(&self, dataset: &TrafficDataset, writer: W) -> Result<W> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["cell_id", "origin", "role", "channel", "offset", "value"])
            .map_err(|e| Error::Serde(e.to_string()))?;
        for w in &self.windows {
            let cell_id = dataset.cells()[w.cell_index].cell_id.as_str();
            for channel in Channel::ALL {
                for (i, v) in w.input(channel).iter().enumerate() {
                    out.write_record([
                        cell_id,
                        &w.origin.to_string(),
                        "input",
                        channel.name(),
                        &i.to_string(),
                        &format!("{v}"),
                    ])
                    .map_err(|e| Error::Serde(e.to_string()))?;
                }
                for (i, v) in w.target(channel).iter().enumerate() {
                    out.write_record([
                        cell_id,
                        &w.origin.to_string(),
                        "target",
                        channel.name(),
                        &i.to_string(),
                        &format!("{v}"),
                    ])
                    .map_err(|e| Error::Serde(e.to_string()))?;
                }
            }
        }
        out.into_inner().map_err(|e| Error::Serde(e.to_string()))
    }
}

/// Extract the standardized windows of one region.
///
/// Window order is deterministic: cells in id order, origins ascending.
pub fn make_windows(
    dataset: &TrafficDataset,
    scaler: &Scaler,
    region: Region,
) -> Result<WindowSet> {
    let (train, test) = dataset.split();
    let view = match region {
        Region::Train => train,
        Region::Test => test,
    };
    let lookback = dataset.lookback;
    let horizon = dataset.horizon;

    let mut windows = Vec::with_capacity(dataset.cells().len() * view.windows_per_cell());
    for (cell_index, cell) in dataset.cells().iter().enumerate() {
        let cell_scaler = scaler.cell(&cell.cell_id).ok_or_else(|| {
            Error::StaleArtifact(format!("scaler has no entry for cell {}", cell.cell_id))
        })?;
        for &origin in view.origins() {
            let mut input: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
            let mut target: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
            for channel in Channel::ALL {
                input[channel.index()] = (origin - lookback..origin)
                    .map(|w| cell_scaler.transform(channel, cell.value(w, channel)))
                    .collect();
                target[channel.index()] = (origin..origin + horizon)
                    .map(|w| cell_scaler.transform(channel, cell.value(w, channel)))
                    .collect();
            }
            windows.push(Window {
                cell_index,
                origin,
                input,
                target,
            });
        }
    }

    Ok(WindowSet {
        region,
        lookback,
        horizon,
        windows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{bucket_pois, CellSeries, WeekSample};

    fn dataset_with_values(downlink: &[f64], users: &[f64], train_weeks: usize) -> TrafficDataset {
        let tax = bucket_pois(&[("Hospital".to_string(), 1)], 1.0).unwrap();
        let poi = tax.resolve("Hospital").unwrap().clone();
        let cells = vec![CellSeries {
            cell_id: CellId::new("cell-0"),
            poi,
            weeks: downlink
                .iter()
                .zip(users)
                .enumerate()
                .map(|(w, (d, u))| WeekSample {
                    week_index: w as u32,
                    downlink_volume: *d,
                    avg_user_count: *u,
                })
                .collect(),
        }];
        TrafficDataset::new(cells, tax, downlink.len(), train_weeks, 2, 1).unwrap()
    }

    #[test]
    fn population_std_of_small_series() {
        let stats = ChannelStats::fit(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(stats.mean, 2.5);
        assert!((stats.std - 1.118033988749895).abs() < 1e-15);
    }

    #[test]
    fn scaler_ignores_test_weeks() {
        // Wildly different test weeks must not move the statistics.
        let down_a = [10.0, 12.0, 14.0, 16.0, 1.0, 1000.0];
        let down_b = [10.0, 12.0, 14.0, 16.0, 777.0, 0.5];
        let users = [5.0; 6];
        let a = Scaler::fit(&dataset_with_values(&down_a, &users, 4));
        let b = Scaler::fit(&dataset_with_values(&down_b, &users, 4));
        assert_eq!(a, b);
        let stats = a.cell(&CellId::new("cell-0")).unwrap().downlink;
        assert_eq!(stats.mean, 13.0);
    }

    #[test]
    fn transform_inverse_round_trip() {
        let stats = ChannelStats {
            mean: 37.25,
            std: 4.5,
        };
        for i in 0..100 {
            let x = -50.0 + i as f64 * 3.7;
            let back = stats.inverse(stats.transform(x));
            assert!((back - x).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn standardized_train_weeks_have_zero_mean_unit_std() {
        let down: Vec<f64> = (0..10).map(|w| 50.0 + 7.0 * w as f64).collect();
        let users: Vec<f64> = (0..10).map(|w| 5.0 + (w as f64).sin().abs()).collect();
        let ds = dataset_with_values(&down, &users, 8);
        let scaler = Scaler::fit(&ds);
        let cs = scaler.cell(&CellId::new("cell-0")).unwrap();
        for channel in Channel::ALL {
            let z: Vec<f64> = (0..8)
                .map(|w| cs.transform(channel, ds.cells()[0].value(w, channel)))
                .collect();
            let mean = z.iter().sum::<f64>() / z.len() as f64;
            let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / z.len() as f64;
            assert!(mean.abs() < 1e-9, "{channel}: mean {mean}");
            assert!((var - 1.0).abs() < 1e-9, "{channel}: var {var}");
        }
    }

    #[test]
    fn constant_series_maps_to_zeros() {
        let stats = ChannelStats::fit(&[42.0; 8]);
        assert_eq!(stats.std, 1.0);
        assert_eq!(stats.transform(42.0), 0.0);
        assert_eq!(stats.inverse(0.0), 42.0);
    }

    #[test]
    fn scaler_json_round_trip_is_exact() {
        let down: Vec<f64> = (0..12).map(|w| 0.1 + (w as f64) * 0.3).collect();
        let users: Vec<f64> = (0..12).map(|w| 1.0 + (w as f64) / 7.0).collect();
        let scaler = Scaler::fit(&dataset_with_values(&down, &users, 9));
        let again = Scaler::from_json(&scaler.to_json()).unwrap();
        let a = scaler.cell(&CellId::new("cell-0")).unwrap();
        let b = again.cell(&CellId::new("cell-0")).unwrap();
        for channel in Channel::ALL {
            assert_eq!(
                a.channel(channel).mean.to_bits(),
                b.channel(channel).mean.to_bits()
            );
            assert_eq!(
                a.channel(channel).std.to_bits(),
                b.channel(channel).std.to_bits()
            );
        }
    }

    #[test]
    fn window_counts_for_reference_protocol() {
        let ds = crate::dataset::synthetic_dataset(31, 20, 4, 2);
        let scaler = Scaler::fit(&ds);
        let train = make_windows(&ds, &scaler, Region::Train).unwrap();
        let test = make_windows(&ds, &scaler, Region::Test).unwrap();
        // 20 - 4 - 2 + 1 = 15 train and 31 - 20 - 2 + 1 = 10 test origins,
        // two cells each.
        assert_eq!(train.len(), 30);
        assert_eq!(test.len(), 20);
        assert!(train
            .windows
            .iter()
            .all(|w| w.input(Channel::Downlink).len() == 4));
        assert!(train
            .windows
            .iter()
            .all(|w| w.target(Channel::Downlink).len() == 2));
    }

    #[test]
    fn window_values_match_source_slices() {
        let down: Vec<f64> = (0..10).map(|w| 100.0 + w as f64 * w as f64).collect();
        let users: Vec<f64> = (0..10).map(|w| 3.0 + w as f64).collect();
        let ds = dataset_with_values(&down, &users, 8);
        let scaler = Scaler::fit(&ds);
        let cs = *scaler.cell(&CellId::new("cell-0")).unwrap();

        let set = make_windows(&ds, &scaler, Region::Train).unwrap();
        let w = &set.windows[3];
        assert_eq!(w.origin, 5);
        let expect: Vec<f64> = (3..5)
            .map(|i| cs.transform(Channel::Downlink, down[i]))
            .collect();
        assert_eq!(w.input(Channel::Downlink), expect.as_slice());
        let expect: Vec<f64> = (5..6)
            .map(|i| cs.transform(Channel::UserCount, users[i]))
            .collect();
        assert_eq!(w.target(Channel::UserCount), expect.as_slice());

        let stacked = w.stacked_input();
        assert_eq!(stacked.len(), 4);
        assert_eq!(&stacked[..2], w.input(Channel::Downlink));
        assert_eq!(&stacked[2..], w.input(Channel::UserCount));
    }

    #[test]
    fn windows_are_cell_major_and_origin_sorted() {
        let ds = crate::dataset::synthetic_dataset(31, 20, 4, 2);
        let scaler = Scaler::fit(&ds);
        let set = make_windows(&ds, &scaler, Region::Test).unwrap();
        let keys: Vec<(usize, usize)> = set
            .windows
            .iter()
            .map(|w| (w.cell_index, w.origin))
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }
}
