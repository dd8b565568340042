//! Domain types, CSV ingestion, validation, and POI bucketing for per-cell
//! weekly traffic records.
//!
//! A corpus is a CSV with header `cell_id,week,poi,downlink_volume,avg_user_count`
//! where `week` is either a non-negative integer index or an ISO-8601 date
//! (mapped to weeks since a configured epoch Monday). Cells survive ingestion
//! only if they carry a sample for every week, never report zero downlink
//! volume, and never exceed the configured extreme-value percentile.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;
use std::path::Path;

use chrono::{Datelike, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Display name of the distinguished catch-all POI category.
pub const OTHERS_LABEL: &str = "Others";

/// Measurement channels recorded per cell and week.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Channel {
    Downlink,
    UserCount,
}

impl Channel {
    pub const ALL: [Channel; 2] = [Channel::Downlink, Channel::UserCount];

    pub fn index(self) -> usize {
        match self {
            Channel::Downlink => 0,
            Channel::UserCount => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Downlink => "downlink",
            Channel::UserCount => "users",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Opaque unique cell identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CellId(pub String);

impl CellId {
    pub fn new(id: impl Into<String>) -> Self {
        CellId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A point-of-interest land-use category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoiCategory {
    /// Rank by descending cell count after bucketing; unique within a taxonomy.
    pub id: u16,
    pub name: String,
}

impl PoiCategory {
    /// Whether this is the distinguished catch-all category.
    pub fn is_others(&self) -> bool {
        canonical_label(&self.name) == canonical_label(OTHERS_LABEL)
    }
}

impl fmt::Display for PoiCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.id, self.name)
    }
}

/// Canonical form used to match POI labels: trimmed, lowercased.
pub fn canonical_label(label: &str) -> String {
    label.trim().to_lowercase()
}

/// The set of POI categories derived from a corpus, with the label mapping
/// produced by the coverage rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoiTaxonomy {
    /// Categories sorted by id (rank 1 = most cells).
    categories: Vec<PoiCategory>,
    /// Cell count per category id at bucketing time.
    counts: BTreeMap<u16, u64>,
    /// Canonical raw label -> category id.
    label_to_id: BTreeMap<String, u16>,
    others_id: u16,
}

impl PoiTaxonomy {
    pub fn categories(&self) -> &[PoiCategory] {
        &self.categories
    }

    pub fn category(&self, id: u16) -> Option<&PoiCategory> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn others(&self) -> &PoiCategory {
        self.category(self.others_id)
            .expect("catch-all category always present")
    }

    /// Cell count recorded for a category when the taxonomy was built.
    pub fn count(&self, id: u16) -> u64 {
        self.counts.get(&id).copied().unwrap_or(0)
    }

    /// Resolve a raw label to its category. Labels that were bucketed into the
    /// tail resolve to the catch-all, as does anything spelled like it.
    pub fn resolve(&self, label: &str) -> Option<&PoiCategory> {
        let canon = canonical_label(label);
        if canon == canonical_label(OTHERS_LABEL) {
            return Some(self.others());
        }
        self.label_to_id
            .get(&canon)
            .and_then(|id| self.category(*id))
    }
}

/// Bucket raw POI labels into distinct categories plus a catch-all.
///
/// Labels are sorted by descending cell count (ties by canonical name); the
/// smallest prefix whose cumulative count reaches `coverage` of the total is
/// kept distinct and everything after it is merged into the catch-all.
/// Labels spelled like the catch-all always resolve to it regardless of rank.
/// Final category ids rank the merged result by descending cell count, so the
/// catch-all lands wherever its combined tail count places it.
pub fn bucket_pois(raw_labels: &[(String, u64)], coverage: f64) -> Result<PoiTaxonomy> {
    if raw_labels.is_empty() {
        return Err(Error::EmptyLabels);
    }
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::Config(format!(
            "coverage must be in (0, 1], got {coverage}"
        )));
    }

    // Merge duplicate spellings of the same canonical label; remember the
    // first display spelling encountered in canonical order.
    let mut merged: BTreeMap<String, (String, u64)> = BTreeMap::new();
    for (label, count) in raw_labels {
        let canon = canonical_label(label);
        if canon.is_empty() {
            return Err(Error::Config("empty POI label".into()));
        }
        let entry = merged
            .entry(canon)
            .or_insert_with(|| (label.trim().to_string(), 0));
        entry.1 += count;
    }

    let others_canon = canonical_label(OTHERS_LABEL);
    let total: u64 = merged.values().map(|(_, c)| c).sum();

    let mut sorted: Vec<(&String, &(String, u64))> = merged.iter().collect();
    sorted.sort_by(|a, b| b.1 .1.cmp(&a.1 .1).then_with(|| a.0.cmp(b.0)));

    // Smallest prefix with cumulative count >= coverage * total.
    let target = coverage * total as f64;
    let mut kept: Vec<(&String, &String, u64)> = Vec::new();
    let mut cumulative = 0u64;
    let mut tail_start = sorted.len();
    for (i, (canon, (display, count))) in sorted.iter().enumerate() {
        if cumulative as f64 >= target && cumulative > 0 {
            tail_start = i;
            break;
        }
        cumulative += count;
        kept.push((canon, display, *count));
    }

    // Kept labels become distinct categories, except catch-all spellings.
    let mut others_count = 0u64;
    let mut distinct: Vec<(&String, &String, u64)> = Vec::new();
    for (canon, display, count) in kept {
        if *canon == others_canon {
            others_count += count;
        } else {
            distinct.push((canon, display, count));
        }
    }
    for (canon, (_, count)) in &sorted[tail_start..] {
        let _ = canon;
        others_count += count;
    }

    // Rank merged result by descending count, ties by canonical name; the
    // catch-all participates with its combined count.
    let mut ranked: Vec<(String, String, u64)> = distinct
        .iter()
        .map(|(c, d, n)| ((*c).clone(), (*d).clone(), *n))
        .collect();
    ranked.push((others_canon.clone(), OTHERS_LABEL.to_string(), others_count));
    ranked.sort_by(|a, b| b.2.cmp(&a.2).then_with(|| a.0.cmp(&b.0)));

    let mut categories = Vec::with_capacity(ranked.len());
    let mut counts = BTreeMap::new();
    let mut label_to_id = BTreeMap::new();
    let mut others_id = 0u16;
    for (i, (canon, display, count)) in ranked.iter().enumerate() {
        let id = (i + 1) as u16;
        categories.push(PoiCategory {
            id,
            name: display.clone(),
        });
        counts.insert(id, *count);
        if *canon == others_canon {
            others_id = id;
        }
        label_to_id.insert(canon.clone(), id);
    }

    // Tail labels all resolve to the catch-all.
    for (canon, _) in &sorted[tail_start..] {
        label_to_id.insert((*canon).clone(), others_id);
    }

    Ok(PoiTaxonomy {
        categories,
        counts,
        label_to_id,
        others_id,
    })
}

/// One week's measurements for one cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeekSample {
    pub week_index: u32,
    pub downlink_volume: f64,
    pub avg_user_count: f64,
}

impl WeekSample {
    pub fn value(&self, channel: Channel) -> f64 {
        match channel {
            Channel::Downlink => self.downlink_volume,
            Channel::UserCount => self.avg_user_count,
        }
    }
}

/// One cell's complete weekly bivariate history plus its POI label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSeries {
    pub cell_id: CellId,
    pub poi: PoiCategory,
    pub weeks: Vec<WeekSample>,
}

impl CellSeries {
    /// Channel values over `range` in week order.
    pub fn values(&self, channel: Channel, range: std::ops::Range<usize>) -> Vec<f64> {
        self.weeks[range].iter().map(|w| w.value(channel)).collect()
    }

    pub fn value(&self, week: usize, channel: Channel) -> f64 {
        self.weeks[week].value(channel)
    }
}

/// A validated collection of cells sharing a common week axis and split point.
///
/// Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficDataset {
    cells: Vec<CellSeries>,
    taxonomy: PoiTaxonomy,
    pub n_weeks: usize,
    pub train_weeks: usize,
    pub lookback: usize,
    pub horizon: usize,
}

impl TrafficDataset {
    /// Validate invariants and build the dataset. Cells are sorted by id.
    pub fn new(
        mut cells: Vec<CellSeries>,
        taxonomy: PoiTaxonomy,
        n_weeks: usize,
        train_weeks: usize,
        lookback: usize,
        horizon: usize,
    ) -> Result<Self> {
        if n_weeks == 0 {
            return Err(Error::Config("n_weeks must be positive".into()));
        }
        if !(0 < train_weeks && train_weeks <= n_weeks) {
            return Err(Error::Config(format!(
                "train_weeks must be in 1..={n_weeks}, got {train_weeks}"
            )));
        }
        if lookback == 0 || horizon == 0 {
            return Err(Error::Config(
                "lookback and horizon must be positive".into(),
            ));
        }
        if lookback + horizon > train_weeks {
            return Err(Error::TooShort {
                lookback,
                horizon,
                train_weeks,
            });
        }

        cells.sort_by(|a, b| a.cell_id.cmp(&b.cell_id));
        let mut seen = BTreeSet::new();
        for cell in &cells {
            if !seen.insert(cell.cell_id.clone()) {
                return Err(Error::Config(format!("duplicate cell id {}", cell.cell_id)));
            }
            if cell.weeks.len() != n_weeks {
                return Err(Error::Config(format!(
                    "cell {} has {} weeks, expected {n_weeks}",
                    cell.cell_id,
                    cell.weeks.len()
                )));
            }
            for (i, w) in cell.weeks.iter().enumerate() {
                if w.week_index as usize != i {
                    return Err(Error::Config(format!(
                        "cell {} weeks are not contiguous from 0",
                        cell.cell_id
                    )));
                }
                if !(w.downlink_volume.is_finite() && w.downlink_volume > 0.0) {
                    return Err(Error::Config(format!(
                        "cell {} week {i}: downlink must be finite and positive",
                        cell.cell_id
                    )));
                }
                if !(w.avg_user_count.is_finite() && w.avg_user_count >= 0.0) {
                    return Err(Error::Config(format!(
                        "cell {} week {i}: user count must be finite and non-negative",
                        cell.cell_id
                    )));
                }
            }
        }

        Ok(TrafficDataset {
            cells,
            taxonomy,
            n_weeks,
            train_weeks,
            lookback,
            horizon,
        })
    }

    pub fn cells(&self) -> &[CellSeries] {
        &self.cells
    }

    pub fn taxonomy(&self) -> &PoiTaxonomy {
        &self.taxonomy
    }

    pub fn cell(&self, id: &CellId) -> Option<&CellSeries> {
        self.cells
            .binary_search_by(|c| c.cell_id.cmp(id))
            .ok()
            .map(|i| &self.cells[i])
    }

    /// Forecast origins `t` whose input `[t-L, t)` and targets `[t, t+H)`
    /// both fit inside the training weeks.
    pub fn train_window_origins(&self) -> Vec<usize> {
        let mut origins = Vec::new();
        let mut t = self.lookback;
        while t + self.horizon <= self.train_weeks {
            origins.push(t);
            t += 1;
        }
        origins
    }

    /// Forecast origins `t` whose targets `[t, t+H)` lie entirely in the test
    /// weeks. Inputs may reach back into the training region.
    pub fn test_window_origins(&self) -> Vec<usize> {
        let mut origins = Vec::new();
        let mut t = self.train_weeks.max(self.lookback);
        while t + self.horizon <= self.n_weeks {
            origins.push(t);
            t += 1;
        }
        origins
    }

    /// Train and test views over the common week axis.
    pub fn split(&self) -> (RegionView<'_>, RegionView<'_>) {
        (
            RegionView {
                dataset: self,
                region: Region::Train,
                origins: self.train_window_origins(),
            },
            RegionView {
                dataset: self,
                region: Region::Test,
                origins: self.test_window_origins(),
            },
        )
    }

    /// Serialize back to the ingest CSV schema (week as integer index).
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<W> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record([
            "cell_id",
            "week",
            "poi",
            "downlink_volume",
            "avg_user_count",
        ])
        .map_err(|e| Error::Serde(e.to_string()))?;
        for cell in &self.cells {
            for week in &cell.weeks {
                out.write_record([
                    cell.cell_id.as_str(),
                    &week.week_index.to_string(),
                    &cell.poi.name,
                    &format!("{}", week.downlink_volume),
                    &format!("{}", week.avg_user_count),
                ])
                .map_err(|e| Error::Serde(e.to_string()))?;
            }
        }
        out.into_inner().map_err(|e| Error::Serde(e.to_string()))
    }
}

/// Window region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    Train,
    Test,
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::Train => "train",
            Region::Test => "test",
        })
    }
}

/// A read-only view of one region's weeks and forecast origins.
#[derive(Debug, Clone)]
pub struct RegionView<'a> {
    dataset: &'a TrafficDataset,
    region: Region,
    origins: Vec<usize>,
}

impl RegionView<'_> {
    pub fn region(&self) -> Region {
        self.region
    }

    /// Week indices this view exposes.
    pub fn weeks(&self) -> std::ops::Range<usize> {
        match self.region {
            Region::Train => 0..self.dataset.train_weeks,
            Region::Test => self.dataset.train_weeks..self.dataset.n_weeks,
        }
    }

    /// Forecast origins, identical for every cell.
    pub fn origins(&self) -> &[usize] {
        &self.origins
    }

    pub fn windows_per_cell(&self) -> usize {
        self.origins.len()
    }
}

/// Why a cell was rejected at ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropReason {
    /// Week set is not exactly `0..n_weeks`.
    Incomplete,
    /// Some week reports zero downlink volume.
    ZeroDownlink,
    /// Some week exceeds the extreme-value percentile threshold.
    Extreme,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropReason::Incomplete => "incomplete",
            DropReason::ZeroDownlink => "zero-downlink",
            DropReason::Extreme => "extreme",
        })
    }
}

/// Ingestion configuration.
///
/// `week` columns holding ISO dates require `epoch` (a Monday); within-week
/// multiplicity under date projection is resolved by arithmetic mean. When
/// `poi_labels` pins a fixed label set, unknown labels either fall back to the
/// catch-all (`others_fallback`) or fail ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    /// Epoch Monday for ISO-date week projection.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch: Option<NaiveDate>,
    /// Expected samples per cell.
    pub n_weeks: usize,
    pub train_weeks: usize,
    pub lookback: usize,
    pub horizon: usize,
    /// POI coverage fraction for the bucketing rule.
    pub coverage: f64,
    /// Downlink percentile above which a cell is dropped; 100 disables.
    pub extreme_percentile: f64,
    /// Optional fixed set of accepted POI labels.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub poi_labels: Option<Vec<String>>,
    /// Map unknown labels to the catch-all instead of failing.
    pub others_fallback: bool,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            epoch: None,
            n_weeks: 31,
            train_weeks: 20,
            lookback: 4,
            horizon: 2,
            coverage: 0.95,
            extreme_percentile: 99.9,
            poi_labels: None,
            others_fallback: false,
        }
    }
}

impl IngestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_weeks == 0 {
            return Err(Error::Config("n_weeks must be positive".into()));
        }
        if !(0 < self.train_weeks && self.train_weeks <= self.n_weeks) {
            return Err(Error::Config(format!(
                "train_weeks must be in 1..={}, got {}",
                self.n_weeks, self.train_weeks
            )));
        }
        if self.lookback == 0 || self.horizon == 0 {
            return Err(Error::Config(
                "lookback and horizon must be positive".into(),
            ));
        }
        if self.lookback + self.horizon > self.train_weeks {
            return Err(Error::TooShort {
                lookback: self.lookback,
                horizon: self.horizon,
                train_weeks: self.train_weeks,
            });
        }
        if !(self.coverage > 0.0 && self.coverage <= 1.0) {
            return Err(Error::Config(format!(
                "coverage must be in (0, 1], got {}",
                self.coverage
            )));
        }
        if !(self.extreme_percentile > 0.0 && self.extreme_percentile <= 100.0) {
            return Err(Error::Config(format!(
                "extreme_percentile must be in (0, 100], got {}",
                self.extreme_percentile
            )));
        }
        if let Some(epoch) = self.epoch {
            if epoch.weekday() != Weekday::Mon {
                return Err(Error::Config(format!("epoch {epoch} is not a Monday")));
            }
        }
        Ok(())
    }
}

/// Per-cell rejection record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedCell {
    pub cell_id: CellId,
    pub reason: DropReason,
}

/// Counts and reasons from one ingestion pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_read: u64,
    pub cells_seen: usize,
    pub cells_kept: usize,
    pub dropped: Vec<DroppedCell>,
}

impl IngestReport {
    pub fn drop_counts(&self) -> BTreeMap<DropReason, usize> {
        let mut counts = BTreeMap::new();
        for d in &self.dropped {
            *counts.entry(d.reason).or_insert(0) += 1;
        }
        counts
    }
}

impl PartialOrd for DropReason {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for DropReason {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (*self as u8).cmp(&(*other as u8))
    }
}

/// Ingest a corpus CSV from a file path.
pub fn ingest_csv(path: &Path, config: &IngestConfig) -> Result<(TrafficDataset, IngestReport)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file, config)
}

// Accumulator for one (cell, week): arithmetic mean of date-projected rows.
struct WeekAccum {
    sum_downlink: f64,
    sum_users: f64,
    count: u32,
}

/// Ingest a corpus CSV from any reader. See [`ingest_csv`].
pub fn ingest_reader<R: Read>(
    reader: R,
    config: &IngestConfig,
) -> Result<(TrafficDataset, IngestReport)> {
    config.validate()?;

    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let headers = csv_reader
        .headers()
        .map_err(|e| Error::MalformedRow {
            line: 1,
            msg: format!("cannot read header: {e}"),
        })?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MalformedRow {
                line: 1,
                msg: format!("missing column {name:?}"),
            })
    };
    let c_cell = col("cell_id")?;
    let c_week = col("week")?;
    let c_poi = col("poi")?;
    let c_down = col("downlink_volume")?;
    let c_users = col("avg_user_count")?;

    let known: Option<BTreeSet<String>> = config
        .poi_labels
        .as_ref()
        .map(|labels| labels.iter().map(|l| canonical_label(l)).collect());
    let others_canon = canonical_label(OTHERS_LABEL);

    let mut rows_read = 0u64;
    // cell id -> (display label, canonical label, week -> accumulator)
    let mut cells: BTreeMap<CellId, (String, String, BTreeMap<u32, WeekAccum>)> = BTreeMap::new();

    for record in csv_reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(rows_read + 2);
            Error::MalformedRow {
                line,
                msg: e.to_string(),
            }
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(rows_read + 2);
        rows_read += 1;

        let field = |idx: usize, name: &str| -> Result<&str> {
            record.get(idx).ok_or_else(|| Error::MalformedRow {
                line,
                msg: format!("missing field {name}"),
            })
        };

        let cell_id = field(c_cell, "cell_id")?;
        if cell_id.is_empty() {
            return Err(Error::MalformedRow {
                line,
                msg: "empty cell_id".into(),
            });
        }

        let week_raw = field(c_week, "week")?;
        let (week, from_date) = parse_week(week_raw, config.epoch, line)?;

        let mut label = field(c_poi, "poi")?.to_string();
        if label.trim().is_empty() {
            return Err(Error::MalformedRow {
                line,
                msg: "empty POI label".into(),
            });
        }
        let mut canon = canonical_label(&label);
        if let Some(known) = &known {
            if !known.contains(&canon) && canon != others_canon {
                if config.others_fallback {
                    label = OTHERS_LABEL.to_string();
                    canon = others_canon.clone();
                } else {
                    return Err(Error::UnknownPoi {
                        line,
                        label: label.clone(),
                    });
                }
            }
        }

        let downlink = parse_measure(field(c_down, "downlink_volume")?, "downlink_volume", line)?;
        let users = parse_measure(field(c_users, "avg_user_count")?, "avg_user_count", line)?;

        let entry = cells
            .entry(CellId::new(cell_id))
            .or_insert_with(|| (label.trim().to_string(), canon.clone(), BTreeMap::new()));
        if entry.1 != canon {
            return Err(Error::MalformedRow {
                line,
                msg: format!(
                    "cell {cell_id} has conflicting POI labels {:?} and {label:?}",
                    entry.0
                ),
            });
        }

        match entry.2.get_mut(&week) {
            Some(accum) if from_date => {
                accum.sum_downlink += downlink;
                accum.sum_users += users;
                accum.count += 1;
            }
            Some(_) => {
                return Err(Error::DuplicateWeek {
                    line,
                    cell: cell_id.to_string(),
                    week,
                });
            }
            None => {
                entry.2.insert(
                    week,
                    WeekAccum {
                        sum_downlink: downlink,
                        sum_users: users,
                        count: 1,
                    },
                );
            }
        }
    }

    // Extreme threshold over all aggregated weekly downlink values.
    let threshold = if config.extreme_percentile < 100.0 {
        let mut all: Vec<f64> = cells
            .values()
            .flat_map(|(_, _, weeks)| weeks.values().map(|a| a.sum_downlink / a.count as f64))
            .collect();
        if all.is_empty() {
            None
        } else {
            all.sort_by(|a, b| a.partial_cmp(b).expect("measurements are finite"));
            let rank = ((config.extreme_percentile / 100.0) * all.len() as f64).ceil() as usize;
            Some(all[rank.clamp(1, all.len()) - 1])
        }
    } else {
        None
    };

    let cells_seen = cells.len();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    // (canonical label, display, kept-cell count) for the coverage rule
    let mut label_counts: BTreeMap<String, (String, u64)> = BTreeMap::new();

    for (cell_id, (display, canon, weeks)) in cells {
        let complete = weeks.len() == config.n_weeks
            && weeks.keys().enumerate().all(|(i, w)| *w as usize == i);
        if !complete {
            dropped.push(DroppedCell {
                cell_id,
                reason: DropReason::Incomplete,
            });
            continue;
        }

        let samples: Vec<WeekSample> = weeks
            .iter()
            .map(|(w, a)| WeekSample {
                week_index: *w,
                downlink_volume: a.sum_downlink / a.count as f64,
                avg_user_count: a.sum_users / a.count as f64,
            })
            .collect();

        if samples.iter().any(|s| s.downlink_volume == 0.0) {
            dropped.push(DroppedCell {
                cell_id,
                reason: DropReason::ZeroDownlink,
            });
            continue;
        }
        if let Some(t) = threshold {
            if samples.iter().any(|s| s.downlink_volume > t) {
                dropped.push(DroppedCell {
                    cell_id,
                    reason: DropReason::Extreme,
                });
                continue;
            }
        }

        let entry = label_counts
            .entry(canon.clone())
            .or_insert_with(|| (display.clone(), 0));
        entry.1 += 1;
        kept.push((cell_id, canon, samples));
    }

    if kept.is_empty() {
        return Err(Error::Config(
            "no cells passed validation; nothing to ingest".into(),
        ));
    }

    // Coverage rule runs on retained cells.
    let raw: Vec<(String, u64)> = label_counts
        .values()
        .map(|(display, count)| (display.clone(), *count))
        .collect();
    let taxonomy = bucket_pois(&raw, config.coverage)?;

    let cell_series: Vec<CellSeries> = kept
        .into_iter()
        .map(|(cell_id, canon, samples)| {
            let poi = taxonomy
                .resolve(&canon)
                .expect("every retained label is in the taxonomy")
                .clone();
            CellSeries {
                cell_id,
                poi,
                weeks: samples,
            }
        })
        .collect();

    let cells_kept = cell_series.len();
    let dataset = TrafficDataset::new(
        cell_series,
        taxonomy,
        config.n_weeks,
        config.train_weeks,
        config.lookback,
        config.horizon,
    )?;

    Ok((
        dataset,
        IngestReport {
            rows_read,
            cells_seen,
            cells_kept,
            dropped,
        },
    ))
}

fn parse_week(raw: &str, epoch: Option<NaiveDate>, line: u64) -> Result<(u32, bool)> {
    if let Ok(week) = raw.parse::<u32>() {
        return Ok((week, false));
    }
    if let Ok(date) = NaiveDate::parse_from_str(raw, "%Y-%m-%d") {
        let epoch = epoch.ok_or_else(|| Error::MalformedRow {
            line,
            msg: format!("week {raw:?} is a date but no epoch is configured"),
        })?;
        let days = (date - epoch).num_days();
        if days < 0 {
            return Err(Error::MalformedRow {
                line,
                msg: format!("date {raw} precedes the epoch {epoch}"),
            });
        }
        return Ok(((days / 7) as u32, true));
    }
    Err(Error::MalformedRow {
        line,
        msg: format!("week {raw:?} is neither an integer nor an ISO date"),
    })
}

fn parse_measure(raw: &str, name: &str, line: u64) -> Result<f64> {
    let value: f64 = raw.parse().map_err(|_| Error::MalformedRow {
        line,
        msg: format!("{name} {raw:?} is not a number"),
    })?;
    if !value.is_finite() || value < 0.0 {
        return Err(Error::MalformedRow {
            line,
            msg: format!("{name} must be finite and non-negative, got {raw}"),
        });
    }
    Ok(value)
}

/// Two-cell single-POI fixture shared by sibling modules' tests.
#[cfg(test)]
pub(crate) fn synthetic_dataset(
    n_weeks: usize,
    train_weeks: usize,
    lookback: usize,
    horizon: usize,
) -> TrafficDataset {
    let tax = bucket_pois(&[("Hospital".to_string(), 2)], 1.0).unwrap();
    let poi = tax.resolve("Hospital").unwrap().clone();
    let cells = (0..2)
        .map(|c| CellSeries {
            cell_id: CellId::new(format!("cell-{c}")),
            poi: poi.clone(),
            weeks: (0..n_weeks)
                .map(|w| WeekSample {
                    week_index: w as u32,
                    downlink_volume: 100.0 + c as f64 + w as f64,
                    avg_user_count: 10.0 + w as f64,
                })
                .collect(),
        })
        .collect();
    TrafficDataset::new(cells, tax, n_weeks, train_weeks, lookback, horizon).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(pairs: &[(&str, u64)]) -> Vec<(String, u64)> {
        pairs.iter().map(|(l, c)| (l.to_string(), *c)).collect()
    }

    #[test]
    fn bucket_keeps_prefix_reaching_coverage() {
        // 60 + 30 = 90 < 95, so the smallest covering prefix is all three.
        let tax = bucket_pois(&labels(&[("a", 60), ("b", 30), ("c", 10)]), 0.95).unwrap();
        let names: Vec<&str> = tax.categories().iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, vec!["a", "b", "c", OTHERS_LABEL]);
        assert_eq!(tax.count(tax.others().id), 0);
        assert_eq!(tax.resolve("b").unwrap().id, 2);
    }

    #[test]
    fn bucket_single_label_keeps_it_distinct() {
        let tax = bucket_pois(&labels(&[("only", 7)]), 0.95).unwrap();
        assert_eq!(tax.categories().len(), 2);
        assert_eq!(tax.resolve("only").unwrap().name, "only");
        assert_eq!(tax.count(tax.others().id), 0);
    }

    #[test]
    fn bucket_merges_tail_into_others() {
        // Eleven large named labels plus a 16-label tail; the covering prefix
        // stops after the named labels, so the tail merges into the catch-all.
        let named: [(&str, u64); 11] = [
            ("Low Rise Residential Area", 7484),
            ("High Rise Residential Area", 2285),
            ("Industrial Park", 1468),
            ("Colleges and Universities", 1156),
            ("Village", 541),
            ("Office Building", 360),
            ("Hospital", 342),
            ("Commercial Center", 257),
            ("Enterprises and Institutions", 237),
            ("Urban Road", 235),
            ("Square Park", 122),
        ];
        let mut raw = labels(&named);
        for i in 0..14 {
            raw.push((format!("tail-{i:02}"), 44));
        }
        raw.push(("tail-14".to_string(), 42));
        raw.push(("tail-15".to_string(), 42));

        let tax = bucket_pois(&raw, 0.95).unwrap();
        assert_eq!(tax.categories().len(), 12);
        for (name, _) in named {
            assert_eq!(tax.resolve(name).unwrap().name, name);
        }
        for i in 0..16 {
            assert!(tax.resolve(&format!("tail-{i:02}")).unwrap().is_others());
        }
        assert_eq!(tax.count(tax.others().id), 700);
        // The catch-all ranks by its merged count: below 1156, above 541.
        assert_eq!(tax.others().id, 5);
    }

    #[test]
    fn bucket_smallest_covering_prefix_matches_brute_force() {
        // Independent oracle: scan every prefix of the sorted list and pick
        // the smallest one whose cumulative share reaches coverage.
        let mut rng_state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            rng_state
        };
        for trial in 0..200 {
            let n = 1 + (next() % 12) as usize;
            let raw: Vec<(String, u64)> = (0..n)
                .map(|i| (format!("label-{trial}-{i}"), next() % 50))
                .collect();
            let coverage = 0.05 + (next() % 96) as f64 / 100.0;
            let coverage = coverage.min(1.0);

            let tax = match bucket_pois(&raw, coverage) {
                Ok(t) => t,
                Err(_) => continue,
            };

            let mut sorted = raw.clone();
            sorted.sort_by(|a, b| {
                b.1.cmp(&a.1)
                    .then_with(|| canonical_label(&a.0).cmp(&canonical_label(&b.0)))
            });
            let total: u64 = sorted.iter().map(|(_, c)| c).sum();
            let mut cumulative = 0u64;
            let mut keep = 0usize;
            for (i, (_, count)) in sorted.iter().enumerate() {
                cumulative += count;
                keep = i + 1;
                if cumulative as f64 >= coverage * total as f64 && cumulative > 0 {
                    break;
                }
            }
            for (i, (label, _)) in sorted.iter().enumerate() {
                let resolved = tax.resolve(label).unwrap();
                if i < keep {
                    assert_eq!(resolved.name, label.trim(), "trial {trial} kept label");
                } else {
                    assert!(resolved.is_others(), "trial {trial} tail label");
                }
            }
        }
    }

    #[test]
    fn bucket_is_invariant_under_permutation() {
        let raw = labels(&[("a", 50), ("b", 30), ("c", 12), ("d", 5), ("e", 3)]);
        let tax = bucket_pois(&raw, 0.9).unwrap();
        let mut rev = raw.clone();
        rev.reverse();
        assert_eq!(tax, bucket_pois(&rev, 0.9).unwrap());
    }

    #[test]
    fn bucket_rejects_empty_input() {
        assert!(matches!(bucket_pois(&[], 0.95), Err(Error::EmptyLabels)));
    }

    #[test]
    fn others_spelling_always_resolves_to_catch_all() {
        let tax = bucket_pois(&labels(&[("Shops", 60), ("others", 40)]), 0.95).unwrap();
        assert!(tax.resolve(" OTHERS ").unwrap().is_others());
        assert_eq!(tax.count(tax.others().id), 40);
    }

    const CSV_HEADER: &str = "cell_id,week,poi,downlink_volume,avg_user_count\n";

    fn one_cell_csv(n_weeks: usize, skip_week: Option<usize>, zero_week: Option<usize>) -> String {
        let mut out = String::from(CSV_HEADER);
        for w in 0..n_weeks {
            if Some(w) == skip_week {
                continue;
            }
            let down = if Some(w) == zero_week {
                0.0
            } else {
                100.0 + w as f64
            };
            out.push_str(&format!("cell-1,{w},Hospital,{down},{}\n", 10.0 + w as f64));
        }
        out
    }

    fn small_config() -> IngestConfig {
        IngestConfig {
            n_weeks: 31,
            train_weeks: 20,
            ..Default::default()
        }
    }

    #[test]
    fn ingest_minimal_complete_cell() {
        let (ds, report) =
            ingest_reader(one_cell_csv(31, None, None).as_bytes(), &small_config()).unwrap();
        assert_eq!(ds.cells().len(), 1);
        assert_eq!(ds.n_weeks, 31);
        assert_eq!(report.rows_read, 31);
        assert_eq!(report.cells_kept, 1);
        assert!(report.dropped.is_empty());
    }

    #[test]
    fn ingest_drops_incomplete_cell() {
        let mut csv = one_cell_csv(31, Some(7), None);
        csv.push_str(&one_cell_csv(31, None, None).replace("cell-1", "cell-2")[CSV_HEADER.len()..]);
        let (ds, report) = ingest_reader(csv.as_bytes(), &small_config()).unwrap();
        assert_eq!(ds.cells().len(), 1);
        assert_eq!(
            report.dropped,
            vec![DroppedCell {
                cell_id: CellId::new("cell-1"),
                reason: DropReason::Incomplete
            }]
        );
    }

    #[test]
    fn ingest_drops_zero_downlink_cell() {
        let mut csv = one_cell_csv(31, None, Some(12));
        csv.push_str(&one_cell_csv(31, None, None).replace("cell-1", "cell-2")[CSV_HEADER.len()..]);
        let (_, report) = ingest_reader(csv.as_bytes(), &small_config()).unwrap();
        assert_eq!(report.dropped[0].reason, DropReason::ZeroDownlink);
        assert_eq!(report.cells_kept, 1);
    }

    #[test]
    fn ingest_drops_extreme_cell() {
        // 40 flat cells plus one with a huge spike; percentile 90 lands on
        // the flat level, so only the spike exceeds it.
        let mut csv = String::from(CSV_HEADER);
        for c in 0..40 {
            for w in 0..31 {
                csv.push_str(&format!("cell-{c:02},{w},Hospital,100,5\n"));
            }
        }
        for w in 0..31 {
            let down = if w == 30 { 1e9 } else { 100.0 };
            csv.push_str(&format!("spiky,{w},Hospital,{down},5\n"));
        }
        let config = IngestConfig {
            extreme_percentile: 90.0,
            ..small_config()
        };
        let (ds, report) = ingest_reader(csv.as_bytes(), &config).unwrap();
        assert_eq!(report.dropped.len(), 1);
        assert_eq!(report.dropped[0].cell_id.as_str(), "spiky");
        assert_eq!(report.dropped[0].reason, DropReason::Extreme);
        assert_eq!(ds.cells().len(), 40);
    }

    #[test]
    fn ingest_rejects_duplicate_week() {
        let mut csv = one_cell_csv(31, None, None);
        csv.push_str("cell-1,5,Hospital,99,9\n");
        let err = ingest_reader(csv.as_bytes(), &small_config()).unwrap_err();
        assert!(matches!(err, Error::DuplicateWeek { week: 5, .. }));
    }

    #[test]
    fn ingest_reports_malformed_row_line() {
        let mut csv = String::from(CSV_HEADER);
        csv.push_str("cell-1,0,Hospital,100,5\n");
        csv.push_str("cell-1,1,Hospital,not-a-number,5\n");
        let err = ingest_reader(csv.as_bytes(), &small_config()).unwrap_err();
        match err {
            Error::MalformedRow { line, .. } => assert_eq!(line, 3),
            other => panic!("expected MalformedRow, got {other:?}"),
        }
    }

    #[test]
    fn ingest_rejects_unknown_poi_without_fallback() {
        let config = IngestConfig {
            poi_labels: Some(vec!["Hospital".into()]),
            others_fallback: false,
            ..small_config()
        };
        let csv = one_cell_csv(31, None, None).replace("Hospital", "Mystery");
        let err = ingest_reader(csv.as_bytes(), &config).unwrap_err();
        assert!(matches!(err, Error::UnknownPoi { .. }));

        let with_fallback = IngestConfig {
            others_fallback: true,
            ..config
        };
        let csv = one_cell_csv(31, None, None).replace("Hospital", "Mystery");
        let (ds, _) = ingest_reader(csv.as_bytes(), &with_fallback).unwrap();
        assert!(ds.cells()[0].poi.is_others());
    }

    #[test]
    fn ingest_projects_dates_and_averages_within_week() {
        // 2021-05-03 is a Monday. Two samples inside week 0 average to 150.
        let mut csv = String::from(CSV_HEADER);
        csv.push_str("cell-1,2021-05-03,Hospital,100,10\n");
        csv.push_str("cell-1,2021-05-05,Hospital,200,30\n");
        for w in 1..6 {
            let date =
                NaiveDate::from_ymd_opt(2021, 5, 3).unwrap() + chrono::Duration::days(7 * w as i64);
            csv.push_str(&format!("cell-1,{date},Hospital,{},5\n", 100 + w));
        }
        let config = IngestConfig {
            epoch: NaiveDate::from_ymd_opt(2021, 5, 3),
            n_weeks: 6,
            train_weeks: 6,
            ..Default::default()
        };
        let (ds, _) = ingest_reader(csv.as_bytes(), &config).unwrap();
        let cell = &ds.cells()[0];
        assert_eq!(cell.weeks[0].downlink_volume, 150.0);
        assert_eq!(cell.weeks[0].avg_user_count, 20.0);
    }

    #[test]
    fn ingest_rejects_non_monday_epoch() {
        let config = IngestConfig {
            epoch: NaiveDate::from_ymd_opt(2021, 5, 4),
            ..Default::default()
        };
        assert!(matches!(config.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn category_counts_sum_to_retained_cells() {
        let mut csv = String::from(CSV_HEADER);
        for c in 0..9 {
            let poi = ["Hospital", "Village", "Square Park"][c % 3];
            for w in 0..31 {
                csv.push_str(&format!("cell-{c},{w},{poi},{},5\n", 50 + c + w));
            }
        }
        let (ds, report) = ingest_reader(csv.as_bytes(), &small_config()).unwrap();
        let tax = ds.taxonomy();
        let total: u64 = tax.categories().iter().map(|c| tax.count(c.id)).sum();
        assert_eq!(total as usize, report.cells_kept);
    }

    #[test]
    fn split_window_counts_match_enumeration() {
        // Independent oracle: enumerate every origin t and keep those whose
        // input [t-L, t) and targets [t, t+H) fit the designated region.
        let ds = synthetic_dataset(31, 20, 4, 2);
        let (train, test) = ds.split();

        let mut expect_train = Vec::new();
        let mut expect_test = Vec::new();
        for t in 0..=ds.n_weeks {
            if t >= ds.lookback && t + ds.horizon <= ds.train_weeks {
                expect_train.push(t);
            }
            if t >= ds.lookback && t >= ds.train_weeks && t + ds.horizon <= ds.n_weeks {
                expect_test.push(t);
            }
        }
        assert_eq!(train.origins(), expect_train.as_slice());
        assert_eq!(test.origins(), expect_test.as_slice());
        assert_eq!(train.windows_per_cell(), 15);
        assert_eq!(test.windows_per_cell(), 10);
        assert_eq!(test.origins().first(), Some(&20));
        assert_eq!(test.origins().last(), Some(&29));
    }

    #[test]
    fn split_boundary_no_test_region() {
        let ds = synthetic_dataset(6, 6, 4, 2);
        let (train, test) = ds.split();
        assert_eq!(train.origins(), &[4]);
        assert!(test.origins().is_empty());
    }

    #[test]
    fn split_minimal_test_region() {
        let ds = synthetic_dataset(22, 20, 4, 2);
        let (_, test) = ds.split();
        assert_eq!(test.origins(), &[20]);
    }

    #[test]
    fn split_has_no_leakage() {
        let ds = synthetic_dataset(31, 20, 4, 2);
        let (train, test) = ds.split();
        for &t in train.origins() {
            assert!(t + ds.horizon - 1 < ds.train_weeks);
        }
        for &t in test.origins() {
            assert!(t >= ds.train_weeks);
        }
    }

    #[test]
    fn csv_round_trip_preserves_retained_cells() {
        let mut csv = String::from(CSV_HEADER);
        for c in 0..6 {
            let poi = ["Hospital", "Village"][c % 2];
            for w in 0..31 {
                csv.push_str(&format!(
                    "cell-{c},{w},{poi},{},{}\n",
                    0.125 + c as f64 * 3.7 + w as f64,
                    1.5 + w as f64 / 3.0
                ));
            }
        }
        let config = IngestConfig {
            extreme_percentile: 100.0,
            ..small_config()
        };
        let (ds, _) = ingest_reader(csv.as_bytes(), &config).unwrap();
        let out = ds.write_csv(Vec::new()).unwrap();
        let (again, report) = ingest_reader(out.as_slice(), &config).unwrap();
        assert_eq!(report.dropped, vec![]);
        assert_eq!(ds.cells(), again.cells());
    }
}
