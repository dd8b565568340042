//! Per-POI K-Means over standardized training-week downlink profiles, plus
//! the retention filter that decides which clusters get trained models.
//!
//! Distance is Euclidean on the aligned weekly axis. Initialization is
//! k-means++ under an explicit seed; Lloyd iteration stops on `max_iter` or
//! when the relative inertia improvement drops below `tol`. Clusters smaller
//! than `ratio` of the largest cluster in their POI are left unmodeled.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{CellId, Channel, PoiCategory, TrafficDataset};
use crate::error::{Error, Result};
use crate::preprocess::Scaler;

/// Fraction of the largest cluster a cluster must reach to be retained.
pub const DEFAULT_RETENTION_RATIO: f64 = 0.2;

/// K-Means hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        KMeansParams {
            k: 50,
            seed: 0,
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

/// A fitted per-POI clustering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub poi: PoiCategory,
    /// Effective cluster count (reduced when the POI has fewer cells than k).
    pub k: usize,
    /// k centroids over the standardized training-week downlink profile.
    pub centroids: Vec<Vec<f64>>,
    pub assignments: BTreeMap<CellId, usize>,
    /// Clusters whose size reaches the retention threshold.
    pub retained: BTreeSet<usize>,
    /// Sum of squared distances from cells to their assigned centroids.
    pub inertia: f64,
    /// Per-cluster share of `inertia`.
    pub cluster_inertia: Vec<f64>,
    /// Inertia after each Lloyd iteration, starting at the initial
    /// assignment; monotone non-increasing.
    pub inertia_trace: Vec<f64>,
}

impl ClusterModel {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k];
        for &c in self.assignments.values() {
            sizes[c] += 1;
        }
        sizes
    }

    /// Cells assigned to one cluster, in id order.
    pub fn cells_in(&self, cluster: usize) -> Vec<&CellId> {
        self.assignments
            .iter()
            .filter(|(_, &c)| c == cluster)
            .map(|(id, _)| id)
            .collect()
    }

    /// Cells outside every retained cluster, in id order.
    pub fn unmodeled_cells(&self) -> Vec<&CellId> {
        self.assignments
            .iter()
            .filter(|(_, c)| !self.retained.contains(c))
            .map(|(id, _)| id)
            .collect()
    }
}

/// Mix a base seed with two salts into an independent stream seed.
///
/// SplitMix64-style finalization; used to give every POI and every cluster
/// its own deterministic RNG stream regardless of scheduling order.
pub fn mix_seed(base: u64, salt_a: u64, salt_b: u64) -> u64 {
    let mut z = base
        .wrapping_add(salt_a.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(salt_b.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid with ties broken by lowest cluster index.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d2 = dist2(point, &centroids[0]);
    for (c, centroid) in centroids.iter().enumerate().skip(1) {
        let d2 = dist2(point, centroid);
        if d2 < best_d2 {
            best = c;
            best_d2 = d2;
        }
    }
    (best, best_d2)
}

/// k-means++ seeding: D²-weighted sampling of k distinct starting centroids.
///
/// Exposed so reference implementations can start Lloyd from identical
/// centroids when validating the fitter.
pub fn kmeans_plus_plus_init(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    assert!(!points.is_empty(), "k-means++ needs at least one point");
    assert!(k >= 1 && k <= points.len(), "k must be in 1..=n");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = vec![rng.gen_range(0..points.len())];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| dist2(p, &points[chosen[0]]))
        .collect();

    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            // cum > r never selects a zero-weight (already-covered) point.
            let r = rng.gen::<f64>() * total;
            let mut cum = 0.0;
            let mut pick = points.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                cum += w;
                if cum > r {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // All points coincide with chosen centroids; take the first
            // index not already used so centroid count still reaches k.
            (0..points.len()).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(pick);
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, &points[pick]);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    chosen.into_iter().map(|i| points[i].clone()).collect()
}

fn assignment_pass(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut assign = Vec::with_capacity(points.len());
    let mut inertia = 0.0;
    for p in points {
        let (c, d2) = nearest(p, centroids);
        assign.push(c);
        inertia += d2;
    }
    (assign, inertia)
}

/// Lloyd's algorithm from the given starting centroids.
///
/// Returns final (centroids, assignments, inertia trace). The trace records
/// the inertia of each (assignment, centroid) pair visited, starting with
/// the initial assignment; the final assignment pass always runs against the
/// final centroids.
pub fn lloyd(
    points: &[Vec<f64>],
    init: &[Vec<f64>],
    max_iter: usize,
    tol: f64,
) -> (Vec<Vec<f64>>, Vec<usize>, Vec<f64>) {
    let dim = points[0].len();
    let k = init.len();
    let mut centroids = init.to_vec();
    let (mut assign, mut inertia) = assignment_pass(points, &centroids);
    let mut trace = vec![inertia];

    for _ in 0..max_iter {
        // Update step: means of assigned points; empty clusters re-seed at
        // the point farthest from their current centroid, skipping points
        // grabbed by an earlier empty cluster this pass.
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assign) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut reseeded: Vec<usize> = Vec::new();
        for c in 0..k {
            if counts[c] > 0 {
                for s in sums[c].iter_mut() {
                    *s /= counts[c] as f64;
                }
                centroids[c] = std::mem::take(&mut sums[c]);
            } else {
                let mut far = None;
                let mut far_d2 = -1.0;
                for (i, p) in points.iter().enumerate() {
                    if reseeded.contains(&i) {
                        continue;
                    }
                    let d = dist2(p, &centroids[c]);
                    if d > far_d2 {
                        far = Some(i);
                        far_d2 = d;
                    }
                }
                if let Some(i) = far {
                    reseeded.push(i);
                    centroids[c] = points[i].clone();
                }
            }
        }

        let (next_assign, next_inertia) = assignment_pass(points, &centroids);
        trace.push(next_inertia);
        assign = next_assign;

        if inertia <= 0.0 {
            break;
        }
        let improvement = (inertia - next_inertia) / inertia;
        inertia = next_inertia;
        if improvement < tol {
            break;
        }
    }

    (centroids, assign, trace)
}

/// Fit K-Means over one POI's standardized downlink profiles.
///
/// Effective k is reduced to the profile count when the POI is small. The
/// retained set is computed with the default retention ratio; callers with a
/// different ratio re-filter via [`filter_clusters`].
pub fn fit_kmeans(
    poi: &PoiCategory,
    profiles: &BTreeMap<CellId, Vec<f64>>,
    params: &KMeansParams,
) -> Result<ClusterModel> {
    if profiles.is_empty() {
        return Err(Error::EmptyProfiles);
    }
    if params.k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let dim = profiles.values().next().expect("non-empty").len();
    if dim == 0 || profiles.values().any(|p| p.len() != dim) {
        return Err(Error::Shape(format!(
            "profiles for POI {} must share one positive length",
            poi.name
        )));
    }

    let ids: Vec<&CellId> = profiles.keys().collect();
    let points: Vec<Vec<f64>> = profiles.values().cloned().collect();
    let k = params.k.min(points.len());

    let init = kmeans_plus_plus_init(&points, k, params.seed);
    let (centroids, assign, trace) = lloyd(&points, &init, params.max_iter, params.tol);

    let mut cluster_inertia = vec![0.0; k];
    for (p, &c) in points.iter().zip(&assign) {
        cluster_inertia[c] += dist2(p, &centroids[c]);
    }
    let inertia = cluster_inertia.iter().sum();

    let assignments: BTreeMap<CellId, usize> = ids
        .iter()
        .zip(&assign)
        .map(|(id, &c)| ((*id).clone(), c))
        .collect();

    let mut model = ClusterModel {
        poi: poi.clone(),
        k,
        centroids,
        assignments,
        retained: BTreeSet::new(),
        inertia,
        cluster_inertia,
        inertia_trace: trace,
    };
    model.retained = filter_clusters(&model, DEFAULT_RETENTION_RATIO)?;
    Ok(model)
}

/// Clusters whose size reaches `ratio` of the largest cluster's size.
pub fn filter_clusters(model: &ClusterModel, ratio: f64) -> Result<BTreeSet<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!(
            "ratio must be in (0, 1], got {ratio}"
        )));
    }
    if model.assignments.is_empty() {
        return Err(Error::NoAssignments);
    }
    let sizes = model.sizes();
    let max = *sizes.iter().max().expect("k >= 1");
    let threshold = ratio * max as f64;
    Ok(sizes
        .iter()
        .enumerate()
        .filter(|(_, &s)| s as f64 >= threshold)
        .map(|(c, _)| c)
        .collect())
}

/// Standardized training-week downlink profile per cell, grouped by POI id.
pub fn cluster_profiles(
    dataset: &TrafficDataset,
    scaler: &Scaler,
) -> Result<BTreeMap<u16, BTreeMap<CellId, Vec<f64>>>> {
    let mut by_poi: BTreeMap<u16, BTreeMap<CellId, Vec<f64>>> = BTreeMap::new();
    for cell in dataset.cells() {
        let cs = scaler.cell(&cell.cell_id).ok_or_else(|| {
            Error::StaleArtifact(format!("scaler has no entry for cell {}", cell.cell_id))
        })?;
        let profile: Vec<f64> = (0..dataset.train_weeks)
            .map(|w| cs.transform(Channel::Downlink, cell.value(w, Channel::Downlink)))
            .collect();
        by_poi
            .entry(cell.poi.id)
            .or_default()
            .insert(cell.cell_id.clone(), profile);
    }
    Ok(by_poi)
}

/// Cluster every POI of the dataset. Each POI gets its own seed stream
/// derived from `params.seed`, so results do not depend on fit order.
pub fn cluster_pipeline(
    dataset: &TrafficDataset,
    scaler: &Scaler,
    params: &KMeansParams,
    ratio: f64,
) -> Result<BTreeMap<u16, ClusterModel>> {
    let profiles = cluster_profiles(dataset, scaler)?;
    let mut models = BTreeMap::new();
    for (poi_id, poi_profiles) in profiles {
        let poi = dataset
            .taxonomy()
            .category(poi_id)
            .ok_or_else(|| Error::StaleArtifact(format!("unknown POI id {poi_id}")))?;
        let params = KMeansParams {
            seed: mix_seed(params.seed, poi_id as u64, 0),
            ..*params
        };
        let mut model = fit_kmeans(poi, &poi_profiles, &params)?;
        model.retained = filter_clusters(&model, ratio)?;
        models.insert(poi_id, model);
    }
    Ok(models)
}

/// Cluster report: one row per (POI, cluster) with size, retention flag, and
/// the cluster's share of the POI's inertia.
pub fn write_cluster_report<W: std::io::Write>(
    models: &BTreeMap<u16, ClusterModel>,
    writer: W,
) -> Result<W> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["poi", "cluster", "size", "retained", "inertia_share"])
        .map_err(|e| Error::Serde(e.to_string()))?;
    for model in models.values() {
        let sizes = model.sizes();
        for (c, (size, ci)) in sizes.iter().zip(&model.cluster_inertia).enumerate() {
            let share = if model.inertia > 0.0 {
                ci / model.inertia
            } else {
                0.0
            };
            out.write_record([
                model.poi.name.as_str(),
                &c.to_string(),
                &size.to_string(),
                if model.retained.contains(&c) {
                    "true"
                } else {
                    "false"
                },
                &format!("{share}"),
            ])
            .map_err(|e| Error::Serde(e.to_string()))?;
        }
    }
    out.into_inner().map_err(|e| Error::Serde(e.to_string()))
}
