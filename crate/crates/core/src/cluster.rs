//! Functional clustering of channels with k-means and elbow selection of the
//! number of clusters.
//!
//! Channels are the clustered objects. Each is represented by its z-scored
//! signal (mean 0, population variance 1; constant channels map to zero) so
//! that shape, not amplitude, drives similarity. Centroids and WCSS live in
//! that standardized space, while `cluster_series` holds the arithmetic mean
//! of the raw member signals.

use std::ops::RangeInclusive;

use ndarray::{Array2, ArrayView1};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::TimeSeriesMatrix;
use crate::rng::SeedPath;

pub const MAX_ITERATIONS: usize = 300;
pub const DEFAULT_RESTARTS: usize = 10;
pub const DEFAULT_MAX_K: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub n_clusters: usize,
    /// Cluster index of each channel, in channel order.
    pub assignment: Vec<usize>,
    /// One standardized centroid of length `T` per cluster.
    pub centroids: Vec<Vec<f64>>,
    pub wcss: f64,
    /// `[T x N]` per-cluster mean of the raw member signals.
    #[serde(skip)]
    pub cluster_series: Array2<f64>,
    pub iterations: usize,
}

impl ClusterModel {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == cluster)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Channel vectors after per-channel z-scoring, one `Vec` per channel.
pub fn standardized_channels(series: &TimeSeriesMatrix) -> Vec<Vec<f64>> {
    (0..series.n_channels())
        .map(|j| zscore(series.channel(j)))
        .collect()
}

fn zscore(x: ArrayView1<'_, f64>) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 {
        return vec![0.0; x.len()];
    }
    let sd = var.sqrt();
    x.iter().map(|v| (v - mean) / sd).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn distinct_count(points: &[Vec<f64>]) -> usize {
    let mut keys: Vec<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|v| (v + 0.0).to_bits()).collect())
        .collect();
    keys.sort();
    keys.dedup();
    keys.len()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn update_centroids(points: &[Vec<f64>], assignment: &[usize], k: usize) -> Vec<Vec<f64>> {
    let t = points[0].len();
    let mut sums = vec![vec![0.0; t]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assignment) {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    sums
}

fn wcss_of(points: &[Vec<f64>], assignment: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &c)| sq_dist(p, &centroids[c]))
        .sum()
}

/// Move the point farthest from its centroid into each empty cluster.
fn repair_empty(points: &[Vec<f64>], assignment: &mut [usize], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        assignment.iter().for_each(|&c| counts[c] += 1);
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            return;
        };
        let centroids = update_centroids(points, assignment, k);
        let (far, _) = points
            .iter()
            .enumerate()
            .filter(|(i, _)| counts[assignment[*i]] > 1)
            .map(|(i, p)| (i, sq_dist(p, &centroids[assignment[i]])))
            .fold((usize::MAX, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        assignment[far] = empty;
    }
}

fn plus_plus_seeds(points: &[Vec<f64>], k: usize, rng: &mut crate::rng::Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            // rounding can walk past the last positive weight
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&d| d > 0.0).expect("total > 0");
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centroids.last().unwrap()));
        }
    }
    centroids
}

/// Single-point moves that lower the WCSS (Hartigan's criterion). Lloyd fixed
/// points can still admit such moves because moving a point also shifts both
/// centroids.
fn hartigan_refine(points: &[Vec<f64>], assignment: &mut [usize], k: usize) -> bool {
    let mut counts = vec![0usize; k];
    assignment.iter().for_each(|&c| counts[c] += 1);
    let mut centroids = update_centroids(points, assignment, k);
    let mut moved_any = false;
    for _ in 0..MAX_ITERATIONS {
        let mut moved = false;
        for (i, p) in points.iter().enumerate() {
            let from = assignment[i];
            if counts[from] < 2 {
                continue;
            }
            let na = counts[from] as f64;
            let removal = na / (na - 1.0) * sq_dist(p, &centroids[from]);
            let mut best: Option<(usize, f64)> = None;
            for to in (0..k).filter(|&c| c != from) {
                let nb = counts[to] as f64;
                let gain = removal - nb / (nb + 1.0) * sq_dist(p, &centroids[to]);
                if gain > 1e-12 * removal.max(1.0) && best.is_none_or(|b| gain > b.1) {
                    best = Some((to, gain));
                }
            }
            if let Some((to, _)) = best {
                assignment[i] = to;
                counts[from] -= 1;
                counts[to] += 1;
                centroids = update_centroids(points, assignment, k);
                moved = true;
                moved_any = true;
            }
        }
        if !moved {
            break;
        }
    }
    moved_any
}

/// Lloyd's algorithm with k-means++ seeding on the standardized channels,
/// followed by single-point refinement.
pub fn kmeans(series: &TimeSeriesMatrix, k: usize, seed: u64) -> Result<ClusterModel> {
    let points = standardized_channels(series);
    kmeans_points(series, &points, k, seed)
}

fn kmeans_points(
    series: &TimeSeriesMatrix,
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
) -> Result<ClusterModel> {
    let r = points.len();
    if k == 0 || k > r {
        return Err(Error::DegenerateInput(format!("k = {k} with {r} channels")));
    }
    let distinct = distinct_count(points);
    if k > distinct {
        return Err(Error::DegenerateInput(format!(
            "k = {k} exceeds the {distinct} distinct channel vectors"
        )));
    }
    let mut rng = SeedPath::new(seed).label("kmeans++").rng();
    let seeds = plus_plus_seeds(points, k, &mut rng);
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &seeds).0).collect();
    repair_empty(points, &mut assignment, k);
    let mut centroids = update_centroids(points, &assignment, k);
    let mut wcss = wcss_of(points, &assignment, &centroids);
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        repair_empty(points, &mut next, k);
        if next == assignment {
            break;
        }
        assignment = next;
        centroids = update_centroids(points, &assignment, k);
        let updated = wcss_of(points, &assignment, &centroids);
        debug_assert!(
            updated <= wcss * (1.0 + 1e-12) + 1e-12,
            "wcss increased during Lloyd iteration: {wcss} -> {updated}"
        );
        wcss = updated;
    }
    let moved = hartigan_refine(points, &mut assignment, k);
    if moved {
        centroids = update_centroids(points, &assignment, k);
        wcss = wcss_of(points, &assignment, &centroids);
    }
    let cluster_series = mean_series(series, &assignment, k);
    Ok(ClusterModel {
        n_clusters: k,
        assignment,
        centroids,
        wcss,
        cluster_series,
        iterations,
    })
}

/// Best of `restarts` independent k-means runs by WCSS; ties go to the lowest
/// restart index.
pub fn kmeans_restarts(
    series: &TimeSeriesMatrix,
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<ClusterModel> {
    let points = standardized_channels(series);
    best_of_restarts(series, &points, k, seed, restarts)
}

fn best_of_restarts(
    series: &TimeSeriesMatrix,
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<ClusterModel> {
    let runs: Vec<Result<ClusterModel>> = (0..restarts.max(1) as u64)
        .into_par_iter()
        .map(|r| {
            let s = SeedPath::new(seed).label("restart").index(k as u64).index(r).seed();
            kmeans_points(series, points, k, s)
        })
        .collect();
    let mut best: Option<ClusterModel> = None;
    for run in runs {
        let run = run?;
        if best.as_ref().is_none_or(|b| run.wcss < b.wcss) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Debug, Clone)]
pub struct ElbowSelection {
    pub chosen_k: usize,
    pub ks: Vec<usize>,
    pub wcss_curve: Vec<f64>,
    /// Best-of-restarts model at `chosen_k`.
    pub model: ClusterModel,
}

/// Default search range, `2..=min(12, R - 1)`.
pub fn default_k_range(n_channels: usize) -> RangeInclusive<usize> {
    2..=DEFAULT_MAX_K.min(n_channels.saturating_sub(1))
}

/// Index into `ks` of the elbow: the interior point with the largest discrete
/// second difference, ties toward smaller `k`.
pub fn elbow_point(ks: &[usize], wcss: &[f64]) -> Result<usize> {
    if ks.len() != wcss.len() {
        return Err(Error::Mismatch("k and wcss lengths differ".into()));
    }
    if ks.len() < 3 {
        return Err(Error::DegenerateInput(format!(
            "elbow needs at least 3 values of k, got {}",
            ks.len()
        )));
    }
    let mut best = 1;
    let mut best_curv = f64::NEG_INFINITY;
    for i in 1..ks.len() - 1 {
        let curv = wcss[i - 1] - 2.0 * wcss[i] + wcss[i + 1];
        if curv > best_curv {
            best_curv = curv;
            best = i;
        }
    }
    Ok(ks[best])
}

pub fn select_k_elbow(
    series: &TimeSeriesMatrix,
    k_range: RangeInclusive<usize>,
    seed: u64,
    restarts: usize,
) -> Result<ElbowSelection> {
    let r = series.n_channels();
    let (lo, hi) = (*k_range.start(), *k_range.end());
    if lo < 2 || hi > r {
        return Err(Error::Range(format!("k range {lo}..={hi} outside [2, {r}]")));
    }
    let ks: Vec<usize> = k_range.collect();
    if ks.len() < 3 {
        return Err(Error::DegenerateInput(format!(
            "elbow needs at least 3 values of k, got {}",
            ks.len()
        )));
    }
    let points = standardized_channels(series);
    let mut models = Vec::with_capacity(ks.len());
    for &k in &ks {
        models.push(best_of_restarts(series, &points, k, seed, restarts)?);
    }
    let wcss_curve: Vec<f64> = models.iter().map(|m| m.wcss).collect();
    let chosen_k = elbow_point(&ks, &wcss_curve)?;
    let model = models.swap_remove(chosen_k - lo);
    Ok(ElbowSelection { chosen_k, ks, wcss_curve, model })
}

fn mean_series(series: &TimeSeriesMatrix, assignment: &[usize], k: usize) -> Array2<f64> {
    let data = series.data();
    let t = series.n_timepoints();
    let mut out = Array2::zeros((t, k));
    let mut counts = vec![0usize; k];
    for (j, &c) in assignment.iter().enumerate() {
        counts[c] += 1;
        let mut col = out.column_mut(c);
        col += &data.column(j);
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            out.column_mut(c).mapv_inplace(|v| v / n as f64);
        }
    }
    out
}

/// Per-cluster mean of the raw member signals, `[T x N]`.
pub fn cluster_mean_series(series: &TimeSeriesMatrix, model: &ClusterModel) -> Result<Array2<f64>> {
    if model.assignment.len() != series.n_channels() {
        return Err(Error::Mismatch(format!(
            "assignment covers {} channels, series has {}",
            model.assignment.len(),
            series.n_channels()
        )));
    }
    if let Some(&bad) = model.assignment.iter().find(|&&c| c >= model.n_clusters) {
        return Err(Error::Mismatch(format!(
            "cluster index {bad} out of range for {} clusters",
            model.n_clusters
        )));
    }
    Ok(mean_series(series, &model.assignment, model.n_clusters))
}
