//! Equal-size grouping of clients by estimated round time.
//!
//! Centroids sit at evenly spaced percentiles of the round-time
//! distribution, each client joins its nearest centroid, and cluster sizes
//! are then evened out by shifting boundary clients between neighbouring
//! clusters. The result is always a set of contiguous ranges of the
//! time-sorted client list whose sizes differ by at most one.

use std::collections::HashMap;

use log::warn;
use rand::Rng as _;
use serde::Serialize;

use crate::device_model::{ClientId, Population};
use crate::error::{Error, Result};
use crate::seed;

/// A moved client may be at most this many times slower than the slowest
/// member of the faster cluster receiving it.
pub const UPWARD_MOVE_CAP: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSet {
    clusters: Vec<Vec<ClientId>>,
    centroids: Vec<f64>,
}

#[derive(Serialize)]
struct ClusterSetDoc<'a> {
    k: usize,
    clusters: &'a [Vec<ClientId>],
    centroids: &'a [f64],
    k_anonymity: usize,
}

impl Serialize for ClusterSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ClusterSetDoc {
            k: self.k(),
            clusters: &self.clusters,
            centroids: &self.centroids,
            k_anonymity: k_anonymity(self),
        }
        .serialize(s)
    }
}

impl ClusterSet {
    /// Build from explicit member lists. Centroids are the member means of
    /// `times` (0 for an empty cluster).
    pub fn from_members(clusters: Vec<Vec<ClientId>>, times: &HashMap<ClientId, f64>) -> Result<Self> {
        if clusters.is_empty() {
            return Err(Error::config("cluster set needs at least one cluster"));
        }
        let centroids = clusters
            .iter()
            .map(|c| {
                let ts: Option<Vec<f64>> = c.iter().map(|id| times.get(id).copied()).collect();
                let ts = ts.ok_or_else(|| Error::config("cluster member missing from time table"))?;
                Ok(mean(&ts))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { clusters, centroids })
    }

    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    pub fn clusters(&self) -> &[Vec<ClientId>] {
        &self.clusters
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(Vec::len).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Percentile levels (in percent) used as centroids for `k` clusters.
pub fn percentile_levels(k: usize) -> Vec<f64> {
    (1..=k).map(|i| 100.0 * i as f64 / (k + 1) as f64).collect()
}

/// Linear-interpolation percentile of an ascending sample at rank `q(n-1)/100`.
fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn percentile_centroids(times: &[f64], k: usize) -> Result<Vec<f64>> {
    if times.is_empty() {
        return Err(Error::config("cannot cluster an empty set of round times"));
    }
    if k == 0 || k > times.len() {
        return Err(Error::config(format!(
            "k must lie in 1..={}, got {k}",
            times.len()
        )));
    }
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(percentile_levels(k)
        .into_iter()
        .map(|q| percentile_sorted(&sorted, q))
        .collect())
}

/// Index of the nearest centroid by squared distance; ties go to the lower index.
fn nearest(t: f64, centroids: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = (t - centroids[0]).powi(2);
    for (j, c) in centroids.iter().enumerate().skip(1) {
        let d = (t - c).powi(2);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

fn sort_entries(entries: &[(ClientId, f64)]) -> Vec<(ClientId, f64)> {
    let mut v = entries.to_vec();
    v.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    v
}

/// Raw nearest-centroid grouping. Members of each cluster are listed in
/// ascending time order; `centroids` are kept as given.
pub fn assign_by_nearest(entries: &[(ClientId, f64)], centroids: &[f64]) -> Result<ClusterSet> {
    if centroids.is_empty() {
        return Err(Error::config("need at least one centroid"));
    }
    if centroids.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::config("centroids must be non-decreasing"));
    }
    let mut clusters = vec![Vec::new(); centroids.len()];
    for (id, t) in sort_entries(entries) {
        clusters[nearest(t, centroids)].push(id);
    }
    Ok(ClusterSet {
        clusters,
        centroids: centroids.to_vec(),
    })
}

/// Bookkeeping from [`even_out`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvenOutStats {
    pub moves: usize,
    /// Slower-to-faster moves that exceeded [`UPWARD_MOVE_CAP`] but had to
    /// happen to reach equal sizes.
    pub capped_moves: usize,
}

/// Even out cluster sizes so that max - min <= 1.
///
/// The input must be a contiguous grouping of the time-sorted clients (as
/// produced by [`assign_by_nearest`]). Clients are moved one at a time
/// across a single cluster boundary: the slowest member of a faster cluster
/// drops into its slower neighbour, or the fastest member of a slower
/// cluster rises into its faster neighbour. Surplus is spread to the
/// clusters that were largest before evening, ties to the faster cluster.
pub fn even_out(raw: &ClusterSet, times: &HashMap<ClientId, f64>) -> Result<(ClusterSet, EvenOutStats)> {
    let k = raw.k();
    let n: usize = raw.sizes().iter().sum();
    if n < k {
        return Err(Error::config(format!("cannot form {k} non-empty clusters from {n} clients")));
    }
    let time_of = |id: &ClientId| {
        times
            .get(id)
            .copied()
            .ok_or_else(|| Error::config(format!("client {id} missing from time table")))
    };

    let base = n / k;
    let extra = n % k;
    let mut by_size: Vec<usize> = (0..k).collect();
    by_size.sort_by(|&a, &b| raw.clusters[b].len().cmp(&raw.clusters[a].len()).then(a.cmp(&b)));
    let mut target = vec![base; k];
    for &i in by_size.iter().take(extra) {
        target[i] += 1;
    }

    let mut clusters = raw.clusters.clone();
    let mut stats = EvenOutStats::default();
    loop {
        // First boundary whose prefix count is off target.
        let mut have = 0usize;
        let mut want = 0usize;
        let mut boundary = None;
        for i in 0..k - 1 {
            have += clusters[i].len();
            want += target[i];
            if have != want {
                boundary = Some((i, have > want));
                break;
            }
        }
        let Some((i, surplus)) = boundary else { break };
        if surplus {
            // Slowest of the faster cluster drops to the slower neighbour.
            let id = clusters[i].pop().expect("surplus cluster is non-empty");
            clusters[i + 1].insert(0, id);
        } else {
            // Fastest of the slower cluster rises; check the cap.
            if clusters[i + 1].is_empty() {
                return Err(Error::config("evening reached an empty donor cluster"));
            }
            let id = clusters[i + 1].remove(0);
            if let Some(last) = clusters[i].last() {
                let receiving_max = time_of(last)?;
                if time_of(&id)? > UPWARD_MOVE_CAP * receiving_max {
                    stats.capped_moves += 1;
                }
            }
            clusters[i].push(id);
        }
        stats.moves += 1;
    }
    if stats.capped_moves > 0 {
        warn!(
            "{} upward moves exceeded {UPWARD_MOVE_CAP}x the receiving cluster's max time",
            stats.capped_moves
        );
    }
    let cs = ClusterSet::from_members(clusters, times)?;
    Ok((cs, stats))
}

/// Cluster `(id, round time)` entries into `k` equal-size groups.
pub fn cluster_entries(entries: &[(ClientId, f64)], k: usize) -> Result<ClusterSet> {
    let times: Vec<f64> = entries.iter().map(|e| e.1).collect();
    let centroids = percentile_centroids(&times, k)?;
    let raw = assign_by_nearest(entries, &centroids)?;
    let lookup: HashMap<ClientId, f64> = entries.iter().copied().collect();
    Ok(even_out(&raw, &lookup)?.0)
}

/// Estimate every client's round time and group the population into `k`
/// equal-size clusters ordered from fastest to slowest.
pub fn cluster(population: &Population, k: usize) -> Result<ClusterSet> {
    cluster_entries(&population.sorted_by_time(), k)
}

pub fn k_anonymity(cs: &ClusterSet) -> usize {
    cs.clusters.iter().map(Vec::len).min().unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub clusters: ClusterSet,
    pub iterations: usize,
    pub converged: bool,
}

/// Plain Lloyd iterations in one dimension, seeded from the same percentile
/// centroids as [`cluster`]. Sizes are left as they fall. An emptied
/// cluster is re-seeded at a uniformly drawn data point.
pub fn kmeans_1d(entries: &[(ClientId, f64)], k: usize, seed: u64, max_iters: usize) -> Result<KMeansResult> {
    let sorted = sort_entries(entries);
    let times: Vec<f64> = sorted.iter().map(|e| e.1).collect();
    let mut centroids = percentile_centroids(&times, k)?;
    let mut rng = seed::rng(seed);
    let mut assign: Vec<usize> = vec![usize::MAX; sorted.len()];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iters.max(1) {
        let next: Vec<usize> = times.iter().map(|&t| nearest(t, &centroids)).collect();
        if next == assign {
            converged = true;
            break;
        }
        assign = next;
        iterations += 1;
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (&t, &a) in times.iter().zip(&assign) {
            sums[a] += t;
            counts[a] += 1;
        }
        for j in 0..k {
            centroids[j] = if counts[j] > 0 {
                sums[j] / counts[j] as f64
            } else {
                times[rng.random_range(0..times.len())]
            };
        }
        // Keep centroid order so cluster indices stay fastest-to-slowest.
        centroids.sort_by(f64::total_cmp);
    }
    if !converged {
        let next: Vec<usize> = times.iter().map(|&t| nearest(t, &centroids)).collect();
        converged = next == assign;
    }

    let mut clusters = vec![Vec::new(); k];
    for ((id, _), &a) in sorted.iter().zip(&assign) {
        clusters[a].push(*id);
    }
    let lookup: HashMap<ClientId, f64> = sorted.iter().copied().collect();
    Ok(KMeansResult {
        clusters: ClusterSet::from_members(clusters, &lookup)?,
        iterations,
        converged,
    })
}
