//! Choosing the number of clusters.
//!
//! For each candidate k the FedSS policy is simulated and its mean round
//! time recorded against x = k/N (one over the cluster size). The knee of
//! that curve, found with Kneedle, marks where adding clusters stops paying
//! for the lost anonymity.

use std::ops::RangeInclusive;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{cluster, k_anonymity, ClusterSet};
use crate::device_model::Population;
use crate::error::{Error, Result};
use crate::policy::PolicyConfig;
use crate::seed;
use crate::simulator::simulate;

pub const DEFAULT_SENSITIVITY: f64 = 1.0;

/// When no knee exists, pick the smallest k within this factor of the best.
pub const FALLBACK_TOLERANCE: f64 = 1.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Number of clusters this point was simulated with (0 for plain curves).
    pub k: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KneeCurve {
    points: Vec<CurvePoint>,
}

impl KneeCurve {
    pub fn new(points: Vec<CurvePoint>) -> Result<Self> {
        if points.windows(2).any(|w| !(w[0].x < w[1].x)) {
            return Err(Error::config("curve x values must be strictly increasing"));
        }
        if points.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(Error::config("curve values must be finite"));
        }
        Ok(Self { points })
    }

    pub fn from_xy(xs: &[f64], ys: &[f64]) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(Error::config("x and y lengths differ"));
        }
        Self::new(
            xs.iter()
                .zip(ys)
                .map(|(&x, &y)| CurvePoint { k: 0, x, y })
                .collect(),
        )
    }

    pub fn points(&self) -> &[CurvePoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `k,x,y` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,x,y\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.k, p.x, p.y));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Knee {
    pub index: usize,
    pub x: f64,
    pub y: f64,
}

fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return None;
    }
    Some(v.iter().map(|x| (x - lo) / span).collect())
}

/// Kneedle without smoothing.
///
/// Both axes are min-max normalized; decreasing curves are flipped
/// vertically so the knee shows up as a local maximum of the difference
/// curve `d = y - x`. A local maximum is accepted once `d` falls below
/// `d_max - sensitivity * mean_x_step` before the next local minimum.
/// Returns the first accepted knee, or `None` for curves with no knee
/// (straight lines, flat curves).
pub fn kneedle(curve: &KneeCurve, sensitivity: f64) -> Result<Option<Knee>> {
    let pts = curve.points();
    if pts.len() < 3 {
        return Err(Error::TooFewPoints(pts.len()));
    }
    let xs: Vec<f64> = pts.iter().map(|p| p.x).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.y).collect();
    let (Some(xn), Some(mut yn)) = (normalize(&xs), normalize(&ys)) else {
        return Ok(None);
    };
    if ys[ys.len() - 1] < ys[0] {
        yn.iter_mut().for_each(|y| *y = 1.0 - *y);
    }
    let d: Vec<f64> = yn.iter().zip(&xn).map(|(y, x)| y - x).collect();
    let n = d.len();
    let is_max = |i: usize| d[i - 1] <= d[i] && d[i] > d[i + 1];
    let is_min = |i: usize| d[i - 1] >= d[i] && d[i] < d[i + 1];
    let step = xn.windows(2).map(|w| w[1] - w[0]).sum::<f64>() / (n - 1) as f64;

    for m in (1..n - 1).filter(|&i| is_max(i)) {
        let threshold = d[m] - sensitivity * step;
        for j in m + 1..n {
            if d[j] < threshold {
                return Ok(Some(Knee {
                    index: m,
                    x: xs[m],
                    y: ys[m],
                }));
            }
            if j < n - 1 && is_min(j) {
                break;
            }
        }
    }
    Ok(None)
}

/// Mean FedSS round time over `rounds` rounds with a given cluster set.
pub fn avg_round_time_for_clusters(
    population: &Population,
    clusters: &ClusterSet,
    rounds: usize,
    clients_per_round: usize,
    seed: u64,
) -> Result<f64> {
    if rounds == 0 {
        return Err(Error::config("need at least one round to average"));
    }
    let cfg = PolicyConfig::fedss(clients_per_round, clusters.clone(), seed);
    Ok(simulate(population, &cfg, rounds)?.mean_round_time())
}

/// Mean FedSS round time with `k` equal-size clusters. The policy RNG is
/// derived from `(seed, k)` so sweeps are order-independent.
pub fn avg_round_time_for_k(
    population: &Population,
    k: usize,
    rounds: usize,
    clients_per_round: usize,
    seed: u64,
) -> Result<f64> {
    let cs = cluster(population, k)?;
    avg_round_time_for_clusters(population, &cs, rounds, clients_per_round, seed::substream(seed, k as u64))
}

fn feasible(population: &Population, k: usize, clients_per_round: usize) -> bool {
    k >= 1 && k <= population.len() && population.len() / k >= clients_per_round
}

/// Default upper end of the k sweep: `min(10, N / clients_per_round)`.
pub fn default_k_max(population: &Population, clients_per_round: usize) -> usize {
    (population.len() / clients_per_round.max(1)).clamp(1, 10)
}

pub fn sweep_k(
    population: &Population,
    k_range: RangeInclusive<usize>,
    rounds: usize,
    clients_per_round: usize,
    seed: u64,
) -> Result<KneeCurve> {
    let n = population.len() as f64;
    let ks: Vec<usize> = k_range
        .filter(|&k| {
            let ok = feasible(population, k, clients_per_round);
            if !ok {
                warn!("skipping k={k}: clusters too small for {clients_per_round} clients per round");
            }
            ok
        })
        .collect();
    let points = ks
        .par_iter()
        .map(|&k| {
            let y = avg_round_time_for_k(population, k, rounds, clients_per_round, seed)?;
            Ok(CurvePoint { k, x: k as f64 / n, y })
        })
        .collect::<Result<Vec<_>>>()?;
    KneeCurve::new(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalK {
    pub k: usize,
    pub knee: Option<Knee>,
    pub curve: KneeCurve,
    pub k_anonymity: usize,
}

/// Sweep k and map the knee back to a number of clusters. Falls back to
/// the smallest k within 5% of the best mean round time when the curve
/// has no knee or is too short to have one.
pub fn optimal_k(
    population: &Population,
    k_range: RangeInclusive<usize>,
    rounds: usize,
    clients_per_round: usize,
    seed: u64,
    sensitivity: f64,
) -> Result<OptimalK> {
    let curve = sweep_k(population, k_range, rounds, clients_per_round, seed)?;
    let pts = curve.points();
    if pts.is_empty() {
        return Err(Error::config("no feasible k in range"));
    }
    let knee = if pts.len() >= 3 { kneedle(&curve, sensitivity)? } else { None };
    let k = match knee {
        Some(knee) => {
            let n = population.len() as f64;
            let target = knee.x * n;
            pts.iter()
                .min_by(|a, b| {
                    (a.k as f64 - target)
                        .abs()
                        .total_cmp(&(b.k as f64 - target).abs())
                        .then(a.k.cmp(&b.k))
                })
                .map(|p| p.k)
                .expect("non-empty curve")
        }
        None => {
            let best = pts.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
            pts.iter()
                .filter(|p| p.y <= FALLBACK_TOLERANCE * best)
                .map(|p| p.k)
                .min()
                .expect("the minimum itself qualifies")
        }
    };
    let k_anonymity = k_anonymity(&cluster(population, k)?);
    Ok(OptimalK {
        k,
        knee,
        curve,
        k_anonymity,
    })
}
