//! Pure time-model simulation of selection policies.
//!
//! No training happens here: a round lasts as long as its slowest
//! aggregated client's estimated round time, and server-side selection and
//! aggregation are treated as instantaneous.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clustering::k_anonymity;
use crate::device_model::{ClientId, Population};
use crate::error::Result;
use crate::policy::{PolicyConfig, PolicyKind, RoundSelection, Selector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round_index: usize,
    pub policy: PolicyKind,
    pub duration: f64,
    pub invited: Vec<ClientId>,
    pub aggregated: Vec<ClientId>,
    pub cluster_index: Option<usize>,
}

/// Nearest-rank quantiles of the per-round durations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub p10: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub policy: PolicyKind,
    pub clients_per_round: usize,
    pub records: Vec<RoundRecord>,
    pub total_time: f64,
    /// Times each client was invited.
    pub per_client_selection_counts: BTreeMap<ClientId, u64>,
    /// Times each client's update was aggregated.
    pub per_client_aggregation_counts: BTreeMap<ClientId, u64>,
    pub round_duration_quantiles: Option<Quantiles>,
    pub k_anonymity: Option<usize>,
}

impl SimulationReport {
    pub fn rounds(&self) -> usize {
        self.records.len()
    }

    pub fn durations(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.duration).collect()
    }

    pub fn mean_round_time(&self) -> f64 {
        if self.records.is_empty() {
            0.0
        } else {
            self.total_time / self.records.len() as f64
        }
    }

    /// `round,policy,duration,cluster` rows.
    pub fn rounds_csv(&self) -> String {
        let mut out = String::from("round,policy,duration,cluster\n");
        for r in &self.records {
            let cluster = r.cluster_index.map(|c| c.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", r.round_index, r.policy, r.duration, cluster));
        }
        out
    }

    /// `duration,fraction` rows of the empirical CDF.
    pub fn cdf_csv(&self) -> String {
        let mut out = String::from("duration,fraction\n");
        for (d, f) in round_duration_cdf(self) {
            out.push_str(&format!("{d},{f}\n"));
        }
        out
    }
}

/// Accumulates round selections into a [`SimulationReport`].
#[derive(Debug, Clone)]
pub struct ReportBuilder {
    report: SimulationReport,
}

impl ReportBuilder {
    pub fn new(population: &Population, config: &PolicyConfig) -> Self {
        let zeros: BTreeMap<ClientId, u64> = population.clients().iter().map(|c| (c.id, 0)).collect();
        Self {
            report: SimulationReport {
                policy: config.kind,
                clients_per_round: config.clients_per_round,
                records: Vec::new(),
                total_time: 0.0,
                per_client_selection_counts: zeros.clone(),
                per_client_aggregation_counts: zeros,
                round_duration_quantiles: None,
                k_anonymity: config.cluster_set.as_ref().map(k_anonymity),
            },
        }
    }

    pub fn push(&mut self, sel: RoundSelection) {
        let r = &mut self.report;
        for id in &sel.invited {
            *r.per_client_selection_counts.entry(*id).or_default() += 1;
        }
        for id in &sel.aggregated {
            *r.per_client_aggregation_counts.entry(*id).or_default() += 1;
        }
        r.total_time += sel.round_duration;
        r.records.push(RoundRecord {
            round_index: sel.round_index,
            policy: r.policy,
            duration: sel.round_duration,
            invited: sel.invited,
            aggregated: sel.aggregated,
            cluster_index: sel.cluster_index,
        });
    }

    pub fn finish(mut self) -> SimulationReport {
        let mut d = self.report.durations();
        if !d.is_empty() {
            d.sort_by(f64::total_cmp);
            self.report.round_duration_quantiles = Some(Quantiles {
                p10: nearest_rank(&d, 10.0),
                p50: nearest_rank(&d, 50.0),
                p90: nearest_rank(&d, 90.0),
                p99: nearest_rank(&d, 99.0),
            });
        }
        self.report
    }
}

/// Nearest-rank percentile of an ascending, non-empty sample.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Run `rounds` rounds of a policy over the population.
pub fn simulate(population: &Population, config: &PolicyConfig, rounds: usize) -> Result<SimulationReport> {
    let mut selector = Selector::new(population, config)?;
    let mut builder = ReportBuilder::new(population, config);
    for _ in 0..rounds {
        builder.push(selector.next_round());
    }
    Ok(builder.finish())
}

/// Recompute every round's duration from the population and the recorded
/// aggregated clients.
pub fn replay_durations(report: &SimulationReport, population: &Population) -> Vec<f64> {
    let times: BTreeMap<ClientId, f64> = population
        .clients()
        .iter()
        .map(|c| c.id)
        .zip(population.round_times())
        .collect();
    report
        .records
        .iter()
        .map(|r| r.aggregated.iter().map(|id| times[id]).fold(0.0, f64::max))
        .collect()
}

/// Empirical CDF of round durations: one `(duration, fraction <= duration)`
/// step per distinct duration, ascending.
pub fn round_duration_cdf(report: &SimulationReport) -> Vec<(f64, f64)> {
    let mut d = report.durations();
    d.sort_by(f64::total_cmp);
    let n = d.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, &x) in d.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == x => last.1 = frac,
            _ => out.push((x, frac)),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessSummary {
    /// Fraction of all invitations that went to each client.
    pub selection_share: BTreeMap<ClientId, f64>,
    /// Fraction of all aggregated updates that came from each client.
    pub aggregation_share: BTreeMap<ClientId, f64>,
    /// Gini coefficient of the aggregation counts (0 = perfectly even).
    pub aggregation_gini: f64,
    /// Number of slowest clients in the slow group (a quarter of the population).
    pub slow_group_size: usize,
    /// Aggregation share of the slow group.
    pub slow_group_share: f64,
}

fn shares(counts: &BTreeMap<ClientId, u64>) -> BTreeMap<ClientId, f64> {
    let total: u64 = counts.values().sum();
    counts
        .iter()
        .map(|(id, &c)| (*id, if total == 0 { 0.0 } else { c as f64 / total as f64 }))
        .collect()
}

pub fn gini(values: &[f64]) -> f64 {
    let n = values.len();
    let sum: f64 = values.iter().sum();
    if n == 0 || sum == 0.0 {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let weighted: f64 = v.iter().enumerate().map(|(i, x)| (i + 1) as f64 * x).sum();
    (2.0 * weighted) / (n as f64 * sum) - (n as f64 + 1.0) / n as f64
}

/// The `count` slowest clients by estimated round time (ties by id).
pub fn slowest_clients(population: &Population, count: usize) -> Vec<ClientId> {
    let sorted = population.sorted_by_time();
    sorted.iter().rev().take(count).map(|(id, _)| *id).collect()
}

/// The `count` fastest clients by estimated round time (ties by id).
pub fn fastest_clients(population: &Population, count: usize) -> Vec<ClientId> {
    population.sorted_by_time().iter().take(count).map(|(id, _)| *id).collect()
}

/// Share of all aggregated updates contributed by the `count` slowest clients.
pub fn slow_group_share(report: &SimulationReport, population: &Population, count: usize) -> f64 {
    let total: u64 = report.per_client_aggregation_counts.values().sum();
    if total == 0 {
        return 0.0;
    }
    let slow: u64 = slowest_clients(population, count)
        .iter()
        .map(|id| report.per_client_aggregation_counts.get(id).copied().unwrap_or(0))
        .sum();
    slow as f64 / total as f64
}

pub fn fairness_summary(report: &SimulationReport, population: &Population) -> FairnessSummary {
    let slow_group_size = (population.len() / 4).max(1);
    let agg: Vec<f64> = report
        .per_client_aggregation_counts
        .values()
        .map(|&c| c as f64)
        .collect();
    FairnessSummary {
        selection_share: shares(&report.per_client_selection_counts),
        aggregation_share: shares(&report.per_client_aggregation_counts),
        aggregation_gini: gini(&agg),
        slow_group_size,
        slow_group_share: slow_group_share(report, population, slow_group_size),
    }
}
