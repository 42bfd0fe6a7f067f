//! Client selection policies: Random, FedCS and FedSS.
//!
//! Every draw is made over clients listed in ascending id order, so two
//! policies that degenerate to the same behaviour (FedSS with one cluster,
//! FedCS without over-selection) consume the random stream identically
//! and pick identical clients.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::clustering::{k_anonymity, ClusterSet};
use crate::device_model::{ClientId, Population};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Random,
    #[serde(rename = "fedcs")]
    FedCs,
    #[serde(rename = "fedss")]
    FedSs,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] = [PolicyKind::Random, PolicyKind::FedCs, PolicyKind::FedSs];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Random => "random",
            PolicyKind::FedCs => "fedcs",
            PolicyKind::FedSs => "fedss",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(PolicyKind::Random),
            "fedcs" => Ok(PolicyKind::FedCs),
            "fedss" => Ok(PolicyKind::FedSs),
            other => Err(Error::config(format!(
                "unknown policy `{other}` (expected random, fedcs or fedss)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Clients aggregated per round (K).
    pub clients_per_round: usize,
    /// FedCS only: clients invited per round.
    pub fedcs_overselect: Option<usize>,
    /// FedSS only.
    pub cluster_set: Option<ClusterSet>,
    pub rng_seed: u64,
}

impl PolicyConfig {
    pub fn random(clients_per_round: usize, rng_seed: u64) -> Self {
        Self {
            kind: PolicyKind::Random,
            clients_per_round,
            fedcs_overselect: None,
            cluster_set: None,
            rng_seed,
        }
    }

    pub fn fedcs(clients_per_round: usize, overselect: usize, rng_seed: u64) -> Self {
        Self {
            kind: PolicyKind::FedCs,
            clients_per_round,
            fedcs_overselect: Some(overselect),
            cluster_set: None,
            rng_seed,
        }
    }

    pub fn fedss(clients_per_round: usize, cluster_set: ClusterSet, rng_seed: u64) -> Self {
        Self {
            kind: PolicyKind::FedSs,
            clients_per_round,
            fedcs_overselect: None,
            cluster_set: Some(cluster_set),
            rng_seed,
        }
    }

    pub fn validate(&self, population: &Population) -> Result<()> {
        let n = population.len();
        let k = self.clients_per_round;
        if k == 0 {
            return Err(Error::config("clients_per_round must be at least 1"));
        }
        if k > n {
            return Err(Error::config(format!(
                "clients_per_round {k} exceeds population size {n}"
            )));
        }
        match self.kind {
            PolicyKind::Random => {
                if self.fedcs_overselect.is_some() || self.cluster_set.is_some() {
                    return Err(Error::config("random policy takes no over-selection or clusters"));
                }
            }
            PolicyKind::FedCs => {
                if self.cluster_set.is_some() {
                    return Err(Error::config("fedcs policy takes no clusters"));
                }
                let over = self
                    .fedcs_overselect
                    .ok_or_else(|| Error::config("fedcs needs fedcs_overselect"))?;
                if over < k || over > n {
                    return Err(Error::config(format!(
                        "fedcs_overselect must lie in {k}..={n}, got {over}"
                    )));
                }
            }
            PolicyKind::FedSs => {
                if self.fedcs_overselect.is_some() {
                    return Err(Error::config("fedss policy takes no over-selection"));
                }
                let cs = self
                    .cluster_set
                    .as_ref()
                    .ok_or_else(|| Error::config("fedss needs a cluster set"))?;
                let mut members: Vec<ClientId> = cs.clusters().iter().flatten().copied().collect();
                members.sort();
                let mut ids: Vec<ClientId> = population.clients().iter().map(|c| c.id).collect();
                ids.sort();
                if members != ids {
                    return Err(Error::config("cluster set does not partition the population"));
                }
                let min = k_anonymity(cs);
                if k > min {
                    return Err(Error::config(format!(
                        "clients_per_round {k} exceeds smallest cluster size {min}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSelection {
    pub round_index: usize,
    /// Ascending id order.
    pub invited: Vec<ClientId>,
    /// Ascending id order; always `clients_per_round` long.
    pub aggregated: Vec<ClientId>,
    pub round_duration: f64,
    pub cluster_index: Option<usize>,
}

/// Read-only view of the population used by the draws.
#[derive(Debug, Clone)]
struct Pool {
    ids: Vec<ClientId>,
    times: Vec<f64>,
    /// Positions in ascending id order.
    by_id: Vec<usize>,
    position: HashMap<ClientId, usize>,
}

impl Pool {
    fn new(population: &Population) -> Self {
        let ids: Vec<ClientId> = population.clients().iter().map(|c| c.id).collect();
        let times = population.round_times();
        let mut by_id: Vec<usize> = (0..ids.len()).collect();
        by_id.sort_by_key(|&i| ids[i]);
        let position = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        Self {
            ids,
            times,
            by_id,
            position,
        }
    }

    /// Uniform draw of `count` positions from `pool` without replacement.
    /// Returned in ascending id order.
    fn draw(&self, pool: &[usize], count: usize, rng: &mut seed::Rng) -> Vec<usize> {
        let mut picked: Vec<usize> = index::sample(rng, pool.len(), count)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        picked.sort_by_key(|&i| self.ids[i]);
        picked
    }

    fn fastest(&self, invited: &[usize], count: usize) -> Vec<usize> {
        let mut ranked = invited.to_vec();
        ranked.sort_by(|&a, &b| self.times[a].total_cmp(&self.times[b]).then(self.ids[a].cmp(&self.ids[b])));
        ranked.truncate(count);
        ranked.sort_by_key(|&i| self.ids[i]);
        ranked
    }

    fn selection(&self, round_index: usize, invited: &[usize], aggregated: &[usize], cluster_index: Option<usize>) -> RoundSelection {
        let round_duration = aggregated
            .iter()
            .map(|&i| self.times[i])
            .fold(0.0, f64::max);
        RoundSelection {
            round_index,
            invited: invited.iter().map(|&i| self.ids[i]).collect(),
            aggregated: aggregated.iter().map(|&i| self.ids[i]).collect(),
            round_duration,
            cluster_index,
        }
    }
}

/// K clients uniformly without replacement; the round waits for all of them.
pub fn select_random(population: &Population, clients_per_round: usize, rng: &mut seed::Rng) -> Result<RoundSelection> {
    PolicyConfig::random(clients_per_round, 0).validate(population)?;
    let pool = Pool::new(population);
    let picked = pool.draw(&pool.by_id, clients_per_round, rng);
    Ok(pool.selection(0, &picked, &picked, None))
}

/// Invite `overselect` clients uniformly, keep the K fastest.
pub fn select_fedcs(
    population: &Population,
    clients_per_round: usize,
    overselect: usize,
    rng: &mut seed::Rng,
) -> Result<RoundSelection> {
    PolicyConfig::fedcs(clients_per_round, overselect, 0).validate(population)?;
    let pool = Pool::new(population);
    let invited = pool.draw(&pool.by_id, overselect, rng);
    let kept = pool.fastest(&invited, clients_per_round);
    Ok(pool.selection(0, &invited, &kept, None))
}

/// Visit cluster `cursor mod k`, advance the cursor, pick K members uniformly.
pub fn select_fedss(
    population: &Population,
    cluster_set: &ClusterSet,
    cursor: &mut usize,
    clients_per_round: usize,
    rng: &mut seed::Rng,
) -> Result<RoundSelection> {
    let cfg = PolicyConfig::fedss(clients_per_round, cluster_set.clone(), 0);
    cfg.validate(population)?;
    let pool = Pool::new(population);
    let clusters = cluster_pools(&pool, cluster_set);
    let c = *cursor % clusters.len();
    *cursor += 1;
    let picked = pool.draw(&clusters[c], clients_per_round, rng);
    Ok(pool.selection(0, &picked, &picked, Some(c)))
}

fn cluster_pools(pool: &Pool, cs: &ClusterSet) -> Vec<Vec<usize>> {
    cs.clusters()
        .iter()
        .map(|members| {
            let mut v: Vec<usize> = members.iter().map(|id| pool.position[id]).collect();
            v.sort_by_key(|&i| pool.ids[i]);
            v
        })
        .collect()
}

/// Stateful policy driver: owns the RNG and the round-robin cursor.
#[derive(Debug, Clone)]
pub struct Selector {
    kind: PolicyKind,
    clients_per_round: usize,
    overselect: usize,
    pool: Pool,
    clusters: Vec<Vec<usize>>,
    cursor: usize,
    round: usize,
    rng: seed::Rng,
}

impl Selector {
    pub fn new(population: &Population, config: &PolicyConfig) -> Result<Self> {
        config.validate(population)?;
        let pool = Pool::new(population);
        let clusters = config
            .cluster_set
            .as_ref()
            .map(|cs| cluster_pools(&pool, cs))
            .unwrap_or_default();
        Ok(Self {
            kind: config.kind,
            clients_per_round: config.clients_per_round,
            overselect: config.fedcs_overselect.unwrap_or(config.clients_per_round),
            pool,
            clusters,
            cursor: 0,
            round: 0,
            rng: seed::rng(config.rng_seed),
        })
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn clients_per_round(&self) -> usize {
        self.clients_per_round
    }

    pub fn next_round(&mut self) -> RoundSelection {
        let round = self.round;
        self.round += 1;
        let k = self.clients_per_round;
        match self.kind {
            PolicyKind::Random => {
                let picked = self.pool.draw(&self.pool.by_id, k, &mut self.rng);
                self.pool.selection(round, &picked, &picked, None)
            }
            PolicyKind::FedCs => {
                let invited = self.pool.draw(&self.pool.by_id, self.overselect, &mut self.rng);
                let kept = self.pool.fastest(&invited, k);
                self.pool.selection(round, &invited, &kept, None)
            }
            PolicyKind::FedSs => {
                let c = self.cursor % self.clusters.len();
                self.cursor += 1;
                let picked = self.pool.draw(&self.clusters[c], k, &mut self.rng);
                self.pool.selection(round, &picked, &picked, Some(c))
            }
        }
    }
}

impl Iterator for Selector {
    type Item = RoundSelection;

    fn next(&mut self) -> Option<RoundSelection> {
        Some(self.next_round())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::{cluster, cluster_entries};

    fn timed_population(times: &[f64]) -> Population {
        crate::testutil::timed_population(times)
    }

    fn one_to_eight() -> Population {
        timed_population(&(1..=8).map(f64::from).collect::<Vec<_>>())
    }

    #[test]
    fn timed_population_matches_times() {
        assert_eq!(one_to_eight().round_times(), (1..=8).map(f64::from).collect::<Vec<_>>());
    }

    #[test]
    fn random_all_clients_waits_for_global_max() {
        let p = one_to_eight();
        let s = select_random(&p, 8, &mut seed::rng(1)).unwrap();
        assert_eq!(s.round_duration, 8.0);
    }

    #[test]
    fn random_homogeneous_duration_is_common_time() {
        let p = timed_population(&[3.0; 10]);
        for seed in 0..5 {
            assert_eq!(select_random(&p, 4, &mut seed::rng(seed)).unwrap().round_duration, 3.0);
        }
    }

    #[test]
    fn random_duration_recomputes_from_draw() {
        let p = one_to_eight();
        let t = p.round_times();
        let s = select_random(&p, 3, &mut seed::rng(42)).unwrap();
        assert_eq!(s.aggregated.len(), 3);
        let max = s.aggregated.iter().map(|id| t[id.0 as usize]).fold(0.0, f64::max);
        assert_eq!(s.round_duration, max);
    }

    #[test]
    fn fedcs_keeps_fastest_k_of_invited() {
        let p = one_to_eight();
        let s = select_fedcs(&p, 5, 8, &mut seed::rng(3)).unwrap();
        assert_eq!(s.invited.len(), 8);
        assert_eq!(s.aggregated, (0..5).map(ClientId).collect::<Vec<_>>());
        assert_eq!(s.round_duration, 5.0);
    }

    #[test]
    fn fedcs_without_overselection_is_random() {
        let p = one_to_eight();
        for seed in 0..10 {
            let a = select_fedcs(&p, 3, 3, &mut seed::rng(seed)).unwrap();
            let b = select_random(&p, 3, &mut seed::rng(seed)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn fedss_one_cluster_is_random() {
        let p = one_to_eight();
        let cs = cluster(&p, 1).unwrap();
        let mut cursor = 0;
        for seed in 0..10 {
            let mut a = select_fedss(&p, &cs, &mut cursor, 3, &mut seed::rng(seed)).unwrap();
            a.cluster_index = None;
            let b = select_random(&p, 3, &mut seed::rng(seed)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn fedss_round_robin_visits_each_cluster_twice() {
        let p = one_to_eight();
        let cs = cluster(&p, 4).unwrap();
        let mut sel = Selector::new(&p, &PolicyConfig::fedss(2, cs, 5)).unwrap();
        let mut visits = [0; 4];
        for _ in 0..8 {
            visits[sel.next_round().cluster_index.unwrap()] += 1;
        }
        assert_eq!(visits, [2; 4]);
    }

    #[test]
    fn fedss_fast_cluster_rounds_are_shorter() {
        let p = one_to_eight();
        let cs = cluster(&p, 2).unwrap();
        let mut sel = Selector::new(&p, &PolicyConfig::fedss(2, cs, 9)).unwrap();
        for _ in 0..20 {
            let fast = sel.next_round();
            let slow = sel.next_round();
            assert_eq!(fast.cluster_index, Some(0));
            assert!(fast.round_duration <= slow.round_duration);
        }
    }

    #[test]
    fn fedss_rejects_k_above_cluster_size() {
        let p = one_to_eight();
        let entries = p.sorted_by_time();
        let cs = cluster_entries(&entries, 4).unwrap();
        let err = PolicyConfig::fedss(3, cs, 0).validate(&p).unwrap_err();
        assert!(err.to_string().contains("smallest cluster"));
    }

    #[test]
    fn config_validation() {
        let p = one_to_eight();
        assert!(PolicyConfig::random(0, 0).validate(&p).is_err());
        assert!(PolicyConfig::random(9, 0).validate(&p).is_err());
        assert!(PolicyConfig::fedcs(5, 4, 0).validate(&p).is_err());
        assert!(PolicyConfig::fedcs(5, 9, 0).validate(&p).is_err());
        let mut cfg = PolicyConfig::random(2, 0);
        cfg.fedcs_overselect = Some(3);
        assert!(cfg.validate(&p).is_err());
    }

    #[test]
    fn selector_is_deterministic() {
        let p = one_to_eight();
        let cfg = PolicyConfig::fedcs(3, 5, 11);
        let a: Vec<_> = Selector::new(&p, &cfg).unwrap().take(50).collect();
        let b: Vec<_> = Selector::new(&p, &cfg).unwrap().take(50).collect();
        assert_eq!(a, b);
        assert!(a.iter().enumerate().all(|(i, s)| s.round_index == i));
    }

    #[test]
    fn policy_kind_parses() {
        assert_eq!("FedSS".parse::<PolicyKind>().unwrap(), PolicyKind::FedSs);
        assert!("fedavg".parse::<PolicyKind>().is_err());
    }
}
