//! Subcommand runs and the files they produce.
//!
//! Every JSON output carries the command, the root seed and the fully
//! resolved config. Maps are ordered and nothing time- or host-dependent
//! is written, so reruns are byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::clustering::{cluster, k_anonymity, ClusterSet};
use crate::config::RunConfig;
use crate::device_model::{ClientId, Population};
use crate::error::{Error, Result};
use crate::knee::{default_k_max, optimal_k, OptimalK};
use crate::policy::{PolicyConfig, PolicyKind};
use crate::simulator::{fairness_summary, round_duration_cdf, simulate, FairnessSummary, Quantiles, SimulationReport};
use crate::trainer::{evaluate_per_client, federated_train, generate_noniid_data, EvalReport, TrainOutcome};

pub const REPORT_JSON: &str = "report.json";
pub const ROUNDS_CSV: &str = "rounds.csv";
pub const CDF_CSV: &str = "cdf.csv";
pub const CURVE_CSV: &str = "curve.csv";
pub const ACCURACY_CSV: &str = "accuracy_by_round.csv";
pub const EVAL_JSON: &str = "eval.json";

/// File name to contents, written together into one directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outputs {
    files: BTreeMap<&'static str, String>,
}

impl Outputs {
    pub fn insert(&mut self, name: &'static str, contents: String) {
        self.files.insert(name, contents);
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.files.get(name).map(String::as_str)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.files.keys().copied().collect()
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, contents) in &self.files {
            let path = dir.join(name);
            fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    command: &'a str,
    seed: u64,
    config: &'a RunConfig,
    #[serde(flatten)]
    body: T,
}

fn envelope<T: Serialize>(command: &str, cfg: &RunConfig, body: T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&Envelope {
        command,
        seed: cfg.seed,
        config: cfg,
        body,
    })?;
    s.push('\n');
    Ok(s)
}

/// Condensed [`SimulationReport`]; per-round rows go to `rounds.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationSummary {
    pub policy: PolicyKind,
    pub clients_per_round: usize,
    pub rounds: usize,
    pub total_time: f64,
    pub mean_round_time: f64,
    pub round_duration_quantiles: Option<Quantiles>,
    pub k_anonymity: Option<usize>,
    pub per_client_selection_counts: BTreeMap<ClientId, u64>,
    pub per_client_aggregation_counts: BTreeMap<ClientId, u64>,
    pub fairness: FairnessSummary,
}

impl SimulationSummary {
    pub fn new(report: &SimulationReport, population: &Population) -> Self {
        Self {
            policy: report.policy,
            clients_per_round: report.clients_per_round,
            rounds: report.rounds(),
            total_time: report.total_time,
            mean_round_time: report.mean_round_time(),
            round_duration_quantiles: report.round_duration_quantiles,
            k_anonymity: report.k_anonymity,
            per_client_selection_counts: report.per_client_selection_counts.clone(),
            per_client_aggregation_counts: report.per_client_aggregation_counts.clone(),
            fairness: fairness_summary(report, population),
        }
    }
}

/// FedSS clusters from the configured k, or from the knee sweep.
pub fn resolve_clusters(cfg: &RunConfig, population: &Population) -> Result<(ClusterSet, Option<OptimalK>)> {
    match cfg.k {
        Some(k) if !cfg.auto_k => Ok((cluster(population, k)?, None)),
        _ => {
            let k_max = cfg
                .k_max
                .unwrap_or_else(|| default_k_max(population, cfg.clients_per_round));
            let opt = optimal_k(
                population,
                1..=k_max,
                cfg.sweep_rounds,
                cfg.clients_per_round,
                cfg.policy_seed(),
                cfg.sensitivity,
            )?;
            Ok((cluster(population, opt.k)?, Some(opt)))
        }
    }
}

/// Policy settings for `kind`. `clusters` must be given for FedSS.
pub fn policy_config(
    cfg: &RunConfig,
    population: &Population,
    kind: PolicyKind,
    clusters: Option<&ClusterSet>,
) -> Result<PolicyConfig> {
    let k = cfg.clients_per_round;
    let seed = cfg.policy_seed();
    let pc = match kind {
        PolicyKind::Random => PolicyConfig::random(k, seed),
        PolicyKind::FedCs => PolicyConfig::fedcs(k, cfg.overselect_for(population.len()), seed),
        PolicyKind::FedSs => {
            let cs = clusters.ok_or_else(|| Error::config("fedss needs a cluster set"))?;
            PolicyConfig::fedss(k, cs.clone(), seed)
        }
    };
    pc.validate(population)?;
    Ok(pc)
}

fn prepare(cfg: &RunConfig, kind: PolicyKind) -> Result<(Population, PolicyConfig, Option<OptimalK>)> {
    let population = cfg.build_population()?;
    let (clusters, knee) = if kind == PolicyKind::FedSs {
        let (cs, knee) = resolve_clusters(cfg, &population)?;
        (Some(cs), knee)
    } else {
        (None, None)
    };
    let pc = policy_config(cfg, &population, kind, clusters.as_ref())?;
    Ok((population, pc, knee))
}

#[derive(Serialize)]
struct ClusterBody<'a> {
    k: usize,
    k_anonymity: usize,
    sizes: Vec<usize>,
    clusters: &'a ClusterSet,
    #[serde(skip_serializing_if = "Option::is_none")]
    knee: Option<&'a OptimalK>,
}

pub fn run_cluster(cfg: &RunConfig) -> Result<Outputs> {
    cfg.validate()?;
    let population = cfg.build_population()?;
    let (cs, knee) = resolve_clusters(cfg, &population)?;
    let mut out = Outputs::default();
    if let Some(opt) = &knee {
        out.insert(CURVE_CSV, opt.curve.to_csv());
    }
    let body = ClusterBody {
        k: cs.k(),
        k_anonymity: k_anonymity(&cs),
        sizes: cs.sizes(),
        clusters: &cs,
        knee: knee.as_ref(),
    };
    out.insert(REPORT_JSON, envelope("cluster", cfg, body)?);
    Ok(out)
}

pub fn run_knee(cfg: &RunConfig) -> Result<Outputs> {
    cfg.validate()?;
    let population = cfg.build_population()?;
    let mut forced = cfg.clone();
    forced.k = None;
    forced.auto_k = true;
    let (_, knee) = resolve_clusters(&forced, &population)?;
    let opt = knee.expect("auto k always sweeps");
    let mut out = Outputs::default();
    out.insert(CURVE_CSV, opt.curve.to_csv());
    #[derive(Serialize)]
    struct Body<'a> {
        optimal: &'a OptimalK,
    }
    out.insert(REPORT_JSON, envelope("knee", cfg, Body { optimal: &opt })?);
    Ok(out)
}

#[derive(Serialize)]
struct RunBody<'a> {
    simulation: SimulationSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    knee: Option<&'a OptimalK>,
}

pub fn run_simulate(cfg: &RunConfig) -> Result<Outputs> {
    cfg.validate_policy()?;
    let (population, pc, knee) = prepare(cfg, cfg.policy)?;
    let report = simulate(&population, &pc, cfg.rounds)?;
    let mut out = Outputs::default();
    out.insert(ROUNDS_CSV, report.rounds_csv());
    out.insert(CDF_CSV, report.cdf_csv());
    if let Some(opt) = &knee {
        out.insert(CURVE_CSV, opt.curve.to_csv());
    }
    let body = RunBody {
        simulation: SimulationSummary::new(&report, &population),
        knee: knee.as_ref(),
    };
    out.insert(REPORT_JSON, envelope("simulate", cfg, body)?);
    Ok(out)
}

/// Train one policy on a shared population; returns the outcome and the
/// per-client evaluation of the final model.
pub fn train_policy(cfg: &RunConfig, population: &Population, pc: &PolicyConfig) -> Result<(TrainOutcome, EvalReport)> {
    let datasets = generate_noniid_data(population, &cfg.data, cfg.data_seed())?;
    let outcome = federated_train(population, &datasets, pc, cfg.rounds, &cfg.training, cfg.training_seed())?;
    let eval = evaluate_per_client(&outcome.model, &datasets, population, cfg.slow_group)?;
    Ok((outcome, eval))
}

pub fn run_train(cfg: &RunConfig) -> Result<Outputs> {
    cfg.validate_policy()?;
    let (population, pc, knee) = prepare(cfg, cfg.policy)?;
    let (outcome, eval) = train_policy(cfg, &population, &pc)?;
    let mut out = Outputs::default();
    out.insert(ROUNDS_CSV, outcome.report.rounds_csv());
    out.insert(CDF_CSV, outcome.report.cdf_csv());
    out.insert(ACCURACY_CSV, outcome.accuracy_csv());
    if let Some(opt) = &knee {
        out.insert(CURVE_CSV, opt.curve.to_csv());
    }
    #[derive(Serialize)]
    struct EvalBody<'a> {
        policy: PolicyKind,
        eval: &'a EvalReport,
    }
    out.insert(
        EVAL_JSON,
        envelope("train", cfg, EvalBody { policy: cfg.policy, eval: &eval })?,
    );
    let body = RunBody {
        simulation: SimulationSummary::new(&outcome.report, &population),
        knee: knee.as_ref(),
    };
    out.insert(REPORT_JSON, envelope("train", cfg, body)?);
    Ok(out)
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub policy: PolicyKind,
    pub rounds: usize,
    pub total_time: f64,
    pub mean_round_time: f64,
    pub round_duration_quantiles: Option<Quantiles>,
    pub k_anonymity: Option<usize>,
    pub slow_group_share: f64,
    pub aggregation_gini: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slow_group_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRun {
    pub report: SimulationReport,
    pub training: Option<(TrainOutcome, EvalReport)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub population: Population,
    pub knee: Option<OptimalK>,
    /// Random, FedCS, FedSS.
    pub runs: Vec<PolicyRun>,
}

impl Comparison {
    pub fn run(&self, kind: PolicyKind) -> &PolicyRun {
        let i = PolicyKind::ALL.iter().position(|k| *k == kind).expect("known policy");
        &self.runs[i]
    }

    pub fn rows(&self) -> Vec<ComparisonRow> {
        self.runs
            .iter()
            .map(|r| {
                let f = fairness_summary(&r.report, &self.population);
                ComparisonRow {
                    policy: r.report.policy,
                    rounds: r.report.rounds(),
                    total_time: r.report.total_time,
                    mean_round_time: r.report.mean_round_time(),
                    round_duration_quantiles: r.report.round_duration_quantiles,
                    k_anonymity: r.report.k_anonymity,
                    slow_group_share: f.slow_group_share,
                    aggregation_gini: f.aggregation_gini,
                    slow_group_accuracy: r.training.as_ref().map(|(_, e)| e.slowest.mean_accuracy),
                    mean_accuracy: r.training.as_ref().map(|(_, e)| e.mean_accuracy),
                }
            })
            .collect()
    }
}

/// Every policy on one population with the same seeds.
pub fn compare(cfg: &RunConfig) -> Result<Comparison> {
    cfg.validate()?;
    let population = cfg.build_population()?;
    let (clusters, knee) = resolve_clusters(cfg, &population)?;
    let configs = PolicyKind::ALL
        .iter()
        .map(|&kind| policy_config(cfg, &population, kind, Some(&clusters)))
        .collect::<Result<Vec<_>>>()?;
    let runs = configs
        .par_iter()
        .map(|pc| {
            if cfg.compare_trains {
                let (outcome, eval) = train_policy(cfg, &population, pc)?;
                Ok(PolicyRun {
                    report: outcome.report.clone(),
                    training: Some((outcome, eval)),
                })
            } else {
                Ok(PolicyRun {
                    report: simulate(&population, pc, cfg.rounds)?,
                    training: None,
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison { population, knee, runs })
}

pub fn run_compare(cfg: &RunConfig) -> Result<Outputs> {
    let cmp = compare(cfg)?;
    let mut out = Outputs::default();
    let mut rounds = String::from("round,policy,duration,cluster\n");
    let mut cdf = String::from("policy,duration,fraction\n");
    let mut acc = String::from("round,policy,global_accuracy,global_loss\n");
    let mut evals = BTreeMap::new();
    for run in &cmp.runs {
        rounds.extend(run.report.rounds_csv().lines().skip(1).map(|l| format!("{l}\n")));
        for (d, f) in round_duration_cdf(&run.report) {
            cdf.push_str(&format!("{},{d},{f}\n", run.report.policy));
        }
        if let Some((outcome, eval)) = &run.training {
            acc.extend(outcome.accuracy_csv().lines().skip(1).map(|l| format!("{l}\n")));
            evals.insert(run.report.policy.as_str(), eval);
        }
    }
    out.insert(ROUNDS_CSV, rounds);
    out.insert(CDF_CSV, cdf);
    if let Some(opt) = &cmp.knee {
        out.insert(CURVE_CSV, opt.curve.to_csv());
    }
    if cfg.compare_trains {
        out.insert(ACCURACY_CSV, acc);
        #[derive(Serialize)]
        struct EvalBody<'a> {
            evals: BTreeMap<&'static str, &'a EvalReport>,
        }
        out.insert(EVAL_JSON, envelope("compare", cfg, EvalBody { evals })?);
    }
    #[derive(Serialize)]
    struct Body<'a> {
        rows: Vec<ComparisonRow>,
        #[serde(skip_serializing_if = "Option::is_none")]
        knee: Option<&'a OptimalK>,
    }
    let body = Body {
        rows: cmp.rows(),
        knee: cmp.knee.as_ref(),
    };
    out.insert(REPORT_JSON, envelope("compare", cfg, body)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.rounds = 40;
        cfg.sweep_rounds = 50;
        cfg
    }

    #[test]
    fn compare_has_three_rows_in_fixed_order() {
        let cmp = compare(&small()).unwrap();
        let kinds: Vec<_> = cmp.rows().iter().map(|r| r.policy).collect();
        assert_eq!(kinds, PolicyKind::ALL.to_vec());
        assert!(cmp.knee.is_some());
    }

    #[test]
    fn zero_rounds_is_valid_and_empty() {
        let mut cfg = small();
        cfg.rounds = 0;
        let out = run_compare(&cfg).unwrap();
        assert_eq!(out.get(ROUNDS_CSV).unwrap(), "round,policy,duration,cluster\n");
        let json: serde_json::Value = serde_json::from_str(out.get(REPORT_JSON).unwrap()).unwrap();
        assert_eq!(json["rows"].as_array().unwrap().len(), 3);
        assert_eq!(json["rows"][0]["total_time"], 0.0);
    }

    #[test]
    fn reports_carry_config_and_seed() {
        let mut cfg = small();
        cfg.seed = 11;
        cfg.policy = PolicyKind::Random;
        let out = run_simulate(&cfg).unwrap();
        let json: serde_json::Value = serde_json::from_str(out.get(REPORT_JSON).unwrap()).unwrap();
        assert_eq!(json["seed"], 11);
        assert_eq!(json["config"]["rounds"], 40);
        assert_eq!(json["command"], "simulate");
        assert_eq!(out.names(), vec![CDF_CSV, REPORT_JSON, ROUNDS_CSV]);
    }

    #[test]
    fn explicit_k_skips_the_sweep() {
        let mut cfg = small();
        cfg.k = Some(2);
        let out = run_cluster(&cfg).unwrap();
        assert!(out.get(CURVE_CSV).is_none());
        let json: serde_json::Value = serde_json::from_str(out.get(REPORT_JSON).unwrap()).unwrap();
        assert_eq!(json["sizes"], serde_json::json!([10, 10]));
    }

    #[test]
    fn same_config_same_bytes() {
        let mut cfg = small();
        cfg.compare_trains = true;
        cfg.rounds = 5;
        assert_eq!(run_compare(&cfg).unwrap(), run_compare(&cfg).unwrap());
    }
}
