//! Acceptance criteria, one PASS/FAIL line each. Runs as a plain binary so
//! the lines show up in `cargo test` output; exits nonzero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::Rng;

use fedss_core::clustering::{cluster, cluster_entries, kmeans_1d, percentile_levels, ClusterSet};
use fedss_core::config::RunConfig;
use fedss_core::device_model::{synth_population, SynthSpec};
use fedss_core::knee::{avg_round_time_for_clusters, kneedle, KneeCurve};
use fedss_core::orchestrator::{dispatch_round, DispatchMode, RoundBarrier, WorkerOutput};
use fedss_core::policy::PolicyConfig;
use fedss_core::report::{compare, resolve_clusters};
use fedss_core::seed;
use fedss_core::simulator::{nearest_rank, simulate, slow_group_share};
use fedss_core::trainer::{fedavg_aggregate, softmax_cross_entropy, GlobalModel, ModelDelta, Samples};
use fedss_core::{estimate_round_time, ClientId, ClientProfile, GlobalModelSpec, PolicyKind};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1_round_time_formula() -> Outcome {
    // Integer parameters; the oracle sums exact fractions in u128 and
    // converts once.
    let mut rng = seed::rng(101);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let m: u128 = rng.random_range(1_000..1_000_000_000);
        let up: u128 = rng.random_range(1_000..100_000_000);
        let down: u128 = rng.random_range(1_000..100_000_000);
        let rate: u128 = rng.random_range(1_000_000..100_000_000_000);
        let flops: u128 = rng.random_range(1_000..10_000_000_000);
        let s: u128 = rng.random_range(0..1_000);
        let den = up * down * rate;
        let num = m * down * rate + s * flops * up * down + m * up * rate;
        let expected = (num / den) as f64 + (num % den) as f64 / den as f64;
        let client = ClientProfile::new(ClientId(0), up as f64, down as f64, rate as f64, s as u64).unwrap();
        let model = GlobalModelSpec::new(m as f64, flops as f64).unwrap();
        let got = estimate_round_time(&client, &model);
        worst = worst.max(((got - expected) / expected).abs());
    }
    check(worst < 1e-12, format!("max relative error {worst:.3e} over 10 sets"))
}

fn sorted_ids(entries: &[(ClientId, f64)]) -> Vec<ClientId> {
    let mut e = entries.to_vec();
    e.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    e.into_iter().map(|x| x.0).collect()
}

fn c2_clustering_invariants() -> Outcome {
    let mut runner = TestRunner::new(PropConfig {
        cases: 1000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (8usize..=500, 1usize..=8, any::<u64>(), -8i32..=8);
    let result = runner.run(&strategy, |(n, k, s, exp)| {
        let mut rng = seed::rng(s);
        // Coarse grid so exact ties occur.
        let entries: Vec<(ClientId, f64)> = (0..n)
            .map(|i| (ClientId(i as u32), f64::from(rng.random_range(1u32..=400)) * 0.25))
            .collect();
        let cs = cluster_entries(&entries, k).map_err(|e| TestCaseError::fail(e.to_string()))?;

        let mut members: Vec<ClientId> = cs.clusters().iter().flatten().copied().collect();
        members.sort();
        let all: Vec<ClientId> = (0..n).map(|i| ClientId(i as u32)).collect();
        prop_assert_eq!(&members, &all, "not a partition");

        let sizes = cs.sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1, "sizes {:?}", sizes);
        prop_assert!(sizes.iter().all(|&s| s > 0));

        let order = sorted_ids(&entries);
        let pos: BTreeMap<ClientId, usize> = order.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        for c in cs.clusters() {
            let mut p: Vec<usize> = c.iter().map(|id| pos[id]).collect();
            p.sort();
            prop_assert!(p.windows(2).all(|w| w[1] == w[0] + 1), "cluster not contiguous");
        }
        let firsts: Vec<usize> = cs.clusters().iter().map(|c| c.iter().map(|id| pos[id]).min().unwrap()).collect();
        prop_assert!(firsts.windows(2).all(|w| w[0] < w[1]), "clusters out of order");

        // Power-of-two scaling is exact in floating point.
        let c = 2f64.powi(exp);
        let scaled: Vec<(ClientId, f64)> = entries.iter().map(|&(id, t)| (id, t * c)).collect();
        let cs2 = cluster_entries(&scaled, k).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(cs.clusters(), cs2.clusters(), "membership changed under scaling by {}", c);
        Ok(())
    });
    match result {
        Ok(()) => Ok("1000 random populations, N in 8..=500, k in 1..=8".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn c3_percentile_anchor() -> Outcome {
    let levels = percentile_levels(3);
    check(levels == vec![25.0, 50.0, 75.0], format!("levels {levels:?}"))
}

fn c4_kneedle() -> Outcome {
    let f = |x: f64| -1.0 / x + 5.0;
    let xs: Vec<f64> = (0..100).map(|i| 0.1 + 9.9 * f64::from(i) / 99.0).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
    let knee = kneedle(&KneeCurve::from_xy(&xs, &ys).unwrap(), 1.0).unwrap();

    // Oracle: curvature from central differences on a fine grid.
    let h = 1e-4;
    let mut best = (0.0, f64::NEG_INFINITY);
    let mut x = 0.1 + h;
    while x < 10.0 - h {
        let d1 = (f(x + h) - f(x - h)) / (2.0 * h);
        let d2 = (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h);
        let kappa = d2.abs() / (1.0 + d1 * d1).powf(1.5);
        if kappa > best.1 {
            best = (x, kappa);
        }
        x += 1e-3;
    }
    let line = KneeCurve::from_xy(&xs, &xs).unwrap();
    let falling: Vec<f64> = xs.iter().map(|x| 3.0 - 2.0 * x).collect();
    let falling = KneeCurve::from_xy(&xs, &falling).unwrap();
    let no_knee_on_lines = kneedle(&line, 1.0).unwrap().is_none() && kneedle(&falling, 1.0).unwrap().is_none();
    match knee {
        Some(k) => check(
            (k.x - best.0).abs() <= 0.2 && no_knee_on_lines,
            format!("knee x={:.4}, curvature max x={:.4}, lines knee-free: {no_knee_on_lines}", k.x, best.0),
        ),
        None => Err("no knee found".into()),
    }
}

fn c5_equal_size_vs_kmeans() -> Outcome {
    let k_per_round = 10;
    let pop = synth_population(&SynthSpec::default(), GlobalModelSpec::default(), 10_000, 55).unwrap();
    let entries = pop.sorted_by_time();
    let mut lines = Vec::new();
    let mut ok = true;
    let mut compared = 0;
    for k in 2..=8 {
        let ours = cluster(&pop, k).unwrap();
        let km: ClusterSet = kmeans_1d(&entries, k, 9, 300).unwrap().clusters;
        if PolicyConfig::fedss(k_per_round, km.clone(), 0).validate(&pop).is_err() {
            lines.push(format!("k={k}: kmeans infeasible (min size {})", km.sizes().iter().min().unwrap()));
            continue;
        }
        let a = avg_round_time_for_clusters(&pop, &ours, 1000, k_per_round, 17).unwrap();
        let b = avg_round_time_for_clusters(&pop, &km, 1000, k_per_round, 17).unwrap();
        ok &= a <= b;
        compared += 1;
        lines.push(format!("k={k}: {a:.2} vs {b:.2}"));
    }
    check(ok && compared > 0, format!("equal-size vs kmeans mean round time: {}", lines.join("; ")))
}

fn fixture_config(seed: u64, rounds: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.rounds = rounds;
    cfg.clients_per_round = 5;
    cfg.fedcs_overselect = Some(8);
    cfg
}

fn c6_policy_ordering() -> Outcome {
    let cmp = compare(&fixture_config(0, 2800)).unwrap();
    let t = |k| cmp.run(k).report.total_time;
    let (r, cs, ss) = (t(PolicyKind::Random), t(PolicyKind::FedCs), t(PolicyKind::FedSs));
    check(
        cs < ss && ss < r && ss <= 0.9 * r,
        format!("totals fedcs={cs:.0} fedss={ss:.0} random={r:.0}; fedss/random={:.3}", ss / r),
    )
}

fn c7_cdf() -> Outcome {
    let cmp = compare(&fixture_config(0, 2800)).unwrap();
    let mut random = cmp.run(PolicyKind::Random).report.durations();
    random.sort_by(f64::total_cmp);
    let median = nearest_rank(&random, 50.0);
    let fedss = cmp.run(PolicyKind::FedSs).report.durations();
    let below = fedss.iter().filter(|&&d| d < median).count() as f64 / fedss.len() as f64;
    let k = cmp.knee.as_ref().map(|o| o.k).unwrap_or(0);
    check(
        below >= 0.8,
        format!("{:.1}% of fedss rounds below random median {median:.2} (k={k})", 100.0 * below),
    )
}

fn c8_fairness() -> Outcome {
    let rounds = 10_000;
    let cfg = fixture_config(0, rounds);
    let pop = cfg.build_population().unwrap();
    let (clusters, _) = resolve_clusters(&cfg, &pop).unwrap();
    let seeds = 1..=5u64;
    let mut totals: BTreeMap<ClientId, f64> = BTreeMap::new();
    let mut slow_share = 0.0;
    for s in seeds.clone() {
        let policy_seed = seed::stream(s, seed::POLICY);
        let r = simulate(&pop, &PolicyConfig::fedss(5, clusters.clone(), policy_seed), rounds).unwrap();
        for (id, c) in &r.per_client_aggregation_counts {
            *totals.entry(*id).or_default() += *c as f64;
        }
        let fc = simulate(&pop, &PolicyConfig::fedcs(5, 8, policy_seed), rounds).unwrap();
        slow_share += slow_group_share(&fc, &pop, 4);
    }
    let n_seeds = seeds.count() as f64;
    slow_share /= n_seeds;
    let expected = rounds as f64 * 5.0 / pop.len() as f64;
    let worst = totals
        .values()
        .map(|t| (t / n_seeds - expected).abs() / expected)
        .fold(0.0, f64::max);
    check(
        worst <= 0.2 && slow_share < 0.05,
        format!(
            "fedss max deviation {:.1}% of {expected} (k={}); fedcs slowest-4 share {:.2}%",
            100.0 * worst,
            clusters.k(),
            100.0 * slow_share
        ),
    )
}

fn c9_barrier() -> Outcome {
    let k = 64;
    let ids: Vec<ClientId> = (0..k as u32).rev().map(ClientId).collect();
    let canonical: Vec<ClientId> = (0..k as u32).map(ClientId).collect();
    for rep in 0..1000u64 {
        let barrier = Arc::new(RoundBarrier::new(k));
        let handles: Vec<_> = (0..k)
            .map(|i| {
                let b = Arc::clone(&barrier);
                thread::spawn(move || {
                    if (i as u64 + rep) % 3 == 0 {
                        thread::yield_now();
                    }
                    b.ack(i).unwrap()
                })
            })
            .collect();
        let collected = barrier.wait();
        let completions = handles.into_iter().map(|h| h.join().unwrap()).filter(|&c| c).count();
        if collected.len() != k || barrier.acked() != k || barrier.fired() != 1 || completions != 1 {
            return Err(format!("rep {rep}: collected {} acked {}", collected.len(), barrier.acked()));
        }
        let out = dispatch_round(&ids, DispatchMode::All, |id| {
            let mut r = seed::rng(seed::substream(rep, u64::from(id.0)));
            for _ in 0..r.random_range(0..4) {
                thread::yield_now();
            }
            Ok::<_, String>(WorkerOutput {
                result: id.0,
                simulated_duration: 1.0,
            })
        })
        .map_err(|e| e.to_string())?;
        let order: Vec<ClientId> = out.iter().map(|c| c.client).collect();
        if order != canonical || out.iter().any(|c| c.result != c.client.0) {
            return Err(format!("rep {rep}: non-canonical result order"));
        }
    }
    Ok("1000 repetitions with K=64: collected = acked = K, canonical order".into())
}

fn c10_trainer_math() -> Outcome {
    let mut rng = seed::rng(77);
    let (c, d) = (4, 5);
    let mut model = GlobalModel::zeros(c, d);
    model
        .weights
        .iter_mut()
        .chain(model.bias.iter_mut())
        .for_each(|w| *w = rng.random_range(-1.0..1.0));
    let mut samples = Samples::new(d);
    for i in 0..12 {
        let row: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        samples.push(&row, i % c);
    }
    let (_, grad) = softmax_cross_entropy(&model, &samples);
    let analytic: Vec<f64> = grad.weights.iter().chain(&grad.bias).copied().collect();
    let h = 1e-5;
    let mut max_err: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let at = |delta: f64| {
            let mut m = model.clone();
            if i < m.weights.len() {
                m.weights[i] += delta;
            } else {
                let j = i - m.weights.len();
                m.bias[j] += delta;
            }
            softmax_cross_entropy(&m, &samples).0
        };
        max_err = max_err.max(((at(h) - at(-h)) / (2.0 * h) - a).abs());
    }

    let delta = |vals: [f64; 2]| ModelDelta {
        weights: vec![vals[0], vals[1]],
        bias: vec![0.0],
    };
    let base = GlobalModel {
        classes: 1,
        features: 2,
        weights: vec![0.5, -0.25],
        bias: vec![1.0],
        version: 3,
    };
    let single = fedavg_aggregate(&base, &[(delta([0.125, 2.0]), 37)]);
    let single_ok = (single.weights[0] - 0.625).abs() < 1e-12 && (single.weights[1] - 1.75).abs() < 1e-12;
    let cancel = fedavg_aggregate(&base, &[(delta([0.3, -0.7]), 9), (delta([-0.3, 0.7]), 9)]);
    let cancel_ok = cancel.weights.iter().zip(&base.weights).all(|(a, b)| (a - b).abs() < 1e-12);
    let weighted = fedavg_aggregate(&base, &[(delta([1.0, 0.0]), 1), (delta([0.0, 1.0]), 2), (delta([1.0, 1.0]), 3)]);
    // (1*1 + 3*1)/6 and (2*1 + 3*1)/6 added to the base.
    let weighted_ok =
        (weighted.weights[0] - (0.5 + 4.0 / 6.0)).abs() < 1e-12 && (weighted.weights[1] - (-0.25 + 5.0 / 6.0)).abs() < 1e-12;
    check(
        max_err < 1e-5 && single_ok && cancel_ok && weighted_ok,
        format!("gradient max abs error {max_err:.2e}; fedavg single={single_ok} cancel={cancel_ok} weighted={weighted_ok}"),
    )
}

fn c11_bias_direction() -> Outcome {
    let mut acc: BTreeMap<PolicyKind, f64> = BTreeMap::new();
    let mut f1: BTreeMap<PolicyKind, f64> = BTreeMap::new();
    let seeds = 1..=5u64;
    for s in seeds.clone() {
        let mut cfg = fixture_config(s, 300);
        cfg.compare_trains = true;
        cfg.data.dirichlet_alpha = 0.3;
        cfg.data.speed_correlated_labels = true;
        let cmp = compare(&cfg).unwrap();
        for run in &cmp.runs {
            let (_, eval) = run.training.as_ref().unwrap();
            *acc.entry(run.report.policy).or_default() += 100.0 * eval.slowest.mean_accuracy;
            *f1.entry(run.report.policy).or_default() += 100.0 * eval.slowest.mean_f1_weighted;
        }
    }
    let n = seeds.count() as f64;
    let a = |k| acc[&k] / n;
    let f = |k| f1[&k] / n;
    use PolicyKind::*;
    let acc_ok = a(FedSs) - a(FedCs) >= 3.0 && (a(FedSs) - a(Random)).abs() <= 2.0;
    let f1_ok = f(FedSs) - f(FedCs) >= 3.0 && (f(FedSs) - f(Random)).abs() <= 2.0;
    check(
        acc_ok && f1_ok,
        format!(
            "slowest-4 accuracy fedss={:.2} fedcs={:.2} random={:.2}; weighted F1 fedss={:.2} fedcs={:.2} random={:.2}",
            a(FedSs),
            a(FedCs),
            a(Random),
            f(FedSs),
            f(FedCs),
            f(Random)
        ),
    )
}

fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn c12_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("config.json");
    fs::write(
        &config,
        r#"{"seed": 9, "rounds": 30, "sweep_rounds": 100, "population": {"clients": 24}}"#,
    )
    .unwrap();
    let mut checked = Vec::new();
    for command in ["cluster", "knee", "simulate", "train", "compare"] {
        let mut runs = Vec::new();
        for rep in 0..2 {
            let out = tmp.path().join(format!("{command}-{rep}"));
            let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedss"));
            cmd.arg(command).arg("--config").arg(&config).arg("--out").arg(&out);
            if command == "compare" {
                cmd.arg("--with-training");
            }
            let status = cmd.status().unwrap();
            if !status.success() {
                return Err(format!("{command} exited with {status}"));
            }
            runs.push(read_dir(&out));
        }
        if runs[0] != runs[1] || runs[0].is_empty() {
            return Err(format!("{command}: outputs differ between reruns"));
        }
        checked.push(format!("{command}({})", runs[0].len()));
    }
    Ok(format!("byte-identical reruns: {}", checked.join(" ")))
}

fn main() {
    // Silence the default panic message; failures are reported below.
    panic::set_hook(Box::new(|_| {}));
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("round-time formula fidelity", c1_round_time_formula),
        ("clustering invariants", c2_clustering_invariants),
        ("percentile anchor", c3_percentile_anchor),
        ("kneedle correctness", c4_kneedle),
        ("equal-size clustering vs kmeans", c5_equal_size_vs_kmeans),
        ("policy ordering", c6_policy_ordering),
        ("round-duration CDF", c7_cdf),
        ("fairness", c8_fairness),
        ("barrier correctness", c9_barrier),
        ("trainer math", c10_trainer_math),
        ("bias direction", c11_bias_direction),
        ("determinism", c12_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} [{secs:.1}s]: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name} [{secs:.1}s]: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
