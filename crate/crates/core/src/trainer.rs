//! Desk-scale federated training for measuring selection bias.
//!
//! A multinomial logistic model is trained with FedAvg on a synthetic
//! Gaussian-mixture task whose per-client class mix comes from a Dirichlet
//! prior. Optionally the dominant class of each client follows its speed
//! rank, so a policy that starves slow clients also starves their classes.

use std::collections::{BTreeMap, HashMap};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::device_model::{ClientId, Population};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, f1_weighted, ConfusionMatrix};
use crate::orchestrator::{DispatchMode, RoundExecutor, ThreadExecutor, WorkerOutput};
use crate::policy::{PolicyConfig, PolicyKind, Selector};
use crate::seed;
use crate::simulator::{fastest_clients, slowest_clients, ReportBuilder, SimulationReport};

/// Softmax regression parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalModel {
    pub classes: usize,
    pub features: usize,
    /// Row-major `classes x features`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub version: u64,
}

/// Difference between a locally trained model and its starting snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDelta {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ModelDelta {
    pub fn zeros(classes: usize, features: usize) -> Self {
        Self {
            weights: vec![0.0; classes * features],
            bias: vec![0.0; classes],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| *v == 0.0)
    }
}

impl GlobalModel {
    pub fn zeros(classes: usize, features: usize) -> Self {
        Self {
            classes,
            features,
            weights: vec![0.0; classes * features],
            bias: vec![0.0; classes],
            version: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    fn logits(&self, x: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            let row = &self.weights[c * self.features..(c + 1) * self.features];
            *o = self.bias[c] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    /// Class probabilities for one sample.
    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let mut p = vec![0.0; self.classes];
        self.logits(x, &mut p);
        softmax_in_place(&mut p);
        p
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut z = vec![0.0; self.classes];
        self.logits(x, &mut z);
        argmax(&z)
    }

    fn apply(&mut self, delta: &ModelDelta, scale: f64) {
        for (w, d) in self.weights.iter_mut().zip(&delta.weights) {
            *w += scale * d;
        }
        for (b, d) in self.bias.iter_mut().zip(&delta.bias) {
            *b += scale * d;
        }
    }

    fn diff(&self, snapshot: &GlobalModel) -> ModelDelta {
        ModelDelta {
            weights: self.weights.iter().zip(&snapshot.weights).map(|(a, b)| a - b).collect(),
            bias: self.bias.iter().zip(&snapshot.bias).map(|(a, b)| a - b).collect(),
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

/// Labelled feature rows.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Samples {
    pub features: usize,
    /// Row-major `len x features`.
    pub x: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn new(features: usize) -> Self {
        Self {
            features,
            x: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.features..(i + 1) * self.features]
    }

    pub fn push(&mut self, row: &[f64], label: usize) {
        self.x.extend_from_slice(row);
        self.labels.push(label);
    }
}

/// Mean softmax cross-entropy over `samples` and its gradient.
pub fn softmax_cross_entropy(model: &GlobalModel, samples: &Samples) -> (f64, ModelDelta) {
    let mut grad = ModelDelta::zeros(model.classes, model.features);
    let n = samples.len();
    if n == 0 {
        return (0.0, grad);
    }
    let mut loss = 0.0;
    let mut z = vec![0.0; model.classes];
    for i in 0..n {
        let x = samples.row(i);
        let y = samples.labels[i];
        model.logits(x, &mut z);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - z[y];
        for c in 0..model.classes {
            let g = (z[c] - lse).exp() - if c == y { 1.0 } else { 0.0 };
            grad.bias[c] += g;
            let row = &mut grad.weights[c * model.features..(c + 1) * model.features];
            for (r, v) in row.iter_mut().zip(x) {
                *r += g * v;
            }
        }
    }
    let inv = 1.0 / n as f64;
    grad.weights.iter_mut().chain(grad.bias.iter_mut()).for_each(|g| *g *= inv);
    (loss * inv, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalTraining {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for LocalTraining {
    fn default() -> Self {
        Self {
            epochs: 1,
            learning_rate: 0.05,
            batch_size: 16,
        }
    }
}

/// Mini-batch gradient descent from `snapshot`; returns the weight change.
pub fn local_train(snapshot: &GlobalModel, data: &Samples, params: &LocalTraining, seed: u64) -> ModelDelta {
    if data.is_empty() || params.epochs == 0 || params.learning_rate == 0.0 {
        return ModelDelta::zeros(snapshot.classes, snapshot.features);
    }
    let mut model = snapshot.clone();
    let mut rng = seed::rng(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batch = params.batch_size.max(1);
    let mut chunk = Samples::new(data.features);
    for _ in 0..params.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(batch) {
            chunk.x.clear();
            chunk.labels.clear();
            for &i in idx {
                chunk.push(data.row(i), data.labels[i]);
            }
            let (_, g) = softmax_cross_entropy(&model, &chunk);
            model.apply(&g, -params.learning_rate);
        }
    }
    model.diff(snapshot)
}

/// FedAvg: `snapshot + sum_i (n_i / sum_j n_j) * delta_i`. With zero total
/// weight the deltas are averaged uniformly.
pub fn fedavg_aggregate(snapshot: &GlobalModel, deltas: &[(ModelDelta, u64)]) -> GlobalModel {
    let mut next = snapshot.clone();
    next.version += 1;
    if deltas.is_empty() {
        return next;
    }
    let total: u64 = deltas.iter().map(|(_, n)| n).sum();
    for (delta, n) in deltas {
        let w = if total == 0 {
            1.0 / deltas.len() as f64
        } else {
            *n as f64 / total as f64
        };
        next.apply(delta, w);
    }
    next
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client: ClientId,
    pub train: Samples,
    pub holdout: Samples,
    /// Label counts over all of the client's samples.
    pub class_histogram: Vec<u64>,
}

impl ClientDataset {
    pub fn num_samples(&self) -> usize {
        self.train.len() + self.holdout.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    pub classes: usize,
    pub features: usize,
    pub dirichlet_alpha: f64,
    /// Distance of each class mean from the origin along its own axis.
    pub separation: f64,
    pub noise_std: f64,
    pub holdout_fraction: f64,
    /// Give each client a dominant class that follows its speed rank.
    pub speed_correlated_labels: bool,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            features: 16,
            dirichlet_alpha: 0.3,
            separation: 2.0,
            noise_std: 1.0,
            holdout_fraction: 0.2,
            speed_correlated_labels: true,
        }
    }
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        if self.features < self.classes {
            return Err(Error::config("features must be at least the number of classes"));
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return Err(Error::config("dirichlet_alpha must be positive"));
        }
        if !(self.noise_std > 0.0) || !self.separation.is_finite() {
            return Err(Error::config("noise_std must be positive and separation finite"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::config("holdout_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

fn dirichlet(alpha: f64, classes: usize, rng: &mut seed::Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let g: Vec<f64> = (0..classes).map(|_| gamma.sample(rng)).collect();
    let s: f64 = g.iter().sum();
    if s > 0.0 && s.is_finite() {
        g.into_iter().map(|v| v / s).collect()
    } else {
        // Every draw underflowed: all mass on one class.
        let mut p = vec![0.0; classes];
        p[rng.random_range(0..classes)] = 1.0;
        p
    }
}

/// Generate one dataset per `(client, sample count)`.
///
/// `speed_rank[i]` is client i's position from fastest (0) to slowest and
/// is only consulted when `spec.speed_correlated_labels` is set: the
/// client's largest Dirichlet share then goes to class
/// `rank * classes / n`, the remaining shares to the other classes in
/// random order.
pub fn generate_datasets(
    clients: &[(ClientId, u64)],
    speed_rank: &[usize],
    spec: &DataSpec,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    spec.validate()?;
    if spec.speed_correlated_labels && speed_rank.len() != clients.len() {
        return Err(Error::config("speed ranks must cover every client"));
    }
    let n = clients.len();
    let noise = Normal::new(0.0, spec.noise_std).expect("noise validated positive");
    let mut rng = seed::rng(seed);
    clients
        .iter()
        .enumerate()
        .map(|(i, &(client, count))| {
            let mut p = dirichlet(spec.dirichlet_alpha, spec.classes, &mut rng);
            if spec.speed_correlated_labels {
                p.sort_by(|a, b| b.total_cmp(a));
                let home = speed_rank[i] * spec.classes / n.max(1);
                let mut others: Vec<usize> = (0..spec.classes).filter(|&c| c != home).collect();
                others.shuffle(&mut rng);
                let mut q = vec![0.0; spec.classes];
                q[home] = p[0];
                for (share, c) in p[1..].iter().zip(others) {
                    q[c] = *share;
                }
                p = q;
            }
            let pick = WeightedIndex::new(&p).map_err(|e| Error::config(e.to_string()))?;
            let mut by_class: Vec<Vec<Vec<f64>>> = vec![Vec::new(); spec.classes];
            let mut histogram = vec![0u64; spec.classes];
            for _ in 0..count {
                let y = pick.sample(&mut rng);
                let row: Vec<f64> = (0..spec.features)
                    .map(|f| {
                        let mean = if f == y { spec.separation } else { 0.0 };
                        mean + noise.sample(&mut rng)
                    })
                    .collect();
                histogram[y] += 1;
                by_class[y].push(row);
            }
            // Stratified holdout.
            let mut train = Samples::new(spec.features);
            let mut holdout = Samples::new(spec.features);
            for (y, mut rows) in by_class.into_iter().enumerate() {
                rows.shuffle(&mut rng);
                let h = (rows.len() as f64 * spec.holdout_fraction).round() as usize;
                for (j, row) in rows.iter().enumerate() {
                    if j < h {
                        holdout.push(row, y);
                    } else {
                        train.push(row, y);
                    }
                }
            }
            Ok(ClientDataset {
                client,
                train,
                holdout,
                class_histogram: histogram,
            })
        })
        .collect()
}

/// Datasets sized by each client's `num_samples`, with speed ranks taken
/// from the population's round-time estimates.
pub fn generate_noniid_data(population: &Population, spec: &DataSpec, seed: u64) -> Result<Vec<ClientDataset>> {
    let rank: HashMap<ClientId, usize> = population
        .sorted_by_time()
        .iter()
        .enumerate()
        .map(|(r, (id, _))| (*id, r))
        .collect();
    let clients: Vec<(ClientId, u64)> = population.clients().iter().map(|c| (c.id, c.num_samples)).collect();
    let ranks: Vec<usize> = clients.iter().map(|(id, _)| rank[id]).collect();
    generate_datasets(&clients, &ranks, spec, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub policy: PolicyKind,
    pub global_accuracy: f64,
    pub global_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub model: GlobalModel,
    pub report: SimulationReport,
    pub history: Vec<RoundMetrics>,
}

impl TrainOutcome {
    /// `round,policy,global_accuracy,global_loss` rows.
    pub fn accuracy_csv(&self) -> String {
        let mut out = String::from("round,policy,global_accuracy,global_loss\n");
        for m in &self.history {
            out.push_str(&format!("{},{},{},{}\n", m.round, m.policy, m.global_accuracy, m.global_loss));
        }
        out
    }
}

/// Mean per-client holdout accuracy and loss.
pub fn global_metrics(model: &GlobalModel, datasets: &[ClientDataset]) -> (f64, f64) {
    let mut acc = 0.0;
    let mut loss = 0.0;
    let mut counted = 0usize;
    for d in datasets.iter().filter(|d| !d.holdout.is_empty()) {
        let cm = confusion(model, &d.holdout);
        acc += accuracy(&cm);
        loss += softmax_cross_entropy(model, &d.holdout).0;
        counted += 1;
    }
    if counted == 0 {
        (0.0, 0.0)
    } else {
        (acc / counted as f64, loss / counted as f64)
    }
}

fn confusion(model: &GlobalModel, samples: &Samples) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::new(model.classes);
    for i in 0..samples.len() {
        cm.record(samples.labels[i], model.predict(samples.row(i)));
    }
    cm
}

/// Train for `rounds` rounds under a selection policy.
///
/// Each round the policy picks clients, the executor runs local training
/// for every invited client in parallel, and the aggregated set (all
/// invited clients, or FedCS's fastest K) is averaged into the model.
pub fn federated_train(
    population: &Population,
    datasets: &[ClientDataset],
    policy: &PolicyConfig,
    rounds: usize,
    local: &LocalTraining,
    seed: u64,
) -> Result<TrainOutcome> {
    federated_train_with(&ThreadExecutor, population, datasets, policy, rounds, local, seed)
}

pub fn federated_train_with<E: RoundExecutor>(
    executor: &E,
    population: &Population,
    datasets: &[ClientDataset],
    policy: &PolicyConfig,
    rounds: usize,
    local: &LocalTraining,
    seed: u64,
) -> Result<TrainOutcome> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::config("no client datasets"))?;
    let by_id: HashMap<ClientId, &ClientDataset> = datasets.iter().map(|d| (d.client, d)).collect();
    for c in population.clients() {
        let d = by_id
            .get(&c.id)
            .ok_or_else(|| Error::config(format!("client {} has no dataset", c.id)))?;
        if d.num_samples() as u64 != c.num_samples {
            return Err(Error::config(format!(
                "client {} has {} samples but its profile says {}",
                c.id,
                d.num_samples(),
                c.num_samples
            )));
        }
    }
    let classes = first.class_histogram.len();
    let features = first.train.features;
    let times: HashMap<ClientId, f64> = population
        .clients()
        .iter()
        .map(|c| c.id)
        .zip(population.round_times())
        .collect();

    let mut selector = Selector::new(population, policy)?;
    let mut builder = ReportBuilder::new(population, policy);
    let mut model = GlobalModel::zeros(classes, features);
    let mut history = Vec::with_capacity(rounds);
    let mode = match policy.kind {
        PolicyKind::FedCs => DispatchMode::Fastest {
            keep: policy.clients_per_round,
        },
        _ => DispatchMode::All,
    };

    for round in 0..rounds {
        let sel = selector.next_round();
        let snapshot = &model;
        let round_seed = seed::substream(seed, round as u64);
        let done = executor.dispatch(&sel.invited, mode, |client| {
            let data = &by_id[&client];
            let delta = local_train(snapshot, &data.train, local, seed::substream(round_seed, u64::from(client.0)));
            Ok(WorkerOutput {
                result: (delta, data.train.len() as u64),
                simulated_duration: times[&client],
            })
        })?;
        debug_assert_eq!(done.iter().map(|c| c.client).collect::<Vec<_>>(), sel.aggregated);
        let deltas: Vec<(ModelDelta, u64)> = done.into_iter().map(|c| c.result).collect();
        model = fedavg_aggregate(&model, &deltas);
        let (global_accuracy, global_loss) = global_metrics(&model, datasets);
        history.push(RoundMetrics {
            round,
            policy: policy.kind,
            global_accuracy,
            global_loss,
        });
        builder.push(sel);
    }
    Ok(TrainOutcome {
        model,
        report: builder.finish(),
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEval {
    pub client: ClientId,
    pub round_time: f64,
    pub holdout_size: usize,
    pub accuracy: f64,
    pub f1_weighted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEval {
    pub clients: Vec<ClientId>,
    pub mean_accuracy: f64,
    pub mean_f1_weighted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clients: Vec<ClientEval>,
    pub mean_accuracy: f64,
    pub mean_f1_weighted: f64,
    pub slowest: GroupEval,
    pub fastest: GroupEval,
}

fn group(evals: &BTreeMap<ClientId, ClientEval>, ids: Vec<ClientId>) -> GroupEval {
    let n = ids.len().max(1) as f64;
    GroupEval {
        mean_accuracy: ids.iter().map(|id| evals[id].accuracy).sum::<f64>() / n,
        mean_f1_weighted: ids.iter().map(|id| evals[id].f1_weighted).sum::<f64>() / n,
        clients: ids,
    }
}

/// Evaluate the global model on every client's holdout and summarize the
/// `group_size` slowest and fastest clients by estimated round time.
pub fn evaluate_per_client(
    model: &GlobalModel,
    datasets: &[ClientDataset],
    population: &Population,
    group_size: usize,
) -> Result<EvalReport> {
    let times: HashMap<ClientId, f64> = population
        .clients()
        .iter()
        .map(|c| c.id)
        .zip(population.round_times())
        .collect();
    let mut evals = BTreeMap::new();
    for d in datasets {
        let round_time = *times
            .get(&d.client)
            .ok_or_else(|| Error::config(format!("dataset for unknown client {}", d.client)))?;
        let cm = confusion(model, &d.holdout);
        evals.insert(
            d.client,
            ClientEval {
                client: d.client,
                round_time,
                holdout_size: d.holdout.len(),
                accuracy: accuracy(&cm),
                f1_weighted: f1_weighted(&cm),
            },
        );
    }
    if evals.len() != population.len() {
        return Err(Error::config("every client needs exactly one dataset"));
    }
    let g = group_size.min(population.len() / 2).max(1);
    let n = evals.len() as f64;
    Ok(EvalReport {
        mean_accuracy: evals.values().map(|e| e.accuracy).sum::<f64>() / n,
        mean_f1_weighted: evals.values().map(|e| e.f1_weighted).sum::<f64>() / n,
        slowest: group(&evals, slowest_clients(population, g)),
        fastest: group(&evals, fastest_clients(population, g)),
        clients: evals.into_values().collect(),
    })
}
