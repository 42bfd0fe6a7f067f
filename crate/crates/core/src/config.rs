//! Run configuration: a JSON document plus command-line overrides.
//!
//! Unknown keys are rejected at every nesting level. All randomness comes
//! from `seed`, split into the named streams in [`crate::seed`].

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::device_model::{
    load_population, synth_population, GlobalModelSpec, Population, SampleRange, SynthSpec,
};
use crate::error::{Error, Result};
use crate::policy::PolicyKind;
use crate::seed;
use crate::trainer::{DataSpec, LocalTraining};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PopulationSource {
    /// Sample from device and bandwidth tables (the bundled ones unless
    /// paths are given).
    Fixture,
    /// Log-uniform synthetic profiles.
    Synth,
    /// A population JSON document.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PopulationConfig {
    pub source: PopulationSource,
    pub clients: usize,
    pub device_table: Option<PathBuf>,
    pub bandwidth_table: Option<PathBuf>,
    pub file: Option<PathBuf>,
    pub samples: SampleRange,
    pub synth: SynthSpec,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            source: PopulationSource::Fixture,
            clients: 20,
            device_table: None,
            bandwidth_table: None,
            file: None,
            samples: SampleRange::default(),
            synth: SynthSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub population: PopulationConfig,
    pub model: GlobalModelSpec,
    pub policy: PolicyKind,
    pub clients_per_round: usize,
    /// FedCS invitations per round; defaults to `ceil(1.6 * K)` capped at N.
    pub fedcs_overselect: Option<usize>,
    /// FedSS cluster count. When unset (or with `auto_k`) it is chosen by
    /// the knee sweep.
    pub k: Option<usize>,
    pub auto_k: bool,
    /// Upper end of the k sweep; defaults to `min(10, N / K)`.
    pub k_max: Option<usize>,
    /// Rounds simulated per k during the sweep.
    pub sweep_rounds: usize,
    pub sensitivity: f64,
    pub rounds: usize,
    /// Size of the slowest/fastest groups in fairness and accuracy summaries.
    pub slow_group: usize,
    pub data: DataSpec,
    pub training: LocalTraining,
    /// `compare` also trains each policy when set.
    pub compare_trains: bool,
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            population: PopulationConfig::default(),
            model: GlobalModelSpec::default(),
            policy: PolicyKind::FedSs,
            clients_per_round: 5,
            fedcs_overselect: None,
            k: None,
            auto_k: false,
            k_max: None,
            sweep_rounds: 1000,
            sensitivity: crate::knee::DEFAULT_SENSITIVITY,
            rounds: 300,
            slow_group: 4,
            data: DataSpec::default(),
            training: LocalTraining::default(),
            compare_trains: false,
            out: None,
        }
    }
}

/// Values given on the command line. `None` leaves the file value alone.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub rounds: Option<usize>,
    pub policy: Option<PolicyKind>,
    pub clients_per_round: Option<usize>,
    pub fedcs_overselect: Option<usize>,
    pub k: Option<usize>,
    pub auto_k: bool,
    pub k_max: Option<usize>,
    pub sweep_rounds: Option<usize>,
    pub sensitivity: Option<f64>,
    pub clients: Option<usize>,
    pub population_source: Option<PopulationSource>,
    pub population_file: Option<PathBuf>,
    pub device_table: Option<PathBuf>,
    pub bandwidth_table: Option<PathBuf>,
    pub model_size_bits: Option<f64>,
    pub flops_per_sample: Option<f64>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub alpha: Option<f64>,
    pub speed_correlated_labels: Option<bool>,
    pub slow_group: Option<usize>,
    pub compare_trains: bool,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if o.k.is_some() && o.auto_k {
            return Err(Error::config("--k and --auto-k are mutually exclusive"));
        }
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value.clone() {
                    $field = v;
                }
            };
        }
        set!(self.seed, o.seed);
        set!(self.rounds, o.rounds);
        set!(self.policy, o.policy);
        set!(self.clients_per_round, o.clients_per_round);
        set!(self.sweep_rounds, o.sweep_rounds);
        set!(self.sensitivity, o.sensitivity);
        set!(self.population.clients, o.clients);
        set!(self.population.source, o.population_source);
        set!(self.model.model_size_bits, o.model_size_bits);
        set!(self.model.flops_per_sample, o.flops_per_sample);
        set!(self.training.epochs, o.epochs);
        set!(self.training.learning_rate, o.learning_rate);
        set!(self.training.batch_size, o.batch_size);
        set!(self.data.dirichlet_alpha, o.alpha);
        set!(self.data.speed_correlated_labels, o.speed_correlated_labels);
        set!(self.slow_group, o.slow_group);
        if o.fedcs_overselect.is_some() {
            self.fedcs_overselect = o.fedcs_overselect;
        }
        if o.k_max.is_some() {
            self.k_max = o.k_max;
        }
        if o.k.is_some() {
            self.k = o.k;
            self.auto_k = false;
        }
        if o.auto_k {
            self.auto_k = true;
            self.k = None;
        }
        if o.population_file.is_some() {
            self.population.file = o.population_file.clone();
        }
        if o.device_table.is_some() {
            self.population.device_table = o.device_table.clone();
        }
        if o.bandwidth_table.is_some() {
            self.population.bandwidth_table = o.bandwidth_table.clone();
        }
        self.compare_trains |= o.compare_trains;
        if o.out.is_some() {
            self.out = o.out.clone();
        }
        Ok(())
    }

    /// Range and consistency checks that do not depend on the policy.
    pub fn validate(&self) -> Result<()> {
        let p = &self.population;
        if p.source != PopulationSource::File && p.clients == 0 {
            return Err(Error::config("population.clients must be positive"));
        }
        match p.source {
            PopulationSource::File => {
                let file = p
                    .file
                    .as_ref()
                    .ok_or_else(|| Error::config("population.source is \"file\" but population.file is unset"))?;
                require_file(file)?;
            }
            PopulationSource::Fixture => match (&p.device_table, &p.bandwidth_table) {
                (None, None) => {}
                (Some(d), Some(b)) => {
                    require_file(d)?;
                    require_file(b)?;
                }
                _ => {
                    return Err(Error::config(
                        "population.device_table and population.bandwidth_table must be given together",
                    ))
                }
            },
            PopulationSource::Synth => p.synth.validate()?,
        }
        self.model.validate()?;
        if self.clients_per_round == 0 {
            return Err(Error::config("clients_per_round must be positive"));
        }
        if let Some(o) = self.fedcs_overselect {
            if o < self.clients_per_round {
                return Err(Error::config(format!(
                    "fedcs_overselect {o} is below clients_per_round {}",
                    self.clients_per_round
                )));
            }
        }
        if self.k == Some(0) {
            return Err(Error::config("k must be positive"));
        }
        if self.k.is_some() && self.auto_k {
            return Err(Error::config("k and auto_k are mutually exclusive"));
        }
        if self.k_max == Some(0) {
            return Err(Error::config("k_max must be positive"));
        }
        if !(self.sensitivity.is_finite() && self.sensitivity >= 0.0) {
            return Err(Error::config("sensitivity must be a non-negative number"));
        }
        if self.sweep_rounds == 0 {
            return Err(Error::config("sweep_rounds must be positive"));
        }
        if self.slow_group == 0 {
            return Err(Error::config("slow_group must be positive"));
        }
        self.data.validate()?;
        let t = &self.training;
        if t.batch_size == 0 || !(t.learning_rate.is_finite() && t.learning_rate >= 0.0) {
            return Err(Error::config("training needs batch_size >= 1 and a non-negative learning_rate"));
        }
        Ok(())
    }

    /// Checks for commands that run a single policy: settings that belong
    /// to another policy are a conflict rather than silently ignored.
    pub fn validate_policy(&self) -> Result<()> {
        self.validate()?;
        if self.policy != PolicyKind::FedSs && (self.k.is_some() || self.auto_k) {
            return Err(Error::config(format!(
                "k/auto_k only apply to fedss, but policy is {}",
                self.policy
            )));
        }
        if self.policy != PolicyKind::FedCs && self.fedcs_overselect.is_some() {
            return Err(Error::config(format!(
                "fedcs_overselect only applies to fedcs, but policy is {}",
                self.policy
            )));
        }
        Ok(())
    }

    pub fn population_seed(&self) -> u64 {
        seed::stream(self.seed, seed::POPULATION)
    }

    pub fn policy_seed(&self) -> u64 {
        seed::stream(self.seed, seed::POLICY)
    }

    pub fn data_seed(&self) -> u64 {
        seed::stream(self.seed, seed::DATA)
    }

    pub fn training_seed(&self) -> u64 {
        seed::stream(self.seed, seed::TRAINING)
    }

    /// FedCS invitations per round for a population of `n` clients.
    pub fn overselect_for(&self, n: usize) -> usize {
        self.fedcs_overselect
            .unwrap_or_else(|| ((self.clients_per_round * 8).div_ceil(5)).min(n))
    }

    pub fn build_population(&self) -> Result<Population> {
        let p = &self.population;
        let seed = self.population_seed();
        match p.source {
            PopulationSource::Fixture => match (&p.device_table, &p.bandwidth_table) {
                (Some(d), Some(b)) => load_population(d, b, self.model, p.clients, p.samples, seed),
                _ => Population::fixture(self.model, p.clients, p.samples, seed),
            },
            PopulationSource::Synth => synth_population(&p.synth, self.model, p.clients, seed),
            PopulationSource::File => {
                let path = p.file.as_ref().ok_or_else(|| Error::config("population.file is unset"))?;
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                Population::from_json(&text)?.with_model(self.model)
            }
        }
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::config(format!("file not found: {}", path.display())))
    }
}

/// Read the optional config file, apply flag overrides and validate.
pub fn parse_config(file: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = match file {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    cfg.apply(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}
