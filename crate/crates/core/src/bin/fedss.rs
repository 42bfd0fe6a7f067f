use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedss_core::config::{parse_config, Overrides, PopulationSource, RunConfig};
use fedss_core::report::{self, Outputs, REPORT_JSON};
use fedss_core::{Error, PolicyKind};

/// Straggler-aware client selection: clustering, simulation and training.
#[derive(Debug, Parser)]
#[command(name = "fedss", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Group clients into equal-size clusters of similar round time.
    Cluster,
    /// Sweep the number of clusters and locate the knee.
    Knee,
    /// Simulate round times under one policy.
    Simulate,
    /// Federated training under one policy, with per-client evaluation.
    Train,
    /// Run every policy on the same population and seed.
    Compare,
}

#[derive(Debug, Args)]
struct Flags {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for report files. Without it report.json goes to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    rounds: Option<usize>,
    #[arg(long, global = true)]
    policy: Option<PolicyKind>,
    #[arg(long, global = true)]
    clients_per_round: Option<usize>,
    #[arg(long, global = true)]
    fedcs_overselect: Option<usize>,
    /// Number of FedSS clusters.
    #[arg(long, global = true, conflicts_with = "auto_k")]
    k: Option<usize>,
    /// Choose the number of clusters from the knee sweep.
    #[arg(long, global = true)]
    auto_k: bool,
    #[arg(long, global = true)]
    k_max: Option<usize>,
    #[arg(long, global = true)]
    sweep_rounds: Option<usize>,
    #[arg(long, global = true)]
    sensitivity: Option<f64>,
    /// Population size.
    #[arg(long, global = true)]
    clients: Option<usize>,
    #[arg(long, global = true, value_parser = parse_source)]
    population_source: Option<PopulationSource>,
    #[arg(long, global = true)]
    population_file: Option<PathBuf>,
    #[arg(long, global = true)]
    device_table: Option<PathBuf>,
    #[arg(long, global = true)]
    bandwidth_table: Option<PathBuf>,
    #[arg(long, global = true)]
    model_size_bits: Option<f64>,
    #[arg(long, global = true)]
    flops_per_sample: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    batch: Option<usize>,
    /// Dirichlet concentration of the per-client label mix.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    speed_correlated_labels: Option<bool>,
    /// Clients in the slowest and fastest summary groups.
    #[arg(long, global = true)]
    slow_group: Option<usize>,
    /// Also train every policy in `compare`.
    #[arg(long, global = true)]
    with_training: bool,
}

fn parse_source(s: &str) -> Result<PopulationSource, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned()))
        .map_err(|_| format!("unknown population source {s:?} (fixture, synth, file)"))
}

impl Flags {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            rounds: self.rounds,
            policy: self.policy,
            clients_per_round: self.clients_per_round,
            fedcs_overselect: self.fedcs_overselect,
            k: self.k,
            auto_k: self.auto_k,
            k_max: self.k_max,
            sweep_rounds: self.sweep_rounds,
            sensitivity: self.sensitivity,
            clients: self.clients,
            population_source: self.population_source,
            population_file: self.population_file.clone(),
            device_table: self.device_table.clone(),
            bandwidth_table: self.bandwidth_table.clone(),
            model_size_bits: self.model_size_bits,
            flops_per_sample: self.flops_per_sample,
            epochs: self.epochs,
            learning_rate: self.lr,
            batch_size: self.batch,
            alpha: self.alpha,
            speed_correlated_labels: self.speed_correlated_labels,
            slow_group: self.slow_group,
            compare_trains: self.with_training,
            out: self.out.clone(),
        }
    }
}

fn run(cli: &Cli) -> Result<Outputs, Error> {
    let cfg: RunConfig = parse_config(cli.flags.config.as_deref(), &cli.flags.overrides())?;
    let out = match cli.command {
        Command::Cluster => report::run_cluster(&cfg),
        Command::Knee => report::run_knee(&cfg),
        Command::Simulate => report::run_simulate(&cfg),
        Command::Train => report::run_train(&cfg),
        Command::Compare => report::run_compare(&cfg),
    }?;
    match &cfg.out {
        Some(dir) => out.write_to(dir)?,
        None => print!("{}", out.get(REPORT_JSON).unwrap_or_default()),
    }
    Ok(out)
}

fn fail(category: &str, message: &str, code: u8) -> ExitCode {
    let doc = serde_json::json!({ "category": category, "message": message });
    eprintln!("{doc}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or_default().trim_start_matches("error: ");
            return fail("usage", first, 2);
        }
    };
    match run(&cli) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => fail(e.category(), &e.to_string(), e.exit_code() as u8),
    }
}
