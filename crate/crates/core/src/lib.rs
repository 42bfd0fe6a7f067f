//! Straggler-aware client selection for federated learning.
//!
//! Clients are profiled by compute rate and link bandwidth, their per-round
//! time is estimated, and they are grouped into equal-size clusters of
//! similar round time. Each round the server visits the next cluster in
//! round-robin order and picks participants uniformly inside it, so slow
//! clients still contribute while fast rounds stay fast.
//!
//! The crate also ships the Random and FedCS baselines, a pure time-model
//! simulator, an in-process coordinator/worker round barrier, and a small
//! FedAvg trainer over synthetic non-IID data for measuring selection bias.

pub mod clustering;
pub mod config;
pub mod device_model;
pub mod error;
pub mod knee;
pub mod metrics;
pub mod orchestrator;
pub mod policy;
pub mod report;
pub mod seed;
pub mod simulator;
pub mod trainer;

pub use clustering::{cluster, kmeans_1d, ClusterSet};
pub use device_model::{
    estimate_round_time, ClientId, ClientProfile, GlobalModelSpec, Population, SynthSpec,
};
pub use error::{Error, Result};
pub use knee::{kneedle, optimal_k, sweep_k, Knee, KneeCurve};
pub use metrics::ConfusionMatrix;
pub use policy::{PolicyConfig, PolicyKind, RoundSelection, Selector};
pub use simulator::{simulate, SimulationReport};

#[cfg(test)]
pub(crate) mod testutil {
    use crate::device_model::{ClientId, ClientProfile, GlobalModelSpec, Population};

    /// Population whose round times are exactly the given whole numbers
    /// (>= 1): a 1-bit model over 2 bit/s links plus `t - 1` unit-cost samples.
    pub fn timed_population(times: &[f64]) -> Population {
        let model = GlobalModelSpec::new(1.0, 1.0).unwrap();
        let clients = times
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                assert!(t >= 1.0 && t.fract() == 0.0, "whole-number times only");
                ClientProfile::new(ClientId(i as u32), 2.0, 2.0, 1.0, t as u64 - 1).unwrap()
            })
            .collect();
        Population::new(clients, model).unwrap()
    }
}
