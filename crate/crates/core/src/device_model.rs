//! Client compute/network profiles and the per-client round-time estimate.
//!
//! Units are fixed throughout: bandwidths in bits/second, model size in
//! bits, compute in FLOP and FLOP/second, durations in seconds.

use std::collections::HashSet;
use std::fmt;
use std::io::Read;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

const FIXTURE_DEVICES: &str = include_str!("../fixtures/devices.csv");
const FIXTURE_BANDWIDTH: &str = include_str!("../fixtures/bandwidth.csv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(pub u32);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The model every client downloads, trains and uploads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalModelSpec {
    /// Serialized model size in bits.
    pub model_size_bits: f64,
    /// FLOP needed to train on one local sample for a full local job
    /// (all local epochs included).
    pub flops_per_sample: f64,
}

impl GlobalModelSpec {
    pub fn new(model_size_bits: f64, flops_per_sample: f64) -> Result<Self> {
        let spec = Self {
            model_size_bits,
            flops_per_sample,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.model_size_bits.is_finite() && self.model_size_bits > 0.0) {
            return Err(Error::config(format!(
                "model_size_bits must be positive, got {}",
                self.model_size_bits
            )));
        }
        if !(self.flops_per_sample.is_finite() && self.flops_per_sample > 0.0) {
            return Err(Error::config(format!(
                "flops_per_sample must be positive, got {}",
                self.flops_per_sample
            )));
        }
        Ok(())
    }
}

impl Default for GlobalModelSpec {
    /// A 10 MB model costing 1 GFLOP per sample.
    fn default() -> Self {
        Self {
            model_size_bits: 8.0e7,
            flops_per_sample: 1.0e9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientProfile {
    pub id: ClientId,
    pub uplink_bps: f64,
    pub downlink_bps: f64,
    /// Sustained training throughput in FLOP/second.
    pub flops_rate: f64,
    pub num_samples: u64,
}

impl ClientProfile {
    pub fn new(
        id: ClientId,
        uplink_bps: f64,
        downlink_bps: f64,
        flops_rate: f64,
        num_samples: u64,
    ) -> Result<Self> {
        let c = Self {
            id,
            uplink_bps,
            downlink_bps,
            flops_rate,
            num_samples,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("uplink_bps", self.uplink_bps),
            ("downlink_bps", self.downlink_bps),
            ("flops_rate", self.flops_rate),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!(
                    "client {}: {name} must be positive, got {v}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Predicted wall time for one client to finish a round: download the
/// model, train on every local sample, upload the result.
pub fn estimate_round_time(client: &ClientProfile, model: &GlobalModelSpec) -> f64 {
    let upload = model.model_size_bits / client.uplink_bps;
    let compute = client.num_samples as f64 * model.flops_per_sample / client.flops_rate;
    let download = model.model_size_bits / client.downlink_bps;
    upload + compute + download
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct Units {
    pub bandwidth: String,
    pub model_size: String,
    pub compute: String,
    pub compute_rate: String,
    pub time: String,
}

impl Default for Units {
    fn default() -> Self {
        Self {
            bandwidth: "bit/s".into(),
            model_size: "bit".into(),
            compute: "FLOP".into(),
            compute_rate: "FLOP/s".into(),
            time: "s".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    clients: Vec<ClientProfile>,
    model: GlobalModelSpec,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PopulationDoc {
    units: Units,
    model: GlobalModelSpec,
    clients: Vec<ClientProfile>,
}

impl Population {
    pub fn new(clients: Vec<ClientProfile>, model: GlobalModelSpec) -> Result<Self> {
        model.validate()?;
        if clients.is_empty() {
            return Err(Error::config("population must contain at least one client"));
        }
        let mut seen = HashSet::with_capacity(clients.len());
        for c in &clients {
            c.validate()?;
            if !seen.insert(c.id) {
                return Err(Error::config(format!("duplicate client id {}", c.id)));
            }
        }
        Ok(Self { clients, model })
    }

    pub fn clients(&self) -> &[ClientProfile] {
        &self.clients
    }

    pub fn model(&self) -> &GlobalModelSpec {
        &self.model
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    /// Round-time estimate for every client, in population order.
    pub fn round_times(&self) -> Vec<f64> {
        self.clients
            .iter()
            .map(|c| estimate_round_time(c, &self.model))
            .collect()
    }

    /// `(id, T)` pairs sorted by ascending T, ties broken by ascending id.
    pub fn sorted_by_time(&self) -> Vec<(ClientId, f64)> {
        let mut v: Vec<(ClientId, f64)> = self
            .clients
            .iter()
            .map(|c| (c.id, estimate_round_time(c, &self.model)))
            .collect();
        v.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        v
    }

    /// Rebuild the population with a different model spec.
    pub fn with_model(&self, model: GlobalModelSpec) -> Result<Self> {
        Self::new(self.clients.clone(), model)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = PopulationDoc {
            units: Units::default(),
            model: self.model,
            clients: self.clients.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: PopulationDoc = serde_json::from_str(s)?;
        if doc.units != Units::default() {
            return Err(Error::config(format!(
                "unsupported units {:?}, expected {:?}",
                doc.units,
                Units::default()
            )));
        }
        Self::new(doc.clients, doc.model)
    }

    /// Population drawn from the bundled illustrative device/bandwidth tables.
    pub fn fixture(model: GlobalModelSpec, n: usize, samples: SampleRange, seed: u64) -> Result<Self> {
        let devices = read_device_table("devices.csv", FIXTURE_DEVICES.as_bytes())?;
        let links = read_bandwidth_table("bandwidth.csv", FIXTURE_BANDWIDTH.as_bytes())?;
        sample_population(&devices, &links, model, n, samples, seed)
    }
}

/// Inclusive integer range for per-client sample counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleRange {
    pub min: u64,
    pub max: u64,
}

impl Default for SampleRange {
    fn default() -> Self {
        Self { min: 100, max: 300 }
    }
}

impl SampleRange {
    fn validate(&self) -> Result<()> {
        if self.min > self.max {
            return Err(Error::config(format!(
                "sample range min {} exceeds max {}",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceRow {
    pub device: String,
    pub gflops: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthRow {
    pub region: String,
    pub download_mbps: f64,
    pub upload_mbps: f64,
}

fn read_table<R: Read>(file: &str, reader: R, header: &[&str]) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let got = rdr
        .headers()
        .map_err(|e| csv_error(file, &e))?
        .iter()
        .map(str::trim)
        .collect::<Vec<_>>();
    if got != header {
        return Err(Error::Parse {
            file: file.to_string(),
            line: 1,
            column: 1,
            message: format!("expected header `{}`, found `{}`", header.join(","), got.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(file, &e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(Error::Parse {
                file: file.to_string(),
                line,
                column: rec.len().min(header.len()) + 1,
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        rows.push((line, rec));
    }
    if rows.is_empty() {
        return Err(Error::EmptyTable {
            file: file.to_string(),
        });
    }
    Ok(rows)
}

fn csv_error(file: &str, e: &csv::Error) -> Error {
    Error::Parse {
        file: file.to_string(),
        line: e.position().map_or(0, |p| p.line()),
        column: 1,
        message: e.to_string(),
    }
}

fn positive_field(file: &str, line: u64, rec: &csv::StringRecord, column: usize) -> Result<f64> {
    let raw = rec[column].trim();
    let parse_err = |message: String| Error::Parse {
        file: file.to_string(),
        line,
        column: column + 1,
        message,
    };
    let v: f64 = raw
        .parse()
        .map_err(|_| parse_err(format!("`{raw}` is not a number")))?;
    if !(v.is_finite() && v > 0.0) {
        return Err(parse_err(format!("`{raw}` must be a positive finite number")));
    }
    Ok(v)
}

/// Parse a `device,gflops` table.
pub fn read_device_table<R: Read>(file: &str, reader: R) -> Result<Vec<DeviceRow>> {
    read_table(file, reader, &["device", "gflops"])?
        .into_iter()
        .map(|(line, rec)| {
            Ok(DeviceRow {
                device: rec[0].trim().to_string(),
                gflops: positive_field(file, line, &rec, 1)?,
            })
        })
        .collect()
}

/// Parse a `region,download_mbps,upload_mbps` table.
pub fn read_bandwidth_table<R: Read>(file: &str, reader: R) -> Result<Vec<BandwidthRow>> {
    read_table(file, reader, &["region", "download_mbps", "upload_mbps"])?
        .into_iter()
        .map(|(line, rec)| {
            Ok(BandwidthRow {
                region: rec[0].trim().to_string(),
                download_mbps: positive_field(file, line, &rec, 1)?,
                upload_mbps: positive_field(file, line, &rec, 2)?,
            })
        })
        .collect()
}

/// Build `n` clients by pairing uniformly drawn device and bandwidth rows.
pub fn sample_population(
    devices: &[DeviceRow],
    links: &[BandwidthRow],
    model: GlobalModelSpec,
    n: usize,
    samples: SampleRange,
    seed: u64,
) -> Result<Population> {
    if n == 0 {
        return Err(Error::config("population size must be at least 1"));
    }
    if devices.is_empty() || links.is_empty() {
        return Err(Error::config("device and bandwidth tables must be non-empty"));
    }
    samples.validate()?;
    let mut rng = seed::rng(seed);
    let clients = (0..n)
        .map(|i| {
            let dev = &devices[rng.random_range(0..devices.len())];
            let link = &links[rng.random_range(0..links.len())];
            let num_samples = rng.random_range(samples.min..=samples.max);
            ClientProfile::new(
                ClientId(i as u32),
                link.upload_mbps * 1e6,
                link.download_mbps * 1e6,
                dev.gflops * 1e9,
                num_samples,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Population::new(clients, model)
}

/// Load a population from a device table and a bandwidth table on disk.
pub fn load_population(
    device_table: &Path,
    bandwidth_table: &Path,
    model: GlobalModelSpec,
    n: usize,
    samples: SampleRange,
    seed: u64,
) -> Result<Population> {
    let open = |p: &Path| std::fs::File::open(p).map_err(|e| Error::io(p, e));
    let devices = read_device_table(&device_table.display().to_string(), open(device_table)?)?;
    let links = read_bandwidth_table(&bandwidth_table.display().to_string(), open(bandwidth_table)?)?;
    sample_population(&devices, &links, model, n, samples, seed)
}

/// Positive closed range sampled log-uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRange {
    pub low: f64,
    pub high: f64,
}

impl LogRange {
    pub fn new(low: f64, high: f64) -> Self {
        Self { low, high }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.low.is_finite() && self.high.is_finite() && self.low > 0.0 && self.low <= self.high) {
            return Err(Error::config(format!(
                "{name}: invalid range [{}, {}] (need 0 < low <= high)",
                self.low, self.high
            )));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut seed::Rng) -> f64 {
        if self.low == self.high {
            return self.low;
        }
        let u: f64 = rng.random();
        (self.low.ln() + u * (self.high.ln() - self.low.ln())).exp()
    }
}

/// Log-uniform ranges for synthetic populations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub flops_rate: LogRange,
    pub uplink_bps: LogRange,
    pub downlink_bps: LogRange,
    pub num_samples: LogRange,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            flops_rate: LogRange::new(3.0e9, 6.0e10),
            uplink_bps: LogRange::new(1.0e6, 5.0e7),
            downlink_bps: LogRange::new(4.0e6, 2.0e8),
            num_samples: LogRange::new(100.0, 300.0),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        self.flops_rate.validate("flops_rate")?;
        self.uplink_bps.validate("uplink_bps")?;
        self.downlink_bps.validate("downlink_bps")?;
        self.num_samples.validate("num_samples")
    }
}

pub fn synth_population(spec: &SynthSpec, model: GlobalModelSpec, n: usize, seed: u64) -> Result<Population> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::config("population size must be at least 1"));
    }
    let mut rng = seed::rng(seed);
    let clients = (0..n)
        .map(|i| {
            let flops_rate = spec.flops_rate.sample(&mut rng);
            let up = spec.uplink_bps.sample(&mut rng);
            let down = spec.downlink_bps.sample(&mut rng);
            let samples = spec.num_samples.sample(&mut rng).round() as u64;
            ClientProfile::new(ClientId(i as u32), up, down, flops_rate, samples)
        })
        .collect::<Result<Vec<_>>>()?;
    Population::new(clients, model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn client(up: f64, down: f64, rate: f64, samples: u64) -> ClientProfile {
        ClientProfile::new(ClientId(0), up, down, rate, samples).unwrap()
    }

    #[test]
    fn zero_samples_leaves_transfer_only() {
        let m = GlobalModelSpec::new(8e6, 1.0).unwrap();
        assert_eq!(estimate_round_time(&client(1e6, 1e6, 1.0, 0), &m), 16.0);
    }

    #[test]
    fn hand_evaluated_example() {
        let m = GlobalModelSpec::new(1e8, 2e9).unwrap();
        assert_eq!(estimate_round_time(&client(1e7, 5e7, 1e9, 5), &m), 22.0);
    }

    #[test]
    fn doubling_rates_halves_time() {
        let m = GlobalModelSpec::new(3.3e7, 7.1e8).unwrap();
        let t1 = estimate_round_time(&client(2.3e6, 9.1e6, 4.4e9, 137), &m);
        let t2 = estimate_round_time(&client(4.6e6, 18.2e6, 8.8e9, 137), &m);
        assert_eq!(t1, 2.0 * t2);
    }

    #[test]
    fn rejects_non_positive_rates() {
        assert!(ClientProfile::new(ClientId(1), 0.0, 1.0, 1.0, 1).is_err());
        assert!(ClientProfile::new(ClientId(1), 1.0, -1.0, 1.0, 1).is_err());
        assert!(ClientProfile::new(ClientId(1), 1.0, 1.0, f64::NAN, 1).is_err());
        assert!(GlobalModelSpec::new(0.0, 1.0).is_err());
    }

    #[test]
    fn population_rejects_duplicates_and_empty() {
        let m = GlobalModelSpec::default();
        assert!(Population::new(vec![], m).is_err());
        let c = client(1.0, 1.0, 1.0, 1);
        assert!(Population::new(vec![c.clone(), c], m).is_err());
    }

    #[test]
    fn sorted_by_time_breaks_ties_by_id() {
        let m = GlobalModelSpec::default();
        let mk = |id, up| ClientProfile::new(ClientId(id), up, 1e7, 1e9, 10).unwrap();
        let p = Population::new(vec![mk(3, 1e6), mk(1, 1e6), mk(2, 1e7)], m).unwrap();
        let ids: Vec<u32> = p.sorted_by_time().iter().map(|(id, _)| id.0).collect();
        assert_eq!(ids, vec![2, 1, 3]);
    }

    #[test]
    fn bad_row_names_file_line_column() {
        let src = "device,gflops\na,1.5\nb,fast\n";
        let err = read_device_table("dev.csv", src.as_bytes()).unwrap_err();
        match err {
            Error::Parse { file, line, column, .. } => {
                assert_eq!(file, "dev.csv");
                assert_eq!(line, 3);
                assert_eq!(column, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
        let src = "region,download_mbps,upload_mbps\nr,1,2\nq,3,-1\n";
        let err = read_bandwidth_table("bw.csv", src.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, column: 3, .. }), "{err}");
    }

    #[test]
    fn empty_table_is_distinct_error() {
        let err = read_device_table("dev.csv", "device,gflops\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::EmptyTable { .. }));
    }

    #[test]
    fn wrong_header_rejected() {
        let err = read_device_table("dev.csv", "name,gflops\na,1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn single_row_tables_give_identical_clients() {
        let d = vec![DeviceRow { device: "x".into(), gflops: 10.0 }];
        let b = vec![BandwidthRow { region: "r".into(), download_mbps: 20.0, upload_mbps: 5.0 }];
        let p = sample_population(&d, &b, GlobalModelSpec::default(), 7, SampleRange::default(), 3).unwrap();
        for c in p.clients() {
            assert_eq!(c.uplink_bps, 5e6);
            assert_eq!(c.downlink_bps, 20e6);
            assert_eq!(c.flops_rate, 10e9);
        }
    }

    #[test]
    fn fixture_is_deterministic_and_finite() {
        let a = Population::fixture(GlobalModelSpec::default(), 20, SampleRange::default(), 1).unwrap();
        let b = Population::fixture(GlobalModelSpec::default(), 20, SampleRange::default(), 1).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert!(a.round_times().iter().all(|t| t.is_finite() && *t > 0.0));
    }

    #[test]
    fn synth_degenerate_ranges_are_homogeneous() {
        let r = LogRange::new(5.0, 5.0);
        let spec = SynthSpec { flops_rate: r, uplink_bps: r, downlink_bps: r, num_samples: r };
        let p = synth_population(&spec, GlobalModelSpec::default(), 50, 9).unwrap();
        let t = p.round_times();
        assert!(t.iter().all(|x| *x == t[0]));
    }

    #[test]
    fn synth_wide_ranges_are_heterogeneous() {
        let p = synth_population(&SynthSpec::default(), GlobalModelSpec::default(), 10_000, 4).unwrap();
        let ids: HashSet<_> = p.clients().iter().map(|c| c.id).collect();
        assert_eq!(ids.len(), 10_000);
        let t = p.round_times();
        let max = t.iter().cloned().fold(f64::MIN, f64::max);
        let min = t.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max / min > 1.0);
    }

    #[test]
    fn synth_rejects_bad_range() {
        let mut spec = SynthSpec::default();
        spec.uplink_bps = LogRange::new(10.0, 1.0);
        assert!(synth_population(&spec, GlobalModelSpec::default(), 3, 0).is_err());
        spec.uplink_bps = LogRange::new(0.0, 1.0);
        assert!(synth_population(&spec, GlobalModelSpec::default(), 3, 0).is_err());
    }

    #[test]
    fn json_round_trip_keeps_units() {
        let p = Population::fixture(GlobalModelSpec::default(), 5, SampleRange::default(), 2).unwrap();
        let s = p.to_json().unwrap();
        assert!(s.contains("\"bit/s\""));
        assert_eq!(Population::from_json(&s).unwrap(), p);
        let bad = s.replace("\"bit/s\"", "\"Mbit/s\"");
        assert!(Population::from_json(&bad).is_err());
    }
}
