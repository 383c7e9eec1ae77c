//! Latency sweeps over payload size and network size.
//!
//! One trial spawns a network, feeds a synthetic payload into one node at a
//! fixed ingest rate and measures `l_t = t_c - t_g`, where `t_g` is when the
//! first transaction of the payload was generated and `t_c` is when the last
//! one was committed by every honest node.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use auditchain_core::sim::{SimConfig, SimNetwork};
use auditchain_core::NodeId;

use crate::workload::{synth_payload_sized, WorkloadError, DEFAULT_TXN_BYTES};

pub const MB: usize = 1_000_000;

/// Simulated time after which a trial is abandoned as non-quiescent.
pub const TRIAL_DEADLINE_MS: u64 = 24 * 3_600_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub payload_sizes: Vec<usize>,
    pub network_sizes: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            payload_sizes: [2, 5, 10, 15, 20].iter().map(|m| m * MB).collect(),
            network_sizes: vec![4, 10, 20, 30, 40],
            trials: 5,
            seed: 42,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), SweepError> {
        if self.trials == 0 {
            return Err(SweepError::InvalidSpec("trials must be at least 1".into()));
        }
        if self.payload_sizes.is_empty() || self.payload_sizes.contains(&0) {
            return Err(SweepError::InvalidSpec("payload sizes must be positive".into()));
        }
        if self.network_sizes.is_empty() || self.network_sizes.contains(&0) {
            return Err(SweepError::InvalidSpec("network sizes must be positive".into()));
        }
        Ok(())
    }
}

/// How the application feeds the payload into the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub txn_bytes: usize,
    /// Bytes per simulated millisecond handed to the gateway node; 0 submits
    /// everything at once.
    pub ingest_bytes_per_ms: u64,
}

impl Default for Workload {
    fn default() -> Self {
        Self { txn_bytes: DEFAULT_TXN_BYTES, ingest_bytes_per_ms: 4_000 }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SweepError {
    #[error("invalid sweep: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Sim(#[from] auditchain_core::sim::SimError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStatus {
    Ok,
    /// The deadline passed with events still queued.
    NonQuiescent,
    /// The network went quiet without every honest node committing the
    /// whole payload.
    Incomplete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencySample {
    pub n_nodes: usize,
    pub payload_bytes: usize,
    pub trial: usize,
    pub seed: u64,
    pub t_g_ms: u64,
    pub t_c_ms: Option<u64>,
    pub latency_ms: Option<u64>,
    pub status: SampleStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub n_nodes: usize,
    pub payload_bytes: usize,
    pub trials: usize,
    pub failed: usize,
    pub mean_latency_ms: f64,
    pub stddev_latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    pub samples: Vec<LatencySample>,
    pub summary: Vec<CellSummary>,
}

/// Per-trial seed, independent of the order trials run in.
pub fn trial_seed(seed: u64, n_nodes: usize, payload_bytes: usize, trial: usize) -> u64 {
    fn mix(mut z: u64) -> u64 {
        // splitmix64 finalizer
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    [n_nodes as u64, payload_bytes as u64, trial as u64].iter().fold(mix(seed), |acc, &v| mix(acc ^ mix(v)))
}

/// Node that receives the application's submissions.
pub fn gateway_node(n_nodes: usize) -> NodeId {
    (1 % n_nodes) as NodeId
}

pub fn run_trial(
    template: &SimConfig,
    workload: &Workload,
    n_nodes: usize,
    payload_bytes: usize,
    trial: usize,
    seed: u64,
) -> Result<LatencySample, SweepError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let txns = synth_payload_sized(payload_bytes, workload.txn_bytes, &mut rng)?;
    let ids: Vec<_> = txns.iter().map(|t| t.id).collect();
    let config = SimConfig { n_nodes, rng_seed: seed, ..template.clone() };
    let mut net = SimNetwork::new(config)?;
    let gateway = gateway_node(n_nodes);
    let mut sent = 0u64;
    for txn in txns {
        let at = sent.checked_div(workload.ingest_bytes_per_ms).unwrap_or(0);
        sent += txn.canonical_bytes().len() as u64;
        net.schedule_submission(gateway, txn, at)?;
    }
    let report = net.run_until_quiescent(TRIAL_DEADLINE_MS);
    let honest = report.honest_nodes();
    let t_g = ids.iter().map(|id| report.txns[id].generated_at).min().unwrap_or(0);
    let t_c = ids
        .iter()
        .map(|id| report.txns[id].committed_by_all(&honest))
        .collect::<Option<Vec<_>>>()
        .map(|v| v.into_iter().max().unwrap_or(t_g));
    let status = match (report.quiescent, t_c) {
        (false, _) => SampleStatus::NonQuiescent,
        (true, None) => SampleStatus::Incomplete,
        (true, Some(_)) => SampleStatus::Ok,
    };
    let t_c = if status == SampleStatus::Ok { t_c } else { None };
    Ok(LatencySample {
        n_nodes,
        payload_bytes,
        trial,
        seed,
        t_g_ms: t_g,
        t_c_ms: t_c,
        latency_ms: t_c.map(|c| c - t_g),
        status,
    })
}

fn summarize(samples: &[LatencySample]) -> Vec<CellSummary> {
    let mut out: Vec<CellSummary> = Vec::new();
    for cell in samples.chunk_by(|a, b| (a.n_nodes, a.payload_bytes) == (b.n_nodes, b.payload_bytes)) {
        let values: Vec<f64> = cell.iter().filter_map(|s| s.latency_ms).map(|l| l as f64).collect();
        let mean = if values.is_empty() { f64::NAN } else { values.iter().sum::<f64>() / values.len() as f64 };
        let stddev = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        out.push(CellSummary {
            n_nodes: cell[0].n_nodes,
            payload_bytes: cell[0].payload_bytes,
            trials: cell.len(),
            failed: cell.len() - values.len(),
            mean_latency_ms: mean,
            stddev_latency_ms: stddev,
        });
    }
    out
}

pub fn run_latency_sweep(
    spec: &SweepSpec,
    template: &SimConfig,
    workload: &Workload,
) -> Result<SweepResult, SweepError> {
    spec.validate()?;
    template.validate()?;
    let mut jobs = Vec::new();
    for &n in &spec.network_sizes {
        for &payload in &spec.payload_sizes {
            for trial in 0..spec.trials {
                jobs.push((n, payload, trial));
            }
        }
    }
    let mut samples = jobs
        .into_par_iter()
        .map(|(n, payload, trial)| {
            run_trial(template, workload, n, payload, trial, trial_seed(spec.seed, n, payload, trial))
        })
        .collect::<Result<Vec<_>, _>>()?;
    samples.sort_by_key(|s| (s.n_nodes, s.payload_bytes, s.trial));
    let summary = summarize(&samples);
    Ok(SweepResult { samples, summary })
}

impl SweepResult {
    pub fn all_ok(&self) -> bool {
        self.samples.iter().all(|s| s.status == SampleStatus::Ok)
    }

    pub fn mean(&self, n_nodes: usize, payload_bytes: usize) -> Option<f64> {
        self.summary
            .iter()
            .find(|c| (c.n_nodes, c.payload_bytes) == (n_nodes, payload_bytes))
            .map(|c| c.mean_latency_ms)
    }

    pub fn samples_csv(&self) -> Result<String, SweepError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["n_nodes", "payload_bytes", "trial", "seed", "t_g_ms", "t_c_ms", "latency_ms", "status"])?;
        for s in &self.samples {
            let opt = |v: Option<u64>| v.map(|v| v.to_string()).unwrap_or_default();
            let status = match s.status {
                SampleStatus::Ok => "ok",
                SampleStatus::NonQuiescent => "non_quiescent",
                SampleStatus::Incomplete => "incomplete",
            };
            w.write_record([
                s.n_nodes.to_string(),
                s.payload_bytes.to_string(),
                s.trial.to_string(),
                s.seed.to_string(),
                s.t_g_ms.to_string(),
                opt(s.t_c_ms),
                opt(s.latency_ms),
                status.to_string(),
            ])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv output is utf-8"))
    }

    pub fn summary_csv(&self) -> Result<String, SweepError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["n_nodes", "payload_bytes", "trials", "failed", "mean_latency_ms", "stddev_latency_ms"])?;
        for c in &self.summary {
            w.write_record([
                c.n_nodes.to_string(),
                c.payload_bytes.to_string(),
                c.trials.to_string(),
                c.failed.to_string(),
                format!("{:.3}", c.mean_latency_ms),
                format!("{:.3}", c.stddev_latency_ms),
            ])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv output is utf-8"))
    }

    /// Writes `samples.csv` and `summary.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), SweepError> {
        fs::create_dir_all(dir.as_ref())?;
        fs::write(dir.as_ref().join("samples.csv"), self.samples_csv()?)?;
        fs::write(dir.as_ref().join("summary.csv"), self.summary_csv()?)?;
        Ok(())
    }
}
