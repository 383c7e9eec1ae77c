use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;

use auditchain_bench::scenarios::{run_attack_scenarios, run_scenario, ScenarioReport, SCENARIOS};
use auditchain_bench::sweep::{run_latency_sweep, SampleStatus, SweepSpec, Workload, MB};
use auditchain_core::sim::{CpuModel, SimConfig};

#[derive(Parser, Debug)]
#[command(
    name = "auditchain-bench",
    about = "Latency sweeps and attack scenarios for the audit chain",
    after_help = "Without --scenario a latency sweep runs and writes samples.csv and summary.csv into --out."
)]
struct Cli {
    /// Payload sizes in MB (1 MB = 1_000_000 bytes).
    #[arg(long, value_delimiter = ',', default_values_t = [2, 5, 10, 15, 20])]
    payloads: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [4, 10, 20, 30, 40])]
    nodes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Relative latency jitter in [0, 1).
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    #[arg(long, default_value_t = 5)]
    latency_ms: u64,
    /// Link bandwidth in bytes per ms.
    #[arg(long, default_value_t = 12_500)]
    bandwidth: u64,
    #[arg(long, default_value_t = 3_000)]
    per_message_us: u64,
    #[arg(long, default_value_t = 500)]
    bytes_per_us: u64,
    /// Bytes per ms fed to the gateway node; 0 submits everything at once.
    #[arg(long, default_value_t = 4_000)]
    ingest_rate: u64,
    #[arg(long, default_value_t = 64 * 1024)]
    txn_bytes: usize,
    /// Output directory for CSVs, or for scenarios.json.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Run attack scenarios instead of a sweep: one by name, or `all`.
    #[arg(long)]
    scenario: Option<String>,
}

fn sweep(args: Cli) -> Result<bool, Box<dyn std::error::Error>> {
    let spec = SweepSpec {
        payload_sizes: args.payloads.iter().map(|m| m * MB).collect(),
        network_sizes: args.nodes,
        trials: args.trials,
        seed: args.seed,
    };
    let template = SimConfig {
        link_latency_ms: args.latency_ms,
        bandwidth: args.bandwidth,
        jitter_fraction: args.jitter,
        rng_seed: args.seed,
        cpu: CpuModel { per_message_us: args.per_message_us, bytes_per_us: args.bytes_per_us },
        ..SimConfig::default()
    };
    let workload = Workload { txn_bytes: args.txn_bytes, ingest_bytes_per_ms: args.ingest_rate };
    let result = run_latency_sweep(&spec, &template, &workload)?;
    result.write(&args.out)?;
    print!("{}", result.summary_csv()?);
    let bad = result.samples.iter().filter(|s| s.status != SampleStatus::Ok).count();
    if bad > 0 {
        eprintln!("{bad} runs did not complete");
    }
    eprintln!("wrote {}", args.out.display());
    Ok(bad == 0)
}

fn scenarios(name: &str, seed: u64, out: &Path) -> Result<bool, Box<dyn std::error::Error>> {
    let report = match name {
        "all" => run_attack_scenarios(seed),
        name => ScenarioReport {
            seed,
            scenarios: vec![run_scenario(name, seed)
                .ok_or_else(|| format!("unknown scenario `{name}`; expected all, {}", SCENARIOS.join(", ")))?],
        },
    };
    for s in &report.scenarios {
        println!("{} {}: {}", if s.passed { "PASS" } else { "FAIL" }, s.name, s.detail);
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("scenarios.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report.all_passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.scenario {
        Some(name) => scenarios(name, cli.seed, &cli.out),
        None => sweep(cli),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
