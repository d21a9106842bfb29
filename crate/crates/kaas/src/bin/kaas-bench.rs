use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use kaas::bench::{self, BenchConfig};
use kaas::config::{load_timing, parse_capacity};
use kaas::store::StoreSpec;
use kaas::workload::{self, WorkloadKind, WorkloadSpec};
use kaas_core::backend::TimingModel;
use kaas_core::router::{Router, RoutingPolicy};

#[derive(Parser)]
#[command(name = "kaas-bench", version, about = "Workload generator and routing benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a workload under one or more routing policies.
    Run(RunArgs),
    /// Write a workload's input objects to a store.
    GenData(GenArgs),
}

#[derive(Args)]
struct WorkloadArgs {
    /// `matmul_chain`, `zipf_const` or `mixed`.
    #[arg(long, default_value = "zipf_const")]
    workload: WorkloadKind,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 5000)]
    requests: u64,
    #[arg(long, default_value_t = 16)]
    matrix_dim: u32,
    #[arg(long, default_value_t = 1.0)]
    zipf_s: f64,
    #[arg(long, default_value_t = 100)]
    key_universe: u32,
}

impl WorkloadArgs {
    fn spec(&self) -> WorkloadSpec {
        WorkloadSpec {
            kind: self.workload,
            request_count: self.requests,
            matrix_dim: self.matrix_dim,
            zipf_s: self.zipf_s,
            key_universe: self.key_universe,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    /// Comma-separated policies; bare `random` takes the workload seed.
    #[arg(long, default_value = "random,rr,affinity:8")]
    policies: String,
    #[arg(long, default_value_t = 4)]
    executors: usize,
    /// Device memory per executor; defaults to 30 blobs plus 1 KiB.
    #[arg(long, value_parser = parse_capacity)]
    capacity: Option<u64>,
    #[arg(long, default_value_t = 50.0)]
    interarrival_us: f64,
    #[arg(long, default_value_t = Router::DEFAULT_DIGEST_CAP)]
    digest_cap: usize,
    /// JSON file with all timing fields.
    #[arg(long)]
    timing: Option<PathBuf>,
    /// Run the request stream a second time on the warmed executors.
    #[arg(long)]
    warm_repeat: bool,
    /// Concurrent clients; above 1 drives the threaded service.
    #[arg(long, default_value_t = 1)]
    clients: usize,
    /// Drive a running server at `host:port` instead.
    #[arg(long)]
    over_http: Option<String>,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    /// `mem` or `dir:<path>`.
    #[arg(long)]
    store: StoreSpec,
}

fn parse_policies(list: &str, seed: u64) -> anyhow::Result<Vec<RoutingPolicy>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            if s == "random" {
                Ok(RoutingPolicy::Random { seed })
            } else {
                s.parse().map_err(anyhow::Error::from)
            }
        })
        .collect()
}

fn run(args: RunArgs) -> anyhow::Result<()> {
    let spec = args.workload.spec();
    let mut cfg = BenchConfig::new(spec.clone(), parse_policies(&args.policies, spec.seed)?);
    cfg.executors = args.executors;
    if let Some(c) = args.capacity {
        cfg.capacity = c;
    }
    cfg.interarrival_us = args.interarrival_us;
    cfg.digest_cap = args.digest_cap;
    cfg.timing = match &args.timing {
        Some(p) => load_timing(p)?,
        None => TimingModel::default(),
    };
    cfg.warm_repeat = args.warm_repeat;
    cfg.clients = args.clients;

    let report = match &args.over_http {
        Some(addr) => {
            let base = if addr.contains("://") {
                addr.clone()
            } else {
                format!("http://{addr}")
            };
            tokio::runtime::Runtime::new()?.block_on(bench::run_http(&cfg, &base))?
        }
        None => bench::run(&cfg)?,
    };
    print!("{}", report.table());
    if let Some(out) = &args.out {
        std::fs::write(out, report.to_json() + "\n").with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Run(args) => run(args),
        Command::GenData(args) => {
            let store = args.store.open()?;
            let spec = args.workload.spec();
            workload::gen_data(&spec, &*store)?;
            println!("wrote {} objects to {}", workload::input_keys(&spec).len(), args.store);
            Ok(())
        }
    }
}
