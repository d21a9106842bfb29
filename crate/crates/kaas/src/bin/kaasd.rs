use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use kaas::config::{load_timing, parse_capacity, ServerConfig, ServiceConfig, TimingOverrides};
use kaas::store::StoreSpec;
use kaas_core::backend::TimingModel;
use kaas_core::router::{Router, RoutingPolicy};

#[derive(Parser)]
#[command(name = "kaasd", version, about = "Kernel-as-a-service daemon")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the HTTP API until interrupted.
    Serve(ServeArgs),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    bind: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// `mem` or `dir:<path>`.
    #[arg(long, default_value = "mem")]
    store: StoreSpec,
    #[arg(long, default_value_t = 1)]
    executors: usize,
    /// Device memory per executor, e.g. `64MiB`.
    #[arg(long, default_value = "1MiB", value_parser = parse_capacity)]
    capacity: u64,
    /// `random:<seed>`, `rr` or `affinity:<q_max>`.
    #[arg(long, default_value = "affinity:8")]
    policy: RoutingPolicy,
    #[arg(long, default_value_t = Router::DEFAULT_DIGEST_CAP)]
    digest_cap: usize,
    /// Reject requests carrying unknown fields.
    #[arg(long)]
    strict_schema: bool,
    #[command(flatten)]
    timing: TimingArgs,
}

#[derive(Args)]
struct TimingArgs {
    /// JSON file with all timing fields.
    #[arg(long)]
    timing: Option<PathBuf>,
    /// Bytes per second.
    #[arg(long)]
    h2d_bandwidth: Option<f64>,
    /// Bytes per second.
    #[arg(long)]
    d2h_bandwidth: Option<f64>,
    /// Seconds.
    #[arg(long)]
    fetch_latency: Option<f64>,
    /// Seconds.
    #[arg(long)]
    launch_overhead: Option<f64>,
    /// Fused multiply-adds per second.
    #[arg(long)]
    flop_rate: Option<f64>,
}

impl TimingArgs {
    fn resolve(&self) -> anyhow::Result<TimingModel> {
        let base = match &self.timing {
            Some(path) => load_timing(path)?,
            None => TimingModel::default(),
        };
        let t = TimingOverrides {
            h2d_bandwidth: self.h2d_bandwidth,
            d2h_bandwidth: self.d2h_bandwidth,
            fetch_latency: self.fetch_latency,
            launch_overhead: self.launch_overhead,
            flop_rate: self.flop_rate,
        }
        .apply(base);
        t.validate().context("timing")?;
        Ok(t)
    }
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .init();
    let Command::Serve(args) = Cli::parse().command;
    let cfg = ServerConfig {
        bind: args.bind,
        port: args.port,
        store: args.store,
        service: ServiceConfig {
            executors: args.executors,
            capacity: args.capacity,
            timing: args.timing.resolve()?,
            policy: args.policy,
            digest_cap: args.digest_cap,
            strict_schema: args.strict_schema,
        },
    };
    let handle = kaas::http::serve(&cfg).await?;
    println!("kaasd listening on {}", handle.addr);
    handle
        .run_until(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
