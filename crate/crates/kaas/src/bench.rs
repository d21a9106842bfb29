//! Benchmark harness.
//!
//! The default mode is a discrete-event simulation in virtual time:
//! requests arrive with seeded exponential gaps, are routed on arrival,
//! queue FIFO on their executor and report back to the router when they
//! finish. The same seed gives a byte-identical report. The threaded and
//! HTTP modes drive the real service instead and are not reproducible.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use kaas_core::backend::{KernelRegistry, TimingModel};
use kaas_core::clock::SimDuration;
use kaas_core::protocol::{IoStats, KaasRequest, KaasResponse};
use kaas_core::router::RoutingPolicy;
use kaas_core::store::ObjectStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::config::ServiceConfig;
use crate::service::{Fleet, KaasService};
use crate::store::{MemStore, SharedStore};
use crate::workload::{self, WorkloadSpec};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    Simulated,
    Threaded,
    Http,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub workload: WorkloadSpec,
    pub policies: Vec<RoutingPolicy>,
    pub executors: usize,
    pub capacity: u64,
    pub timing: TimingModel,
    pub digest_cap: usize,
    /// Mean gap between simulated arrivals, microseconds.
    pub interarrival_us: f64,
    pub warm_repeat: bool,
    /// Concurrent clients; above 1 the threaded service is used.
    pub clients: usize,
}

impl BenchConfig {
    pub fn new(workload: WorkloadSpec, policies: Vec<RoutingPolicy>) -> Self {
        BenchConfig {
            workload,
            policies,
            executors: 4,
            capacity: 30 * workload::BLOB_BYTES + 1024,
            timing: TimingModel::default(),
            digest_cap: kaas_core::router::Router::DEFAULT_DIGEST_CAP,
            interarrival_us: 50.0,
            warm_repeat: false,
            clients: 1,
        }
    }

    fn service(&self, policy: RoutingPolicy) -> ServiceConfig {
        ServiceConfig {
            executors: self.executors,
            capacity: self.capacity,
            timing: self.timing,
            policy,
            digest_cap: self.digest_cap,
            strict_schema: false,
        }
    }

    fn validate(&self) -> anyhow::Result<()> {
        self.workload.validate()?;
        anyhow::ensure!(!self.policies.is_empty(), "no policies given");
        anyhow::ensure!(
            self.interarrival_us.is_finite() && self.interarrival_us > 0.0,
            "interarrival must be > 0"
        );
        anyhow::ensure!(self.clients >= 1, "clients must be >= 1");
        self.service(self.policies[0]).validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PassReport {
    pub requests: u64,
    pub errors: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub hit_rate: f64,
    pub store_gets: u64,
    pub store_puts: u64,
    pub bytes_fetched: u64,
    pub bytes_flushed: u64,
    pub mean_latency_us: f64,
    pub p95_latency_us: f64,
    pub makespan_us: f64,
    pub gpu_busy_fraction: f64,
    pub per_executor_requests: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub policy: String,
    #[serde(flatten)]
    pub cold: PassReport,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub warm: Option<PassReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub report_version: u32,
    pub mode: BenchMode,
    pub workload: WorkloadSpec,
    pub executors: usize,
    pub capacity: u64,
    pub timing: TimingModel,
    pub interarrival_us: f64,
    /// Concurrent submitters; reports are only reproducible with one.
    pub clients: usize,
    pub policies: Vec<PolicyReport>,
}

impl BenchReport {
    pub fn policy(&self, name: &str) -> Option<&PolicyReport> {
        self.policies.iter().find(|p| p.policy == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-width summary table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "workload={} requests={} executors={} mode={:?}",
            self.workload.kind, self.workload.request_count, self.executors, self.mode
        );
        let _ = writeln!(
            out,
            "{:<14} {:>8} {:>8} {:>8} {:>8} {:>12} {:>12} {:>8} {:>6}",
            "policy", "hit_rate", "gets", "puts", "errors", "mean_us", "p95_us", "busy", "pass"
        );
        for p in &self.policies {
            let rows = std::iter::once(("cold", &p.cold)).chain(p.warm.as_ref().map(|w| ("warm", w)));
            for (pass, r) in rows {
                let _ = writeln!(
                    out,
                    "{:<14} {:>8.4} {:>8} {:>8} {:>8} {:>12.2} {:>12.2} {:>8.4} {:>6}",
                    p.policy,
                    r.hit_rate,
                    r.store_gets,
                    r.store_puts,
                    r.errors,
                    r.mean_latency_us,
                    r.p95_latency_us,
                    r.gpu_busy_fraction,
                    pass
                );
            }
        }
        out
    }
}

/// Accumulates per-response numbers for one pass.
#[derive(Default)]
struct Tally {
    io: IoStats,
    errors: u64,
    latencies: Vec<SimDuration>,
    compute: SimDuration,
    per_executor: Vec<u64>,
}

impl Tally {
    fn new(executors: usize) -> Self {
        Tally {
            per_executor: vec![0; executors],
            ..Default::default()
        }
    }

    fn record(&mut self, exec: Option<usize>, resp: &KaasResponse, latency: SimDuration) {
        self.io += resp.io_stats;
        if !resp.status.is_ok() {
            self.errors += 1;
        }
        if let Some(e) = exec {
            self.per_executor[e] += 1;
        }
        self.compute += resp.per_invocation.iter().map(|s| s.simulated_compute_time).sum();
        self.latencies.push(latency);
    }

    fn finish(mut self, executors: usize, makespan: SimDuration) -> PassReport {
        let n = self.latencies.len() as u64;
        self.latencies.sort_unstable();
        let us = |d: SimDuration| d.as_picos() as f64 / 1e6;
        let mean = if n == 0 {
            0.0
        } else {
            us(self.latencies.iter().copied().sum()) / n as f64
        };
        let p95 = if n == 0 {
            0.0
        } else {
            let rank = (n * 95).div_ceil(100).max(1) as usize;
            us(self.latencies[rank - 1])
        };
        let lookups = self.io.cache_hits + self.io.cache_misses;
        let busy_denominator = executors as f64 * makespan.as_picos() as f64;
        PassReport {
            requests: n,
            errors: self.errors,
            cache_hits: self.io.cache_hits,
            cache_misses: self.io.cache_misses,
            hit_rate: if lookups == 0 {
                0.0
            } else {
                self.io.cache_hits as f64 / lookups as f64
            },
            store_gets: self.io.store_gets,
            store_puts: self.io.store_puts,
            bytes_fetched: self.io.bytes_fetched,
            bytes_flushed: self.io.bytes_flushed,
            mean_latency_us: mean,
            p95_latency_us: p95,
            makespan_us: us(makespan),
            gpu_busy_fraction: if busy_denominator > 0.0 {
                self.compute.as_picos() as f64 / busy_denominator
            } else {
                0.0
            },
            per_executor_requests: self.per_executor,
            wall_time_ms: None,
        }
    }
}

/// Seeded exponential arrival times starting at `start`.
fn arrivals(count: usize, mean_us: f64, seed: u64, start: SimDuration) -> Vec<SimDuration> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gap = Exp::new(1.0 / mean_us).expect("mean > 0");
    let mut t = start;
    (0..count)
        .map(|_| {
            t += SimDuration::from_secs_f64(gap.sample(&mut rng) * 1e-6);
            t
        })
        .collect()
}

/// One pass of the event simulation. Returns the pass report and the time
/// the last request finished.
fn simulate_pass(
    fleet: &mut Fleet,
    store: &dyn ObjectStore,
    reqs: &[KaasRequest],
    arrive: &[SimDuration],
    start: SimDuration,
) -> (PassReport, SimDuration) {
    let n_exec = fleet.executors().len();
    let mut tally = Tally::new(n_exec);
    let mut free_at = vec![start; n_exec];
    // (finish time, arrival index, executor)
    let mut pending: BinaryHeap<Reverse<(SimDuration, usize, usize)>> = BinaryHeap::new();
    let mut end = start;

    let mut responses: Vec<Option<KaasResponse>> = vec![None; reqs.len()];
    for (i, req) in reqs.iter().enumerate() {
        let now = arrive[i];
        while let Some(&Reverse((t, j, e))) = pending.peek() {
            if t > now {
                break;
            }
            pending.pop();
            let resp = responses[j].take().expect("pending response");
            fleet.complete(e, &reqs[j], &resp);
        }
        match fleet.route(req) {
            Err(resp) => tally.record(None, &resp, SimDuration::ZERO),
            Ok(e) => {
                let resp = fleet.execute_on(e, req, store);
                let begin = if free_at[e] > now { free_at[e] } else { now };
                let finish = begin + resp.simulated_total_time;
                free_at[e] = finish;
                if finish > end {
                    end = finish;
                }
                tally.record(Some(e), &resp, finish - now);
                responses[i] = Some(resp);
                pending.push(Reverse((finish, i, e)));
            }
        }
    }
    while let Some(Reverse((_, j, e))) = pending.pop() {
        let resp = responses[j].take().expect("pending response");
        fleet.complete(e, &reqs[j], &resp);
    }
    (tally.finish(n_exec, end - start), end)
}

fn simulate_policy(cfg: &BenchConfig, policy: RoutingPolicy, reqs: &[KaasRequest]) -> anyhow::Result<PolicyReport> {
    let store = MemStore::new();
    workload::gen_data(&cfg.workload, &store)?;
    let mut fleet = Fleet::new(&cfg.service(policy), Arc::new(KernelRegistry::with_builtins()))?;
    let seed = cfg.workload.seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let first = arrivals(reqs.len(), cfg.interarrival_us, seed, SimDuration::ZERO);
    let (cold, end) = simulate_pass(&mut fleet, &store, reqs, &first, SimDuration::ZERO);
    let warm = if cfg.warm_repeat {
        let second = arrivals(reqs.len(), cfg.interarrival_us, seed.wrapping_add(1), end);
        Some(simulate_pass(&mut fleet, &store, reqs, &second, end).0)
    } else {
        None
    };
    Ok(PolicyReport {
        policy: policy.to_string(),
        cold,
        warm,
    })
}

fn threaded_pass(service: &Arc<KaasService>, reqs: &[KaasRequest], clients: usize, executors: usize) -> PassReport {
    let started = Instant::now();
    let shares: Vec<Vec<KaasRequest>> = (0..clients)
        .map(|c| reqs.iter().skip(c).step_by(clients).cloned().collect())
        .collect();
    let results: Vec<KaasResponse> = std::thread::scope(|s| {
        let handles: Vec<_> = shares
            .into_iter()
            .map(|share| {
                let service = service.clone();
                s.spawn(move || share.into_iter().map(|r| service.invoke_blocking(r)).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("client thread")).collect()
    });
    let wall = started.elapsed();
    let mut tally = Tally::new(executors);
    for resp in &results {
        tally.record(None, resp, resp.simulated_total_time);
    }
    let stats = service.stats();
    let makespan = stats.iter().map(|s| s.virtual_time).max().unwrap_or(SimDuration::ZERO);
    let mut report = tally.finish(executors, makespan);
    report.per_executor_requests = stats.iter().map(|s| s.requests).collect();
    report.wall_time_ms = Some(wall.as_secs_f64() * 1e3);
    report
}

fn threaded_policy(cfg: &BenchConfig, policy: RoutingPolicy, reqs: &[KaasRequest]) -> anyhow::Result<PolicyReport> {
    let store: SharedStore = Arc::new(MemStore::new());
    workload::gen_data(&cfg.workload, &*store)?;
    let service = Arc::new(KaasService::start(&cfg.service(policy), store)?);
    let cold = threaded_pass(&service, reqs, cfg.clients, cfg.executors);
    let warm = cfg.warm_repeat.then(|| {
        let mut w = threaded_pass(&service, reqs, cfg.clients, cfg.executors);
        // Service counters are cumulative; report the second pass alone.
        subtract(&mut w.per_executor_requests, &cold.per_executor_requests);
        w
    });
    Ok(PolicyReport {
        policy: policy.to_string(),
        cold,
        warm,
    })
}

/// Runs every configured policy on identical seeds.
pub fn run(cfg: &BenchConfig) -> anyhow::Result<BenchReport> {
    cfg.validate()?;
    let reqs = workload::requests(&cfg.workload)?;
    let mode = if cfg.clients > 1 {
        BenchMode::Threaded
    } else {
        BenchMode::Simulated
    };
    let policies = cfg
        .policies
        .iter()
        .map(|&p| match mode {
            BenchMode::Threaded => threaded_policy(cfg, p, &reqs),
            _ => simulate_policy(cfg, p, &reqs),
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(BenchReport {
        report_version: REPORT_VERSION,
        mode,
        workload: cfg.workload.clone(),
        executors: cfg.executors,
        capacity: cfg.capacity,
        timing: cfg.timing,
        interarrival_us: cfg.interarrival_us,
        clients: cfg.clients,
        policies,
    })
}

/// Cumulative per-executor request counts from `/v1/stats`.
async fn executor_requests(client: &reqwest::Client, base: &str) -> anyhow::Result<Vec<u64>> {
    let body = client.get(format!("{base}/v1/stats")).send().await?.bytes().await?;
    let stats: serde_json::Value = serde_json::from_slice(&body)?;
    let list = stats["executors"].as_array().ok_or_else(|| anyhow::anyhow!("malformed /v1/stats"))?;
    Ok(list.iter().map(|e| e["requests"].as_u64().unwrap_or(0)).collect())
}

fn subtract(counts: &mut [u64], earlier: &[u64]) {
    counts.iter_mut().zip(earlier).for_each(|(a, b)| *a = a.saturating_sub(*b));
}

/// Uploads the workload's inputs to a running server and drives it with
/// `cfg.clients` concurrent connections. The server's own routing policy
/// applies; the report carries a single entry named `server`.
pub async fn run_http(cfg: &BenchConfig, base_url: &str) -> anyhow::Result<BenchReport> {
    cfg.validate()?;
    let base = base_url.trim_end_matches('/').to_string();
    let client = reqwest::Client::new();
    for (key, payload) in workload::generate_inputs(&cfg.workload)? {
        let resp = client.put(format!("{base}/v1/objects/{key}")).body(payload).send().await?;
        anyhow::ensure!(resp.status().is_success(), "upload of {key} failed: {}", resp.status());
    }
    let reqs = workload::requests(&cfg.workload)?;

    let pass = |reqs: Vec<KaasRequest>| {
        let client = client.clone();
        let base = base.clone();
        async move {
            let started = Instant::now();
            let clients = cfg.clients;
            let mut tasks = tokio::task::JoinSet::new();
            for c in 0..clients {
                let share: Vec<KaasRequest> = reqs.iter().skip(c).step_by(clients).cloned().collect();
                let client = client.clone();
                let url = format!("{base}/v1/invoke");
                tasks.spawn(async move {
                    let mut out = Vec::with_capacity(share.len());
                    for req in share {
                        let body = crate::codec::encode_request(&req);
                        let bytes = client.post(&url).body(body).send().await?.bytes().await?;
                        out.push(crate::codec::decode_response(&bytes, crate::codec::Strictness::Lenient)?);
                    }
                    anyhow::Ok(out)
                });
            }
            let mut tally = Tally::new(cfg.executors);
            while let Some(joined) = tasks.join_next().await {
                for resp in joined?? {
                    tally.record(None, &resp, resp.simulated_total_time);
                }
            }
            let wall = started.elapsed();
            let mut r = tally.finish(cfg.executors, SimDuration::ZERO);
            r.per_executor_requests = executor_requests(&client, &base).await?;
            r.wall_time_ms = Some(wall.as_secs_f64() * 1e3);
            anyhow::Ok(r)
        }
    };
    let before = executor_requests(&client, &base).await?;
    let mut cold = pass(reqs.clone()).await?;
    subtract(&mut cold.per_executor_requests, &before);
    let warm = if cfg.warm_repeat {
        let mut w = pass(reqs).await?;
        subtract(&mut w.per_executor_requests, &before);
        subtract(&mut w.per_executor_requests, &cold.per_executor_requests);
        Some(w)
    } else {
        None
    };
    Ok(BenchReport {
        report_version: REPORT_VERSION,
        mode: BenchMode::Http,
        workload: cfg.workload.clone(),
        executors: cfg.executors,
        capacity: cfg.capacity,
        timing: cfg.timing,
        interarrival_us: cfg.interarrival_us,
        clients: cfg.clients,
        policies: vec![PolicyReport {
            policy: "server".into(),
            cold,
            warm,
        }],
    })
}
