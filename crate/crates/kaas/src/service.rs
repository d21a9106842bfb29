//! Router plus executor fleet.
//!
//! [`Fleet`] is the single-threaded form used by the benchmark's event
//! simulation. [`KaasService`] runs each executor on its own thread behind a
//! FIFO queue; the router lock is only held while placing a request or
//! folding its result into the digest, never while it executes.

use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use kaas_core::backend::{KernelRegistry, SimBackend};
use kaas_core::clock::SimDuration;
use kaas_core::executor::{Executor, ExecutorConfig};
use kaas_core::protocol::{validate_request, ErrorKind, KaasRequest, KaasResponse};
use kaas_core::router::{ExecutorId, Router};
use kaas_core::store::ObjectStore;
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use crate::config::{ConfigError, ServiceConfig};
use crate::store::SharedStore;

/// Point-in-time counters for one executor, as served by `/v1/stats`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutorStats {
    pub executor_id: String,
    pub capacity: u64,
    pub used_bytes: u64,
    pub entries: usize,
    pub requests: u64,
    pub errors: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub store_gets: u64,
    pub store_puts: u64,
    pub compute_time: SimDuration,
    pub virtual_time: SimDuration,
}

impl ExecutorStats {
    fn of(ex: &Executor<SimBackend>) -> Self {
        let t = ex.totals();
        ExecutorStats {
            executor_id: ex.id().to_string(),
            capacity: ex.cache().capacity(),
            used_bytes: ex.cache().used_bytes(),
            entries: ex.cache().len(),
            requests: t.requests,
            errors: t.errors,
            cache_hits: t.io.cache_hits,
            cache_misses: t.io.cache_misses,
            store_gets: t.io.store_gets,
            store_puts: t.io.store_puts,
            compute_time: t.compute_time,
            virtual_time: ex.clock().now(),
        }
    }
}

fn build_executors(cfg: &ServiceConfig, registry: &Arc<KernelRegistry>) -> Result<Vec<Executor<SimBackend>>, ConfigError> {
    cfg.validate()?;
    (0..cfg.executors)
        .map(|i| {
            let backend = SimBackend::new(registry.clone(), cfg.timing);
            Executor::new(ExecutorConfig::new(format!("exec-{i}"), cfg.capacity, cfg.timing), backend)
                .map_err(|e| ConfigError::Invalid(e.to_string()))
        })
        .collect()
}

fn rejection(req: &KaasRequest) -> Option<KaasResponse> {
    validate_request(req).err().map(|v| {
        let msg = v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ");
        KaasResponse::error(req.request_id.clone(), ErrorKind::InvalidRequest, format!("invalid request: {msg}"))
    })
}

/// Synchronous router + executors.
#[derive(Debug)]
pub struct Fleet {
    router: Router,
    executors: Vec<Executor<SimBackend>>,
}

impl Fleet {
    pub fn new(cfg: &ServiceConfig, registry: Arc<KernelRegistry>) -> Result<Self, ConfigError> {
        Ok(Fleet {
            router: Router::new(cfg.policy, cfg.executors, cfg.digest_cap),
            executors: build_executors(cfg, &registry)?,
        })
    }

    pub fn router(&self) -> &Router {
        &self.router
    }

    pub fn executors(&self) -> &[Executor<SimBackend>] {
        &self.executors
    }

    pub fn stats(&self) -> Vec<ExecutorStats> {
        self.executors.iter().map(ExecutorStats::of).collect()
    }

    /// Validates and places `req`; invalid requests are answered directly
    /// and never reach an executor.
    #[allow(clippy::result_large_err)]
    pub fn route(&mut self, req: &KaasRequest) -> Result<ExecutorId, KaasResponse> {
        if let Some(resp) = rejection(req) {
            return Err(resp);
        }
        self.router
            .route(req)
            .map_err(|e| KaasResponse::error(req.request_id.clone(), ErrorKind::NoExecutors, e.to_string()))
    }

    pub fn execute_on(&mut self, id: ExecutorId, req: &KaasRequest, store: &dyn ObjectStore) -> KaasResponse {
        self.executors[id].execute(req, store)
    }

    pub fn complete(&mut self, id: ExecutorId, req: &KaasRequest, resp: &KaasResponse) {
        self.router
            .update_digest(id, req, resp.status.is_ok())
            .expect("id came from route");
    }

    /// Route, execute and complete in one step.
    pub fn invoke(&mut self, req: &KaasRequest, store: &dyn ObjectStore) -> (Option<ExecutorId>, KaasResponse) {
        match self.route(req) {
            Err(resp) => (None, resp),
            Ok(id) => {
                let resp = self.execute_on(id, req, store);
                self.complete(id, req, &resp);
                (Some(id), resp)
            }
        }
    }
}

struct Job {
    req: KaasRequest,
    reply: oneshot::Sender<KaasResponse>,
}

struct Worker {
    queue: Option<mpsc::Sender<Job>>,
    stats: Arc<Mutex<ExecutorStats>>,
    thread: Option<JoinHandle<()>>,
}

/// Thread-per-executor service used by the HTTP server.
pub struct KaasService {
    store: SharedStore,
    router: Arc<Mutex<Router>>,
    workers: Vec<Worker>,
    strict_schema: bool,
}

impl std::fmt::Debug for KaasService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KaasService")
            .field("executors", &self.workers.len())
            .field("strict_schema", &self.strict_schema)
            .finish_non_exhaustive()
    }
}

impl KaasService {
    pub fn start(cfg: &ServiceConfig, store: SharedStore) -> Result<Self, ConfigError> {
        Self::with_registry(cfg, store, Arc::new(KernelRegistry::with_builtins()))
    }

    pub fn with_registry(cfg: &ServiceConfig, store: SharedStore, registry: Arc<KernelRegistry>) -> Result<Self, ConfigError> {
        let router = Arc::new(Mutex::new(Router::new(cfg.policy, cfg.executors, cfg.digest_cap)));
        let workers = build_executors(cfg, &registry)?
            .into_iter()
            .enumerate()
            .map(|(id, ex)| spawn_worker(id, ex, store.clone(), router.clone()))
            .collect();
        Ok(KaasService {
            store,
            router,
            workers,
            strict_schema: cfg.strict_schema,
        })
    }

    pub fn store(&self) -> &SharedStore {
        &self.store
    }

    pub fn strict_schema(&self) -> bool {
        self.strict_schema
    }

    /// Queues `req` on the executor the router picks. The returned channel
    /// yields the response once the executor has finished it.
    pub fn submit(&self, req: KaasRequest) -> oneshot::Receiver<KaasResponse> {
        let (tx, rx) = oneshot::channel();
        if let Some(resp) = rejection(&req) {
            let _ = tx.send(resp);
            return rx;
        }
        let placed = self.router.lock().expect("router lock").route(&req);
        match placed {
            Err(e) => {
                let _ = tx.send(KaasResponse::error(req.request_id.clone(), ErrorKind::NoExecutors, e.to_string()));
            }
            Ok(id) => {
                let queue = self.workers[id].queue.as_ref().expect("running");
                if let Err(mpsc::SendError(job)) = queue.send(Job { req, reply: tx }) {
                    let _ = job.reply.send(KaasResponse::error(
                        job.req.request_id,
                        ErrorKind::Internal,
                        "executor stopped",
                    ));
                }
            }
        }
        rx
    }

    pub async fn invoke(&self, req: KaasRequest) -> KaasResponse {
        let id = req.request_id.clone();
        self.submit(req)
            .await
            .unwrap_or_else(|_| KaasResponse::error(id, ErrorKind::Internal, "executor dropped the request"))
    }

    /// Blocking variant of [`invoke`](Self::invoke); must not be called from
    /// inside an async runtime.
    pub fn invoke_blocking(&self, req: KaasRequest) -> KaasResponse {
        let id = req.request_id.clone();
        self.submit(req)
            .blocking_recv()
            .unwrap_or_else(|_| KaasResponse::error(id, ErrorKind::Internal, "executor dropped the request"))
    }

    pub fn stats(&self) -> Vec<ExecutorStats> {
        self.workers
            .iter()
            .map(|w| w.stats.lock().expect("stats lock").clone())
            .collect()
    }

    pub fn queue_depths(&self) -> Vec<u32> {
        let router = self.router.lock().expect("router lock");
        router.digests().iter().map(|d| d.queue_depth).collect()
    }
}

impl Drop for KaasService {
    fn drop(&mut self) {
        for w in &mut self.workers {
            w.queue.take();
        }
        for w in &mut self.workers {
            if let Some(t) = w.thread.take() {
                let _ = t.join();
            }
        }
    }
}

fn spawn_worker(id: ExecutorId, mut ex: Executor<SimBackend>, store: SharedStore, router: Arc<Mutex<Router>>) -> Worker {
    let (tx, rx) = mpsc::channel::<Job>();
    let stats = Arc::new(Mutex::new(ExecutorStats::of(&ex)));
    let published = stats.clone();
    let thread = std::thread::Builder::new()
        .name(format!("kaas-exec-{id}"))
        .spawn(move || {
            for job in rx {
                let resp = ex.execute(&job.req, &*store);
                router
                    .lock()
                    .expect("router lock")
                    .update_digest(id, &job.req, resp.status.is_ok())
                    .expect("id came from route");
                *published.lock().expect("stats lock") = ExecutorStats::of(&ex);
                let _ = job.reply.send(resp);
            }
        })
        .expect("spawn executor thread");
    Worker {
        queue: Some(tx),
        stats,
        thread: Some(thread),
    }
}
