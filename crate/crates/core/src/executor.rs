//! One simulated device and its buffer cache.
//!
//! An [`Executor`] runs requests strictly one at a time. For each request it
//! resolves every buffer in table order (pinning cache entries), launches the
//! invocations in list order, then writes every written store-backed buffer
//! back exactly once. Outputs are only flushed after all invocations
//! succeed, so a failed request leaves the store untouched.
//!
//! Cache rules:
//! - const inputs are cached across requests and served without a store get
//!   while resident;
//! - non-const inputs are re-fetched on every request;
//! - eviction is LRU by a unique logical tick and only ever removes entries
//!   that are unpinned and clean, so it never writes back.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::mem;

use thiserror::Error;

use crate::backend::{ArgRole, Backend, BackendError, BufferView, TimingModel};
use crate::clock::{SimDuration, VirtualClock};
use crate::protocol::{
    validate_request, BufferArg, Direction, ErrorKind, InvocationStats, IoStats, KaasRequest,
    KaasResponse, Status, Violation,
};
use crate::store::{ObjectStore, StoreError, StoreKey};

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutorConfig {
    pub executor_id: String,
    /// Device memory in bytes.
    pub capacity: u64,
    pub timing: TimingModel,
}

impl ExecutorConfig {
    pub fn new(executor_id: impl Into<String>, capacity: u64, timing: TimingModel) -> Self {
        ExecutorConfig {
            executor_id: executor_id.into(),
            capacity,
            timing,
        }
    }

    pub fn validate(&self) -> Result<(), ExecError> {
        if self.capacity == 0 {
            return Err(ExecError::InvalidConfig("capacity must be > 0".into()));
        }
        self.timing
            .validate()
            .map_err(|e| ExecError::InvalidConfig(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExecError {
    #[error("invalid request: {}", join_violations(.0))]
    InvalidRequest(Vec<Violation>),
    #[error("invalid request: {0}")]
    BadBinding(String),
    #[error("object {0} not found")]
    NotFound(String),
    #[error("buffer {name}: declared {declared} bytes, found {actual}")]
    SizeMismatch { name: String, declared: u64, actual: u64 },
    #[error("out of device memory: need {needed} bytes, at most {reclaimable} can be made free")]
    OutOfDeviceMemory { needed: u64, reclaimable: u64 },
    #[error("buffer {0} is pinned by another request")]
    BufferBusy(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("store failure: {0}")]
    Store(String),
    #[error("invalid executor config: {0}")]
    InvalidConfig(String),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

impl ExecError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            ExecError::InvalidRequest(_) | ExecError::BadBinding(_) => ErrorKind::InvalidRequest,
            ExecError::NotFound(_) => ErrorKind::NotFound,
            ExecError::SizeMismatch { .. } => ErrorKind::SizeMismatch,
            ExecError::OutOfDeviceMemory { .. } => ErrorKind::OutOfDeviceMemory,
            ExecError::BufferBusy(_) => ErrorKind::BufferBusy,
            ExecError::Backend(BackendError::UnknownKernel(_)) => ErrorKind::UnknownKernel,
            ExecError::Backend(BackendError::ArityMismatch { .. }) => ErrorKind::ArityMismatch,
            ExecError::Backend(BackendError::Fault { .. }) => ErrorKind::BackendFault,
            ExecError::Backend(_) | ExecError::InvalidConfig(_) => ErrorKind::Internal,
            ExecError::Store(_) => ErrorKind::StoreFailure,
        }
    }
}

impl From<StoreError> for ExecError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(k) => ExecError::NotFound(k),
            other => ExecError::Store(other.to_string()),
        }
    }
}

/// A device-resident buffer in the keyed cache.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheEntry {
    pub size: u64,
    contents: Vec<u8>,
    pub pinned: u32,
    /// Device contents are newer than the store.
    pub dirty: bool,
    pub is_const: bool,
    pub last_use: u64,
}

impl CacheEntry {
    pub fn contents(&self) -> &[u8] {
        &self.contents
    }

    fn evictable(&self) -> bool {
        self.pinned == 0 && !self.dirty
    }
}

/// Keyed device-memory cache plus the byte ledger for ephemeral allocations.
#[derive(Debug, Clone)]
pub struct DeviceCache {
    capacity: u64,
    entries: BTreeMap<StoreKey, CacheEntry>,
    used_bytes: u64,
    ephemeral_bytes: u64,
    tick: u64,
}

impl DeviceCache {
    pub fn new(capacity: u64) -> Self {
        DeviceCache {
            capacity,
            entries: BTreeMap::new(),
            used_bytes: 0,
            ephemeral_bytes: 0,
            tick: 0,
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    /// Sum of keyed entry sizes.
    pub fn used_bytes(&self) -> u64 {
        self.used_bytes
    }

    /// Bytes held by live ephemeral allocations.
    pub fn ephemeral_bytes(&self) -> u64 {
        self.ephemeral_bytes
    }

    pub fn free_bytes(&self) -> u64 {
        self.capacity
            .saturating_sub(self.used_bytes + self.ephemeral_bytes)
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &StoreKey) -> Option<&CacheEntry> {
        self.entries.get(key)
    }

    pub fn contains(&self, key: &StoreKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &StoreKey> {
        self.entries.keys()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&StoreKey, &CacheEntry)> {
        self.entries.iter()
    }

    fn next_tick(&mut self) -> u64 {
        self.tick += 1;
        self.tick
    }

    /// Marks `key` as most recently used.
    pub fn touch(&mut self, key: &StoreKey) -> bool {
        let t = self.next_tick();
        match self.entries.get_mut(key) {
            Some(e) => {
                e.last_use = t;
                true
            }
            None => false,
        }
    }

    /// Evicts least-recently-used clean, unpinned entries until `needed`
    /// bytes are free. Fails without evicting anything when even a full
    /// sweep of the candidates could not make room. Returns the bytes freed.
    pub fn evict_until(&mut self, needed: u64) -> Result<u64, ExecError> {
        if self.free_bytes() >= needed {
            return Ok(0);
        }
        let reclaimable = self.free_bytes()
            + self
                .entries
                .values()
                .filter(|e| e.evictable())
                .map(|e| e.size)
                .sum::<u64>();
        if reclaimable < needed {
            return Err(ExecError::OutOfDeviceMemory {
                needed,
                reclaimable,
            });
        }
        let mut freed = 0;
        while self.free_bytes() < needed {
            let victim = self
                .entries
                .iter()
                .filter(|(_, e)| e.evictable())
                .min_by_key(|(_, e)| e.last_use)
                .map(|(k, _)| k.clone())
                .expect("reclaimable space was checked");
            freed += self.remove(&victim).map_or(0, |e| e.size);
        }
        Ok(freed)
    }

    /// Inserts a new entry, making room first. Stamps it with a fresh tick.
    fn insert(&mut self, key: StoreKey, contents: Vec<u8>, is_const: bool, pinned: u32) -> Result<(), ExecError> {
        debug_assert!(!self.entries.contains_key(&key));
        let size = contents.len() as u64;
        self.evict_until(size)?;
        let last_use = self.next_tick();
        self.used_bytes += size;
        self.entries.insert(
            key,
            CacheEntry {
                size,
                contents,
                pinned,
                dirty: false,
                is_const,
                last_use,
            },
        );
        Ok(())
    }

    /// Inserts a clean, unpinned entry for `key` (replacing any unpinned
    /// entry already there), evicting as needed.
    pub fn admit(&mut self, key: StoreKey, contents: Vec<u8>, is_const: bool) -> Result<(), ExecError> {
        if let Some(e) = self.entries.get(&key) {
            if e.pinned > 0 || e.dirty {
                return Err(ExecError::BufferBusy(key.to_string()));
            }
            self.remove(&key);
        }
        self.insert(key, contents, is_const, 0)
    }

    pub fn pin(&mut self, key: &StoreKey) -> bool {
        match self.entries.get_mut(key) {
            Some(e) => {
                e.pinned += 1;
                true
            }
            None => false,
        }
    }

    pub fn unpin(&mut self, key: &StoreKey) -> bool {
        match self.entries.get_mut(key) {
            Some(e) if e.pinned > 0 => {
                e.pinned -= 1;
                true
            }
            _ => false,
        }
    }

    fn remove(&mut self, key: &StoreKey) -> Option<CacheEntry> {
        let e = self.entries.remove(key)?;
        self.used_bytes -= e.size;
        Some(e)
    }

    fn alloc_ephemeral(&mut self, size: u64) -> Result<Vec<u8>, ExecError> {
        self.evict_until(size)?;
        self.ephemeral_bytes += size;
        Ok(vec![0u8; size as usize])
    }

    fn free_ephemeral(&mut self, size: u64) {
        self.ephemeral_bytes -= size;
    }

    /// Checks the byte ledger and per-entry consistency.
    pub fn check_invariants(&self) -> Result<(), String> {
        let sum: u64 = self.entries.values().map(|e| e.size).sum();
        if sum != self.used_bytes {
            return Err(format!("used_bytes {} but entries sum to {sum}", self.used_bytes));
        }
        if self.used_bytes + self.ephemeral_bytes > self.capacity {
            return Err(format!(
                "used {} + ephemeral {} exceeds capacity {}",
                self.used_bytes, self.ephemeral_bytes, self.capacity
            ));
        }
        for (k, e) in &self.entries {
            if e.contents.len() as u64 != e.size {
                return Err(format!("entry {k}: {} content bytes, size {}", e.contents.len(), e.size));
            }
            if e.dirty && e.pinned == 0 {
                return Err(format!("entry {k} is dirty but unpinned"));
            }
            if e.last_use > self.tick {
                return Err(format!("entry {k} stamped in the future"));
            }
        }
        Ok(())
    }

    /// Keys that are still pinned, expected to be empty between requests.
    pub fn pinned_keys(&self) -> Vec<&StoreKey> {
        self.entries
            .iter()
            .filter(|(_, e)| e.pinned > 0)
            .map(|(k, _)| k)
            .collect()
    }
}

/// Points in request processing at which the step hook fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Resolved(usize),
    Launched(usize),
    Flushed(usize),
    Released,
}

pub type StepHook = Box<dyn FnMut(Step, &DeviceCache) + Send>;

/// Cumulative counters since the executor started.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExecutorTotals {
    pub requests: u64,
    pub errors: u64,
    pub io: IoStats,
    pub compute_time: SimDuration,
}

enum Slot {
    Keyed(StoreKey),
    Ephemeral(Vec<u8>),
}

struct Bound<'r> {
    arg: &'r BufferArg,
    slot: Slot,
    /// Contents are known to equal the store object.
    synced: bool,
    written: bool,
}

pub struct Executor<B> {
    config: ExecutorConfig,
    backend: B,
    cache: DeviceCache,
    clock: VirtualClock,
    totals: ExecutorTotals,
    hook: Option<StepHook>,
}

impl<B> fmt::Debug for Executor<B> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Executor")
            .field("config", &self.config)
            .field("cache", &self.cache)
            .field("clock", &self.clock)
            .field("totals", &self.totals)
            .finish_non_exhaustive()
    }
}

impl<B: Backend> Executor<B> {
    pub fn new(config: ExecutorConfig, backend: B) -> Result<Self, ExecError> {
        config.validate()?;
        Ok(Executor {
            cache: DeviceCache::new(config.capacity),
            config,
            backend,
            clock: VirtualClock::new(),
            totals: ExecutorTotals::default(),
            hook: None,
        })
    }

    pub fn id(&self) -> &str {
        &self.config.executor_id
    }

    pub fn config(&self) -> &ExecutorConfig {
        &self.config
    }

    pub fn cache(&self) -> &DeviceCache {
        &self.cache
    }

    pub fn clock(&self) -> &VirtualClock {
        &self.clock
    }

    pub fn totals(&self) -> &ExecutorTotals {
        &self.totals
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn backend_mut(&mut self) -> &mut B {
        &mut self.backend
    }

    /// Installs a callback run after every resolve, launch, flush and
    /// release, with the cache state at that point.
    pub fn set_step_hook(&mut self, hook: impl FnMut(Step, &DeviceCache) + Send + 'static) {
        self.hook = Some(Box::new(hook));
    }

    fn step(&mut self, step: Step) {
        if let Some(hook) = self.hook.as_mut() {
            hook(step, &self.cache);
        }
    }

    /// Runs one request to completion. Failures are reported in the
    /// response status; this never panics on a validated or unvalidated
    /// request.
    pub fn execute(&mut self, req: &KaasRequest, store: &dyn ObjectStore) -> KaasResponse {
        self.totals.requests += 1;
        if let Err(v) = validate_request(req) {
            self.totals.errors += 1;
            let e = ExecError::InvalidRequest(v);
            return KaasResponse::error(req.request_id.clone(), e.kind(), e.to_string());
        }

        let start = self.clock.now();
        let mut io = IoStats::default();
        let mut per_invocation = Vec::with_capacity(req.invocations.len());
        let mut bound = Vec::with_capacity(req.buffers.len());

        let outcome = self.run(req, store, &mut bound, &mut io, &mut per_invocation);
        self.release(bound);

        self.totals.io += io;
        self.totals.compute_time += per_invocation
            .iter()
            .map(|s: &InvocationStats| s.simulated_compute_time)
            .sum();
        let status = match outcome {
            Ok(()) => Status::Ok,
            Err(e) => {
                self.totals.errors += 1;
                Status::Error {
                    kind: e.kind(),
                    message: e.to_string(),
                }
            }
        };
        KaasResponse {
            request_id: req.request_id.clone(),
            status,
            per_invocation,
            io_stats: io,
            simulated_total_time: self.clock.now() - start,
        }
    }

    fn run<'r>(
        &mut self,
        req: &'r KaasRequest,
        store: &dyn ObjectStore,
        bound: &mut Vec<Bound<'r>>,
        io: &mut IoStats,
        per_invocation: &mut Vec<InvocationStats>,
    ) -> Result<(), ExecError> {
        for (i, arg) in req.buffers.iter().enumerate() {
            let b = self.resolve_buffer(arg, store, io)?;
            bound.push(b);
            self.step(Step::Resolved(i));
        }

        let by_name: BTreeMap<&str, usize> = bound
            .iter()
            .enumerate()
            .map(|(i, b)| (b.arg.name.as_str(), i))
            .collect();

        for (i, inv) in req.invocations.iter().enumerate() {
            let sig = self.backend.signature(&inv.kernel_id)?;
            if sig.buffers.len() != inv.args.len() {
                return Err(BackendError::ArityMismatch {
                    kernel: inv.kernel_id.clone(),
                    detail: format!("expected {} buffers, got {}", sig.buffers.len(), inv.args.len()),
                }
                .into());
            }
            let slots: Vec<(usize, ArgRole)> = inv
                .args
                .iter()
                .zip(&sig.buffers)
                .map(|(name, role)| (by_name[name.as_str()], *role))
                .collect();
            for (pos, &(b, role)) in slots.iter().enumerate() {
                let arg = bound[b].arg;
                if role == ArgRole::Write {
                    if !(arg.is_ephemeral || arg.direction.writes()) {
                        return Err(ExecError::BadBinding(format!(
                            "invocation {i} writes buffer {} which is declared {:?}",
                            arg.name, arg.direction
                        )));
                    }
                    if slots[..pos].iter().any(|&(o, r)| o == b && r == ArgRole::Write) {
                        return Err(ExecError::BadBinding(format!(
                            "invocation {i} binds buffer {} to several output slots",
                            arg.name
                        )));
                    }
                }
            }

            let compute = self.launch_bound(inv, &slots, bound)?;
            for &(b, role) in &slots {
                if role == ArgRole::Write {
                    let bb = &mut bound[b];
                    bb.written = true;
                    bb.synced = false;
                    if let Slot::Keyed(key) = &bb.slot {
                        if let Some(e) = self.cache.entries.get_mut(key) {
                            e.dirty = true;
                        }
                    }
                }
            }
            let launch = self.backend.timing().launch_time();
            self.clock.advance(launch + compute);
            per_invocation.push(InvocationStats {
                kernel_id: inv.kernel_id.clone(),
                simulated_compute_time: compute,
                launch_overhead: launch,
            });
            self.step(Step::Launched(i));
        }

        for (i, b) in bound.iter_mut().enumerate() {
            let Slot::Keyed(key) = &b.slot else { continue };
            if !b.written {
                continue;
            }
            let entry = self.cache.entries.get_mut(key).expect("pinned entry");
            store.put(key, &entry.contents)?;
            entry.dirty = false;
            let size = entry.size;
            b.synced = true;
            io.store_puts += 1;
            io.bytes_flushed += size;
            let t = self.backend.timing().estimate_flush_time(size);
            self.clock.advance(t);
            self.step(Step::Flushed(i));
        }
        Ok(())
    }

    /// Moves the involved buffers out of the cache, runs the kernel on views
    /// of them and moves them back, whether or not the launch succeeded.
    fn launch_bound(
        &mut self,
        inv: &crate::protocol::KernelInvocation,
        slots: &[(usize, ArgRole)],
        bound: &mut [Bound<'_>],
    ) -> Result<SimDuration, ExecError> {
        let mut distinct: Vec<usize> = slots.iter().map(|&(b, _)| b).collect();
        distinct.sort_unstable();
        distinct.dedup();

        let mut taken: Vec<Vec<u8>> = distinct
            .iter()
            .map(|&b| match &mut bound[b].slot {
                Slot::Ephemeral(v) => mem::take(v),
                Slot::Keyed(k) => mem::take(&mut self.cache.entries.get_mut(k).expect("pinned entry").contents),
            })
            .collect();
        let idx = |b: usize| distinct.binary_search(&b).expect("collected above");

        // Outputs that are also read get a private copy so reads observe
        // pre-launch contents.
        let mut outs: Vec<Vec<u8>> = Vec::new();
        for &(b, role) in slots {
            if role == ArgRole::Write {
                let read_too = slots.iter().any(|&(o, r)| o == b && r == ArgRole::Read);
                let j = idx(b);
                outs.push(if read_too { taken[j].clone() } else { mem::take(&mut taken[j]) });
            }
        }

        let result = {
            let mut out_iter = outs.iter_mut();
            let mut views: Vec<BufferView<'_>> = slots
                .iter()
                .map(|&(b, role)| match role {
                    ArgRole::Read => BufferView::Read(&taken[idx(b)]),
                    ArgRole::Write => BufferView::Write(out_iter.next().expect("one per write slot")),
                })
                .collect();
            self.backend
                .launch(&inv.kernel_id, &inv.dims, &inv.literals, &mut views)
        };

        let mut out_iter = outs.into_iter();
        for &(b, role) in slots {
            if role == ArgRole::Write {
                taken[idx(b)] = out_iter.next().expect("one per write slot");
            }
        }
        for (&b, contents) in distinct.iter().zip(taken) {
            match &mut bound[b].slot {
                Slot::Ephemeral(v) => *v = contents,
                Slot::Keyed(k) => self.cache.entries.get_mut(k).expect("pinned entry").contents = contents,
            }
        }
        Ok(result?)
    }

    /// Produces a pinned device buffer for `arg`.
    fn resolve_buffer<'r>(&mut self, arg: &'r BufferArg, store: &dyn ObjectStore, io: &mut IoStats) -> Result<Bound<'r>, ExecError> {
        let bound = |slot, synced| Bound {
            arg,
            slot,
            synced,
            written: false,
        };
        if arg.is_ephemeral {
            let contents = self.cache.alloc_ephemeral(arg.size)?;
            return Ok(bound(Slot::Ephemeral(contents), false));
        }
        let key = StoreKey::new(arg.key.clone().unwrap_or_default())?;

        if arg.is_const {
            if let Some(e) = self.cache.entries.get(&key) {
                if e.size == arg.size && !e.dirty {
                    let t = self.cache.next_tick();
                    let e = self.cache.entries.get_mut(&key).expect("present");
                    e.pinned += 1;
                    e.last_use = t;
                    e.is_const = true;
                    io.cache_hits += 1;
                    return Ok(bound(Slot::Keyed(key), true));
                }
                if e.pinned > 0 {
                    return Err(ExecError::SizeMismatch {
                        name: arg.name.clone(),
                        declared: arg.size,
                        actual: e.size,
                    });
                }
                self.cache.remove(&key);
            }
            self.fetch_into_cache(arg, &key, store, io)?;
            return Ok(bound(Slot::Keyed(key), true));
        }

        let resident = match self.cache.entries.get(&key) {
            Some(e) if e.pinned > 0 => return Err(ExecError::BufferBusy(key.to_string())),
            Some(_) => {
                self.cache.remove(&key);
                true
            }
            None => false,
        };
        if arg.direction == Direction::Output {
            if resident {
                io.cache_hits += 1;
            } else {
                io.cache_misses += 1;
            }
            self.cache.insert(key.clone(), vec![0u8; arg.size as usize], false, 1)?;
            Ok(bound(Slot::Keyed(key), false))
        } else {
            self.fetch_into_cache(arg, &key, store, io)?;
            Ok(bound(Slot::Keyed(key), true))
        }
    }

    fn fetch_into_cache(&mut self, arg: &BufferArg, key: &StoreKey, store: &dyn ObjectStore, io: &mut IoStats) -> Result<(), ExecError> {
        io.cache_misses += 1;
        self.cache.evict_until(arg.size)?;
        let payload = store.get(key)?;
        io.store_gets += 1;
        if payload.len() as u64 != arg.size {
            return Err(ExecError::SizeMismatch {
                name: arg.name.clone(),
                declared: arg.size,
                actual: payload.len() as u64,
            });
        }
        io.bytes_fetched += arg.size;
        let t = self.backend.timing().estimate_fetch_time(arg.size);
        self.clock.advance(t);
        self.cache.insert(key.clone(), payload, arg.is_const, 1)
    }

    /// Unpins everything the request holds, frees its ephemerals and drops
    /// entries whose contents no longer match the store.
    fn release(&mut self, bound: Vec<Bound<'_>>) {
        for b in bound {
            match b.slot {
                Slot::Ephemeral(_) => self.cache.free_ephemeral(b.arg.size),
                Slot::Keyed(key) => {
                    let Some(e) = self.cache.entries.get_mut(&key) else { continue };
                    e.pinned -= 1;
                    if !b.synced && e.pinned == 0 {
                        self.cache.remove(&key);
                    }
                }
            }
        }
        self.step(Step::Released);
    }
}
