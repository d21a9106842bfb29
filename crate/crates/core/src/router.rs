//! Placement of requests onto executors.
//!
//! The router keeps a [`CacheDigest`] per executor: its own estimate of
//! which store keys the executor holds, built from completed requests.
//! Digests are never reported by executors, so a stale digest only costs
//! hit rate, never correctness.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::protocol::KaasRequest;

pub type ExecutorId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RouteError {
    #[error("no executors registered")]
    NoExecutors,
    #[error("unknown executor {0}")]
    UnknownExecutor(ExecutorId),
    #[error("invalid routing policy {0:?}")]
    InvalidPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingPolicy {
    Random { seed: u64 },
    RoundRobin,
    /// Prefer the executor already holding the most const-input bytes,
    /// spilling to the least-loaded executor once the preferred one has
    /// more than `q_max` requests queued.
    Affinity { q_max: u32 },
}

impl fmt::Display for RoutingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RoutingPolicy::Random { seed } => write!(f, "random:{seed}"),
            RoutingPolicy::RoundRobin => f.write_str("rr"),
            RoutingPolicy::Affinity { q_max } => write!(f, "affinity:{q_max}"),
        }
    }
}

/// Parses `random:<seed>`, `rr` or `affinity:<q_max>`.
impl FromStr for RoutingPolicy {
    type Err = RouteError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || RouteError::InvalidPolicy(s.into());
        match s.split_once(':') {
            None if s == "rr" || s == "round_robin" => Ok(RoutingPolicy::RoundRobin),
            Some(("random", seed)) => Ok(RoutingPolicy::Random {
                seed: seed.parse().map_err(|_| bad())?,
            }),
            Some(("affinity", q)) => match q.parse() {
                Ok(q_max) if q_max >= 1 => Ok(RoutingPolicy::Affinity { q_max }),
                _ => Err(bad()),
            },
            _ => Err(bad()),
        }
    }
}

/// Router-side estimate of one executor's cache and load.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CacheDigest {
    /// key -> (size, insertion stamp)
    keys: BTreeMap<String, (u64, u64)>,
    stamp: u64,
    used_bytes: u64,
    pub queue_depth: u32,
}

impl CacheDigest {
    pub fn contains(&self, key: &str) -> bool {
        self.keys.contains_key(key)
    }

    pub fn size_of(&self, key: &str) -> Option<u64> {
        self.keys.get(key).map(|&(s, _)| s)
    }

    pub fn used_bytes(&self) -> u64 {
        self.used_bytes
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Keys from oldest to newest estimate.
    pub fn keys_by_age(&self) -> Vec<&str> {
        let mut v: Vec<_> = self.keys.iter().map(|(k, &(_, s))| (s, k.as_str())).collect();
        v.sort_unstable();
        v.into_iter().map(|(_, k)| k).collect()
    }

    /// Records `key` as most recently seen, dropping the oldest estimates
    /// beyond `cap`.
    pub fn record(&mut self, key: &str, size: u64, cap: usize) {
        self.stamp += 1;
        if let Some((old, _)) = self.keys.insert(key.into(), (size, self.stamp)) {
            self.used_bytes -= old;
        }
        self.used_bytes += size;
        while self.keys.len() > cap {
            let oldest = self
                .keys
                .iter()
                .min_by_key(|(_, &(_, s))| s)
                .map(|(k, _)| k.clone())
                .expect("non-empty");
            if let Some((size, _)) = self.keys.remove(&oldest) {
                self.used_bytes -= size;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Router {
    policy: RoutingPolicy,
    digests: Vec<CacheDigest>,
    digest_cap: usize,
    rr_next: usize,
    rng: ChaCha8Rng,
}

impl Router {
    pub const DEFAULT_DIGEST_CAP: usize = 1024;

    pub fn new(policy: RoutingPolicy, executors: usize, digest_cap: usize) -> Self {
        let seed = match policy {
            RoutingPolicy::Random { seed } => seed,
            _ => 0,
        };
        Router {
            policy,
            digests: alloc::vec![CacheDigest::default(); executors],
            digest_cap,
            rr_next: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn policy(&self) -> RoutingPolicy {
        self.policy
    }

    pub fn executors(&self) -> usize {
        self.digests.len()
    }

    pub fn digest(&self, id: ExecutorId) -> Option<&CacheDigest> {
        self.digests.get(id)
    }

    pub fn digests(&self) -> &[CacheDigest] {
        &self.digests
    }

    /// Bytes of `req`'s const inputs that `id`'s digest claims to hold.
    pub fn affinity_score(&self, id: ExecutorId, req: &KaasRequest) -> u64 {
        let d = &self.digests[id];
        req.const_keys()
            .filter(|(k, _)| d.contains(k))
            .map(|(_, size)| size)
            .sum()
    }

    fn least_loaded(&self) -> ExecutorId {
        (0..self.digests.len())
            .min_by_key(|&i| (self.digests[i].queue_depth, i))
            .expect("at least one executor")
    }

    /// Picks an executor for `req` and counts it as queued there.
    pub fn route(&mut self, req: &KaasRequest) -> Result<ExecutorId, RouteError> {
        let n = self.digests.len();
        if n == 0 {
            return Err(RouteError::NoExecutors);
        }
        let chosen = match self.policy {
            RoutingPolicy::Random { .. } => self.rng.random_range(0..n),
            RoutingPolicy::RoundRobin => {
                let id = self.rr_next % n;
                self.rr_next = (id + 1) % n;
                id
            }
            RoutingPolicy::Affinity { q_max } => {
                // Highest score, then shallowest queue, then lowest id.
                let best = (0..n)
                    .max_by_key(|&i| {
                        (
                            self.affinity_score(i, req),
                            core::cmp::Reverse(self.digests[i].queue_depth),
                            core::cmp::Reverse(i),
                        )
                    })
                    .expect("n > 0");
                if self.digests[best].queue_depth > q_max {
                    self.least_loaded()
                } else {
                    best
                }
            }
        };
        self.digests[chosen].queue_depth += 1;
        Ok(chosen)
    }

    /// Folds a finished request into `id`'s digest and dequeues it.
    ///
    /// Only successful requests add keys: the request's const inputs and
    /// its store-backed outputs.
    pub fn update_digest(&mut self, id: ExecutorId, req: &KaasRequest, ok: bool) -> Result<(), RouteError> {
        let cap = self.digest_cap;
        let d = self
            .digests
            .get_mut(id)
            .ok_or(RouteError::UnknownExecutor(id))?;
        d.queue_depth = d.queue_depth.saturating_sub(1);
        if ok {
            for (key, size) in req.const_keys().chain(req.output_keys()) {
                d.record(key, size, cap);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::BufferArg;
    use alloc::format;
    use alloc::vec;

    fn const_req(keys: &[(&str, u64)]) -> KaasRequest {
        let mut r = KaasRequest::new("r");
        for (i, (k, s)) in keys.iter().enumerate() {
            r.buffers.push(BufferArg::constant(format!("b{i}"), *k, *s));
        }
        r
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("rr".parse(), Ok(RoutingPolicy::RoundRobin));
        assert_eq!("random:7".parse(), Ok(RoutingPolicy::Random { seed: 7 }));
        assert_eq!("affinity:8".parse(), Ok(RoutingPolicy::Affinity { q_max: 8 }));
        assert!("affinity:0".parse::<RoutingPolicy>().is_err());
        assert!("lru".parse::<RoutingPolicy>().is_err());
        for p in ["rr", "random:3", "affinity:2"] {
            assert_eq!(p.parse::<RoutingPolicy>().unwrap().to_string(), p);
        }
    }

    #[test]
    fn no_executors() {
        let mut r = Router::new(RoutingPolicy::RoundRobin, 0, 4);
        assert_eq!(r.route(&const_req(&[])), Err(RouteError::NoExecutors));
        assert_eq!(r.update_digest(3, &const_req(&[]), true), Err(RouteError::UnknownExecutor(3)));
    }

    #[test]
    fn single_executor_any_policy() {
        for p in [
            RoutingPolicy::Random { seed: 9 },
            RoutingPolicy::RoundRobin,
            RoutingPolicy::Affinity { q_max: 1 },
        ] {
            let mut r = Router::new(p, 1, 4);
            for _ in 0..10 {
                assert_eq!(r.route(&const_req(&[("w", 64)])).unwrap(), 0);
            }
        }
    }

    #[test]
    fn round_robin_cycles() {
        let mut r = Router::new(RoutingPolicy::RoundRobin, 3, 4);
        let ids: Vec<_> = (0..7).map(|_| r.route(&const_req(&[])).unwrap()).collect();
        assert_eq!(ids, [0, 1, 2, 0, 1, 2, 0]);
    }

    #[test]
    fn affinity_follows_digest() {
        let mut r = Router::new(RoutingPolicy::Affinity { q_max: 8 }, 2, 4);
        let req = const_req(&[("w", 64)]);
        r.digests[0].record("w", 64, 4);
        assert_eq!(r.route(&req).unwrap(), 0);
    }

    #[test]
    fn affinity_tie_breaks_on_queue_depth() {
        let mut r = Router::new(RoutingPolicy::Affinity { q_max: 8 }, 2, 4);
        r.digests[0].queue_depth = 3;
        r.digests[1].queue_depth = 1;
        assert_eq!(r.route(&const_req(&[("w", 64)])).unwrap(), 1);
    }

    #[test]
    fn affinity_scores_bytes_not_keys() {
        let mut r = Router::new(RoutingPolicy::Affinity { q_max: 8 }, 2, 8);
        r.digests[0].record("small1", 8, 8);
        r.digests[0].record("small2", 8, 8);
        r.digests[1].record("big", 1024, 8);
        let req = const_req(&[("small1", 8), ("small2", 8), ("big", 1024)]);
        assert_eq!(r.route(&req).unwrap(), 1);
    }

    #[test]
    fn affinity_spills_past_q_max() {
        let mut r = Router::new(RoutingPolicy::Affinity { q_max: 2 }, 3, 4);
        r.digests[0].record("w", 64, 4);
        r.digests[0].queue_depth = 3;
        r.digests[1].queue_depth = 1;
        r.digests[2].queue_depth = 1;
        assert_eq!(r.route(&const_req(&[("w", 64)])).unwrap(), 1);
    }

    #[test]
    fn digest_cap_drops_oldest() {
        let mut d = CacheDigest::default();
        for k in ["a", "b", "c"] {
            d.record(k, 10, 2);
        }
        assert_eq!(d.keys_by_age(), ["b", "c"]);
        assert_eq!(d.used_bytes(), 20);
        d.record("b", 30, 2);
        assert_eq!(d.keys_by_age(), ["c", "b"]);
        assert_eq!(d.used_bytes(), 40);
    }

    #[test]
    fn update_digest_only_on_success() {
        let mut r = Router::new(RoutingPolicy::Affinity { q_max: 4 }, 2, 8);
        let mut req = const_req(&[("w", 64)]);
        req.buffers.push(BufferArg::output("o", "out", 4));
        req.buffers.push(BufferArg::ephemeral("t", 4));
        let id = r.route(&req).unwrap();
        assert_eq!(r.digest(id).unwrap().queue_depth, 1);
        r.update_digest(id, &req, false).unwrap();
        assert!(r.digest(id).unwrap().is_empty());
        assert_eq!(r.digest(id).unwrap().queue_depth, 0);

        let id = r.route(&req).unwrap();
        r.update_digest(id, &req, true).unwrap();
        let d = r.digest(id).unwrap();
        assert!(d.contains("w") && d.contains("out"));
        assert_eq!(d.len(), 2);
        assert_eq!(d.queue_depth, 0);
    }

    #[test]
    fn random_is_seeded() {
        let run = |seed| {
            let mut r = Router::new(RoutingPolicy::Random { seed }, 4, 4);
            (0..64).map(|_| r.route(&const_req(&[])).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
        assert!(run(1).iter().all(|&i| i < 4));
        assert_eq!(vec![0, 1, 2, 3], {
            let mut s = run(5);
            s.sort();
            s.dedup();
            s
        });
    }
}
