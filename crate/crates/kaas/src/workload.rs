//! Benchmark workloads and their seeded input data.

use std::fmt;
use std::str::FromStr;

use kaas_core::backend::encode_f32s;
use kaas_core::protocol::{matmul_chain, BufferArg, KaasRequest, KernelInvocation, LaunchDims, ScalarLiteral};
use kaas_core::store::{ObjectStore, StoreError, StoreKey};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Size of each zipf_const blob.
pub const BLOB_BYTES: u64 = 64 * 1024;
const BLOB_ELEMS: u64 = BLOB_BYTES / 4;
/// Fraction of matmul chains in the `mixed` workload.
const MIXED_CHAIN_SHARE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    /// The same two-step matmul chain over const `A` and `B`, writing `D`.
    MatmulChain,
    /// Each request sums one 64 KiB const blob picked by a Zipf law.
    ZipfConst,
    /// Zipf requests with a quarter of matmul chains mixed in.
    Mixed,
}

impl FromStr for WorkloadKind {
    type Err = WorkloadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "matmul_chain" => Ok(WorkloadKind::MatmulChain),
            "zipf_const" => Ok(WorkloadKind::ZipfConst),
            "mixed" => Ok(WorkloadKind::Mixed),
            other => Err(WorkloadError::Invalid(format!("unknown workload {other:?}"))),
        }
    }
}

impl fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WorkloadKind::MatmulChain => "matmul_chain",
            WorkloadKind::ZipfConst => "zipf_const",
            WorkloadKind::Mixed => "mixed",
        })
    }
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload: {0}")]
    Invalid(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub request_count: u64,
    pub matrix_dim: u32,
    pub zipf_s: f64,
    pub key_universe: u32,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn new(kind: WorkloadKind, request_count: u64, seed: u64) -> Self {
        WorkloadSpec {
            kind,
            request_count,
            matrix_dim: 16,
            zipf_s: 1.0,
            key_universe: 100,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: &str| Err(WorkloadError::Invalid(m.into()));
        if self.request_count < 1 {
            return bad("request_count must be >= 1");
        }
        if self.matrix_dim < 1 || self.matrix_dim > 4096 {
            return bad("matrix_dim must be in 1..=4096");
        }
        if self.key_universe < 1 {
            return bad("key_universe must be >= 1");
        }
        if !(self.zipf_s.is_finite() && self.zipf_s > 0.0) {
            return bad("zipf_s must be > 0");
        }
        Ok(())
    }

    fn uses_chain(&self) -> bool {
        matches!(self.kind, WorkloadKind::MatmulChain | WorkloadKind::Mixed)
    }

    fn uses_blobs(&self) -> bool {
        matches!(self.kind, WorkloadKind::ZipfConst | WorkloadKind::Mixed)
    }

    fn chain_bytes(&self) -> u64 {
        self.matrix_dim as u64 * self.matrix_dim as u64 * 4
    }
}

pub fn blob_key(i: u32) -> String {
    format!("blob/{i}")
}

/// Every key the workload reads, with its size.
pub fn input_keys(spec: &WorkloadSpec) -> Vec<(String, u64)> {
    let mut keys = Vec::new();
    if spec.uses_chain() {
        keys.push(("A".to_string(), spec.chain_bytes()));
        keys.push(("B".to_string(), spec.chain_bytes()));
    }
    if spec.uses_blobs() {
        keys.extend((0..spec.key_universe).map(|i| (blob_key(i), BLOB_BYTES)));
    }
    keys
}

/// Seeded f32 payloads for every input key, in [`input_keys`] order.
pub fn generate_inputs(spec: &WorkloadSpec) -> Result<Vec<(String, Vec<u8>)>, WorkloadError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(input_keys(spec)
        .into_iter()
        .map(|(key, size)| {
            let values: Vec<f32> = (0..size / 4).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            (key, encode_f32s(&values))
        })
        .collect())
}

/// Populates `store` with the workload's inputs.
pub fn gen_data(spec: &WorkloadSpec, store: &dyn ObjectStore) -> Result<(), WorkloadError> {
    for (key, payload) in generate_inputs(spec)? {
        store.put(&StoreKey::new(key)?, &payload)?;
    }
    Ok(())
}

fn zipf_request(id: String, blob: u32) -> KaasRequest {
    KaasRequest {
        request_id: id,
        buffers: vec![
            BufferArg::constant("x", blob_key(blob), BLOB_BYTES),
            BufferArg::ephemeral("sum", 4),
        ],
        invocations: vec![KernelInvocation {
            kernel_id: "reduce_sum".into(),
            dims: LaunchDims::linear(1, 1),
            literals: vec![ScalarLiteral::I32(BLOB_ELEMS as i32)],
            args: vec!["x".into(), "sum".into()],
        }],
    }
}

/// The seeded request stream.
pub fn requests(spec: &WorkloadSpec) -> Result<Vec<KaasRequest>, WorkloadError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5_eed0_f4e9_u64);
    let zipf = Zipf::new(spec.key_universe as f64, spec.zipf_s)
        .map_err(|e| WorkloadError::Invalid(e.to_string()))?;
    let chain = |i: u64| matmul_chain(format!("mc-{i}"), spec.matrix_dim, "A", "B", "D");
    Ok((0..spec.request_count)
        .map(|i| match spec.kind {
            WorkloadKind::MatmulChain => chain(i),
            WorkloadKind::ZipfConst => zipf_request(format!("zc-{i}"), zipf.sample(&mut rng) as u32 - 1),
            WorkloadKind::Mixed => {
                if rng.random_bool(MIXED_CHAIN_SHARE) {
                    chain(i)
                } else {
                    zipf_request(format!("zc-{i}"), zipf.sample(&mut rng) as u32 - 1)
                }
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::MemStore;

    #[test]
    fn matmul_chain_data() {
        let spec = WorkloadSpec {
            matrix_dim: 4,
            ..WorkloadSpec::new(WorkloadKind::MatmulChain, 1, 3)
        };
        let store = MemStore::new();
        gen_data(&spec, &store).unwrap();
        let keys: Vec<_> = store.keys().unwrap().iter().map(|k| k.to_string()).collect();
        assert_eq!(keys, ["A", "B"]);
        assert_eq!(store.size_of(&StoreKey::new("A").unwrap()).unwrap(), 64);
    }

    #[test]
    fn zipf_universe_and_determinism() {
        let spec = WorkloadSpec::new(WorkloadKind::ZipfConst, 10, 9);
        let (a, b) = (MemStore::new(), MemStore::new());
        gen_data(&spec, &a).unwrap();
        gen_data(&spec, &b).unwrap();
        assert_eq!(a.keys().unwrap().len(), 100);
        for k in a.keys().unwrap() {
            assert_eq!(a.get(&k).unwrap(), b.get(&k).unwrap());
        }
        assert_eq!(requests(&spec).unwrap(), requests(&spec).unwrap());
    }

    #[test]
    fn zipf_requests_are_skewed_and_in_range() {
        let spec = WorkloadSpec::new(WorkloadKind::ZipfConst, 5000, 1);
        let mut counts = vec![0u32; 100];
        for r in requests(&spec).unwrap() {
            let key = r.buffers[0].key.as_deref().unwrap();
            counts[key["blob/".len()..].parse::<usize>().unwrap()] += 1;
        }
        // Rank 1 draws about 1/H_100 (19%) of requests under s = 1.
        assert!(counts[0] > 800 && counts[0] < 1150, "{}", counts[0]);
        assert!(counts[0] > counts[9] * 5);
    }

    #[test]
    fn invalid_specs() {
        assert!(WorkloadSpec::new(WorkloadKind::ZipfConst, 0, 1).validate().is_err());
        let spec = WorkloadSpec {
            zipf_s: 0.0,
            ..WorkloadSpec::new(WorkloadKind::ZipfConst, 1, 1)
        };
        assert!(requests(&spec).is_err());
        assert!("sideways".parse::<WorkloadKind>().is_err());
    }

    #[test]
    fn mixed_has_both() {
        let reqs = requests(&WorkloadSpec::new(WorkloadKind::Mixed, 200, 4)).unwrap();
        let chains = reqs.iter().filter(|r| r.request_id.starts_with("mc-")).count();
        assert!(chains > 20 && chains < 90, "{chains}");
    }
}
