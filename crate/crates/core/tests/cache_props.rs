//! Randomized request streams against a small executor, checking the cache
//! ledger after every internal step.

mod common;

use std::sync::{Arc, Mutex};

use common::*;
use kaas_core::backend::{SimBackend, TimingModel};
use kaas_core::executor::{Executor, ExecutorConfig};
use kaas_core::protocol::{BufferArg, Direction, KaasRequest, KernelInvocation, LaunchDims, ScalarLiteral};
use kaas_core::store::{LocalStore, ObjectStore};
use proptest::prelude::*;

const KEYS: [&str; 6] = ["k0", "k1", "k2", "k3", "k4", "k5"];

#[derive(Debug, Clone)]
struct Spec {
    key: usize,
    elems: u64,
    kind: u8,
}

fn spec() -> impl Strategy<Value = Spec> {
    (0..KEYS.len(), 1u64..48, 0u8..4).prop_map(|(key, elems, kind)| Spec { key, elems, kind })
}

fn build(i: usize, specs: &[Spec]) -> KaasRequest {
    let mut req = KaasRequest::new(format!("r{i}"));
    let mut used = std::collections::BTreeSet::new();
    for (j, s) in specs.iter().enumerate() {
        let name = format!("b{j}");
        let size = s.elems * 4;
        let key = KEYS[s.key];
        let arg = match s.kind {
            0 => BufferArg::constant(&name, key, size),
            1 => BufferArg::ephemeral(&name, size),
            2 => BufferArg::output(&name, key, size),
            _ => BufferArg::stored(&name, key, size, Direction::Inout),
        };
        if arg.key.is_some() && !used.insert(key) {
            continue;
        }
        req.buffers.push(arg);
    }
    let names: Vec<_> = req.buffers.iter().map(|b| b.name.clone()).collect();
    for (j, name) in names.iter().enumerate() {
        req.invocations.push(KernelInvocation {
            kernel_id: "fill".into(),
            dims: LaunchDims::linear(1, 8),
            literals: vec![ScalarLiteral::I32(2), ScalarLiteral::F32(j as f32)],
            args: vec![name.clone()],
        });
    }
    req
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ledger_pins_and_atomicity_hold(stream in prop::collection::vec(prop::collection::vec(spec(), 0..4), 1..40)) {
        let store = LocalStore::new();
        for k in &KEYS[..3] {
            store.put(&key(k), &[0u8; 64]).unwrap();
        }
        let timing = TimingModel::default();
        let mut ex = Executor::new(ExecutorConfig::new("e", 256, timing), SimBackend::with_builtins(timing)).unwrap();
        let violations = Arc::new(Mutex::new(Vec::new()));
        let sink = violations.clone();
        ex.set_step_hook(move |step, cache| {
            if let Err(e) = cache.check_invariants() {
                sink.lock().unwrap().push(format!("{step:?}: {e}"));
            }
        });

        for (i, specs) in stream.iter().enumerate() {
            let req = build(i, specs);
            let before = store.snapshot();
            let resp = ex.execute(&req, &store);
            if !resp.status.is_ok() {
                prop_assert_eq!(store.snapshot(), before);
            } else {
                prop_assert_eq!(resp.io_stats.cache_hits + resp.io_stats.cache_misses,
                    req.buffers.iter().filter(|b| !b.is_ephemeral).count() as u64);
            }
            prop_assert!(ex.cache().pinned_keys().is_empty());
            prop_assert_eq!(ex.cache().ephemeral_bytes(), 0);
        }
        let v = violations.lock().unwrap();
        prop_assert!(v.is_empty(), "{:?}", *v);
    }

    #[test]
    fn deterministic_replay(stream in prop::collection::vec(prop::collection::vec(spec(), 0..4), 1..20)) {
        let replay = || {
            let store = LocalStore::new();
            for k in &KEYS[..3] {
                store.put(&key(k), &[1u8; 64]).unwrap();
            }
            let timing = TimingModel::default();
            let mut ex = Executor::new(ExecutorConfig::new("e", 256, timing), SimBackend::with_builtins(timing)).unwrap();
            let responses: Vec<_> = stream.iter().enumerate().map(|(i, s)| ex.execute(&build(i, s), &store)).collect();
            (responses, store.snapshot())
        };
        prop_assert_eq!(replay(), replay());
    }
}
