#![allow(dead_code)]

use kaas_core::backend::{decode_f32s, encode_f32s};
use kaas_core::store::{LocalStore, ObjectStore, StoreKey};

pub fn key(s: &str) -> StoreKey {
    StoreKey::new(s).unwrap()
}

pub fn put_f32s(store: &LocalStore, k: &str, values: &[f32]) {
    store.put(&key(k), &encode_f32s(values)).unwrap();
}

pub fn get_f32s(store: &LocalStore, k: &str) -> Vec<f32> {
    decode_f32s(&store.get(&key(k)).unwrap())
}

/// Straight triple loop, ascending inner index, one f32 accumulator.
pub fn matmul_oracle(a: &[f32], b: &[f32], n: usize, m: usize, k: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0f32;
            for p in 0..k {
                acc += a[i * k + p] * b[p * m + j];
            }
            out[i * m + j] = acc;
        }
    }
    out
}

/// Deterministic pseudo-random floats in [-2, 2) from a 64-bit LCG, so
/// fixtures do not depend on any RNG crate.
pub fn lcg_f32s(seed: u64, len: usize) -> Vec<f32> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..len)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 40) as f32 / (1u64 << 24) as f32) * 4.0 - 2.0
        })
        .collect()
}

pub fn same_bits(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}
