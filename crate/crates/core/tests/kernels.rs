mod common;

use common::*;
use kaas_core::backend::{decode_f32s, encode_f32s, Backend, BufferView, SimBackend, TimingModel};
use kaas_core::protocol::{LaunchDims, ScalarLiteral};
use proptest::prelude::*;

fn run(kernel: &str, dims: LaunchDims, lits: &[ScalarLiteral], inputs: &[Vec<f32>], out_len: usize) -> Vec<u8> {
    let inputs: Vec<Vec<u8>> = inputs.iter().map(|v| encode_f32s(v)).collect();
    let mut out = vec![0u8; out_len * 4];
    let mut views: Vec<BufferView<'_>> = inputs.iter().map(|b| BufferView::Read(b)).collect();
    views.push(BufferView::Write(&mut out));
    SimBackend::with_builtins(TimingModel::default())
        .launch(kernel, &dims, lits, &mut views)
        .unwrap();
    out
}

/// Four distinct grid/block shapes with exactly `total` threads.
fn factorizations(total: u32) -> Vec<LaunchDims> {
    let div = (2..=total).find(|&d| total.is_multiple_of(d)).unwrap_or(1);
    vec![
        LaunchDims::linear(1, total),
        LaunchDims::linear(total, 1),
        LaunchDims::new([div, 1, 1], [total / div, 1, 1]),
        LaunchDims::new([1, total / div, 1], [1, 1, div]),
    ]
}

fn floats(len: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1.0e3f32..1.0e3, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_oracle((n, m, k) in (1usize..=24, 1usize..=24, 1usize..=24), seed in any::<u64>(), extra in 0u32..7) {
        let a = lcg_f32s(seed, n * k);
        let b = lcg_f32s(seed ^ 0xabcdef, k * m);
        let want = encode_f32s(&matmul_oracle(&a, &b, n, m, k));
        let lits = [n, m, k].map(|v| ScalarLiteral::I32(v as i32));
        for dims in factorizations((n * m) as u32 + extra) {
            prop_assert_eq!(&run("matmul", dims, &lits, &[a.clone(), b.clone()], n * m), &want);
        }
    }

    #[test]
    fn elementwise_match_oracles(x in floats(64), y in floats(64), n in 0usize..=64, a in -10.0f32..10.0) {
        let total = (n as u32).max(1);
        let sum: Vec<f32> = (0..64).map(|i| if i < n { x[i] + y[i] } else { 0.0 }).collect();
        let ax: Vec<f32> = (0..64).map(|i| if i < n { a * x[i] + y[i] } else { 0.0 }).collect();
        let filled: Vec<f32> = (0..64).map(|i| if i < n { a } else { 0.0 }).collect();
        for dims in factorizations(total) {
            let ni = ScalarLiteral::I32(n as i32);
            prop_assert_eq!(decode_f32s(&run("vector_add", dims, &[ni], &[x.clone(), y.clone()], 64)), sum.clone());
            prop_assert_eq!(decode_f32s(&run("saxpy", dims, &[ni, ScalarLiteral::F32(a)], &[x.clone(), y.clone()], 64)), ax.clone());
            prop_assert_eq!(decode_f32s(&run("fill", dims, &[ni, ScalarLiteral::F32(a)], &[], 64)), filled.clone());
        }
    }

    #[test]
    fn reduce_sum_matches_oracle(x in floats(64), n in 0usize..=64, threads in 1u32..100) {
        let mut acc = 0.0f32;
        for v in &x[..n] {
            acc += v;
        }
        let got = run("reduce_sum", LaunchDims::linear(1, threads), &[ScalarLiteral::I32(n as i32)], &[x], 1);
        prop_assert_eq!(got, acc.to_le_bytes().to_vec());
    }
}

#[test]
fn too_few_threads_leave_tail_untouched() {
    let x = vec![1.0f32; 8];
    let out = run("vector_add", LaunchDims::linear(1, 5), &[ScalarLiteral::I32(8)], &[x.clone(), x], 8);
    assert_eq!(decode_f32s(&out), [2.0, 2.0, 2.0, 2.0, 2.0, 0.0, 0.0, 0.0]);
}

#[test]
fn matmul_16x16_factorization_independent() {
    let a = lcg_f32s(11, 256);
    let b = lcg_f32s(12, 256);
    let lits = [ScalarLiteral::I32(16); 3];
    let flat = run("matmul", LaunchDims::linear(1, 256), &lits, &[a.clone(), b.clone()], 256);
    let tiled = run("matmul", LaunchDims::new([16, 1, 1], [16, 1, 1]), &lits, &[a.clone(), b.clone()], 256);
    let square = run("matmul", LaunchDims::new([4, 4, 1], [4, 4, 1]), &lits, &[a.clone(), b.clone()], 256);
    assert_eq!(flat, tiled);
    assert_eq!(flat, square);
    assert_eq!(flat, encode_f32s(&matmul_oracle(&a, &b, 16, 16, 16)));
}
