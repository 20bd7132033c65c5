//! Routing invariants over seeded random prediction tensors.

use astcaps_core::capsules::route;
use astcaps_core::tensor::squash_slice;
use astcaps_core::Tensor;
use proptest::collection::vec;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

/// Norm of the wedge product `v ∧ s`, the cross product's magnitude in any
/// dimension.
pub fn wedge_norm(v: &[f64], s: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..v.len() {
        for j in i + 1..v.len() {
            acc += (v[i] * s[j] - v[j] * s[i]).powi(2);
        }
    }
    acc.sqrt()
}

fn predictions() -> impl Strategy<Value = (usize, usize, usize, usize, Vec<f64>)> {
    (1usize..10, 1usize..6, 1usize..9, 1usize..6)
        .prop_flat_map(|(p, j, d, it)| (Just(p), Just(j), Just(d), Just(it), vec(-3.0f64..3.0, p * j * d)))
}

fn check((p, j, d, iters, u): (usize, usize, usize, usize, Vec<f64>)) -> Result<(), TestCaseError> {
    let pred = Tensor::new(vec![p, j, d], u.clone()).unwrap();
    let (v, state) = route(&pred, iters).unwrap();
    for (it, c) in state.history.iter().enumerate() {
        for row in c.data().chunks(j) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12, "iteration {it}: row sums to {sum}");
            if it == 0 {
                for &x in row {
                    prop_assert!((x - 1.0 / j as f64).abs() <= 1e-15, "first couplings not uniform: {x}");
                }
            }
        }
    }
    let c = state.couplings.data();
    for jj in 0..j {
        let s: Vec<f64> = (0..d)
            .map(|k| (0..p).map(|i| c[i * j + jj] * u[(i * j + jj) * d + k]).sum())
            .collect();
        let vj = &v.data()[jj * d..(jj + 1) * d];
        let sn = s.iter().map(|x| x * x).sum::<f64>().sqrt();
        let vn = vj.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(vn < 1.0, "capsule {jj} has length {vn}");
        prop_assert!(wedge_norm(vj, &s) <= 1e-10 * sn, "capsule {jj} not collinear with its input");
        prop_assert!(vj.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() >= 0.0);
        let direct = squash_slice(&s);
        for (a, b) in vj.iter().zip(&direct) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
    Ok(())
}

/// Runs `cases` seeded routing cases; returns the count or the failure.
pub fn routing(cases: u32) -> Result<u32, String> {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let rng = TestRng::from_seed(RngAlgorithm::ChaCha, &[7; 32]);
    let mut runner = TestRunner::new_with_rng(config, rng);
    runner.run(&predictions(), check).map_err(|e| e.to_string())?;
    Ok(cases)
}
