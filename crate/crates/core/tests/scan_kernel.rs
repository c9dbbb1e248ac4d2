mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use survmamba::numerics::Tensor;
use survmamba::ssm::{
    blelloch_inclusive_scan, discretize, lti_convolve, lti_kernel, selective_scan_parallel, selective_scan_recurrent,
    DiscretizationMode, ScanPair,
};

struct Instance {
    x: Tensor,
    delta: Tensor,
    a: Tensor,
    b: Tensor,
    c: Tensor,
}

/// Selective instance: every input varies along the sequence.
fn selective(batch: usize, m: usize, e: usize, n: usize, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Instance {
        x: Tensor::randn(&[batch, m, e], &mut rng),
        delta: Tensor::from_fn(&[batch, m, e], |_| rng.random_range(1e-3..1.0)),
        a: Tensor::from_fn(&[e, n], |_| -rng.random_range(0.05..4.0)),
        b: Tensor::randn(&[batch, m, n], &mut rng),
        c: Tensor::randn(&[batch, m, n], &mut rng),
    }
}

/// Time-invariant instance: one `Δ` per channel and one `B`, `C` for all steps.
fn time_invariant(m: usize, e: usize, n: usize, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt: Vec<f64> = (0..e).map(|_| rng.random_range(1e-3..1.0)).collect();
    let bv: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cv: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Instance {
        x: Tensor::randn(&[1, m, e], &mut rng),
        delta: Tensor::from_fn(&[1, m, e], |i| dt[i % e]),
        a: Tensor::from_fn(&[e, n], |_| -rng.random_range(0.05..4.0)),
        b: Tensor::from_fn(&[1, m, n], |i| bv[i % n]),
        c: Tensor::from_fn(&[1, m, n], |i| cv[i % n]),
    }
}

/// The kernel inputs taken from the first step of a time-invariant instance.
fn lti_output(inst: &Instance, mode: DiscretizationMode) -> Tensor {
    let (_, m, e) = inst.x.dims3().unwrap();
    let n = inst.a.shape()[1];
    let dp = discretize(&inst.delta, &inst.a, &inst.b, mode).unwrap();
    let a_bar = Tensor::new(&[e, n], dp.a_bar.data()[..e * n].to_vec()).unwrap();
    let b_bar = Tensor::new(&[e, n], dp.b_bar.data()[..e * n].to_vec()).unwrap();
    let c = Tensor::new(&[n], inst.c.data()[..n].to_vec()).unwrap();
    let kernel = lti_kernel(&a_bar, &b_bar, &c, m).unwrap();
    lti_convolve(&inst.x, &kernel).unwrap()
}

fn mode_of(zoh: bool) -> DiscretizationMode {
    if zoh {
        DiscretizationMode::Zoh
    } else {
        DiscretizationMode::Euler
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn recurrent_equals_lti_convolution(m in 1usize..=64, e in 1usize..=8, n in 1usize..=8, seed: u64, zoh: bool) {
        let inst = time_invariant(m, e, n, seed);
        let mode = mode_of(zoh);
        let dp = discretize(&inst.delta, &inst.a, &inst.b, mode).unwrap();
        let rec = selective_scan_recurrent(&inst.x, &dp, &inst.c).unwrap();
        let conv = lti_output(&inst, mode);
        prop_assert!(rec.max_abs_diff(&conv) <= 1e-8, "deviation {}", rec.max_abs_diff(&conv));
    }

    #[test]
    fn parallel_equals_recurrent(
        batch in 1usize..=2, m in 1usize..=64, e in 1usize..=8, n in 1usize..=8, seed: u64, zoh: bool,
    ) {
        let inst = selective(batch, m, e, n, seed);
        let dp = discretize(&inst.delta, &inst.a, &inst.b, mode_of(zoh)).unwrap();
        let rec = selective_scan_recurrent(&inst.x, &dp, &inst.c).unwrap();
        let par = selective_scan_parallel(&inst.x, &dp, &inst.c).unwrap();
        prop_assert!(par.max_abs_diff(&rec) <= 1e-10, "deviation {}", par.max_abs_diff(&rec));
    }

    #[test]
    fn recurrent_matches_straight_line_oracle(m in 1usize..=32, e in 1usize..=4, n in 1usize..=4, seed: u64, zoh: bool) {
        let inst = selective(1, m, e, n, seed);
        let dp = discretize(&inst.delta, &inst.a, &inst.b, mode_of(zoh)).unwrap();
        let rec = selective_scan_recurrent(&inst.x, &dp, &inst.c).unwrap();
        let oracle = common::scan(
            &common::rows_of(&inst.x),
            &common::rows_of(&inst.delta),
            inst.a.data(),
            &common::rows_of(&inst.b),
            &common::rows_of(&inst.c),
            zoh,
        );
        for (got, want) in common::rows_of(&rec).iter().zip(&oracle) {
            for (g, w) in got.iter().zip(want) {
                prop_assert!((g - w).abs() <= 1e-12, "{g} vs {w}");
            }
        }
    }

    /// Folding any split point of the sequence first gives the same state.
    #[test]
    fn operator_bracketing_is_irrelevant(len in 1usize..=40, split_seed: u64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items: Vec<ScanPair> = (0..len)
            .map(|_| ScanPair { a: rng.random_range(0.0..1.0), b: rng.random_range(-1.0..1.0) })
            .collect();
        let left = items.iter().skip(1).fold(items[0], |acc, &p| acc.then(p));
        let mut split_rng = ChaCha8Rng::seed_from_u64(split_seed);
        let bracketed = fold_random_tree(&items, &mut split_rng);
        prop_assert!((left.a - bracketed.a).abs() <= 1e-10);
        prop_assert!((left.b - bracketed.b).abs() <= 1e-10);
        let last = *blelloch_inclusive_scan(&items).last().unwrap();
        prop_assert!((left.b - last.b).abs() <= 1e-10);
    }
}

fn fold_random_tree(items: &[ScanPair], rng: &mut ChaCha8Rng) -> ScanPair {
    if items.len() == 1 {
        return items[0];
    }
    let cut = rng.random_range(1..items.len());
    let left = fold_random_tree(&items[..cut], rng);
    let right = fold_random_tree(&items[cut..], rng);
    left.then(right)
}

#[test]
fn long_sequence_stays_bounded() {
    let (m, e, n) = (4096, 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_fn(&[1, m, e], |_| rng.random_range(-1.0..1.0));
    let delta = Tensor::from_fn(&[1, m, e], |_| rng.random_range(1e-3..0.1));
    let a = Tensor::from_fn(&[e, n], |i| -((i % n) as f64 + 1.0));
    let b = Tensor::from_fn(&[1, m, n], |_| rng.random_range(-1.0..1.0));
    let c = Tensor::from_fn(&[1, m, n], |_| rng.random_range(-1.0..1.0));
    let dp = discretize(&delta, &a, &b, DiscretizationMode::Euler).unwrap();
    let max_a = dp.a_bar.data().iter().cloned().fold(0.0, f64::max);
    assert!(max_a < 1.0);
    let max_input = dp
        .b_bar
        .data()
        .chunks(n)
        .zip(x.data())
        .flat_map(|(bb, xv)| bb.iter().map(move |v| (v * xv).abs()))
        .fold(0.0, f64::max);
    let state_bound = max_input / (1.0 - max_a);
    let y_bound = n as f64 * state_bound;
    for y in [
        selective_scan_recurrent(&x, &dp, &c).unwrap(),
        selective_scan_parallel(&x, &dp, &c).unwrap(),
    ] {
        assert!(y.is_finite());
        let worst = y.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(worst <= y_bound, "{worst} exceeds {y_bound}");
    }
}

#[test]
fn impulse_response_is_kernel() {
    let kernel = lti_kernel(
        &Tensor::new(&[1, 1], vec![0.5]).unwrap(),
        &Tensor::new(&[1, 1], vec![1.0]).unwrap(),
        &Tensor::new(&[1], vec![1.0]).unwrap(),
        3,
    )
    .unwrap();
    let y = lti_convolve(&Tensor::new(&[1, 3, 1], vec![1.0, 0.0, 0.0]).unwrap(), &kernel).unwrap();
    assert_eq!(y.data(), &[1.0, 0.5, 0.25]);
}

#[test]
fn single_step_parallel_is_recurrent() {
    let inst = selective(2, 1, 3, 2, 9);
    let dp = discretize(&inst.delta, &inst.a, &inst.b, DiscretizationMode::Euler).unwrap();
    assert_eq!(
        selective_scan_parallel(&inst.x, &dp, &inst.c).unwrap(),
        selective_scan_recurrent(&inst.x, &dp, &inst.c).unwrap()
    );
}
