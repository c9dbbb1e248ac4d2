mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use survmamba::blocks::{bi_mamba_forward, ifm_forward, BiMambaBlock, BlockDims, IfmBlock};
use survmamba::numerics::{ParamStore, Tensor};
use survmamba::pipeline::gradsuite::perturb_params;
use survmamba::ssm::DiscretizationMode;

const DIMS: BlockDims = BlockDims { d: 4, e: 8, n: 2, w: 2 };

fn perturbed_bi_mamba(seed: u64, mode: DiscretizationMode) -> (ParamStore, BiMambaBlock) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = BiMambaBlock::new(&mut store, "blk", DIMS, mode, &mut rng).unwrap();
    perturb_params(&mut store, &mut rng, 0.3);
    (store, block)
}

fn perturbed_ifm(seed: u64, mode: DiscretizationMode) -> (ParamStore, IfmBlock) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = IfmBlock::new(&mut store, "ifm", DIMS, mode, &mut rng).unwrap();
    perturb_params(&mut store, &mut rng, 0.3);
    (store, block)
}

fn assert_rows_close(got: &Tensor, want: &common::Rows, tol: f64) {
    let got = common::rows_of(got);
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().flatten().zip(want.iter().flatten()) {
        assert!((g - w).abs() <= tol, "{g} vs {w}");
    }
}

#[test]
fn bi_mamba_matches_straight_line_transcription_on_ones() {
    for (mode, zoh) in [(DiscretizationMode::Euler, false), (DiscretizationMode::Zoh, true)] {
        let (store, block) = perturbed_bi_mamba(21, mode);
        let t = Tensor::ones(&[6, 4]);
        let got = bi_mamba_forward(&block, &store, &t).unwrap();
        let want = common::bi_mamba(&common::rows_of(&t), &store, "blk", zoh);
        assert_rows_close(&got, &want, 1e-12);
        assert!(got.max_abs_diff(&t) > 1e-3, "perturbed block must not be the identity");
    }
}

#[test]
fn ifm_matches_straight_line_transcription_on_ones() {
    for (mode, zoh) in [(DiscretizationMode::Euler, false), (DiscretizationMode::Zoh, true)] {
        let (store, block) = perturbed_ifm(22, mode);
        let t = Tensor::ones(&[5, 4]);
        let got = ifm_forward(&block, &store, &t, &t).unwrap();
        let want = common::ifm(&common::rows_of(&t), &common::rows_of(&t), &store, "ifm", zoh);
        assert_rows_close(&got, &want, 1e-12);
        assert!(got.data().iter().any(|v| v.abs() > 1e-3));
    }
}

#[test]
fn ifm_closed_gate_silences_first_modality() {
    let (mut store, block) = perturbed_ifm(23, DiscretizationMode::Euler);
    let open = store.clone();
    for v in store.by_name_mut("ifm.a2.linear_z.weight").unwrap().data_mut() {
        *v = 0.0;
    }
    for v in store.by_name_mut("ifm.a2.linear_z.bias").unwrap().data_mut() {
        *v = -1e4;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t1 = Tensor::randn(&[4, 4], &mut rng);
    let t2 = Tensor::randn(&[4, 4], &mut rng);
    let a = ifm_forward(&block, &store, &t1, &t2).unwrap();
    // everything that feeds only the modality-1 scan output
    let scan_only: Vec<String> = store
        .iter()
        .filter(|(_, n, _)| n.starts_with("ifm.a1.ssm.") || n.starts_with("ifm.a1.linear_x."))
        .map(|(_, n, _)| n.to_string())
        .collect();
    for name in &scan_only {
        for v in store.by_name_mut(name).unwrap().data_mut() {
            *v = 3.0 * *v + 0.7;
        }
    }
    let b = ifm_forward(&block, &store, &t1, &t2).unwrap();
    let mut open_changed = open.clone();
    for name in &scan_only {
        *open_changed.by_name_mut(name).unwrap() = store.by_name(name).unwrap().clone();
    }
    let before = ifm_forward(&block, &open, &t1, &t2).unwrap();
    let after = ifm_forward(&block, &open_changed, &t1, &t2).unwrap();
    assert!(
        before.max_abs_diff(&after) > 1e-3,
        "control: an open gate must pass modality 1"
    );
    assert_eq!(a, b, "modality-1 scan leaked through a closed gate");
}

#[test]
fn length_one_tied_directions_agree() {
    let (mut store, block) = perturbed_bi_mamba(24, DiscretizationMode::Euler);
    let names: Vec<String> = store
        .iter()
        .filter(|(_, n, _)| n.starts_with("blk.fwd."))
        .map(|(_, n, _)| n.to_string())
        .collect();
    for name in names {
        let value = store.by_name(&name).unwrap().clone();
        *store.by_name_mut(&name.replacen("blk.fwd.", "blk.bwd.", 1)).unwrap() = value;
    }
    let t = Tensor::new(&[1, 4], vec![0.3, -1.0, 2.0, 0.5]).unwrap();
    let got = bi_mamba_forward(&block, &store, &t).unwrap();
    let swapped = bi_mamba_forward(&block.with_directions_swapped(), &store, &t).unwrap();
    assert_eq!(got, swapped);
}

/// The IFM block with the two modality slots exchanged, including the two
/// row halves of the output projection.
fn swap_modalities(store: &ParamStore, block: &IfmBlock) -> (ParamStore, IfmBlock) {
    let mut store = store.clone();
    let mut swapped = block.clone();
    std::mem::swap(&mut swapped.first, &mut swapped.second);
    let e = block.dims.e;
    let d = block.dims.d;
    let w = store.get(block.linear_out.weight).data().to_vec();
    let mut flipped = w[e * d..].to_vec();
    flipped.extend_from_slice(&w[..e * d]);
    swapped.linear_out.weight = store
        .register("ifm.linear_out.swapped", Tensor::new(&[2 * e, d], flipped).unwrap())
        .unwrap();
    (store, swapped)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bi_mamba_direction_symmetry(seed: u64, m in 1usize..12) {
        let (store, block) = perturbed_bi_mamba(seed, DiscretizationMode::Euler);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let t = Tensor::randn(&[m, 4], &mut rng);
        let rev = |x: &Tensor| {
            let rows = common::rows_of(x);
            Tensor::new(x.shape(), rows.into_iter().rev().flatten().collect()).unwrap()
        };
        let lhs = bi_mamba_forward(&block.with_directions_swapped(), &store, &rev(&t)).unwrap();
        let rhs = rev(&bi_mamba_forward(&block, &store, &t).unwrap());
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-10, "{}", lhs.max_abs_diff(&rhs));
    }

    #[test]
    fn ifm_modality_slot_symmetry(seed: u64, m in 1usize..12) {
        let (store, block) = perturbed_ifm(seed, DiscretizationMode::Euler);
        let (swapped_store, swapped) = swap_modalities(&store, &block);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let t1 = Tensor::randn(&[m, 4], &mut rng);
        let t2 = Tensor::randn(&[m, 4], &mut rng);
        let a = ifm_forward(&block, &store, &t1, &t2).unwrap();
        let b = ifm_forward(&swapped, &swapped_store, &t2, &t1).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-10, "{}", a.max_abs_diff(&b));
    }

    #[test]
    fn shapes_are_preserved(seed: u64, batch in 1usize..3, m in 1usize..10) {
        let (store, block) = perturbed_bi_mamba(seed, DiscretizationMode::Zoh);
        let (istore, iblock) = perturbed_ifm(seed, DiscretizationMode::Zoh);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::randn(&[batch, m, 4], &mut rng);
        let y = bi_mamba_forward(&block, &store, &t).unwrap();
        let fused = ifm_forward(&iblock, &istore, &t, &t).unwrap();
        prop_assert_eq!(y.shape(), t.shape());
        prop_assert_eq!(fused.shape(), t.shape());
    }
}
