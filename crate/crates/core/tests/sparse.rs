use lowmem_core::engine::ParamStore;
use lowmem_core::graph::{build_desk_cnn, build_wrn};
use lowmem_core::optim::{Optimizer, UpdateOptions};
use lowmem_core::sparse::{
    adapt_threshold, allocate, init_sparse_pattern, prune_global, regrow, rewire, rewire_due, DsrConfig, RewireEvent,
};
use lowmem_core::{DenseTensor, NumericFormat, SparsityMask};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const F32: NumericFormat = NumericFormat::Fp32;

fn t(v: &[f64]) -> DenseTensor {
    DenseTensor::from_vec(&[v.len()], F32, v.to_vec()).unwrap()
}

#[test]
fn full_density_gives_dense_masks() {
    let g = build_desk_cnn(&[4, 6], 5, true).unwrap();
    let s = init_sparse_pattern(&g, 1.0, 0.001, 1).unwrap();
    assert_eq!(s.budget, g.sparsifiable_params());
    assert!(s.masks.iter().flatten().all(|m| m.nnz() == m.len()));
    for (p, m) in g.params().iter().zip(&s.masks) {
        assert_eq!(p.sparsifiable, m.is_some());
    }
}

#[test]
fn zero_density_is_rejected() {
    let g = build_desk_cnn(&[4], 5, true).unwrap();
    assert!(init_sparse_pattern(&g, 0.0, 0.001, 1).is_err());
}

#[test]
fn wrn_budget_at_thirty_percent() {
    let g = build_wrn(28, 2.0, 10, [3, 32, 32]).unwrap();
    let s = init_sparse_pattern(&g, 0.3, 0.001, 7).unwrap();
    let group = g.sparsifiable_params();
    assert!(group as f64 > 0.996 * g.total_params() as f64);
    let per_tensor: u64 = g
        .params()
        .iter()
        .filter(|p| p.sparsifiable)
        .map(|p| (0.3 * p.numel() as f64).round() as u64)
        .sum();
    assert_eq!(s.budget, per_tensor);
    assert!((s.budget as f64 / (0.3 * group as f64) - 1.0).abs() < 1e-4);
    assert_eq!(s.nnz(), s.budget);
}

#[test]
fn wrn_prune_target_is_twenty_thousand() {
    let g = build_wrn(28, 2.0, 10, [3, 32, 32]).unwrap();
    let target = DsrConfig::wrn().target_count(g.sparsifiable_params());
    assert!((target as f64 - 20_000.0).abs() <= 1.0, "{target}");
}

#[test]
fn equal_seeds_give_equal_masks() {
    let g = build_desk_cnn(&[4, 6], 5, true).unwrap();
    let a = init_sparse_pattern(&g, 0.4, 0.001, 9).unwrap();
    let b = init_sparse_pattern(&g, 0.4, 0.001, 9).unwrap();
    assert_eq!(a, b);
}

#[test]
fn rewire_schedule_examples() {
    let wrn = DsrConfig::wrn();
    assert!(rewire_due(100, &wrn));
    assert!(!rewire_due(150, &wrn));
    assert!(!rewire_due(48_500, &wrn));
    assert!(!rewire_due(96_000, &wrn));
    assert!(rewire_due(12_600, &wrn));
    let dc = DsrConfig::transformer();
    assert_eq!(dc.schedule[0].end, 6250);
    assert_eq!(dc.schedule[4].start, 47_500);
    assert!(!rewire_due(48_500, &dc));
    let mut fast = DsrConfig::wrn();
    fast.frequency_multiplier = 2.0;
    assert!(rewire_due(50, &fast));
    assert!(!rewire_due(50, &wrn));
}

#[test]
fn default_configs_validate() {
    assert!(DsrConfig::wrn().validate().is_ok());
    assert!(DsrConfig::transformer().validate().is_ok());
    let mut bad = DsrConfig::wrn();
    bad.adjust_factor = 1.0;
    assert!(bad.validate().is_err());
}

#[test]
fn nothing_below_threshold_prunes_nothing() {
    let mut w = vec![t(&[0.5, -0.2])];
    let mut m = vec![Some(SparsityMask::full(&[2]))];
    let before = w.clone();
    let p = prune_global(&mut w, &mut m, 0.001).unwrap();
    assert_eq!(p.count, 0);
    assert_eq!(w, before);
}

#[test]
fn prune_single_small_weight() {
    let mut w = vec![t(&[0.5, 0.0005, -0.002, 0.3])];
    let mut m = vec![Some(SparsityMask::full(&[4]))];
    let p = prune_global(&mut w, &mut m, 0.001).unwrap();
    assert_eq!(p.count, 1);
    assert_eq!(p.positions, vec![(0, 1)]);
    assert_eq!(m[0].as_ref().unwrap().bits(), &[true, false, true, true]);
    assert_eq!(w[0].data()[1], 0.0);
}

#[test]
fn threshold_is_global_across_tensors() {
    let mut w = vec![t(&[0.003, 0.1]), t(&[0.2, 0.003]), t(&[0.003])];
    let mut m = vec![Some(SparsityMask::full(&[2])), Some(SparsityMask::full(&[2])), None];
    let excluded = w[2].clone();
    let p = prune_global(&mut w, &mut m, 0.004).unwrap();
    assert_eq!(p.positions, vec![(0, 0), (1, 1)]);
    assert_eq!(w[2], excluded);
}

#[test]
fn threshold_band_rule() {
    assert_eq!(adapt_threshold(100, 100, 0.01, 2.0), 0.01);
    assert_eq!(adapt_threshold(0, 100, 0.01, 2.0), 0.02);
    assert_eq!(adapt_threshold(1000, 100, 0.01, 2.0), 0.005);
    assert_eq!(adapt_threshold(50, 100, 0.01, 2.0), 0.01);
    assert_eq!(adapt_threshold(200, 100, 0.01, 2.0), 0.01);
}

#[test]
fn regrow_zero_changes_nothing() {
    let mut w = vec![t(&[1.0, 0.0])];
    let mut m = vec![Some(SparsityMask::from_bits(&[2], vec![true, false]).unwrap())];
    let before = m.clone();
    regrow(0, &mut w, &mut m, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(m, before);
}

#[test]
fn regrow_five_in_one_tensor() {
    let mut w = vec![t(&[0.7; 10])];
    let mut bits = vec![false; 10];
    bits[0] = true;
    let mut m = vec![Some(SparsityMask::from_bits(&[10], bits).unwrap())];
    w[0].apply_mask(m[0].as_ref().unwrap()).unwrap();
    regrow(5, &mut w, &mut m, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mm = m[0].as_ref().unwrap();
    assert_eq!(mm.nnz(), 6);
    let new: Vec<usize> = (1..10).filter(|&i| mm.get(i)).collect();
    assert_eq!(new.len(), 5);
    assert!(new.iter().all(|&i| w[0].data()[i] == 0.0));
}

#[test]
fn proportional_allocation() {
    assert_eq!(allocate(8, &[300, 100], &[1000, 1000]).unwrap(), vec![6, 2]);
    assert_eq!(allocate(8, &[300, 100], &[3, 1000]).unwrap(), vec![3, 5]);
    assert!(allocate(8, &[1, 1], &[3, 4]).is_err());
}

#[test]
fn rewire_event_serializes_as_one_json_line() {
    let e = RewireEvent {
        update: 100,
        pruned: 3,
        regrown: 3,
        threshold_before: 0.001,
        threshold_after: 0.002,
        per_tensor_nnz: vec![10, 20],
    };
    let line = e.json_line();
    assert!(!line.contains('\n'));
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    for k in [
        "update",
        "pruned",
        "regrown",
        "threshold_before",
        "threshold_after",
        "per_tensor_nnz",
    ] {
        assert!(v.get(k).is_some(), "{k}");
    }
}

fn sparse_desk(density: f64, seed: u64) -> (lowmem_core::ComputationGraph, ParamStore, lowmem_core::sparse::DsrState) {
    let g = build_desk_cnn(&[4, 6], 5, true).unwrap();
    let s = init_sparse_pattern(&g, density, 0.001, seed).unwrap();
    let mut p = ParamStore::init(&g, F32, false, seed).unwrap();
    p.set_masks(s.masks.clone()).unwrap();
    (g, p, s)
}

#[test]
fn rewire_restores_budget_and_clears_momentum() {
    let (_, mut p, mut s) = sparse_desk(0.5, 4);
    let mut o = Optimizer::sgd(&p.values);
    let grads: Vec<DenseTensor> = p
        .values
        .iter()
        .map(|v| {
            let mut g = v.clone();
            g.map_inplace(|i, _| 0.01 * (i as f64 + 1.0));
            g
        })
        .collect();
    o.step(&mut p.values, &grads, &p.masks.clone(), 0.1, UpdateOptions::default())
        .unwrap();
    assert!(o.buffers().iter().any(|b| b.values.data().iter().any(|&v| v != 0.0)));
    s.threshold = 0.05;
    let cfg = DsrConfig::wrn();
    let e = rewire(&mut p, &mut o, &mut s, &cfg, 100, 11).unwrap();
    assert!(e.pruned > 0);
    assert_eq!(e.pruned, e.regrown);
    assert_eq!(s.nnz(), s.budget);
    assert!(o.buffers().iter().all(|b| b.values.data().iter().all(|&v| v == 0.0)));
    assert_eq!(p.masks, s.masks);
}

#[test]
fn rewire_of_large_weights_only_doubles_threshold() {
    let (_, mut p, mut s) = sparse_desk(0.5, 5);
    for (v, m) in p.values.iter_mut().zip(&s.masks) {
        if let Some(m) = m {
            v.map_inplace(|i, _| if m.get(i) { 1.0 } else { 0.0 });
        }
    }
    let masks_before = s.masks.clone();
    let mut o = Optimizer::sgd(&p.values);
    let e = rewire(&mut p, &mut o, &mut s, &DsrConfig::wrn(), 100, 1).unwrap();
    assert_eq!((e.pruned, e.regrown), (0, 0));
    assert_eq!(s.masks, masks_before);
    assert_eq!(s.threshold, 0.002);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn rewire_conserves_budget(
        density in 0.05f64..0.95,
        threshold in 1e-4f64..0.5,
        seed in any::<u64>(),
    ) {
        let (g, mut p, mut s) = sparse_desk(density, seed);
        s.threshold = threshold;
        let dense_before: Vec<DenseTensor> = g.params().iter().zip(&p.values)
            .filter(|(spec, _)| !spec.sparsifiable).map(|(_, v)| v.clone()).collect();
        let mut o = Optimizer::sgd(&p.values);
        let before = s.threshold;
        rewire(&mut p, &mut o, &mut s, &DsrConfig::wrn(), 0, seed).unwrap();
        prop_assert_eq!(s.nnz(), s.budget);
        prop_assert!(s.threshold > 0.0);
        prop_assert!(s.threshold <= before * 2.0 && s.threshold >= before / 2.0);
        let dense_after: Vec<DenseTensor> = g.params().iter().zip(&p.values)
            .filter(|(spec, _)| !spec.sparsifiable).map(|(_, v)| v.clone()).collect();
        prop_assert_eq!(dense_before, dense_after);
        for (v, m) in p.values.iter().zip(&s.masks) {
            if let Some(m) = m {
                for i in 0..v.len() {
                    prop_assert!(m.get(i) || v.data()[i] == 0.0);
                }
            }
        }
    }

    #[test]
    fn allocation_sums_and_respects_capacity(
        parts in prop::collection::vec((0u64..500, 0u64..200), 1..6),
        frac in 0.0f64..1.0,
    ) {
        let weights: Vec<u64> = parts.iter().map(|p| p.0).collect();
        let cap: Vec<u64> = parts.iter().map(|p| p.1).collect();
        let count = (frac * cap.iter().sum::<u64>() as f64) as u64;
        let a = allocate(count, &weights, &cap).unwrap();
        prop_assert_eq!(a.iter().sum::<u64>(), count);
        for (x, c) in a.iter().zip(&cap) {
            prop_assert!(x <= c);
        }
    }

    #[test]
    fn masks_are_deterministic(density in 0.05f64..1.0, seed in any::<u64>()) {
        let g = build_desk_cnn(&[3, 5], 4, false).unwrap();
        prop_assert_eq!(init_sparse_pattern(&g, density, 0.001, seed).unwrap(), init_sparse_pattern(&g, density, 0.001, seed).unwrap());
    }
}
