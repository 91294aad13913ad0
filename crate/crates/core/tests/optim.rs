use half::f16;
use lowmem_core::engine::ops::Numerics;
use lowmem_core::optim::{
    adam_step, clip_global_norm, global_norm, rescale_factor, sgd_nesterov_step, unscale, AdamState, GradAccumulator,
    LossScaler, LrSchedule, Moment, Optimizer, SgdState, UpdateOptions,
};
use lowmem_core::{DenseTensor, Error, NumericFormat, SparsityMask};
use proptest::prelude::*;

const F64: NumericFormat = NumericFormat::Fp64;
const F16: NumericFormat = NumericFormat::Fp16;

fn t(format: NumericFormat, v: &[f64]) -> DenseTensor {
    DenseTensor::from_vec(&[v.len()], format, v.to_vec()).unwrap()
}

#[test]
fn sgd_with_zero_gradient_and_momentum_is_identity() {
    let mut w = vec![t(F64, &[0.5, -2.0])];
    let mut s = SgdState::new(&w, 0.9, 0.0);
    sgd_nesterov_step(
        &mut w,
        &[t(F64, &[0.0, 0.0])],
        &[],
        &mut s,
        0.1,
        UpdateOptions::default(),
    )
    .unwrap();
    assert_eq!(w[0].data(), &[0.5, -2.0]);
    assert_eq!(s.momentum[0].to_vec(), vec![0.0, 0.0]);
}

#[test]
fn sgd_single_step_by_hand() {
    let mut w = vec![t(F64, &[1.0])];
    let mut s = SgdState::new(&w, 0.9, 0.0);
    sgd_nesterov_step(&mut w, &[t(F64, &[1.0])], &[], &mut s, 0.1, UpdateOptions::default()).unwrap();
    assert_eq!(s.momentum[0].to_vec(), vec![1.0]);
    let expected = 1.0 - 0.1 * (1.0 + 0.9 * 1.0);
    assert_eq!(w[0].data()[0], expected);
    assert!((w[0].data()[0] - 0.81).abs() < 1e-15);
}

#[test]
fn sgd_two_steps_with_weight_decay_by_hand() {
    let (mu, wd, lr) = (0.9, 0.01, 0.05);
    let mut w = vec![t(F64, &[2.0])];
    let mut s = SgdState::new(&w, mu, wd);
    let (mut ow, mut ob) = (2.0f64, 0.0f64);
    for g in [0.3, -0.7] {
        sgd_nesterov_step(&mut w, &[t(F64, &[g])], &[], &mut s, lr, UpdateOptions::default()).unwrap();
        let gp = g + wd * ow;
        ob = mu * ob + gp;
        ow -= lr * (gp + mu * ob);
    }
    assert_eq!(w[0].data()[0], ow);
    assert_eq!(s.momentum[0].get(0), ob);
}

#[test]
fn sgd_state_is_one_buffer_per_tensor() {
    let p = vec![t(F64, &[1.0, 2.0, 3.0]), t(F64, &[4.0])];
    let s = SgdState::new(&p, 0.9, 5e-4);
    assert_eq!(s.momentum.len(), 2);
    assert_eq!(s.momentum[0].values.len(), 3);
    assert_eq!(s.momentum[1].values.len(), 1);
    let o = Optimizer::sgd(&p);
    assert_eq!(o.state_bytes(), p.iter().map(DenseTensor::bytes).sum::<u64>());
}

#[test]
fn adam_with_zero_gradient_from_zero_state_is_identity() {
    let mut w = vec![t(F64, &[0.0, 0.0])];
    let mut s = AdamState::new(&w, 0.9, 0.98, 1e-8, 1e-4);
    adam_step(
        &mut w,
        &[t(F64, &[0.0, 0.0])],
        &[],
        &mut s,
        1e-3,
        UpdateOptions::default(),
    )
    .unwrap();
    assert_eq!(w[0].data(), &[0.0, 0.0]);
    assert_eq!(s.t, 1);
}

#[test]
fn adam_first_step_by_hand() {
    let mut w = vec![t(F64, &[0.0])];
    let mut s = AdamState::new(&w, 0.9, 0.98, 1e-8, 1e-4);
    adam_step(&mut w, &[t(F64, &[1.0])], &[], &mut s, 1e-3, UpdateOptions::default()).unwrap();
    let m: f64 = (1.0 - 0.9) * 1.0;
    let v: f64 = (1.0 - 0.98) * 1.0;
    assert!((s.m[0].get(0) - 0.1).abs() < 1e-16);
    assert!((s.v[0].get(0) - 0.02).abs() < 1e-16);
    let mh = m / (1.0 - 0.9);
    let vh = v / (1.0 - 0.98);
    let expected = -1e-3 * mh / (vh.sqrt() + 1e-8);
    assert!(
        (w[0].data()[0] - expected).abs() < 1e-18,
        "{} vs {expected}",
        w[0].data()[0]
    );
}

#[test]
fn adam_state_is_two_buffers_per_tensor() {
    let p = vec![t(F64, &[1.0, 2.0]), t(F64, &[4.0])];
    let o = Optimizer::adam(&p);
    assert_eq!(o.buffers().len(), 4);
    assert_eq!(o.state_bytes(), 2 * p.iter().map(DenseTensor::bytes).sum::<u64>());
}

#[test]
fn shape_mismatch_is_a_contract_error() {
    let mut w = vec![t(F64, &[1.0, 2.0])];
    let mut s = SgdState::new(&w, 0.9, 0.0);
    let err = sgd_nesterov_step(&mut w, &[t(F64, &[1.0])], &[], &mut s, 0.1, UpdateOptions::default());
    assert!(matches!(err, Err(Error::Contract(_))));
}

#[test]
fn overflow_halves_scale_and_skips() {
    let mut s = LossScaler {
        clean_streak: 400,
        ..LossScaler::default()
    };
    assert!(s.update(true));
    assert_eq!(s.scale, 32768.0);
    assert_eq!(s.clean_streak, 0);
}

#[test]
fn growth_interval_clean_steps_double_scale() {
    let mut s = LossScaler::default();
    for _ in 0..1000 {
        assert!(!s.update(false));
    }
    assert_eq!(s.scale, 131072.0);
}

#[test]
fn loss_scaler_replay() {
    let mut s = LossScaler::default();
    let mut seq = vec![false; 999];
    seq.push(true);
    seq.extend(std::iter::repeat_n(false, 1000));
    let (mut scale, mut streak) = (65536.0f64, 0u32);
    for &bad in &seq {
        s.update(bad);
        if bad {
            scale = (scale / 2.0).max(1.0);
            streak = 0;
        } else {
            streak += 1;
            if streak == 1000 {
                scale = (scale * 2.0).min(16_777_216.0);
                streak = 0;
            }
        }
    }
    assert_eq!(s.scale, scale);
    assert_eq!(s.scale, 65536.0);
}

#[test]
fn loss_scaler_rejects_non_powers_of_two() {
    assert!(LossScaler::new(3.0, 10, 1.0, 1024.0).is_err());
    assert!(LossScaler::new(2048.0, 10, 1.0, 1024.0).is_err());
    assert!(LossScaler::new(8.0, 10, 1.0, 1024.0).is_ok());
}

#[test]
fn unscale_reports_overflow() {
    let mut g = vec![t(F16, &[2.0, 4.0])];
    assert!(unscale(&mut g, 2.0));
    assert_eq!(g[0].data(), &[1.0, 2.0]);
    let mut bad = vec![t(NumericFormat::Fp32, &[f64::INFINITY])];
    assert!(!unscale(&mut bad, 2.0));
}

fn h(x: f64) -> f16 {
    f16::from_f64(x)
}

#[test]
fn plain_fp16_update_matches_binary16_arithmetic() {
    let w0 = [0.3, -1.7, 0.0123, 5.5];
    let g = [0.01, 0.2, -0.003, 1.0];
    let (mu, wd, lr) = (0.9, 5e-4, 0.1);
    let mut w = vec![t(F16, &w0)];
    let mut s = SgdState::new(&w, mu, wd);
    for _ in 0..3 {
        sgd_nesterov_step(&mut w, &[t(F16, &g)], &[], &mut s, lr, UpdateOptions::plain()).unwrap();
    }
    // each operation on exact operands, then one rounding through the binary16 codec
    let q = |x: f64| h(x).to_f64();
    let mut ow: Vec<f64> = w0.iter().map(|&x| q(x)).collect();
    let mut ob = [0.0; 4];
    for _ in 0..3 {
        for i in 0..4 {
            let gi = q(q(g[i]) + q(wd * ow[i]));
            ob[i] = q(q(mu * ob[i]) + gi);
            ow[i] = q(ow[i] - q(lr * q(gi + q(mu * ob[i]))));
        }
    }
    for i in 0..4 {
        assert_eq!(w[0].data()[i], ow[i], "weight {i}");
        assert_eq!(s.momentum[0].get(i), ob[i], "momentum {i}");
    }
}

#[test]
fn momentum_rescale_keeps_tiny_momentum() {
    let vals: Vec<f64> = (0..64).map(|i| 1e-8 + (3e-6 - 1e-8) * i as f64 / 63.0).collect();
    let mut plain = Moment::zeros(&t(F16, &vals));
    plain.store(&vals, false);
    let flushed = vals
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v < 2f64.powi(-24) && plain.get(i) == 0.0)
        .count();
    assert!(flushed > 0);
    let mut scaled = Moment::zeros(&t(F16, &vals));
    scaled.store(&vals, true);
    let max = vals.iter().cloned().fold(0.0, f64::max);
    let r = max / scaled.scale;
    assert!((512.0..2048.0).contains(&r), "{r}");
    assert_eq!(scaled.scale.log2().fract(), 0.0);
    for (i, &v) in vals.iter().enumerate() {
        let back = scaled.get(i);
        assert!(back != 0.0);
        assert!((back - v).abs() / v <= 2f64.powi(-11), "{v} -> {back}");
        assert!(f16::from_f64(scaled.values.data()[i]).is_normal());
    }
}

#[test]
fn rescale_of_in_window_tensor_is_identity() {
    let vals = [1024.0, -3.0, 0.5];
    assert_eq!(rescale_factor(&vals, 1.0), 1.0);
    let mut m = Moment::zeros(&t(F16, &vals));
    m.store(&vals, true);
    assert_eq!(m.scale, 1.0);
    assert_eq!(m.values.data(), &vals);
}

#[test]
fn all_zero_momentum_has_unit_scale() {
    assert_eq!(rescale_factor(&[0.0, 0.0], 64.0), 1.0);
}

#[test]
fn wrn_epoch_61_rate() {
    let s = LrSchedule::wrn();
    assert_eq!(s.lr_at(61), 0.020);
    assert_eq!(s.lr_at(1), 0.100);
    assert_eq!(s.lr_at(60), 0.100);
    assert_eq!(s.lr_at(200), 0.008);
}

#[test]
fn transformer_rates() {
    let s = LrSchedule::transformer();
    assert_eq!(s.lr_at(4000), 5e-4);
    let direct = 5e-4 * (4000.0f64 / 16000.0).sqrt();
    assert!((s.lr_at(16000) - direct).abs() < 1e-18);
    assert!((s.lr_at(16000) - 2.5e-4).abs() < 1e-18);
    assert!((s.lr_at(0) - 1e-7).abs() < 1e-20);
}

#[test]
fn schedules_validate() {
    assert!(LrSchedule::wrn().validate().is_ok());
    assert!(LrSchedule::transformer().validate().is_ok());
    let bad = LrSchedule::Step {
        starts: vec![1, 1],
        rates: vec![0.1, 0.2],
    };
    assert!(bad.validate().is_err());
}

fn fp64_num() -> Numerics {
    Numerics::new(F64, 32)
}

#[test]
fn single_microbatch_flush_equals_direct_step() {
    let w0 = vec![t(F64, &[1.0, -0.5, 0.25])];
    let g = vec![t(F64, &[0.1, 0.2, -0.3])];
    let mut direct = w0.clone();
    let mut od = Optimizer::sgd(&w0);
    od.step(&mut direct, &g, &[], 0.1, UpdateOptions::default()).unwrap();
    let mut acc = GradAccumulator::new(&w0, fp64_num());
    let mut via = w0.clone();
    let mut oa = Optimizer::sgd(&w0);
    acc.add(&g, 1.0).unwrap();
    assert!(acc
        .flush(&mut via, &[], &mut oa, 0.1, None, UpdateOptions::default())
        .unwrap());
    assert_eq!(via, direct);
    assert_eq!(oa, od);
    assert!(acc.buffer[0].data().iter().all(|&v| v == 0.0));
}

#[test]
fn equal_microbatches_accumulate_exactly() {
    let w0 = vec![t(F64, &[1.0, 2.0, 3.0])];
    let g = vec![t(F64, &[0.123456789, -9.87654321, 3.3333333])];
    for k in [2usize, 4, 8] {
        let mut acc = GradAccumulator::new(&w0, fp64_num());
        for _ in 0..k {
            acc.add(&g, 1.0 / k as f64).unwrap();
        }
        assert_eq!(acc.buffer[0].data(), g[0].data(), "k = {k}");
    }
}

#[test]
fn flush_without_accumulation_is_noop() {
    let w0 = vec![t(F64, &[1.0])];
    let mut w = w0.clone();
    let mut o = Optimizer::sgd(&w0);
    let mut acc = GradAccumulator::new(&w0, fp64_num());
    assert!(!acc
        .flush(&mut w, &[], &mut o, 0.1, None, UpdateOptions::default())
        .unwrap());
    assert_eq!(w, w0);
}

#[test]
fn clipping_above_the_norm_changes_nothing() {
    let mut g = vec![t(F64, &[3.0, 4.0])];
    assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
    assert_eq!(g[0].data(), &[3.0, 4.0]);
    clip_global_norm(&mut g, 1.0);
    assert!((global_norm(&g) - 1.0).abs() < 1e-15);
}

fn mask_strategy(n: usize) -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), n)
}

proptest! {
    #[test]
    fn scaler_stays_a_power_of_two(events in prop::collection::vec(prop::bool::weighted(0.3), 0..400), interval in 1u32..20) {
        let mut s = LossScaler::new(1024.0, interval, 1.0, 4096.0).unwrap();
        for bad in events {
            s.update(bad);
            prop_assert_eq!(s.scale.log2().fract(), 0.0);
            prop_assert!((1.0..=4096.0).contains(&s.scale));
            prop_assert!(s.clean_streak < interval);
        }
    }

    #[test]
    fn warmup_is_continuous(n in 3990u64..4010) {
        let s = LrSchedule::transformer();
        prop_assert!((s.lr_at(n) - s.lr_at(n + 1)).abs() < 5e-7);
        prop_assert!(s.lr_at(n) > 0.0);
    }

    #[test]
    fn adam_second_moments_stay_nonnegative(gs in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 4), 1..30)) {
        let mut w = vec![t(F64, &[0.1, 0.2, 0.3, 0.4])];
        let mut s = AdamState::new(&w, 0.9, 0.98, 1e-8, 1e-4);
        for g in gs {
            adam_step(&mut w, &[t(F64, &g)], &[], &mut s, 1e-3, UpdateOptions::default()).unwrap();
            prop_assert!(s.v[0].to_vec().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn fp16_path_stays_finite(
        w0 in prop::collection::vec(-100f64..100.0, 8),
        gs in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 8), 1..20),
        adam in any::<bool>(),
    ) {
        let mut w = vec![t(F16, &w0)];
        let mut o = if adam { Optimizer::adam(&w) } else { Optimizer::sgd(&w) };
        for g in gs {
            o.step(&mut w, &[t(F16, &g)], &[], 1e-2, UpdateOptions::default()).unwrap();
            prop_assert!(w[0].all_finite());
            for b in o.buffers() {
                prop_assert!(b.values.all_finite());
            }
        }
    }

    #[test]
    fn supports_stay_inside_the_mask(
        bits in mask_strategy(12),
        w0 in prop::collection::vec(-1f64..1.0, 12),
        gs in prop::collection::vec(prop::collection::vec(-1f64..1.0, 12), 1..6),
        adam in any::<bool>(),
    ) {
        let mask = SparsityMask::from_bits(&[12], bits).unwrap();
        let mut w = vec![t(F64, &w0)];
        w[0].apply_mask(&mask).unwrap();
        let masks = vec![Some(mask.clone())];
        let mut o = if adam { Optimizer::adam(&w) } else { Optimizer::sgd(&w) };
        for g in gs {
            o.step(&mut w, &[t(F64, &g)], &masks, 0.1, UpdateOptions::default()).unwrap();
            for i in 0..12 {
                if !mask.get(i) {
                    prop_assert_eq!(w[0].data()[i], 0.0);
                    for b in o.buffers() {
                        prop_assert_eq!(b.get(i), 0.0);
                    }
                }
            }
        }
        o.reset(0);
        prop_assert!(o.buffers().iter().all(|b| b.values.data().iter().all(|&v| v == 0.0)));
    }
}
