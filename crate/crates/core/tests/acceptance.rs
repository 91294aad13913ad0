//! One line per acceptance criterion; run with `--nocapture` to see them.

use half::f16;
use lowmem_core::half::half_round;
use lowmem_core::verify::{run, CRITERIA};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Extra oracle for criterion 9: the `half` crate's binary16 conversion.
///
/// Its `from_f64` goes through binary32, so inputs are drawn as binary32 values
/// where that path cannot round twice.
fn half_crate_agrees() -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut n = 0;
    for bits in 0..=u16::MAX {
        let x = f16::from_bits(bits).to_f64();
        if x.is_nan() {
            continue;
        }
        if half_round(x).to_bits() != x.to_bits() {
            return Err(format!("code {bits:#06x} does not round-trip"));
        }
        n += 1;
    }
    for _ in 0..100_000 {
        let sign = if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
        let x = (sign * rng.gen_range(1.0f32..2.0) * 2f32.powi(rng.gen_range(-30..17))) as f64;
        let want = f16::from_f64(x).to_f64();
        if half_round(x).to_bits() != want.to_bits() {
            return Err(format!("half_round({x:e}) = {:e}, half crate {want:e}", half_round(x)));
        }
        n += 1;
    }
    Ok(n)
}

#[test]
fn acceptance() {
    let mut failed = Vec::new();
    for &(id, _, _) in CRITERIA.iter() {
        let mut r = run(id).expect("known criterion");
        if id == 9 {
            match half_crate_agrees() {
                Ok(n) => r.detail.push_str(&format!("; half crate agrees on {n} values")),
                Err(e) => {
                    r.passed = false;
                    r.detail.push_str(&format!("; {e}"));
                }
            }
        }
        println!("{}", r.line());
        if !r.passed {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
