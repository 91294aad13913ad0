//! Acceptance suite: one check per criterion, each returning a pass/fail line.
//!
//! Reference values are compared against independent recomputations where one
//! exists (binary16 table lookup, CSR arithmetic, scaler automaton replay).

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{run_microbatched, run_step, Batch, EngineConfig, ExecMode, ParamStore};
use crate::graph::{
    build_dc_transformer_cost, build_desk_cnn, build_desk_cnn_with_input, build_wrn, DcTransformerPreset, GraphBuilder,
    NodeId, NodeKind,
};
use crate::half::half_round;
use crate::optim::LossScaler;
use crate::plan::{build_plan, schedule, CheckpointStrategy};
use crate::planner::train::{train, train_with, LogRecord, TrainConfig};
use crate::profiler::{
    activation_memory, flops, model_memory, optimizer_memory, simulate, total_report, OptimizerKind, TrainingConfig,
};
use crate::tensor::{csr_from_dense, csr_storage_bytes};
use crate::{ComputationGraph, DenseTensor, NumericFormat, Result, SparsityMask};

const F16: NumericFormat = NumericFormat::Fp16;
const F32: NumericFormat = NumericFormat::Fp32;
const F64: NumericFormat = NumericFormat::Fp64;

/// Outcome of one criterion.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub id: u32,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "[{}] {:>2} {:<24} {} ({:.2} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

/// `(id, name, time limit)` for every criterion.
pub const CRITERIA: [(u32, &str, Option<u64>); 12] = [
    (1, "wrn-memory-totals", Some(1)),
    (2, "dc-memory-totals", Some(1)),
    (3, "checkpoint-tradeoff", None),
    (4, "optimizer-ratios", None),
    (5, "chain-formula", Some(1)),
    (6, "checkpoint-equivalence", Some(60)),
    (7, "microbatch-equivalence", Some(60)),
    (8, "dsr-invariants", Some(120)),
    (9, "numerics", None),
    (10, "loss-scaler", None),
    (11, "profiler-engine", None),
    (12, "desk-training", None),
];

/// Runs criterion `id`; errors inside a check count as a failure.
pub fn run(id: u32) -> Option<CheckResult> {
    let &(id, name, limit) = CRITERIA.iter().find(|c| c.0 == id)?;
    let start = Instant::now();
    let outcome = match id {
        1 => wrn_totals(),
        2 => dc_totals(),
        3 => checkpoint_tradeoff(),
        4 => optimizer_ratios(),
        5 => chain_formula(),
        6 => checkpoint_equivalence(),
        7 => microbatch_equivalence(),
        8 => dsr_invariants(),
        9 => numerics(),
        10 => loss_scaler(),
        11 => profiler_engine(),
        _ => desk_training(),
    };
    let elapsed = start.elapsed();
    let (mut passed, mut detail) = match outcome {
        Ok(Check { ok, detail }) => (ok, detail),
        Err(e) => (false, format!("error: {e}")),
    };
    if let Some(secs) = limit {
        if elapsed > Duration::from_secs(secs) {
            passed = false;
            detail.push_str(&format!("; over the {secs} s limit"));
        }
    }
    Some(CheckResult {
        id,
        name,
        passed,
        detail,
        elapsed,
    })
}

pub fn run_all() -> Vec<CheckResult> {
    CRITERIA.iter().filter_map(|c| run(c.0)).collect()
}

struct Check {
    ok: bool,
    detail: String,
}

/// Accumulates sub-results; the first few failures end up in the detail.
#[derive(Default)]
struct Tally {
    total: usize,
    failures: Vec<String>,
}

impl Tally {
    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.total += 1;
        if !ok {
            self.failures.push(what());
        }
    }

    fn finish(self, summary: String) -> Check {
        if self.failures.is_empty() {
            Check {
                ok: true,
                detail: summary,
            }
        } else {
            let shown: Vec<_> = self.failures.iter().take(3).cloned().collect();
            Check {
                ok: false,
                detail: format!("{}/{} failed: {}", self.failures.len(), self.total, shown.join("; ")),
            }
        }
    }
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got / want - 1.0).abs()
}

pub const WRN_BASELINE_MB: f64 = 404.8;
/// `(density, microbatch, MB)` at FP16, minibatch 100, residual-2*.
pub const WRN_ROWS: [(f64, u64, f64); 6] = [
    (1.0, 100, 42.6),
    (1.0, 10, 12.2),
    (0.3, 10, 6.7),
    (0.2, 10, 5.6),
    (0.2, 4, 3.6),
    (0.1, 4, 2.5),
];

pub const DC_BASELINE_MB: f64 = 2896.0;
/// `(density, precision, MB)` at 4000-token minibatches, 250-token microbatches, residual-1.
pub const DC_ROWS: [(f64, NumericFormat, f64); 8] = [
    (1.0, F32, 662.0),
    (1.0, F16, 331.0),
    (0.5, F32, 380.0),
    (0.5, F16, 201.0),
    (0.4, F32, 315.0),
    (0.4, F16, 166.0),
    (0.3, F32, 249.0),
    (0.3, F16, 131.0),
];

pub fn wrn_row_config(density: f64, microbatch: u64) -> TrainingConfig {
    TrainingConfig {
        density,
        microbatch,
        strategy: CheckpointStrategy::ResidualMStar(2),
        ..TrainingConfig::baseline(F16, 100, OptimizerKind::SgdNesterov)
    }
}

pub fn dc_row_config(density: f64, precision: NumericFormat) -> TrainingConfig {
    TrainingConfig {
        density,
        microbatch: 250,
        strategy: CheckpointStrategy::ResidualM(1),
        batchnorm_params_fp32: precision == F16,
        ..TrainingConfig::baseline(precision, 4000, OptimizerKind::Adam)
    }
}

fn wrn() -> Result<ComputationGraph> {
    build_wrn(28, 2.0, 10, [3, 32, 32])
}

fn dc() -> Result<ComputationGraph> {
    build_dc_transformer_cost(&DcTransformerPreset::default())
}

fn wrn_totals() -> Result<Check> {
    let g = wrn()?;
    let mut t = Tally::default();
    let base = TrainingConfig::baseline(F32, 100, OptimizerKind::SgdNesterov);
    let mut worst = 0.0f64;
    let mut rows = vec![(base, WRN_BASELINE_MB)];
    rows.extend(WRN_ROWS.iter().map(|&(d, mb, want)| (wrn_row_config(d, mb), want)));
    for (cfg, want) in rows {
        let got = total_report(&g, &cfg)?.0.total_mb();
        let e = rel_err(got, want);
        worst = worst.max(e);
        t.check(e <= 0.10, || format!("{want} MB row gave {got:.1} MB"));
    }
    let csr = csr_oracle(&mut t)?;
    Ok(t.finish(format!(
        "7 rows, worst error {:.1}% (limit 10%); {csr} CSR sizes match",
        100.0 * worst
    )))
}

/// Compares CSR byte counts with the packed-index formula on random masks.
fn csr_oracle(t: &mut Tally) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc5);
    let mut n = 0;
    for _ in 0..200 {
        let shape = [
            rng.gen_range(1..40),
            rng.gen_range(1..20),
            rng.gen_range(1..4),
            rng.gen_range(1..4),
        ];
        let len: usize = shape.iter().product();
        let format = [F16, F32, F64][rng.gen_range(0..3)];
        let p: f64 = rng.gen();
        let bits: Vec<bool> = (0..len).map(|_| rng.gen_bool(p)).collect();
        let values: Vec<f64> = (0..len).map(|_| format.round(rng.gen_range(0.5..2.0))).collect();
        let mask = SparsityMask::from_bits(&shape, bits.clone())?;
        let w = DenseTensor::from_vec(&shape, format, values)?;
        let csr = csr_from_dense(&w, &mask)?;
        let rows = shape[0] as u64;
        let cols = (shape[1] * shape[2] * shape[3]) as u64;
        let nnz = bits.iter().filter(|&&b| b).count() as u64;
        let mut index_bits = 0u64;
        while (1u64 << index_bits) < cols {
            index_bits += 1;
        }
        let elem = format.element_bytes();
        let own = (nnz * index_bits).div_ceil(8) + (rows + 1) * 4 + nnz * elem;
        let shared = nnz * elem;
        t.check(csr_storage_bytes(&csr, false) == own, || {
            format!("CSR {shape:?} nnz {nnz}: want {own} bytes")
        });
        t.check(csr_storage_bytes(&csr, true) == shared, || {
            format!("shared CSR {shape:?}: want {shared} bytes")
        });
        n += 1;
    }
    Ok(n)
}

fn dc_totals() -> Result<Check> {
    let g = dc()?;
    let mut t = Tally::default();
    let mut rows = vec![(TrainingConfig::baseline(F32, 4000, OptimizerKind::Adam), DC_BASELINE_MB)];
    rows.extend(DC_ROWS.iter().map(|&(d, p, want)| (dc_row_config(d, p), want)));
    let mut worst = 0.0f64;
    for (cfg, want) in rows {
        let got = total_report(&g, &cfg)?.0.total_mb();
        let e = rel_err(got, want);
        worst = worst.max(e);
        t.check(e <= 0.12, || format!("{want} MB row gave {got:.1} MB"));
    }
    Ok(t.finish(format!("9 rows, worst error {:.1}% (limit 12%)", 100.0 * worst)))
}

fn checkpoint_tradeoff() -> Result<Check> {
    let g = wrn()?;
    let cfg = TrainingConfig::baseline(F32, 100, OptimizerKind::SgdNesterov);
    let none = activation_memory(&g, &cfg, CheckpointStrategy::None)?;
    let star = activation_memory(&g, &cfg, CheckpointStrategy::ResidualMStar(2))?;
    let star_ratio = flops(&g, &cfg, CheckpointStrategy::ResidualMStar(2))?.ratio_to_baseline;
    let nobn = activation_memory(&g, &cfg, CheckpointStrategy::NoBn)?;
    let nobn_ratio = flops(&g, &cfg, CheckpointStrategy::NoBn)?.ratio_to_baseline;
    let reduction = none.total() as f64 / star.total() as f64;
    let stored_cut = 1.0 - nobn.peak_stored_bytes as f64 / none.peak_stored_bytes as f64;

    let d = dc()?;
    let dcfg = TrainingConfig {
        microbatch: 250,
        ..TrainingConfig::baseline(F32, 4000, OptimizerKind::Adam)
    };
    let dnone = activation_memory(&d, &dcfg, CheckpointStrategy::None)?;
    let dres = activation_memory(&d, &dcfg, CheckpointStrategy::ResidualM(1))?;
    let dc_reduction = dnone.total() as f64 / dres.total() as f64;

    let mut t = Tally::default();
    t.check((5.3..=6.3).contains(&reduction), || {
        format!("residual-2* reduction {reduction:.2}x")
    });
    t.check((1.25..=1.35).contains(&star_ratio), || {
        format!("residual-2* flops ratio {star_ratio:.3}")
    });
    t.check((0.45..=0.55).contains(&stored_cut), || {
        format!("no-bn stored cut {stored_cut:.3}")
    });
    t.check(nobn_ratio < 1.01, || format!("no-bn flops ratio {nobn_ratio:.4}"));
    t.check((5.2..=6.2).contains(&dc_reduction), || {
        format!("dc residual-1 reduction {dc_reduction:.2}x")
    });
    Ok(t.finish(format!(
        "residual-2* {reduction:.2}x at {star_ratio:.3} flops; no-bn -{:.1}% at {nobn_ratio:.4}; dc residual-1 {dc_reduction:.2}x",
        100.0 * stored_cut
    )))
}

fn optimizer_ratios() -> Result<Check> {
    let mut t = Tally::default();
    let graphs = [
        wrn()?,
        dc()?,
        build_desk_cnn(&[4, 6], 4, true)?,
        build_desk_cnn(&[8, 8, 16], 10, false)?,
    ];
    for g in &graphs {
        for (kind, k) in [(OptimizerKind::SgdNesterov, 2), (OptimizerKind::Adam, 3)] {
            let cfg = TrainingConfig::baseline(F32, 4000, kind);
            let model = model_memory(g, &cfg);
            let opt = optimizer_memory(g, &cfg);
            t.check(opt == k * model, || {
                format!("{} {kind}: {opt} != {k} x {model}", g.name)
            });
        }
    }
    Ok(t.finish(format!("{} graph/optimizer pairs exact", graphs.len() * 2)))
}

/// `input -> reshape -> (len - 1) linear layers -> softmax loss`: `len` storing nodes of equal size.
pub fn uniform_chain(len: usize, width: usize) -> Result<ComputationGraph> {
    let mut b = GraphBuilder::new(format!("chain-{len}"));
    let x = b.add("x", NodeKind::Input { shape: vec![width] }, &[])?;
    let mut h = b.add("flat", NodeKind::Reshape { shape: vec![width] }, &[x])?;
    for i in 1..len {
        let kind = NodeKind::Linear {
            d_in: width,
            d_out: width,
            bias: true,
            tied: false,
        };
        h = b.add(format!("n{i}"), kind, &[h])?;
    }
    let loss = b.add("loss", NodeKind::SoftmaxCrossEntropy { classes: width }, &[h])?;
    b.loss(loss);
    b.build()
}

fn chain_formula() -> Result<Check> {
    let width = 4;
    let unit = 4 * width as u64;
    let cfg = TrainingConfig::baseline(F32, 1, OptimizerKind::SgdNesterov);
    let mut t = Tally::default();
    for n in 1..=32 {
        for m in 1..=32 {
            let g = uniform_chain(m * n, width)?;
            let a = activation_memory(&g, &cfg, CheckpointStrategy::EveryM(m))?;
            let want = (n + m) as u64 * unit;
            t.check(a.peak_stored_bytes == want, || {
                format!("m={m} n={n}: {} units", a.peak_stored_bytes as f64 / unit as f64)
            });
        }
    }
    Ok(t.finish("peak = n + m units for all 1024 (m, n) pairs up to 32".into()))
}

const ALL_STRATEGIES: [CheckpointStrategy; 8] = [
    CheckpointStrategy::NoBn,
    CheckpointStrategy::EveryM(1),
    CheckpointStrategy::EveryM(2),
    CheckpointStrategy::EveryM(3),
    CheckpointStrategy::ResidualM(1),
    CheckpointStrategy::ResidualM(2),
    CheckpointStrategy::ResidualMStar(1),
    CheckpointStrategy::ResidualMStar(2),
];

/// Random executable desk graph with nondecreasing stage widths.
fn random_desk(rng: &mut ChaCha8Rng) -> Result<(ComputationGraph, usize)> {
    let stages = rng.gen_range(1..4);
    let mut c = rng.gen_range(1..4);
    let mut channels = Vec::with_capacity(stages);
    for _ in 0..stages {
        channels.push(c);
        c += rng.gen_range(0..3);
    }
    let side = rng.gen_range(4..9);
    let g = build_desk_cnn_with_input(&channels, rng.gen_range(2..5), rng.gen_bool(0.5), [2, side, side])?;
    Ok((g, rng.gen_range(1..6)))
}

fn checkpoint_equivalence() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut t = Tally::default();
    let graphs = 24;
    for k in 0..graphs {
        let (g, batch) = random_desk(&mut rng)?;
        let seed: u64 = rng.gen();
        let data = Batch::random(&g, batch, F32, seed)?;
        let params = ParamStore::init(&g, F32, false, seed ^ 0x9e37)?;
        let base = run_step(&g, &mut params.clone(), &data, &EngineConfig::default())?;
        for s in ALL_STRATEGIES {
            let cfg = EngineConfig {
                strategy: s,
                ..EngineConfig::default()
            };
            let r = run_step(&g, &mut params.clone(), &data, &cfg)?;
            let same = r.grads.bit_identical(&base.grads) && r.loss.to_bits() == base.loss.to_bits();
            t.check(same, || format!("graph {k} ({}) under {s}", g.name));
        }
    }
    Ok(t.finish(format!(
        "{graphs} random graphs x {} strategies bit-identical",
        ALL_STRATEGIES.len()
    )))
}

fn microbatch_equivalence() -> Result<Check> {
    let mut t = Tally::default();
    let size = 12;
    let divisors: Vec<usize> = (1..=size).filter(|d| size % d == 0).collect();

    let g = build_desk_cnn(&[4, 6], 5, false)?;
    let batch = Batch::random(&g, size, F64, 6)?;
    let params = ParamStore::init(&g, F64, false, 2)?;
    let fp64 = EngineConfig {
        precision: F64,
        ..EngineConfig::default()
    };
    let full = run_step(&g, &mut params.clone(), &batch, &fp64)?;
    let mut worst = 0.0f64;
    for &mb in &divisors {
        for mode in [ExecMode::Sequential, ExecMode::Joint] {
            let cfg = EngineConfig {
                exec_mode: mode,
                ..fp64.clone()
            };
            let r = run_microbatched(&g, &mut params.clone(), &batch, mb, &cfg)?;
            let rel = full.grads.max_rel_diff(&r.grads);
            worst = worst.max(rel);
            t.check(rel <= 1e-10, || format!("{mode:?} microbatch {mb}: rel {rel:e}"));
        }
    }

    let g = build_desk_cnn(&[4, 6], 5, true)?;
    let batch = Batch::random(&g, size, F32, 12)?;
    let params = ParamStore::init(&g, F32, false, 3)?;
    for &mb in &divisors {
        let mut pj = params.clone();
        let mut ps = params.clone();
        let joint = EngineConfig {
            exec_mode: ExecMode::Joint,
            ..EngineConfig::default()
        };
        let j = run_microbatched(&g, &mut pj, &batch, mb, &joint)?;
        let s = run_microbatched(&g, &mut ps, &batch, mb, &EngineConfig::default())?;
        t.check(j.grads.bit_identical(&s.grads), || {
            format!("joint vs sequential gradients at {mb}")
        });
        t.check(pj.running == ps.running, || {
            format!("joint vs sequential running stats at {mb}")
        });
    }
    Ok(t.finish(format!(
        "divisors {divisors:?}: worst rel {worst:.1e} without normalization; joint == sequential with it"
    )))
}

/// Settings of the long sparse run.
pub fn dsr_run_config() -> TrainConfig {
    TrainConfig {
        steps: 2000,
        minibatch: 16,
        microbatch: 16,
        density: 0.5,
        rewire_every: 50,
        eval_every: 500,
        ..TrainConfig::default()
    }
}

fn dsr_invariants() -> Result<Check> {
    let g = build_desk_cnn(&[4, 6], 4, true)?;
    let cfg = dsr_run_config();
    let mut t = Tally::default();
    let mut rewires = 0u64;
    let mut steps = 0u64;
    let mut worst_factor = 1.0f64;
    train_with(&g, &cfg, |v| {
        steps += 1;
        let Some(dsr) = v.dsr else {
            t.check(false, || "sparse run without sparsity state".into());
            return Ok(());
        };
        let buffers = v.optimizer.buffers();
        let np = dsr.masks.len();
        for (i, b) in buffers.iter().enumerate() {
            if let Some(mask) = &dsr.masks[i % np] {
                let outside = b
                    .to_vec()
                    .iter()
                    .enumerate()
                    .filter(|&(j, &x)| x != 0.0 && !mask.get(j))
                    .count();
                t.check(outside == 0, || {
                    format!("step {}: {outside} momentum entries outside the mask", v.step)
                });
            }
        }
        if let Some(ev) = v.rewired {
            rewires += 1;
            let tensors: u64 = ev.per_tensor_nnz.iter().sum();
            t.check(dsr.nnz() == dsr.budget && tensors == dsr.budget, || {
                format!("rewire at {}: nnz {} budget {}", v.step, dsr.nnz(), dsr.budget)
            });
            let f = ev.threshold_after / ev.threshold_before;
            worst_factor = worst_factor.max(f.max(1.0 / f));
            t.check(f.is_finite() && (0.5..=2.0).contains(&f), || {
                format!("rewire at {}: threshold x{f}", v.step)
            });
        }
        Ok(())
    })?;
    let expected = cfg.steps / cfg.rewire_every;
    t.check(rewires == expected, || {
        format!("{rewires} rewires, expected {expected}")
    });
    t.check(steps == cfg.steps, || format!("{steps} observed steps"));
    Ok(t.finish(format!(
        "{steps} steps, {rewires} rewires at exact budget, momentum inside masks, threshold factor <= {worst_factor}"
    )))
}

/// Every finite nonnegative binary16 value in increasing order, built from the
/// bit-field definition.
fn binary16_table() -> Vec<f64> {
    let mut v = Vec::with_capacity(31 * 1024);
    for e in 0..31i32 {
        for m in 0..1024u32 {
            let x = if e == 0 {
                m as f64 * 2f64.powi(-24)
            } else {
                (1.0 + m as f64 / 1024.0) * 2f64.powi(e - 15)
            };
            v.push(x);
        }
    }
    v
}

/// Nearest table entry, ties to the even code, overflow to infinity.
fn reference_round(table: &[f64], x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let a = x.abs();
    let top = table[table.len() - 1];
    let ulp_top = top - table[table.len() - 2];
    let r = if a >= top + ulp_top / 2.0 {
        f64::INFINITY
    } else {
        let i = table.partition_point(|&t| t <= a);
        if i == table.len() {
            top
        } else if i == 0 {
            table[0]
        } else {
            let (lo, hi) = (table[i - 1], table[i]);
            let (dl, dh) = (a - lo, hi - a);
            if dl < dh || (dl == dh && (i - 1) % 2 == 0) {
                lo
            } else {
                hi
            }
        }
    };
    if x.is_sign_negative() {
        -r
    } else {
        r
    }
}

fn same(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan())
}

fn numerics() -> Result<Check> {
    let mut t = Tally::default();
    let table = binary16_table();
    let mut cases: Vec<f64> = vec![
        0.0,
        -0.0,
        65504.0,
        -65504.0,
        65519.99,
        65520.0,
        65536.0,
        1e10,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NAN,
        2f64.powi(-24),
        2f64.powi(-25),
        1.5 * 2f64.powi(-25),
        2f64.powi(-26),
        2f64.powi(-14),
        2f64.powi(-14) - 2f64.powi(-25),
        1e-300,
    ];
    for w in table.windows(2) {
        let mid = (w[0] + w[1]) / 2.0;
        cases.extend([
            w[0],
            mid,
            -mid,
            f64::from_bits(mid.to_bits() + 1),
            f64::from_bits(mid.to_bits() - 1),
        ]);
    }
    let boundary = cases.len();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100_000 {
        let e: i32 = rng.gen_range(-30..17);
        let sign = if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
        cases.push(sign * rng.gen_range(1.0..2.0) * 2f64.powi(e));
    }
    for &x in &cases {
        let (got, want) = (half_round(x), reference_round(&table, x));
        t.check(same(got, want), || {
            format!("half_round({x:e}) = {got:e}, reference {want:e}")
        });
    }
    let fd = finite_differences()?;
    for (kind, worst) in &fd {
        t.check(*worst <= 1e-6, || format!("{kind}: gradient rel error {worst:e}"));
    }
    let worst = fd.iter().map(|f| f.1).fold(0.0, f64::max);
    Ok(t.finish(format!(
        "{} kinds within {worst:.1e} of central differences; half_round agrees on {boundary} boundary and 100000 random values",
        fd.len()
    )))
}

fn probe(
    input: Vec<usize>,
    body: impl FnOnce(&mut GraphBuilder, NodeId) -> Result<NodeId>,
) -> Result<ComputationGraph> {
    let mut b = GraphBuilder::new("probe");
    let x = b.add("x", NodeKind::Input { shape: input }, &[])?;
    let h = body(&mut b, x)?;
    let n = b.output(h).per_example_elements() as usize;
    let flat = b.add("flat", NodeKind::Reshape { shape: vec![n] }, &[h])?;
    let fc = b.add("head", lin(n, 3), &[flat])?;
    let loss = b.add("loss", NodeKind::SoftmaxCrossEntropy { classes: 3 }, &[fc])?;
    b.loss(loss);
    b.build()
}

fn lin(d_in: usize, d_out: usize) -> NodeKind {
    NodeKind::Linear {
        d_in,
        d_out,
        bias: true,
        tied: false,
    }
}

fn conv(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> NodeKind {
    NodeKind::Conv2D {
        c_in,
        c_out,
        k1: k,
        k2: k,
        stride,
        pad,
        bias: true,
    }
}

/// One small graph per executable node kind.
pub fn probe_graphs() -> Result<Vec<(&'static str, ComputationGraph)>> {
    Ok(vec![
        (
            "conv2d",
            probe(vec![2, 5, 5], |b, x| b.add("c", conv(2, 3, 3, 2, 1), &[x]))?,
        ),
        ("linear", probe(vec![2, 6], |b, x| b.add("l", lin(6, 4), &[x]))?),
        (
            "batchnorm",
            probe(vec![2, 3, 3], |b, x| {
                let c = b.add("c", conv(2, 2, 1, 1, 0), &[x])?;
                b.add("bn", NodeKind::BatchNorm { c: 2 }, &[c])
            })?,
        ),
        (
            "layernorm",
            probe(vec![2, 6], |b, x| {
                let l = b.add("l", lin(6, 6), &[x])?;
                b.add("ln", NodeKind::LayerNorm { d: 6 }, &[l])
            })?,
        ),
        (
            "relu",
            probe(vec![6], |b, x| {
                let l = b.add("l", lin(6, 5), &[x])?;
                b.add("r", NodeKind::ReLU, &[l])
            })?,
        ),
        (
            "add",
            probe(vec![6], |b, x| {
                let l1 = b.add("l1", lin(6, 4), &[x])?;
                let l2 = b.add("l2", lin(6, 4), &[x])?;
                b.add("a", NodeKind::Add, &[l1, l2])
            })?,
        ),
        (
            "transpose",
            probe(vec![3, 4], |b, x| {
                let l = b.add("l", lin(4, 5), &[x])?;
                let t = b.add("t", NodeKind::Transpose, &[l])?;
                b.add("l2", lin(3, 2), &[t])
            })?,
        ),
        (
            "avgpool",
            probe(vec![2, 4, 4], |b, x| {
                let c = b.add("c", conv(2, 2, 1, 1, 0), &[x])?;
                b.add("p", NodeKind::AvgPool { window: 2 }, &[c])
            })?,
        ),
        (
            "subsample_pad",
            probe(vec![2, 4, 4], |b, x| {
                let c = b.add("c", conv(2, 2, 1, 1, 0), &[x])?;
                b.add("s", NodeKind::SubsamplePad { stride: 2, c_out: 3 }, &[c])
            })?,
        ),
        (
            "embedding",
            probe(vec![1], |b, x| b.add("e", NodeKind::Embedding { vocab: 5, d: 4 }, &[x]))?,
        ),
    ])
}

/// Worst relative error between analytic and central-difference parameter
/// gradients, per probe graph, in FP64 with step 1e-5.
pub fn finite_differences() -> Result<Vec<(&'static str, f64)>> {
    let h = 1e-5;
    let cfg = EngineConfig {
        precision: F64,
        ..EngineConfig::default()
    };
    let mut out = Vec::new();
    for (kind, g) in probe_graphs()? {
        let batch = Batch::random(&g, 4, F64, 11)?;
        let mut p = ParamStore::init(&g, F64, false, 5)?;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (i, spec) in g.params().iter().enumerate() {
            if spec.is_norm() || spec.name.ends_with("bias") {
                p.values[i].map_inplace(|_, v| v + rng.gen_range(-0.5..0.5));
            }
        }
        let analytic = run_step(&g, &mut p.clone(), &batch, &cfg)?.grads;
        let loss_at = |q: ParamStore| -> Result<f64> {
            let mut q = q;
            Ok(run_step(&g, &mut q, &batch, &cfg)?.loss)
        };
        let mut worst = 0.0f64;
        for i in 0..p.values.len() {
            for j in 0..p.values[i].len() {
                let x = p.values[i].data()[j];
                let mut plus = p.clone();
                plus.values[i].set(j, x + h);
                let mut minus = p.clone();
                minus.values[i].set(j, x - h);
                let fd = (loss_at(plus)? - loss_at(minus)?) / (2.0 * h);
                let an = analytic.grads[i].data()[j];
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-3));
            }
        }
        out.push((kind, worst));
    }
    Ok(out)
}

/// Straight transcription of the scaler transition rule.
fn replay(scale0: f64, interval: u32, min: f64, max: f64, seq: &[bool]) -> Vec<(f64, bool)> {
    let (mut scale, mut streak) = (scale0, 0u32);
    seq.iter()
        .map(|&bad| {
            if bad {
                scale = (scale / 2.0).max(min);
                streak = 0;
            } else {
                streak += 1;
                if streak == interval {
                    scale = (scale * 2.0).min(max);
                    streak = 0;
                }
            }
            (scale, bad)
        })
        .collect()
}

fn loss_scaler() -> Result<Check> {
    let mut t = Tally::default();
    let mut suites: Vec<(f64, u32, f64, f64, Vec<bool>)> = Vec::new();
    let mut seq = vec![false; 999];
    seq.push(true);
    seq.extend(vec![false; 1000]);
    suites.push((65536.0, 1000, 1.0, 16_777_216.0, seq));
    suites.push((65536.0, 1000, 1.0, 16_777_216.0, vec![false; 3000]));
    suites.push((4.0, 3, 1.0, 16.0, vec![true; 6]));
    suites.push((8.0, 2, 1.0, 16.0, vec![false; 12]));
    let mut alt = Vec::new();
    for k in 0..40 {
        alt.extend(vec![false; k % 5]);
        alt.push(true);
    }
    suites.push((1024.0, 3, 1.0, 4096.0, alt));
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..50 {
        let interval = rng.gen_range(1..20);
        let p = rng.gen_range(0.0..0.5);
        let seq = (0..rng.gen_range(0..600)).map(|_| rng.gen_bool(p)).collect();
        suites.push((2f64.powi(rng.gen_range(0..12)), interval, 1.0, 4096.0, seq));
    }
    for (n, (s0, interval, min, max, seq)) in suites.iter().enumerate() {
        let mut s = LossScaler::new(*s0, *interval, *min, *max)?;
        let want = replay(*s0, *interval, *min, *max, seq);
        let got: Vec<(f64, bool)> = seq
            .iter()
            .map(|&bad| {
                let skip = s.update(bad);
                (s.scale, skip)
            })
            .collect();
        t.check(got == want, || format!("replay {n} diverged from the automaton"));
    }
    let end = LossScaler::default();
    let mut s = end.clone();
    suites[0].4.iter().for_each(|&bad| {
        s.update(bad);
    });
    t.check(s.scale == end.scale, || {
        format!("down-once-up-once replay ends at {}", s.scale)
    });

    let g = build_desk_cnn(&[4, 6], 4, true)?;
    let cfg = TrainConfig {
        precision: F16,
        inject_overflow: vec![20],
        ..TrainConfig::default()
    };
    let out = train(&g, &cfg)?;
    let scales: Vec<(u64, f64, bool)> = out
        .log
        .iter()
        .filter_map(|r| match r {
            LogRecord::LossScale { step, scale, skipped } => Some((*step, *scale, *skipped)),
            _ => None,
        })
        .collect();
    let initial = LossScaler::default().scale;
    t.check(scales.first() == Some(&(20, initial / 2.0, true)), || {
        format!("loss-scale trace {scales:?}")
    });
    t.check(out.summary.skipped_steps == 1, || {
        format!("{} skipped steps", out.summary.skipped_steps)
    });
    t.check(out.summary.final_test_loss < out.summary.initial_test_loss, || {
        format!(
            "fp16 run did not recover: loss {} -> {}",
            out.summary.initial_test_loss, out.summary.final_test_loss
        )
    });
    Ok(t.finish(format!(
        "{} replays exact; fp16 run skipped step 20, scale {} -> {}, loss {:.3} -> {:.3}",
        suites.len(),
        initial,
        initial / 2.0,
        out.summary.initial_test_loss,
        out.summary.final_test_loss
    )))
}

fn profiler_engine() -> Result<Check> {
    let mut t = Tally::default();
    let mut graphs = vec![
        build_desk_cnn(&[4, 6], 5, true)?,
        build_desk_cnn(&[4, 6], 5, false)?,
        build_desk_cnn(&[3, 3, 5], 3, true)?,
        build_desk_cnn_with_input(&[2, 4], 3, true, [1, 6, 6])?,
    ];
    graphs.extend(probe_graphs()?.into_iter().map(|p| p.1));
    let mut cases = 0;
    for (k, g) in graphs.iter().enumerate() {
        for batch in [1, 3] {
            let data = Batch::random(g, batch, F32, k as u64)?;
            let params = ParamStore::init(g, F32, false, 7)?;
            for s in std::iter::once(CheckpointStrategy::None).chain(ALL_STRATEGIES) {
                let residual = matches!(
                    s,
                    CheckpointStrategy::ResidualM(_) | CheckpointStrategy::ResidualMStar(_)
                );
                if residual && g.blocks().is_empty() {
                    continue;
                }
                let cfg = EngineConfig {
                    strategy: s,
                    ..EngineConfig::default()
                };
                let r = run_step(g, &mut params.clone(), &data, &cfg)?;
                let mut tc = TrainingConfig::baseline(F32, batch as u64, OptimizerKind::SgdNesterov);
                tc.strategy = s;
                let act = activation_memory(g, &tc, s)?;
                let fl = flops(g, &tc, s)?;
                let sim = simulate(g, &schedule(g, &build_plan(g, s)?), batch as u64, F32, 1.0);
                t.check(r.activation == act, || {
                    format!("{} {s} batch {batch}: activation bytes differ", g.name)
                });
                t.check(r.recompute_flops == fl.recompute_flops, || {
                    format!("{} {s}: recompute flops differ", g.name)
                });
                t.check(r.recompute_nodes == sim.recompute_nodes, || {
                    format!("{} {s}: recompute op count differs", g.name)
                });
                cases += 1;
            }
        }
    }
    Ok(t.finish(format!("{cases} graph/batch/strategy cases agree exactly")))
}

fn desk_training() -> Result<Check> {
    let g = build_desk_cnn(&[4, 6], 4, true)?;
    let dense_cfg = TrainConfig {
        steps: 300,
        eval_every: 100,
        ..TrainConfig::default()
    };
    let sparse_cfg = TrainConfig {
        density: 0.5,
        rewire_every: 50,
        ..dense_cfg.clone()
    };
    let dense = train(&g, &dense_cfg)?.summary.final_accuracy;
    let sparse = train(&g, &sparse_cfg)?.summary.final_accuracy;
    let gap = 100.0 * (dense - sparse);
    Ok(Check {
        ok: gap <= 5.0,
        detail: format!(
            "dense {:.1}%, 50% DSR {:.1}%, gap {gap:.1} pp (limit 5)",
            100.0 * dense,
            100.0 * sparse
        ),
    })
}
