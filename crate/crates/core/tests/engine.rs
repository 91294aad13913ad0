use lowmem_core::engine::ops::{self, Backward, EvalCtx, Mode, Numerics, Saved};
use lowmem_core::engine::{
    execute, run_microbatched, run_step, Batch, Bitmask, EngineConfig, ExecMode, GradientSet, NodeParams, ParamStore,
};
use lowmem_core::graph::{build_desk_cnn, ComputationGraph, GraphBuilder, NodeId, NodeKind};
use lowmem_core::plan::{build_plan, schedule, CheckpointStrategy, Event};
use lowmem_core::profiler::{activation_memory, flops, OptimizerKind, TrainingConfig};
use lowmem_core::{DenseTensor, Error, NumericFormat, SparsityMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const F64: NumericFormat = NumericFormat::Fp64;
const F32: NumericFormat = NumericFormat::Fp32;
const F16: NumericFormat = NumericFormat::Fp16;

fn linear(d_in: usize, d_out: usize) -> NodeKind {
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

/// `input -> body -> reshape -> linear -> softmax loss`
fn harness(input: Vec<usize>, body: impl FnOnce(&mut GraphBuilder, NodeId) -> NodeId) -> ComputationGraph {
    let mut b = GraphBuilder::new("probe");
    let x = b.add("x", NodeKind::Input { shape: input }, &[]).unwrap();
    let h = body(&mut b, x);
    let n = b.output(h).per_example_elements() as usize;
    let flat = b.add("flat", NodeKind::Reshape { shape: vec![n] }, &[h]).unwrap();
    let fc = b.add("head", linear(n, 3), &[flat]).unwrap();
    let loss = b
        .add("loss", NodeKind::SoftmaxCrossEntropy { classes: 3 }, &[fc])
        .unwrap();
    b.loss(loss);
    b.build().unwrap()
}

fn probe_graphs() -> Vec<(&'static str, ComputationGraph)> {
    vec![
        (
            "conv2d",
            harness(vec![2, 5, 5], |b, x| b.add("c", conv(2, 3, 3, 2, 1), &[x]).unwrap()),
        ),
        (
            "linear",
            harness(vec![2, 6], |b, x| b.add("l", linear(6, 4), &[x]).unwrap()),
        ),
        (
            "batchnorm",
            harness(vec![2, 3, 3], |b, x| {
                let c = b.add("c", conv(2, 2, 1, 1, 0), &[x]).unwrap();
                b.add("bn", NodeKind::BatchNorm { c: 2 }, &[c]).unwrap()
            }),
        ),
        (
            "layernorm",
            harness(vec![2, 6], |b, x| {
                let l = b.add("l", linear(6, 6), &[x]).unwrap();
                b.add("ln", NodeKind::LayerNorm { d: 6 }, &[l]).unwrap()
            }),
        ),
        (
            "relu",
            harness(vec![6], |b, x| {
                let l = b.add("l", linear(6, 5), &[x]).unwrap();
                b.add("r", NodeKind::ReLU, &[l]).unwrap()
            }),
        ),
        (
            "add",
            harness(vec![6], |b, x| {
                let l1 = b.add("l1", linear(6, 4), &[x]).unwrap();
                let l2 = b.add("l2", linear(6, 4), &[x]).unwrap();
                b.add("a", NodeKind::Add, &[l1, l2]).unwrap()
            }),
        ),
        (
            "transpose",
            harness(vec![3, 4], |b, x| {
                let l = b.add("l", linear(4, 5), &[x]).unwrap();
                let t = b.add("t", NodeKind::Transpose, &[l]).unwrap();
                b.add("l2", linear(3, 2), &[t]).unwrap()
            }),
        ),
        (
            "avgpool",
            harness(vec![2, 4, 4], |b, x| {
                let c = b.add("c", conv(2, 2, 1, 1, 0), &[x]).unwrap();
                b.add("p", NodeKind::AvgPool { window: 2 }, &[c]).unwrap()
            }),
        ),
        (
            "subsample_pad",
            harness(vec![2, 4, 4], |b, x| {
                let c = b.add("c", conv(2, 2, 1, 1, 0), &[x]).unwrap();
                b.add("s", NodeKind::SubsamplePad { stride: 2, c_out: 3 }, &[c])
                    .unwrap()
            }),
        ),
        (
            "embedding",
            harness(vec![1], |b, x| {
                b.add("e", NodeKind::Embedding { vocab: 5, d: 4 }, &[x]).unwrap()
            }),
        ),
    ]
}

fn fp64() -> EngineConfig {
    EngineConfig {
        precision: F64,
        ..EngineConfig::default()
    }
}

fn loss_at(g: &ComputationGraph, p: &ParamStore, batch: &Batch) -> f64 {
    let mut q = p.clone();
    run_step(g, &mut q, batch, &fp64()).unwrap().loss
}

/// Non-trivial normalization parameters so their gradients are exercised.
fn jitter_norms(g: &ComputationGraph, p: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (i, spec) in g.params().iter().enumerate() {
        if spec.is_norm() || spec.name.ends_with("bias") {
            p.values[i].map_inplace(|_, v| v + rng.gen_range(-0.5..0.5));
        }
    }
}

#[test]
fn every_executable_kind_matches_central_differences() {
    let h = 1e-5;
    for (kind, g) in probe_graphs() {
        let batch = Batch::random(&g, 4, F64, 11).unwrap();
        let mut p = ParamStore::init(&g, F64, false, 5).unwrap();
        jitter_norms(&g, &mut p, 3);
        let analytic = run_step(&g, &mut p.clone(), &batch, &fp64()).unwrap().grads;
        let mut worst: f64 = 0.0;
        for (i, t) in p.values.iter().enumerate() {
            for j in 0..t.len() {
                let mut plus = p.clone();
                plus.values[i].set(j, t.data()[j] + h);
                let mut minus = p.clone();
                minus.values[i].set(j, t.data()[j] - h);
                let fd = (loss_at(&g, &plus, &batch) - loss_at(&g, &minus, &batch)) / (2.0 * h);
                let an = analytic.grads[i].data()[j];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                worst = worst.max(rel);
            }
        }
        assert!(worst <= 1e-6, "{kind}: worst relative error {worst:e}");
    }
}

fn single_ctx(batch: usize, labels: &[usize]) -> EvalCtx<'_> {
    EvalCtx {
        batch,
        groups: 1,
        mode: Mode::Train,
        num: Numerics::new(F64, 32),
        labels,
    }
}

fn relu_graph() -> ComputationGraph {
    harness(vec![3], |b, x| b.add("r", NodeKind::ReLU, &[x]).unwrap())
}

#[test]
fn relu_clamps_negatives() {
    let g = relu_graph();
    let r = g.find("r").unwrap();
    let f = ops::eval_node(
        &g,
        r,
        &[&[-1.0, 0.0, 2.0]],
        NodeParams::default(),
        &single_ctx(1, &[]),
        None,
        None,
    )
    .unwrap();
    assert_eq!(f.out, vec![0.0, 0.0, 2.0]);
}

#[test]
fn relu_gradient_from_bitmask_equals_gradient_from_input() {
    let g = relu_graph();
    let r = g.find("r").unwrap();
    let x = [-1.5, 0.0, 2.0, 0.25, -0.1, 3.0];
    let dy = [0.3, -0.7, 1.1, 2.0, 5.0, -4.0];
    let ctx = single_ctx(2, &[]);
    let bits = Bitmask::positive(&x);
    let via_bits = ops::grad_node(
        &g,
        r,
        &[Some(Saved::Bits(&bits))],
        None,
        &dy,
        NodeParams::default(),
        &ctx,
        &[true],
    )
    .unwrap();
    let via_full = ops::grad_node(
        &g,
        r,
        &[Some(Saved::Full(&x))],
        None,
        &dy,
        NodeParams::default(),
        &ctx,
        &[true],
    )
    .unwrap();
    assert_eq!(via_bits, via_full);
    assert_eq!(
        via_bits.inputs[0].as_deref(),
        Some(&[0.0, 0.0, 1.1, 2.0, 0.0, -4.0][..])
    );
}

#[test]
fn relu_backward_without_payload_is_detected() {
    let g = relu_graph();
    let r = g.find("r").unwrap();
    let err = ops::grad_node(
        &g,
        r,
        &[None],
        None,
        &[1.0; 3],
        NodeParams::default(),
        &single_ctx(1, &[]),
        &[true],
    );
    assert!(matches!(err, Err(Error::MissingPayload { .. })));
}

#[test]
fn add_passes_upstream_gradient_to_both_inputs() {
    let g = &probe_graphs()[5].1;
    let a = g.find("a").unwrap();
    let dy = [0.5, -1.25, 3.0, 7.0];
    let got = ops::grad_node(
        g,
        a,
        &[None, None],
        None,
        &dy,
        NodeParams::default(),
        &single_ctx(1, &[]),
        &[true, true],
    )
    .unwrap();
    assert_eq!(
        got,
        Backward {
            inputs: vec![Some(dy.to_vec()), Some(dy.to_vec())],
            weight: None,
            bias: None,
        }
    );
}

#[test]
fn batchnorm_of_constant_batch_is_shift() {
    let g = &probe_graphs()[2].1;
    let bn = g.find("bn").unwrap();
    let gamma = DenseTensor::from_vec(&[2], F64, vec![2.5, -1.0]).unwrap();
    let beta = DenseTensor::from_vec(&[2], F64, vec![0.75, -3.0]).unwrap();
    let p = NodeParams {
        weight: Some(&gamma),
        bias: Some(&beta),
        mask: None,
    };
    let x = vec![4.0; 2 * 2 * 9];
    let f = ops::eval_node(g, bn, &[&x], p, &single_ctx(2, &[]), None, None).unwrap();
    for (i, v) in f.out.iter().enumerate() {
        let ch = (i / 9) % 2;
        assert_eq!(*v, beta.data()[ch]);
    }
}

#[test]
fn linear_matches_triple_loop() {
    let g = harness(vec![3], |b, x| b.add("l", linear(3, 4), &[x]).unwrap());
    let l = g.find("l").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let bias: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wt = DenseTensor::from_vec(&[4, 3], F64, w.clone()).unwrap();
    let bt = DenseTensor::from_vec(&[4], F64, bias.clone()).unwrap();
    let p = NodeParams {
        weight: Some(&wt),
        bias: Some(&bt),
        mask: None,
    };
    let f = ops::eval_node(&g, l, &[&x], p, &single_ctx(2, &[]), None, None).unwrap();
    for n in 0..2 {
        for o in 0..4 {
            let mut s = bias[o];
            for i in 0..3 {
                s += w[o * 3 + i] * x[n * 3 + i];
            }
            assert!((f.out[n * 4 + o] - s).abs() <= 1e-12);
        }
    }
}

#[test]
fn cost_only_nodes_are_rejected() {
    let g = lowmem_core::graph::build_dc_transformer_cost(&Default::default()).unwrap();
    let mut p = ParamStore {
        values: vec![],
        masks: vec![],
        running: Default::default(),
    };
    let batch = Batch {
        size: 1,
        inputs: Default::default(),
        labels: vec![0],
    };
    let err = run_step(&g, &mut p, &batch, &EngineConfig::default());
    assert!(matches!(err, Err(Error::Unsupported(_))));
}

fn desk(bn: bool) -> ComputationGraph {
    build_desk_cnn(&[4, 6], 5, bn).unwrap()
}

const STRATEGIES: [CheckpointStrategy; 7] = [
    CheckpointStrategy::None,
    CheckpointStrategy::NoBn,
    CheckpointStrategy::EveryM(2),
    CheckpointStrategy::ResidualM(1),
    CheckpointStrategy::ResidualM(2),
    CheckpointStrategy::ResidualMStar(1),
    CheckpointStrategy::ResidualMStar(2),
];

#[test]
fn checkpointing_is_bit_exact_and_matches_profiler() {
    for bn in [true, false] {
        let g = desk(bn);
        let batch = Batch::random(&g, 6, F32, 2).unwrap();
        let base_params = ParamStore::init(&g, F32, false, 4).unwrap();
        let reference = run_step(&g, &mut base_params.clone(), &batch, &EngineConfig::default()).unwrap();
        assert_eq!(reference.recompute_nodes, 0);
        for s in STRATEGIES {
            let cfg = EngineConfig {
                strategy: s,
                ..EngineConfig::default()
            };
            let r = run_step(&g, &mut base_params.clone(), &batch, &cfg).unwrap();
            assert!(r.grads.bit_identical(&reference.grads), "{s} changed gradients");
            assert_eq!(r.loss.to_bits(), reference.loss.to_bits());
            let mut tc = TrainingConfig::baseline(F32, 6, OptimizerKind::SgdNesterov);
            tc.strategy = s;
            assert_eq!(r.activation, activation_memory(&g, &tc, s).unwrap(), "{s} bytes");
            assert_eq!(
                r.recompute_flops,
                flops(&g, &tc, s).unwrap().recompute_flops,
                "{s} flops"
            );
        }
    }
}

#[test]
fn removing_a_required_payload_is_never_silent() {
    let g = desk(true);
    let batch = Batch::random(&g, 4, F32, 8).unwrap();
    let params = ParamStore::init(&g, F32, false, 1).unwrap();
    for s in STRATEGIES {
        let cfg = EngineConfig {
            strategy: s,
            ..EngineConfig::default()
        };
        let events = schedule(&g, &build_plan(&g, s).unwrap());
        let good = execute(&g, &mut params.clone(), &batch, &cfg, 1, &events).unwrap();
        let mut detected = 0;
        for (k, ev) in events.iter().enumerate() {
            if !matches!(ev, Event::Store { .. } | Event::StoreExtras { .. }) {
                continue;
            }
            let mut cut = events.clone();
            cut.remove(k);
            match execute(&g, &mut params.clone(), &batch, &cfg, 1, &cut) {
                Err(Error::MissingPayload { .. }) => detected += 1,
                Err(e) => panic!("{s}: unexpected error {e}"),
                Ok(r) => assert!(
                    r.grads.bit_identical(&good.grads),
                    "{s}: silent change after dropping {ev:?}"
                ),
            }
        }
        assert!(detected > 0, "{s}: no payload turned out to be required");
    }
}

#[test]
fn one_microbatch_equals_run_step() {
    let g = desk(true);
    let batch = Batch::random(&g, 4, F32, 3).unwrap();
    let params = ParamStore::init(&g, F32, false, 2).unwrap();
    let direct = run_step(&g, &mut params.clone(), &batch, &EngineConfig::default()).unwrap();
    for mode in [ExecMode::Joint, ExecMode::Sequential] {
        let cfg = EngineConfig {
            exec_mode: mode,
            ..EngineConfig::default()
        };
        let m = run_microbatched(&g, &mut params.clone(), &batch, 4, &cfg).unwrap();
        assert!(m.grads.bit_identical(&direct.grads));
    }
}

#[test]
fn microbatching_without_normalization_matches_full_batch() {
    let g = desk(false);
    let batch = Batch::random(&g, 12, F64, 6).unwrap();
    let params = ParamStore::init(&g, F64, false, 2).unwrap();
    let full = run_step(&g, &mut params.clone(), &batch, &fp64()).unwrap();
    for mb in [1, 2, 3, 4, 6] {
        let m = run_microbatched(&g, &mut params.clone(), &batch, mb, &fp64()).unwrap();
        let rel = full.grads.max_rel_diff(&m.grads);
        assert!(rel <= 1e-10, "microbatch {mb}: {rel:e}");
    }
}

#[test]
fn joint_and_sequential_agree_with_batchnorm() {
    let g = desk(true);
    let batch = Batch::random(&g, 8, F32, 12).unwrap();
    let params = ParamStore::init(&g, F32, false, 2).unwrap();
    for mb in [2, 4] {
        let mut pj = params.clone();
        let mut ps = params.clone();
        let joint = EngineConfig {
            exec_mode: ExecMode::Joint,
            ..EngineConfig::default()
        };
        let j = run_microbatched(&g, &mut pj, &batch, mb, &joint).unwrap();
        let s = run_microbatched(&g, &mut ps, &batch, mb, &EngineConfig::default()).unwrap();
        assert!(j.grads.bit_identical(&s.grads), "microbatch {mb}");
        assert_eq!(pj.running, ps.running);
        let full = run_step(&g, &mut params.clone(), &batch, &EngineConfig::default()).unwrap();
        assert!(!full.grads.bit_identical(&s.grads));
    }
}

#[test]
fn nondividing_microbatch_is_rejected() {
    let g = desk(false);
    let batch = Batch::random(&g, 6, F32, 1).unwrap();
    let mut p = ParamStore::init(&g, F32, false, 2).unwrap();
    let err = run_microbatched(&g, &mut p, &batch, 4, &EngineConfig::default());
    assert!(matches!(err, Err(Error::Config(_))));
}

fn random_masks(g: &ComputationGraph, density: f64, seed: u64) -> Vec<Option<SparsityMask>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    g.params()
        .iter()
        .map(|p| {
            p.sparsifiable.then(|| {
                let bits = (0..p.numel()).map(|_| rng.gen_bool(density)).collect();
                SparsityMask::from_bits(&p.shape, bits).unwrap()
            })
        })
        .collect()
}

#[test]
fn masked_positions_get_zero_gradient() {
    let g = desk(true);
    let batch = Batch::random(&g, 4, F32, 5).unwrap();
    let mut p = ParamStore::init(&g, F32, false, 2).unwrap();
    p.set_masks(random_masks(&g, 0.4, 3)).unwrap();
    for s in STRATEGIES {
        let cfg = EngineConfig {
            strategy: s,
            ..EngineConfig::default()
        };
        let r = run_step(&g, &mut p.clone(), &batch, &cfg).unwrap();
        for (grad, mask) in r.grads.grads.iter().zip(&p.masks) {
            if let Some(m) = mask {
                for (i, v) in grad.data().iter().enumerate() {
                    if !m.get(i) {
                        assert_eq!(*v, 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn sixteen_bit_accumulation_differs_but_stays_bounded() {
    let g = desk(true);
    let batch = Batch::random(&g, 8, F16, 21).unwrap();
    let params = ParamStore::init(&g, F16, true, 2).unwrap();
    let seq = EngineConfig {
        precision: F16,
        accumulator_width: 16,
        ..EngineConfig::default()
    };
    let joint = EngineConfig {
        precision: F16,
        accumulator_width: 32,
        exec_mode: ExecMode::Joint,
        ..EngineConfig::default()
    };
    let a = run_microbatched(&g, &mut params.clone(), &batch, 2, &seq).unwrap();
    let b = run_microbatched(&g, &mut params.clone(), &batch, 2, &joint).unwrap();
    let rel = per_tensor_rel(&b.grads, &a.grads);
    assert!(rel > 0.0);
    let reductions = longest_reduction(&g, 2) + batch.size / 2;
    assert!(
        rel <= reductions as f64 * 2f64.powi(-8),
        "{rel} over {reductions} reductions"
    );
}

/// Worst per-tensor relative difference (max |a−b| over max |a|).
fn per_tensor_rel(a: &GradientSet, b: &GradientSet) -> f64 {
    a.grads
        .iter()
        .zip(&b.grads)
        .map(|(x, y)| {
            let d = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max);
            let s = x.data().iter().map(|p| p.abs()).fold(0.0, f64::max);
            if s == 0.0 {
                0.0
            } else {
                d / s
            }
        })
        .fold(0.0, f64::max)
}

/// Longest chain of additions inside one parameter-gradient reduction for a microbatch.
fn longest_reduction(g: &ComputationGraph, microbatch: usize) -> usize {
    g.ids()
        .map(|id| match g.node(id).kind {
            NodeKind::Conv2D { .. } | NodeKind::BatchNorm { .. } => {
                let d = &g.node(id).output.dims;
                microbatch * d[1] * d[2]
            }
            _ => microbatch,
        })
        .max()
        .unwrap_or(0)
}

#[test]
fn loss_scale_multiplies_gradients() {
    let g = desk(false);
    let batch = Batch::random(&g, 4, F64, 5).unwrap();
    let p = ParamStore::init(&g, F64, false, 2).unwrap();
    let one = run_step(&g, &mut p.clone(), &batch, &fp64()).unwrap();
    let scaled = EngineConfig {
        loss_scale: 1024.0,
        ..fp64()
    };
    let big = run_step(&g, &mut p.clone(), &batch, &scaled).unwrap();
    for (a, b) in one.grads.grads.iter().zip(&big.grads.grads) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x * 1024.0, *y);
        }
    }
}

#[test]
fn joint_mode_rejects_sixteen_bit_accumulator() {
    let cfg = EngineConfig {
        exec_mode: ExecMode::Joint,
        accumulator_width: 16,
        ..EngineConfig::default()
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}
