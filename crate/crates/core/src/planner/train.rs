//! Desk-scale training on a bundled synthetic classification task.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{parse_exec_mode, parse_precision, KeyValues};
use crate::engine::{evaluate, run_microbatched, Batch, EngineConfig, ExecMode, ParamStore};
use crate::graph::NodeKind;
use crate::optim::{clip_global_norm, unscale, LossScaler, Optimizer, UpdateOptions};
use crate::plan::CheckpointStrategy;
use crate::profiler::OptimizerKind;
use crate::sparse::{init_sparse_pattern, rewire, rewire_due, DsrConfig, DsrState, RewireEvent, RewirePeriod};
use crate::{ComputationGraph, DenseTensor, Error, NumericFormat, Result};

/// Seed of the bundled task; fixed so every run sees the same data.
pub const TASK_SEED: u64 = 0x5eed_da7a;

/// Gaussian class templates plus unit noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub train: Batch,
    pub test: Batch,
}

impl SyntheticTask {
    /// `x = signal · template[label] + N(0, 1)` for the graph's single non-token input.
    pub fn new(graph: &ComputationGraph, train: usize, test: usize, signal: f64) -> Result<Self> {
        let classes = match graph.loss().map(|l| &graph.node(l).kind) {
            Some(NodeKind::SoftmaxCrossEntropy { classes }) => *classes,
            _ => return Err(Error::contract("graph has no softmax cross-entropy loss")),
        };
        let inputs: Vec<_> = graph
            .ids()
            .filter(|&i| matches!(graph.node(i).kind, NodeKind::Input { .. }))
            .collect();
        let [input] = inputs[..] else {
            return Err(Error::Unsupported("synthetic task needs exactly one input".into()));
        };
        if graph
            .consumers(input)
            .iter()
            .any(|&c| matches!(graph.node(c).kind, NodeKind::Embedding { .. }))
        {
            return Err(Error::Unsupported(
                "synthetic task does not generate token inputs".into(),
            ));
        }
        let dim = graph.node(input).output.per_example_elements() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(TASK_SEED);
        let normal = Normal::new(0.0, 1.0).map_err(|e| Error::contract(e.to_string()))?;
        let templates: Vec<Vec<f64>> = (0..classes)
            .map(|_| (0..dim).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let mut draw = |n: usize| {
            let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
            let mut x = Vec::with_capacity(n * dim);
            for &l in &labels {
                x.extend(templates[l].iter().map(|t| signal * t + normal.sample(&mut rng)));
            }
            Batch {
                size: n,
                inputs: BTreeMap::from([(input, x)]),
                labels,
            }
        };
        let train = draw(train);
        let test = draw(test);
        Ok(SyntheticTask { train, test })
    }

    /// The test set rounded into `precision`.
    pub fn test_batch(&self, precision: NumericFormat) -> Batch {
        let mut b = self.test.clone();
        for v in b.inputs.values_mut() {
            v.iter_mut().for_each(|z| *z = precision.round(*z));
        }
        b
    }

    /// Training examples at `idx`, rounded into `precision`.
    pub fn gather(&self, graph: &ComputationGraph, idx: &[usize], precision: NumericFormat) -> Batch {
        let inputs = self
            .train
            .inputs
            .iter()
            .map(|(&id, v)| {
                let e = graph.node(id).output.per_example_elements() as usize;
                let x = idx
                    .iter()
                    .flat_map(|&i| v[i * e..(i + 1) * e].iter().map(|&z| precision.round(z)))
                    .collect();
                (id, x)
            })
            .collect();
        Batch {
            size: idx.len(),
            inputs,
            labels: idx.iter().map(|&i| self.train.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub minibatch: usize,
    pub microbatch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub precision: NumericFormat,
    pub accumulator_width: u32,
    pub exec_mode: ExecMode,
    pub strategy: CheckpointStrategy,
    /// 1 trains densely.
    pub density: f64,
    /// Rewire period in updates; 0 disables rewiring.
    pub rewire_every: u64,
    pub prune_fraction: f64,
    pub initial_threshold: f64,
    pub clip: Option<f64>,
    pub upcast: bool,
    pub momentum_rescale: bool,
    /// Updates whose gradients get a non-finite value injected.
    pub inject_overflow: Vec<u64>,
    pub train_examples: usize,
    pub test_examples: usize,
    pub signal: f64,
    /// Updates between evaluations.
    pub eval_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            minibatch: 32,
            microbatch: 32,
            lr: 0.05,
            optimizer: OptimizerKind::SgdNesterov,
            precision: NumericFormat::Fp32,
            accumulator_width: 32,
            exec_mode: ExecMode::Sequential,
            strategy: CheckpointStrategy::None,
            density: 1.0,
            rewire_every: 0,
            prune_fraction: 0.01377866,
            initial_threshold: 0.001,
            clip: None,
            upcast: true,
            momentum_rescale: true,
            inject_overflow: Vec::new(),
            train_examples: 512,
            test_examples: 256,
            signal: 0.6,
            eval_every: 50,
            seed: 0,
        }
    }
}

const TRAIN_KEYS: [&str; 22] = [
    "steps",
    "minibatch",
    "microbatch",
    "lr",
    "optimizer",
    "precision",
    "accumulator_width",
    "exec_mode",
    "strategy",
    "density",
    "rewire_every",
    "prune_fraction",
    "initial_threshold",
    "clip",
    "upcast",
    "momentum_rescale",
    "inject_overflow",
    "train_examples",
    "test_examples",
    "signal",
    "eval_every",
    "seed",
];

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        kv.expect_only(&TRAIN_KEYS)?;
        let d = TrainConfig::default();
        let minibatch = kv.or("minibatch", d.minibatch, "a positive integer")?;
        let cfg = TrainConfig {
            steps: kv.or("steps", d.steps, "a nonnegative integer")?,
            minibatch,
            microbatch: kv.or("microbatch", minibatch, "a positive integer")?,
            lr: kv.or("lr", d.lr, "a positive number")?,
            optimizer: kv
                .get("optimizer")
                .map(OptimizerKind::parse)
                .transpose()?
                .unwrap_or(d.optimizer),
            precision: kv
                .get("precision")
                .map(parse_precision)
                .transpose()?
                .unwrap_or(d.precision),
            accumulator_width: kv.or("accumulator_width", d.accumulator_width, "16 or 32")?,
            exec_mode: kv
                .get("exec_mode")
                .map(parse_exec_mode)
                .transpose()?
                .unwrap_or(d.exec_mode),
            strategy: kv
                .get("strategy")
                .map(CheckpointStrategy::parse)
                .transpose()?
                .unwrap_or(d.strategy),
            density: kv.or("density", d.density, "a fraction in (0, 1]")?,
            rewire_every: kv.or("rewire_every", d.rewire_every, "a nonnegative integer")?,
            prune_fraction: kv.or("prune_fraction", d.prune_fraction, "a fraction in (0, 1)")?,
            initial_threshold: kv.or("initial_threshold", d.initial_threshold, "a positive number")?,
            clip: kv.parsed("clip", "a positive number")?,
            upcast: kv.flag("upcast", d.upcast)?,
            momentum_rescale: kv.flag("momentum_rescale", d.momentum_rescale)?,
            inject_overflow: kv
                .list("inject_overflow")
                .iter()
                .map(|s| {
                    s.parse()
                        .map_err(|_| Error::config(format!("inject_overflow entry `{s}` is not an update index")))
                })
                .collect::<Result<_>>()?,
            train_examples: kv.or("train_examples", d.train_examples, "a positive integer")?,
            test_examples: kv.or("test_examples", d.test_examples, "a positive integer")?,
            signal: kv.or("signal", d.signal, "a number")?,
            eval_every: kv.or("eval_every", d.eval_every, "a positive integer")?,
            seed: kv.or("seed", d.seed, "an unsigned integer")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.minibatch == 0 || self.microbatch == 0 || !self.minibatch.is_multiple_of(self.microbatch) {
            return Err(Error::config(format!(
                "microbatch {} must divide minibatch {}",
                self.microbatch, self.minibatch
            )));
        }
        if self.minibatch > self.train_examples || self.test_examples == 0 {
            return Err(Error::config("minibatch exceeds the training set, or empty test set"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::config(format!("density {} outside (0, 1]", self.density)));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be positive"));
        }
        self.engine().validate()
    }

    fn engine(&self) -> EngineConfig {
        EngineConfig {
            precision: self.precision,
            accumulator_width: self.accumulator_width,
            exec_mode: self.exec_mode,
            strategy: self.strategy,
            rng_seed: self.seed,
            loss_scale: 1.0,
        }
    }

    fn dsr(&self) -> DsrConfig {
        DsrConfig {
            target_prune_fraction: self.prune_fraction,
            initial_threshold: self.initial_threshold,
            schedule: vec![RewirePeriod {
                start: 0,
                end: u64::MAX,
                period: self.rewire_every,
            }],
            ..DsrConfig::wrn()
        }
    }

    fn sparse(&self) -> bool {
        self.density < 1.0
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    Eval {
        step: u64,
        train_loss: Option<f64>,
        test_loss: f64,
        test_accuracy: f64,
    },
    Rewire(RewireEvent),
    LossScale {
        step: u64,
        scale: f64,
        skipped: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub initial_test_loss: f64,
    pub final_test_loss: f64,
    pub final_accuracy: f64,
    pub skipped_steps: u64,
    pub rewires: u64,
    /// Largest activation peak seen by the engine over all steps.
    pub peak_activation_bytes: u64,
    /// Stored parameter values at the end; masked tensors count their mask.
    pub nonzeros: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<LogRecord>,
    pub summary: TrainSummary,
}

impl TrainOutcome {
    pub fn jsonl(&self) -> String {
        self.log
            .iter()
            .map(|r| serde_json::to_string(r).unwrap_or_default() + "\n")
            .collect()
    }
}

/// State visible to an observer after each update.
pub struct StepView<'a> {
    pub step: u64,
    pub params: &'a ParamStore,
    pub optimizer: &'a Optimizer,
    pub dsr: Option<&'a DsrState>,
    pub skipped: bool,
    pub rewired: Option<&'a RewireEvent>,
}

pub fn train(graph: &ComputationGraph, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(graph, cfg, |_| Ok(()))
}

/// Trains and calls `observe` after every update.
pub fn train_with(
    graph: &ComputationGraph,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&StepView) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let task = SyntheticTask::new(graph, cfg.train_examples, cfg.test_examples, cfg.signal)?;
    let test = task.test_batch(cfg.precision);
    let fp16 = cfg.precision == NumericFormat::Fp16;
    let mut params = ParamStore::init(graph, cfg.precision, fp16, cfg.seed)?;
    let dsr_cfg = cfg.dsr();
    let mut dsr = if cfg.sparse() {
        let s = init_sparse_pattern(graph, cfg.density, cfg.initial_threshold, cfg.seed)?;
        params.set_masks(s.masks.clone())?;
        Some(s)
    } else {
        None
    };
    let mut optimizer = match cfg.optimizer {
        OptimizerKind::SgdNesterov => Optimizer::sgd(&params.values),
        OptimizerKind::Adam => Optimizer::adam(&params.values),
    };
    let opts = UpdateOptions {
        upcast: cfg.upcast,
        momentum_rescale: cfg.momentum_rescale,
    };
    let mut scaler = fp16.then(LossScaler::default);
    let mut log = Vec::new();
    let initial = evaluate(graph, &params, &test, cfg.precision)?;
    log.push(LogRecord::Eval {
        step: 0,
        train_loss: None,
        test_loss: initial.loss,
        test_accuracy: initial.accuracy,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..cfg.train_examples).collect();
    let mut cursor = order.len();
    let mut skipped_steps = 0;
    let mut rewires = 0;
    let mut peak = 0;
    let mut last = initial;
    for step in 1..=cfg.steps {
        if cursor + cfg.minibatch > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = task.gather(graph, &order[cursor..cursor + cfg.minibatch], cfg.precision);
        cursor += cfg.minibatch;
        let mut ecfg = cfg.engine();
        ecfg.loss_scale = scaler.as_ref().map_or(1.0, |s| s.scale);
        let running = params.running.clone();
        let r = run_microbatched(graph, &mut params, &batch, cfg.microbatch, &ecfg)?;
        peak = peak.max(r.activation.total());
        let mut grads = r.grads.grads;
        let mut finite = unscale(&mut grads, ecfg.loss_scale) && r.loss.is_finite();
        if cfg.inject_overflow.contains(&step) {
            if let Some(g) = grads.first_mut() {
                g.set(0, f64::INFINITY);
            }
            finite = false;
        }
        let skipped = match scaler.as_mut() {
            Some(s) => {
                let at_floor = s.scale <= s.min_scale;
                let before = s.scale;
                let skip = s.update(!finite);
                if skip && at_floor {
                    return Err(Error::Diverged {
                        step,
                        message: format!("non-finite gradients with loss scale at its floor {before}"),
                    });
                }
                if skip || s.scale != before {
                    log.push(LogRecord::LossScale {
                        step,
                        scale: s.scale,
                        skipped: skip,
                    });
                }
                skip
            }
            None if !finite => {
                return Err(Error::Diverged {
                    step,
                    message: format!("loss {} or gradients are not finite", r.loss),
                })
            }
            None => false,
        };
        if skipped {
            params.running = running;
            skipped_steps += 1;
        } else {
            if let Some(c) = cfg.clip {
                clip_global_norm(&mut grads, c);
            }
            let grads: Vec<DenseTensor> = grads
                .iter()
                .zip(&params.values)
                .map(|(g, p)| g.cast(p.format()))
                .collect();
            let masks = params.masks.clone();
            optimizer.step(&mut params.values, &grads, &masks, cfg.lr, opts)?;
        }
        let mut event = None;
        if let Some(state) = dsr.as_mut() {
            if rewire_due(step, &dsr_cfg) {
                let e = rewire(&mut params, &mut optimizer, state, &dsr_cfg, step, cfg.seed ^ step)?;
                log.push(LogRecord::Rewire(e.clone()));
                rewires += 1;
                event = Some(e);
            }
        }
        observe(&StepView {
            step,
            params: &params,
            optimizer: &optimizer,
            dsr: dsr.as_ref(),
            skipped,
            rewired: event.as_ref(),
        })?;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            last = evaluate(graph, &params, &test, cfg.precision)?;
            log.push(LogRecord::Eval {
                step,
                train_loss: Some(r.loss),
                test_loss: last.loss,
                test_accuracy: last.accuracy,
            });
        }
    }
    Ok(TrainOutcome {
        log,
        summary: TrainSummary {
            initial_test_loss: initial.loss,
            final_test_loss: last.loss,
            final_accuracy: last.accuracy,
            skipped_steps,
            rewires,
            peak_activation_bytes: peak,
            nonzeros: params.nnz() as u64,
        },
    })
}
