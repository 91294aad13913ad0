//! Desk-scale reverse-mode execution of checkpoint schedules.
//!
//! The executor interprets the same event stream the profiler replays, holding real
//! payloads, so observed bytes and recompute work can be compared with the static model.

pub mod ops;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ComputationGraph, NodeId, NodeKind, ParamRole};
use crate::plan::{build_plan, requirements, requires_grad, schedule, CheckpointStrategy, Event, Level};
use crate::profiler::ActivationReport;
use crate::tensor::{DenseTensor, NumericFormat, SparsityMask};

pub use ops::{Bitmask, Mode, NodeParams, NormStats, Numerics, RunningStats};
use ops::{EvalCtx, Saved};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    /// The whole minibatch in one pass, with per-group normalization statistics.
    Joint,
    /// One pass per microbatch, gradients summed in an accumulation buffer.
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub precision: NumericFormat,
    /// Bits of the reduction and gradient accumulators: 16 or 32.
    pub accumulator_width: u32,
    pub exec_mode: ExecMode,
    pub strategy: CheckpointStrategy,
    pub rng_seed: u64,
    /// Multiplier applied to the loss gradient before backpropagation.
    pub loss_scale: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            precision: NumericFormat::Fp32,
            accumulator_width: 32,
            exec_mode: ExecMode::Sequential,
            strategy: CheckpointStrategy::None,
            rng_seed: 0,
            loss_scale: 1.0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.accumulator_width, 16 | 32) {
            return Err(Error::config(format!(
                "accumulator width must be 16 or 32, got {}",
                self.accumulator_width
            )));
        }
        if self.exec_mode == ExecMode::Joint && self.accumulator_width != 32 {
            return Err(Error::config("joint execution always accumulates in 32 bits"));
        }
        if !(self.loss_scale.is_finite() && self.loss_scale > 0.0) {
            return Err(Error::config(format!(
                "loss scale {} must be positive and finite",
                self.loss_scale
            )));
        }
        self.strategy.validate()
    }

    pub fn numerics(&self) -> Numerics {
        Numerics::new(self.precision, self.accumulator_width)
    }
}

/// Parameter values (ordered like `ComputationGraph::params`), sparsity masks and
/// batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub values: Vec<DenseTensor>,
    pub masks: Vec<Option<SparsityMask>>,
    pub running: BTreeMap<NodeId, RunningStats>,
}

impl ParamStore {
    /// He-normal weights, N(0, 1/d) embeddings, unit scales, zero biases and shifts.
    /// Normalization parameters use FP32 when `norm_fp32` is set.
    pub fn init(graph: &ComputationGraph, precision: NumericFormat, norm_fp32: bool, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(graph.params().len());
        for p in graph.params() {
            let fmt = if p.is_norm() && norm_fp32 {
                NumericFormat::Fp32
            } else {
                precision
            };
            let n = p.numel() as usize;
            let data: Vec<f64> = match p.role {
                ParamRole::Weight | ParamRole::Embedding => {
                    let fan_in = match p.role {
                        ParamRole::Weight => p.shape[1..].iter().product::<usize>(),
                        _ => p.shape[1],
                    };
                    let gain = if p.role == ParamRole::Weight { 2.0 } else { 1.0 };
                    let dist = Normal::new(0.0, (gain / fan_in as f64).sqrt())
                        .map_err(|e| Error::contract(format!("bad init scale: {e}")))?;
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
                ParamRole::NormScale => vec![1.0; n],
                ParamRole::Bias | ParamRole::NormShift => vec![0.0; n],
            };
            values.push(DenseTensor::from_vec(&p.shape, fmt, data)?);
        }
        let running = graph
            .ids()
            .filter_map(|id| match graph.node(id).kind {
                NodeKind::BatchNorm { c } => Some((id, RunningStats::new(c))),
                _ => None,
            })
            .collect();
        Ok(ParamStore {
            values,
            masks: vec![None; graph.params().len()],
            running,
        })
    }

    /// Installs masks and zeroes the masked-out values.
    pub fn set_masks(&mut self, masks: Vec<Option<SparsityMask>>) -> Result<()> {
        if masks.len() != self.values.len() {
            return Err(Error::contract(format!(
                "{} masks for {} parameters",
                masks.len(),
                self.values.len()
            )));
        }
        for (v, m) in self.values.iter_mut().zip(&masks) {
            if let Some(m) = m {
                v.apply_mask(m)?;
            }
        }
        self.masks = masks;
        Ok(())
    }

    pub fn node_params<'a>(&'a self, graph: &ComputationGraph, id: NodeId) -> NodeParams<'a> {
        let mut p = NodeParams::default();
        for (i, spec) in graph.params_of(id) {
            match spec.role {
                ParamRole::Weight | ParamRole::Embedding | ParamRole::NormScale => {
                    p.weight = Some(&self.values[i]);
                    p.mask = self.masks[i].as_ref();
                }
                ParamRole::Bias | ParamRole::NormShift => p.bias = Some(&self.values[i]),
            }
        }
        p
    }

    /// Stored nonzero weights across masked tensors, or all elements of unmasked ones.
    pub fn nnz(&self) -> usize {
        self.values
            .iter()
            .zip(&self.masks)
            .map(|(v, m)| m.as_ref().map_or(v.len(), |m| m.nnz()))
            .sum()
    }
}

/// Input values per `Input` node (laid out `[size, dims...]`) and one label per example.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub inputs: BTreeMap<NodeId, Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Batch {
    /// Examples `start..start + len`.
    pub fn slice(&self, graph: &ComputationGraph, start: usize, len: usize) -> Result<Batch> {
        if start + len > self.size {
            return Err(Error::contract(format!(
                "slice {start}+{len} beyond batch of {}",
                self.size
            )));
        }
        let inputs = self
            .inputs
            .iter()
            .map(|(&id, v)| {
                let e = graph.node(id).output.per_example_elements() as usize;
                (id, v[start * e..(start + len) * e].to_vec())
            })
            .collect();
        Ok(Batch {
            size: len,
            inputs,
            labels: self.labels[start..start + len].to_vec(),
        })
    }

    /// Standard-normal inputs (uniform token ids for inputs feeding an embedding)
    /// and uniform labels, rounded into `precision`.
    pub fn random(graph: &ComputationGraph, size: usize, precision: NumericFormat, seed: u64) -> Result<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = match graph.loss().map(|l| &graph.node(l).kind) {
            Some(NodeKind::SoftmaxCrossEntropy { classes }) => *classes,
            _ => return Err(Error::contract("graph has no softmax cross-entropy loss")),
        };
        let mut inputs = BTreeMap::new();
        for id in graph.ids() {
            if let NodeKind::Input { .. } = graph.node(id).kind {
                let e = graph.node(id).output.per_example_elements() as usize * size;
                let vocab = graph.consumers(id).iter().find_map(|&c| match graph.node(c).kind {
                    NodeKind::Embedding { vocab, .. } => Some(vocab),
                    _ => None,
                });
                let v: Vec<f64> = match vocab {
                    Some(vocab) => (0..e).map(|_| rng.gen_range(0..vocab) as f64).collect(),
                    None => {
                        let normal = Normal::new(0.0, 1.0).map_err(|e| Error::contract(e.to_string()))?;
                        (0..e).map(|_| precision.round(normal.sample(&mut rng))).collect()
                    }
                };
                inputs.insert(id, v);
            }
        }
        let labels = (0..size).map(|_| rng.gen_range(0..classes)).collect();
        Ok(Batch { size, inputs, labels })
    }
}

/// One gradient per parameter, zero wherever the parameter's mask is off.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub grads: Vec<DenseTensor>,
}

impl GradientSet {
    pub fn zeros(params: &ParamStore, format: NumericFormat) -> Self {
        GradientSet {
            grads: params
                .values
                .iter()
                .map(|v| DenseTensor::zeros(v.shape(), format))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(DenseTensor::all_finite)
    }

    /// Largest elementwise |a − b| divided by the largest |a| (0 when both are zero).
    pub fn max_rel_diff(&self, other: &GradientSet) -> f64 {
        let mut diff: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for (a, b) in self.grads.iter().zip(&other.grads) {
            for (x, y) in a.data().iter().zip(b.data()) {
                diff = diff.max((x - y).abs());
                scale = scale.max(x.abs());
            }
        }
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }

    /// Bitwise equality of every value.
    pub fn bit_identical(&self, other: &GradientSet) -> bool {
        self.grads.len() == other.grads.len()
            && self.grads.iter().zip(&other.grads).all(|(a, b)| {
                a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub loss: f64,
    pub grads: GradientSet,
    pub activation: ActivationReport,
    pub recompute_nodes: u64,
    pub recompute_flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
enum Payload {
    Full(Vec<f64>),
    Bits(Bitmask),
}

impl Payload {
    fn bytes(&self, element_bytes: u64) -> u64 {
        match self {
            Payload::Full(v) => v.len() as u64 * element_bytes,
            Payload::Bits(b) => b.bytes(),
        }
    }

    fn saved(&self) -> Saved<'_> {
        match self {
            Payload::Full(v) => Saved::Full(v),
            Payload::Bits(b) => Saved::Bits(b),
        }
    }
}

struct Exec<'a> {
    graph: &'a ComputationGraph,
    params: &'a mut ParamStore,
    batch: &'a Batch,
    ctx: EvalCtx<'a>,
    loss_scale: f64,
    rg: Vec<bool>,
    work: Vec<Option<Vec<f64>>>,
    work_stats: Vec<Option<NormStats>>,
    store: Vec<Option<Payload>>,
    extras: Vec<Option<NormStats>>,
    grads: Vec<Option<Vec<f64>>>,
    partials: Vec<Option<Vec<Vec<f64>>>>,
    stored: u64,
    loss: Option<f64>,
    best: Option<u64>,
    result_act: ActivationReport,
    recompute_nodes: u64,
    recompute_flops: u64,
}

impl Exec<'_> {
    fn missing(&self, id: NodeId, what: impl Into<String>) -> Error {
        Error::MissingPayload {
            node: self.graph.node(id).name.clone(),
            what: what.into(),
        }
    }

    fn value(&self, t: NodeId, reader: NodeId) -> Result<&[f64]> {
        if let Some(v) = &self.work[t.0] {
            return Ok(v);
        }
        match &self.store[t.0] {
            Some(Payload::Full(v)) => Ok(v),
            _ => Err(self.missing(t, format!("value needed to execute `{}`", self.graph.node(reader).name))),
        }
    }

    fn compute(&mut self, id: NodeId, recompute: bool) -> Result<()> {
        let g = self.graph;
        let node = g.node(id);
        if recompute {
            self.recompute_nodes += 1;
        }
        if let NodeKind::Input { .. } = node.kind {
            let v = self
                .batch
                .inputs
                .get(&id)
                .ok_or_else(|| Error::contract(format!("batch has no values for input `{}`", node.name)))?;
            self.work[id.0] = Some(v.clone());
            return Ok(());
        }
        let cached = if recompute && node.kind.is_norm() {
            Some(
                self.extras[id.0]
                    .as_ref()
                    .ok_or_else(|| self.missing(id, "cached normalization statistics"))?,
            )
        } else {
            None
        };
        let inputs = node
            .inputs
            .iter()
            .map(|&i| self.value(i, id))
            .collect::<Result<Vec<_>>>()?;
        let f = ops::eval_node(
            g,
            id,
            &inputs,
            self.params.node_params(g, id),
            &self.ctx,
            cached,
            self.params.running.get(&id),
        )?;
        if recompute {
            self.recompute_flops += f.flops;
        } else {
            if let Some(rs) = self.params.running.get_mut(&id) {
                for (m, v, n) in &f.moments {
                    rs.update(m, v, *n, self.ctx.num);
                }
            }
            if Some(id) == g.loss() {
                self.loss = f.out.first().copied();
            }
        }
        self.work[id.0] = Some(f.out);
        self.work_stats[id.0] = f.stats;
        Ok(())
    }

    /// Rebuilds a cheap tensor without touching the workspace.
    fn rebuild(&mut self, t: NodeId) -> Result<Vec<f64>> {
        let g = self.graph;
        let node = g.node(t);
        match node.kind {
            NodeKind::ReLU => {
                let x = self.rebuild(node.inputs[0])?;
                let out: Vec<f64> = x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                self.recompute_flops += out.len() as u64;
                Ok(out)
            }
            _ => {
                let x = match &self.store[node.inputs[0].0] {
                    Some(Payload::Full(v)) => v,
                    _ => return Err(self.missing(node.inputs[0], format!("input needed to rebuild `{}`", node.name))),
                };
                let stats = self.extras[t.0]
                    .as_ref()
                    .ok_or_else(|| self.missing(t, "cached normalization statistics"))?;
                let (out, flops) = ops::rebuild(g, t, x, stats, self.params.node_params(g, t), &self.ctx)?;
                self.recompute_flops += flops;
                Ok(out)
            }
        }
    }

    fn backward(&mut self, id: NodeId, materialize: &[(NodeId, Level)]) -> Result<()> {
        let g = self.graph;
        let node = g.node(id);
        let eb = self.ctx.num.precision.element_bytes();
        let mut rebuilt: BTreeMap<NodeId, Payload> = BTreeMap::new();
        for &(t, level) in materialize {
            let v = self.rebuild(t)?;
            let p = match level {
                Level::Full => Payload::Full(v),
                Level::Bitmask => Payload::Bits(Bitmask::positive(&v)),
            };
            rebuilt.insert(t, p);
        }
        let is_loss = Some(id) == g.loss();
        if self.rg[id.0] || is_loss {
            let reqs = requirements(g, id);
            let mut saved: Vec<Option<Saved>> = vec![None; node.inputs.len()];
            for (k, &i) in node.inputs.iter().enumerate() {
                let Some(&(_, level)) = reqs.iter().find(|(t, _)| *t == i) else {
                    continue;
                };
                let p = rebuilt.get(&i).or(self.store[i.0].as_ref());
                saved[k] = match (p, level) {
                    (Some(p @ Payload::Full(_)), _) | (Some(p @ Payload::Bits(_)), Level::Bitmask) => Some(p.saved()),
                    _ => {
                        let what = match level {
                            Level::Full => "stored value",
                            Level::Bitmask => "stored sign bitmask",
                        };
                        return Err(self.missing(i, format!("{what} needed to backpropagate `{}`", node.name)));
                    }
                };
            }
            let stats = if node.kind.is_norm() {
                Some(
                    self.extras[id.0]
                        .as_ref()
                        .ok_or_else(|| self.missing(id, "cached normalization statistics"))?,
                )
            } else {
                None
            };
            let n_out = g.node(id).output.elements(self.batch.size as u64) as usize;
            let upstream = self.grads[id.0].clone().unwrap_or_else(|| vec![0.0; n_out]);
            let want: Vec<bool> = node.inputs.iter().map(|i| self.rg[i.0]).collect();
            let b = ops::grad_node(
                g,
                id,
                &saved,
                stats,
                &upstream,
                self.params.node_params(g, id),
                &self.ctx,
                &want,
            )?;
            drop(rebuilt);
            for (k, dx) in b.inputs.into_iter().enumerate() {
                let Some(dx) = dx else { continue };
                let i = node.inputs[k];
                self.grads[i.0] = Some(match self.grads[i.0].take() {
                    Some(mut acc) => {
                        for (a, v) in acc.iter_mut().zip(&dx) {
                            *a = self.ctx.num.round(*a + v);
                        }
                        acc
                    }
                    None => dx,
                });
            }
            for (spec_idx, spec) in g.params_of(id) {
                let part = match spec.role {
                    ParamRole::Bias | ParamRole::NormShift => b.bias.clone(),
                    _ => b.weight.clone(),
                };
                if part.is_some() {
                    self.partials[spec_idx] = part;
                }
            }
        }
        let mut grad_bytes = self.grads[id.0].as_ref().map_or(0, |v| v.len() as u64 * eb);
        if !matches!(
            node.kind,
            NodeKind::Add | NodeKind::Reshape { .. } | NodeKind::Transpose
        ) {
            for (k, &i) in node.inputs.iter().enumerate() {
                if self.rg[i.0] && !node.inputs[..k].contains(&i) {
                    grad_bytes += self.grads[i.0].as_ref().map_or(0, |v| v.len() as u64 * eb);
                }
            }
        }
        self.result_act.peak_stored_bytes = self.result_act.peak_stored_bytes.max(self.stored);
        if self.best.is_none_or(|b| self.stored + grad_bytes > b) {
            self.best = Some(self.stored + grad_bytes);
            self.result_act.forward_bytes = self.stored;
            self.result_act.backward_bytes = grad_bytes;
            self.result_act.peak_node = Some(id);
        }
        self.grads[id.0] = None;
        Ok(())
    }

    fn run(&mut self, events: &[Event]) -> Result<()> {
        let eb = self.ctx.num.precision.element_bytes();
        for ev in events {
            match ev {
                Event::Compute { node, recompute } => self.compute(*node, *recompute)?,
                Event::Store { tensor, level } => {
                    let v = self.work[tensor.0]
                        .as_ref()
                        .ok_or_else(|| self.missing(*tensor, "value to store is not in the workspace"))?;
                    let p = match level {
                        Level::Full => Payload::Full(v.clone()),
                        Level::Bitmask => Payload::Bits(Bitmask::positive(v)),
                    };
                    self.stored += p.bytes(eb);
                    if let Some(old) = self.store[tensor.0].replace(p) {
                        self.stored -= old.bytes(eb);
                    }
                }
                Event::StoreExtras { node } => {
                    if self.graph.node(*node).kind.is_norm() {
                        let s = self.work_stats[node.0]
                            .clone()
                            .ok_or_else(|| self.missing(*node, "statistics to cache are not in the workspace"))?;
                        self.stored += s.bytes();
                        if let Some(old) = self.extras[node.0].replace(s) {
                            self.stored -= old.bytes();
                        }
                    }
                }
                Event::ClearWorkspace => {
                    self.work.iter_mut().for_each(|w| *w = None);
                    self.work_stats.iter_mut().for_each(|w| *w = None);
                }
                Event::Seed => {
                    if let Some(l) = self.graph.loss() {
                        self.grads[l.0] = Some(vec![self.loss_scale]);
                    }
                }
                Event::Backward { node, materialize } => self.backward(*node, materialize)?,
                Event::Release { tensor } => {
                    if let Some(p) = self.store[tensor.0].take() {
                        self.stored -= p.bytes(eb);
                    }
                }
                Event::ReleaseExtras { node } => {
                    if let Some(s) = self.extras[node.0].take() {
                        self.stored -= s.bytes();
                    }
                }
            }
        }
        Ok(())
    }
}

/// Interprets an event stream over one batch whose cross-example reductions are split
/// into `groups` equal slices.
pub fn execute(
    graph: &ComputationGraph,
    params: &mut ParamStore,
    batch: &Batch,
    cfg: &EngineConfig,
    groups: usize,
    events: &[Event],
) -> Result<StepResult> {
    cfg.validate()?;
    if !graph.is_executable() {
        return Err(Error::Unsupported(format!(
            "graph `{}` contains cost-model-only nodes",
            graph.name
        )));
    }
    if params.values.len() != graph.params().len() {
        return Err(Error::contract("parameter store does not match the graph"));
    }
    if batch.labels.len() != batch.size {
        return Err(Error::contract("one label per example is required"));
    }
    let n = graph.len();
    let num = cfg.numerics();
    let mut ex = Exec {
        graph,
        params,
        batch,
        ctx: EvalCtx {
            batch: batch.size,
            groups,
            mode: Mode::Train,
            num,
            labels: &batch.labels,
        },
        loss_scale: cfg.loss_scale,
        rg: requires_grad(graph),
        work: vec![None; n],
        work_stats: vec![None; n],
        store: vec![None; n],
        extras: vec![None; n],
        grads: vec![None; n],
        partials: vec![None; graph.params().len()],
        stored: 0,
        loss: None,
        best: None,
        result_act: ActivationReport::default(),
        recompute_nodes: 0,
        recompute_flops: 0,
    };
    ex.run(events)?;
    let fmt = num.accumulator_format();
    let grads = ex
        .partials
        .iter_mut()
        .zip(&ex.params.values)
        .map(|(p, v)| match p.take() {
            Some(parts) => DenseTensor::from_vec(v.shape(), fmt, ops::combine_groups(parts, num)),
            None => Ok(DenseTensor::zeros(v.shape(), fmt)),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StepResult {
        loss: ex
            .loss
            .ok_or_else(|| Error::contract("schedule never evaluated the loss"))?,
        grads: GradientSet { grads },
        activation: ex.result_act,
        recompute_nodes: ex.recompute_nodes,
        recompute_flops: ex.recompute_flops,
    })
}

/// Forward and backward over one batch under the configured checkpoint strategy.
pub fn run_step(
    graph: &ComputationGraph,
    params: &mut ParamStore,
    batch: &Batch,
    cfg: &EngineConfig,
) -> Result<StepResult> {
    let plan = build_plan(graph, cfg.strategy)?;
    let events = schedule(graph, &plan);
    execute(graph, params, batch, cfg, 1, &events)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicrobatchResult {
    pub loss: f64,
    pub grads: GradientSet,
    /// Largest per-pass activation peak.
    pub activation: ActivationReport,
}

/// Gradient of the mean minibatch loss computed over microbatches of `microbatch` examples.
pub fn run_microbatched(
    graph: &ComputationGraph,
    params: &mut ParamStore,
    minibatch: &Batch,
    microbatch: usize,
    cfg: &EngineConfig,
) -> Result<MicrobatchResult> {
    if microbatch == 0 || !minibatch.size.is_multiple_of(microbatch) {
        return Err(Error::config(format!(
            "microbatch {microbatch} does not divide minibatch {}",
            minibatch.size
        )));
    }
    let steps = minibatch.size / microbatch;
    match cfg.exec_mode {
        ExecMode::Joint => {
            let plan = build_plan(graph, cfg.strategy)?;
            let events = schedule(graph, &plan);
            let r = execute(graph, params, minibatch, cfg, steps, &events)?;
            Ok(MicrobatchResult {
                loss: r.loss,
                grads: r.grads,
                activation: r.activation,
            })
        }
        ExecMode::Sequential => {
            let num = cfg.numerics();
            let fmt = num.accumulator_format();
            let mut bufs: Vec<Vec<f64>> = params.values.iter().map(|v| vec![0.0; v.len()]).collect();
            let mut loss = vec![0.0];
            let mut act = ActivationReport::default();
            let w = microbatch as f64 / minibatch.size as f64;
            for s in 0..steps {
                let mb = minibatch.slice(graph, s * microbatch, microbatch)?;
                let r = run_step(graph, params, &mb, cfg)?;
                if steps == 1 {
                    return Ok(MicrobatchResult {
                        loss: r.loss,
                        grads: r.grads,
                        activation: r.activation,
                    });
                }
                for (buf, g) in bufs.iter_mut().zip(&r.grads.grads) {
                    ops::accumulate(buf, g.data(), w, num);
                }
                ops::accumulate(&mut loss, &[r.loss], w, num);
                if r.activation.total() > act.total() {
                    act = r.activation;
                }
            }
            let grads = bufs
                .into_iter()
                .zip(&params.values)
                .map(|(b, v)| DenseTensor::from_vec(v.shape(), fmt, b))
                .collect::<Result<Vec<_>>>()?;
            Ok(MicrobatchResult {
                loss: loss[0],
                grads: GradientSet { grads },
                activation: act,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Forward pass in evaluation mode (running statistics, no stored payloads).
pub fn evaluate(
    graph: &ComputationGraph,
    params: &ParamStore,
    batch: &Batch,
    precision: NumericFormat,
) -> Result<Evaluation> {
    if !graph.is_executable() {
        return Err(Error::Unsupported(format!(
            "graph `{}` contains cost-model-only nodes",
            graph.name
        )));
    }
    let loss_id = graph.loss().ok_or_else(|| Error::contract("graph has no loss"))?;
    let ctx = EvalCtx {
        batch: batch.size,
        groups: 1,
        mode: Mode::Eval,
        num: Numerics::new(precision, 32),
        labels: &batch.labels,
    };
    let mut values: Vec<Option<Vec<f64>>> = vec![None; graph.len()];
    for id in graph.ids() {
        let node = graph.node(id);
        let out = if let NodeKind::Input { .. } = node.kind {
            batch
                .inputs
                .get(&id)
                .cloned()
                .ok_or_else(|| Error::contract(format!("batch lacks input `{}`", node.name)))?
        } else {
            let inputs: Vec<&[f64]> = node
                .inputs
                .iter()
                .map(|&i| values[i.0].as_deref().unwrap_or(&[]))
                .collect();
            ops::eval_node(
                graph,
                id,
                &inputs,
                params.node_params(graph, id),
                &ctx,
                None,
                params.running.get(&id),
            )?
            .out
        };
        values[id.0] = Some(out);
    }
    let logits = values[graph.node(loss_id).inputs[0].0].as_deref().unwrap_or(&[]);
    let classes = logits.len() / batch.size.max(1);
    let correct = (0..batch.size)
        .filter(|&n| {
            let row = &logits[n * classes..(n + 1) * classes];
            let best = (0..classes).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            best == batch.labels[n]
        })
        .count();
    Ok(Evaluation {
        loss: values[loss_id.0]
            .as_ref()
            .and_then(|v| v.first().copied())
            .unwrap_or(f64::NAN),
        accuracy: correct as f64 / batch.size.max(1) as f64,
    })
}
