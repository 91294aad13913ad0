//! Static training-memory and FLOP cost model.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchUnit, ComputationGraph, NodeId, NodeKind, ParamSpec};
use crate::plan::{build_plan, requires_grad, schedule, CheckpointStrategy, Event, Level};
use crate::tensor::{csr_bytes, NumericFormat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdNesterov,
    Adam,
}

impl OptimizerKind {
    /// Persistent value arrays per parameter: gradient plus momentum/moment buffers.
    pub fn value_arrays(&self) -> u64 {
        match self {
            OptimizerKind::SgdNesterov => 2,
            OptimizerKind::Adam => 3,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" | "sgd-nesterov" | "sgd_nesterov" | "nesterov" => Ok(OptimizerKind::SgdNesterov),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::config(format!("unknown optimizer `{other}`"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::SgdNesterov => "sgd-nesterov",
            OptimizerKind::Adam => "adam",
        })
    }
}

/// One point in the configuration space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    /// Nonzero fraction of the sparsifiable group, in (0, 1].
    pub density: f64,
    pub precision: NumericFormat,
    /// Examples, or tokens for token-batched graphs.
    pub minibatch: u64,
    pub microbatch: u64,
    pub strategy: CheckpointStrategy,
    pub optimizer: OptimizerKind,
    /// Keep normalization parameters in FP32 when training in FP16.
    pub batchnorm_params_fp32: bool,
}

impl TrainingConfig {
    /// Dense, unsplit, uncheckpointed configuration.
    pub fn baseline(precision: NumericFormat, minibatch: u64, optimizer: OptimizerKind) -> Self {
        TrainingConfig {
            density: 1.0,
            precision,
            minibatch,
            microbatch: minibatch,
            strategy: CheckpointStrategy::None,
            optimizer,
            batchnorm_params_fp32: precision == NumericFormat::Fp16,
        }
    }

    pub fn validate(&self, graph: &ComputationGraph) -> Result<()> {
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::config(format!("density {} is outside (0, 1]", self.density)));
        }
        if self.microbatch == 0 || self.microbatch > self.minibatch {
            return Err(Error::config(format!(
                "microbatch {} must be in 1..={}",
                self.microbatch, self.minibatch
            )));
        }
        match graph.batch_unit {
            BatchUnit::Examples => {
                if !self.minibatch.is_multiple_of(self.microbatch) {
                    return Err(Error::config(format!(
                        "microbatch {} does not divide minibatch {}",
                        self.microbatch, self.minibatch
                    )));
                }
            }
            BatchUnit::Tokens { min_microbatch } => {
                if self.microbatch < min_microbatch {
                    return Err(Error::config(format!(
                        "token microbatch {} is below the longest-sentence floor {min_microbatch}",
                        self.microbatch
                    )));
                }
            }
        }
        Ok(())
    }

    fn param_element_bytes(&self, p: &ParamSpec) -> u64 {
        if p.is_norm() && self.batchnorm_params_fp32 && self.precision == NumericFormat::Fp16 {
            NumericFormat::Fp32.element_bytes()
        } else {
            self.precision.element_bytes()
        }
    }

    fn is_sparse(&self, p: &ParamSpec) -> bool {
        p.sparsifiable && self.density < 1.0
    }
}

/// Nonzeros kept in a tensor of `numel` elements at `density`.
pub fn nnz_at(numel: u64, density: f64) -> u64 {
    ((density * numel as f64).round() as u64).min(numel)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MemoryReport {
    pub model_bytes: u64,
    pub optimizer_bytes: u64,
    pub activation_forward_bytes: u64,
    pub activation_backward_bytes: u64,
    pub total_bytes: u64,
}

impl MemoryReport {
    pub fn activation_bytes(&self) -> u64 {
        self.activation_forward_bytes + self.activation_backward_bytes
    }

    /// Decimal megabytes.
    pub fn total_mb(&self) -> f64 {
        self.total_bytes as f64 / 1e6
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FlopReport {
    pub forward_flops: u64,
    pub backward_flops: u64,
    pub recompute_flops: u64,
    pub ratio_to_baseline: f64,
}

/// Activation peak split at the moment of the peak.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ActivationReport {
    pub forward_bytes: u64,
    pub backward_bytes: u64,
    /// Largest stored-activation footprint at any backward step, gradients excluded.
    pub peak_stored_bytes: u64,
    pub peak_node: Option<NodeId>,
}

impl ActivationReport {
    pub fn total(&self) -> u64 {
        self.forward_bytes + self.backward_bytes
    }
}

/// Model parameter bytes; sparse tensors are CSR encoded and own their indices.
pub fn model_memory(graph: &ComputationGraph, cfg: &TrainingConfig) -> u64 {
    graph
        .params()
        .iter()
        .map(|p| {
            let eb = cfg.param_element_bytes(p);
            if cfg.is_sparse(p) {
                let (rows, cols) = p.csr_dims();
                csr_bytes(rows, cols, nnz_at(p.numel(), cfg.density), eb, false)
            } else {
                p.numel() * eb
            }
        })
        .sum()
}

/// Gradient and momentum/moment buffers; sparse buffers hold values only.
pub fn optimizer_memory(graph: &ComputationGraph, cfg: &TrainingConfig) -> u64 {
    let values: u64 = graph
        .params()
        .iter()
        .map(|p| {
            let n = if cfg.is_sparse(p) {
                nnz_at(p.numel(), cfg.density)
            } else {
                p.numel()
            };
            n * cfg.param_element_bytes(p)
        })
        .sum();
    values * cfg.optimizer.value_arrays()
}

fn batch_bound(graph: &ComputationGraph, id: NodeId, batch: u64) -> u64 {
    graph.node(id).output.elements(batch)
}

/// Bytes retained for `tensor` at `level`.
pub fn payload_bytes(graph: &ComputationGraph, tensor: NodeId, level: Level, batch: u64, fmt: NumericFormat) -> u64 {
    let e = batch_bound(graph, tensor, batch);
    match level {
        Level::Full => e * fmt.element_bytes(),
        Level::Bitmask => e.div_ceil(8),
    }
}

/// Bytes of a node's private extras: 2 FP32 statistics per normalized channel or row,
/// attention probabilities, or generated convolution kernels.
pub fn extras_bytes(graph: &ComputationGraph, node: NodeId, batch: u64, fmt: NumericFormat) -> u64 {
    let n = graph.node(node);
    let input_elems = |i: usize| graph.node(n.inputs[i]).output.elements(batch);
    match n.kind {
        NodeKind::BatchNorm { c } => 2 * c as u64 * 4,
        NodeKind::LayerNorm { d } => 2 * (input_elems(0) / d as u64) * 4,
        NodeKind::DynamicConvCost { d, heads, kernel } => {
            let tokens = n.output.elements(batch) / d as u64;
            tokens * (2 * d + heads * kernel) as u64 * fmt.element_bytes()
        }
        NodeKind::AttentionCost { d, heads, src_len } => {
            let tokens = n.output.elements(batch) / d as u64;
            tokens * (heads * src_len) as u64 * fmt.element_bytes()
        }
        NodeKind::DropoutCost { .. } => n.output.elements(batch) * fmt.element_bytes(),
        _ => 0,
    }
}

pub fn grad_bytes(graph: &ComputationGraph, tensor: NodeId, batch: u64, fmt: NumericFormat) -> u64 {
    batch_bound(graph, tensor, batch) * fmt.element_bytes()
}

fn weight_nnz(graph: &ComputationGraph, id: NodeId, density: f64) -> u64 {
    graph
        .params_of(id)
        .find(|(_, p)| {
            matches!(
                p.role,
                crate::graph::ParamRole::Weight | crate::graph::ParamRole::Embedding
            )
        })
        .map(|(_, p)| {
            if p.sparsifiable {
                nnz_at(p.numel(), density)
            } else {
                p.numel()
            }
        })
        .unwrap_or(0)
}

/// Forward FLOPs of one node (2 per multiply-add).
pub fn node_forward_flops(graph: &ComputationGraph, id: NodeId, batch: u64, density: f64) -> u64 {
    let n = graph.node(id);
    let out = n.output.elements(batch);
    let inp = |i: usize| graph.node(n.inputs[i]).output.elements(batch);
    match n.kind {
        NodeKind::Input { .. }
        | NodeKind::Reshape { .. }
        | NodeKind::Transpose
        | NodeKind::SubsamplePad { .. }
        | NodeKind::Embedding { .. } => 0,
        NodeKind::Conv2D { c_out, .. } => 2 * weight_nnz(graph, id, density) * (out / c_out as u64),
        NodeKind::Linear { d_in, d_out, tied, .. } => {
            let w = if tied {
                (d_in * d_out) as u64
            } else {
                weight_nnz(graph, id, density)
            };
            2 * w * (out / d_out as u64)
        }
        NodeKind::ReLU | NodeKind::Add | NodeKind::DropoutCost { .. } => out,
        NodeKind::AvgPool { .. } => inp(0),
        NodeKind::BatchNorm { .. } | NodeKind::LayerNorm { .. } => 8 * out,
        NodeKind::SoftmaxCrossEntropy { .. } => 4 * inp(0),
        NodeKind::DynamicConvCost { d, heads, kernel } => {
            let tokens = out / d as u64;
            let (d, hk) = (d as u64, (heads * kernel) as u64);
            tokens * (4 * d + 3 * hk + 2 * d * kernel as u64) + 2 * weight_nnz(graph, id, density) * tokens
        }
        NodeKind::AttentionCost { d, heads, src_len } => {
            let tokens = out / d as u64;
            tokens * (4 * (d * src_len) as u64 + 3 * (heads * src_len) as u64)
        }
    }
}

/// Forward FLOPs when a node is re-executed: normalization reuses cached statistics.
pub fn node_recompute_flops(graph: &ComputationGraph, id: NodeId, batch: u64, density: f64) -> u64 {
    let n = graph.node(id);
    if n.kind.is_norm() {
        4 * n.output.elements(batch)
    } else {
        node_forward_flops(graph, id, batch, density)
    }
}

fn has_weights(graph: &ComputationGraph, id: NodeId) -> bool {
    graph.params_of(id).next().is_some() || matches!(graph.node(id).kind, NodeKind::Linear { tied: true, .. })
}

pub fn node_backward_flops(graph: &ComputationGraph, id: NodeId, batch: u64, density: f64) -> u64 {
    let f = node_forward_flops(graph, id, batch, density);
    if has_weights(graph, id) {
        2 * f
    } else {
        f
    }
}

/// FLOPs to rebuild a cheap tensor (a normalization output, optionally followed by ReLU).
pub fn materialize_flops(graph: &ComputationGraph, tensor: NodeId, batch: u64) -> u64 {
    let n = graph.node(tensor);
    match n.kind {
        NodeKind::ReLU => n.output.elements(batch) + materialize_flops(graph, n.inputs[0], batch),
        _ => 4 * n.output.elements(batch),
    }
}

/// Result of replaying a schedule with the static byte model.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Simulation {
    pub activation: ActivationReport,
    pub recompute_flops: u64,
    pub recompute_nodes: u64,
}

/// Gradient bytes held while backpropagating through `node`: the gradient of its output
/// plus the gradients of its distinct inputs that carry one. Pass-through nodes hand their
/// output gradient to their inputs unchanged.
pub fn node_grad_bytes(graph: &ComputationGraph, rg: &[bool], node: NodeId, batch: u64, fmt: NumericFormat) -> u64 {
    let n = graph.node(node);
    let mut total = 0;
    if rg[node.0] || Some(node) == graph.loss() {
        total += grad_bytes(graph, node, batch, fmt);
    }
    if matches!(n.kind, NodeKind::Add | NodeKind::Reshape { .. } | NodeKind::Transpose) {
        return total;
    }
    for (k, &i) in n.inputs.iter().enumerate() {
        if rg[i.0] && !n.inputs[..k].contains(&i) {
            total += grad_bytes(graph, i, batch, fmt);
        }
    }
    total
}

/// Replays a schedule, measuring at every backward step the retained payloads
/// (forward part) and the gradients of the node being backpropagated (backward part).
/// Tensors rebuilt transiently for a single backward step are temporaries and only
/// contribute FLOPs.
pub fn simulate(
    graph: &ComputationGraph,
    events: &[Event],
    batch: u64,
    fmt: NumericFormat,
    density: f64,
) -> Simulation {
    let rg = requires_grad(graph);
    let mut stored: u64 = 0;
    let mut held: Vec<u64> = vec![0; graph.len()];
    let mut extras: Vec<u64> = vec![0; graph.len()];
    let mut sim = Simulation::default();
    let mut best: Option<u64> = None;
    for ev in events {
        match ev {
            Event::Compute { node, recompute } => {
                if *recompute {
                    sim.recompute_flops += node_recompute_flops(graph, *node, batch, density);
                    sim.recompute_nodes += 1;
                }
            }
            Event::Store { tensor, level } => {
                let b = payload_bytes(graph, *tensor, *level, batch, fmt);
                held[tensor.0] = b;
                stored += b;
            }
            Event::StoreExtras { node } => {
                let b = extras_bytes(graph, *node, batch, fmt);
                extras[node.0] = b;
                stored += b;
            }
            Event::Release { tensor } => {
                stored -= std::mem::take(&mut held[tensor.0]);
            }
            Event::ReleaseExtras { node } => {
                stored -= std::mem::take(&mut extras[node.0]);
            }
            Event::ClearWorkspace | Event::Seed => {}
            Event::Backward { node, materialize } => {
                for (t, _) in materialize {
                    sim.recompute_flops += materialize_flops(graph, *t, batch);
                }
                let grads = node_grad_bytes(graph, &rg, *node, batch, fmt);
                sim.activation.peak_stored_bytes = sim.activation.peak_stored_bytes.max(stored);
                if best.is_none_or(|b| stored + grads > b) {
                    best = Some(stored + grads);
                    sim.activation.forward_bytes = stored;
                    sim.activation.backward_bytes = grads;
                    sim.activation.peak_node = Some(*node);
                }
            }
        }
    }
    sim
}

/// Peak activation memory of one microbatch step.
pub fn activation_memory(
    graph: &ComputationGraph,
    cfg: &TrainingConfig,
    strategy: CheckpointStrategy,
) -> Result<ActivationReport> {
    Ok(simulate_strategy(graph, cfg, strategy)?.activation)
}

fn simulate_strategy(
    graph: &ComputationGraph,
    cfg: &TrainingConfig,
    strategy: CheckpointStrategy,
) -> Result<Simulation> {
    let plan = build_plan(graph, strategy)?;
    let events = schedule(graph, &plan);
    Ok(simulate(graph, &events, cfg.microbatch, cfg.precision, cfg.density))
}

/// Forward, backward and recompute FLOPs for one minibatch.
pub fn flops(graph: &ComputationGraph, cfg: &TrainingConfig, strategy: CheckpointStrategy) -> Result<FlopReport> {
    let sim = simulate_strategy(graph, cfg, strategy)?;
    Ok(flop_report(graph, cfg, &sim))
}

fn flop_report(graph: &ComputationGraph, cfg: &TrainingConfig, sim: &Simulation) -> FlopReport {
    let b = cfg.microbatch;
    let steps = cfg.minibatch.div_ceil(cfg.microbatch);
    let forward: u64 = graph
        .ids()
        .map(|id| node_forward_flops(graph, id, b, cfg.density))
        .sum::<u64>()
        * steps;
    let backward: u64 = graph
        .ids()
        .map(|id| node_backward_flops(graph, id, b, cfg.density))
        .sum::<u64>()
        * steps;
    let recompute = sim.recompute_flops * steps;
    let base = forward + backward;
    FlopReport {
        forward_flops: forward,
        backward_flops: backward,
        recompute_flops: recompute,
        ratio_to_baseline: if base == 0 {
            1.0
        } else {
            (base + recompute) as f64 / base as f64
        },
    }
}

/// Model + optimizer + peak activation memory, and FLOPs, for one configuration.
pub fn total_report(graph: &ComputationGraph, cfg: &TrainingConfig) -> Result<(MemoryReport, FlopReport)> {
    cfg.validate(graph)?;
    let sim = simulate_strategy(graph, cfg, cfg.strategy)?;
    let model = model_memory(graph, cfg);
    let opt = optimizer_memory(graph, cfg);
    let mem = MemoryReport {
        model_bytes: model,
        optimizer_bytes: opt,
        activation_forward_bytes: sim.activation.forward_bytes,
        activation_backward_bytes: sim.activation.backward_bytes,
        total_bytes: model + opt + sim.activation.total(),
    };
    Ok((mem, flop_report(graph, cfg, &sim)))
}

pub const CSV_HEADER: &str = "arch,density,precision,minibatch,microbatch,strategy,optimizer,model_bytes,optimizer_bytes,activation_forward_bytes,activation_backward_bytes,total_bytes,total_mb,forward_flops,backward_flops,recompute_flops,flops_ratio";

/// One CSV row matching [`CSV_HEADER`].
pub fn csv_row(arch: &str, cfg: &TrainingConfig, mem: &MemoryReport, fl: &FlopReport) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "{arch},{},{},{},{},{},{},{},{},{},{},{},{:.3},{},{},{},{:.6}",
        cfg.density,
        cfg.precision,
        cfg.minibatch,
        cfg.microbatch,
        cfg.strategy,
        cfg.optimizer,
        mem.model_bytes,
        mem.optimizer_bytes,
        mem.activation_forward_bytes,
        mem.activation_backward_bytes,
        mem.total_bytes,
        mem.total_mb(),
        fl.forward_flops,
        fl.backward_flops,
        fl.recompute_flops,
        fl.ratio_to_baseline
    );
    s
}
