//! Computation-graph IR shared by the static cost model and the engine.
//!
//! Nodes are stored in topological order; a [`NodeId`] is the node's
//! position in that order. The batch dimension is symbolic: every
//! [`TensorSpec`] holds per-example extents and is bound to a concrete
//! batch (examples or tokens) only when a configuration is evaluated.

mod arch;
mod presets;

pub use arch::{parse_arch, serialize_arch};
pub use presets::{
    build_dc_transformer_cost, build_desk_cnn, build_desk_cnn_with_input, build_wrn, DcTransformerPreset,
};

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Per-example tensor extents; `batched = false` marks batch-free tensors (the loss).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorSpec {
    pub dims: Vec<usize>,
    pub batched: bool,
}

impl TensorSpec {
    pub fn batched(dims: Vec<usize>) -> Self {
        TensorSpec { dims, batched: true }
    }

    pub fn scalar() -> Self {
        TensorSpec {
            dims: Vec::new(),
            batched: false,
        }
    }

    pub fn per_example_elements(&self) -> u64 {
        self.dims.iter().map(|&d| d as u64).product()
    }

    /// Element count with the batch dimension bound.
    pub fn elements(&self, batch: u64) -> u64 {
        if self.batched {
            batch * self.per_example_elements()
        } else {
            self.per_example_elements()
        }
    }

    /// Concrete shape with the batch dimension leading.
    pub fn shape(&self, batch: usize) -> Vec<usize> {
        if self.batched {
            std::iter::once(batch).chain(self.dims.iter().copied()).collect()
        } else {
            self.dims.clone()
        }
    }
}

/// What a node keeps from the forward pass to run its backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StorageClass {
    FullInput,
    BitmaskInput,
    Nothing,
    CachedStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NodeKind {
    /// Graph source; `shape` is per example.
    Input {
        shape: Vec<usize>,
    },
    Conv2D {
        c_in: usize,
        c_out: usize,
        k1: usize,
        k2: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    /// `tied` weights live in an embedding table elsewhere and are not owned here.
    Linear {
        d_in: usize,
        d_out: usize,
        bias: bool,
        tied: bool,
    },
    BatchNorm {
        c: usize,
    },
    LayerNorm {
        d: usize,
    },
    ReLU,
    Add,
    Reshape {
        shape: Vec<usize>,
    },
    /// Swaps the last two per-example axes.
    Transpose,
    AvgPool {
        window: usize,
    },
    /// Parameter-free shortcut: spatial stride-`stride` slicing plus zero channel padding.
    SubsamplePad {
        stride: usize,
        c_out: usize,
    },
    Embedding {
        vocab: usize,
        d: usize,
    },
    SoftmaxCrossEntropy {
        classes: usize,
    },
    /// GLU + softmax-normalized kernel generation + depthwise dynamic convolution. Cost model only.
    DynamicConvCost {
        d: usize,
        heads: usize,
        kernel: usize,
    },
    /// Encoder-decoder attention mixing over `src_len` source positions (projections are
    /// separate `Linear` nodes). Cost model only.
    AttentionCost {
        d: usize,
        heads: usize,
        src_len: usize,
    },
    /// Elementwise dropout with rate `p`; retains its keep-mask for backward. Cost model only.
    DropoutCost {
        p: f64,
    },
}

impl NodeKind {
    pub fn storage_class(&self) -> StorageClass {
        use NodeKind::*;
        match self {
            Conv2D { .. } | Linear { .. } | Embedding { .. } | SoftmaxCrossEntropy { .. } => StorageClass::FullInput,
            DynamicConvCost { .. } | AttentionCost { .. } => StorageClass::FullInput,
            ReLU => StorageClass::BitmaskInput,
            BatchNorm { .. } | LayerNorm { .. } => StorageClass::CachedStats,
            Input { .. }
            | Add
            | Reshape { .. }
            | Transpose
            | AvgPool { .. }
            | SubsamplePad { .. }
            | DropoutCost { .. } => StorageClass::Nothing,
        }
    }

    pub fn is_executable(&self) -> bool {
        !matches!(
            self,
            NodeKind::DynamicConvCost { .. }
                | NodeKind::AttentionCost { .. }
                | NodeKind::DropoutCost { .. }
                | NodeKind::Linear { tied: true, .. }
        )
    }

    pub fn is_norm(&self) -> bool {
        matches!(self, NodeKind::BatchNorm { .. } | NodeKind::LayerNorm { .. })
    }

    pub fn tag(&self) -> &'static str {
        use NodeKind::*;
        match self {
            Input { .. } => "input",
            Conv2D { .. } => "conv2d",
            Linear { .. } => "linear",
            BatchNorm { .. } => "batchnorm",
            LayerNorm { .. } => "layernorm",
            ReLU => "relu",
            Add => "add",
            Reshape { .. } => "reshape",
            Transpose => "transpose",
            AvgPool { .. } => "avgpool",
            SubsamplePad { .. } => "subsample_pad",
            Embedding { .. } => "embedding",
            SoftmaxCrossEntropy { .. } => "softmax_xent",
            DynamicConvCost { .. } => "dynconv_cost",
            AttentionCost { .. } => "attention_cost",
            DropoutCost { .. } => "dropout_cost",
        }
    }

    fn arity(&self) -> usize {
        match self {
            NodeKind::Input { .. } => 0,
            NodeKind::Add => 2,
            NodeKind::AttentionCost { .. } => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamRole {
    Weight,
    Bias,
    NormScale,
    NormShift,
    Embedding,
}

/// One parameter tensor owned by a node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub node: NodeId,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    /// Member of the sparsifiable group.
    pub sparsifiable: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product()
    }

    /// Rows/cols of the flattened CSR matrix (`shape[0] x prod(shape[1..])`).
    pub fn csr_dims(&self) -> (usize, usize) {
        let rows = self.shape.first().copied().unwrap_or(1);
        let cols = self.shape.iter().skip(1).product();
        (rows, cols)
    }

    pub fn is_norm(&self) -> bool {
        matches!(self.role, ParamRole::NormScale | ParamRole::NormShift)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub kind: NodeKind,
    pub inputs: Vec<NodeId>,
    pub output: TensorSpec,
    /// Whether this node's weight belongs to the sparsifiable group.
    pub sparse: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub entry: NodeId,
    pub exit: NodeId,
}

impl ResidualBlock {
    pub fn contains(&self, id: NodeId) -> bool {
        self.entry <= id && id <= self.exit
    }
}

/// How the symbolic batch dimension is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BatchUnit {
    Examples,
    /// Sequence models count tokens; a microbatch cannot be smaller than the longest sentence.
    Tokens {
        min_microbatch: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputationGraph {
    pub name: String,
    nodes: Vec<Node>,
    loss: Option<NodeId>,
    blocks: Vec<ResidualBlock>,
    pub batch_unit: BatchUnit,
    consumers: Vec<Vec<NodeId>>,
    params: Vec<ParamSpec>,
}

impl ComputationGraph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn ids(&self) -> impl DoubleEndedIterator<Item = NodeId> + ExactSizeIterator {
        (0..self.nodes.len()).map(NodeId)
    }

    /// The loss node; `None` only for the empty graph.
    pub fn loss(&self) -> Option<NodeId> {
        self.loss
    }

    pub fn blocks(&self) -> &[ResidualBlock] {
        &self.blocks
    }

    pub fn consumers(&self, id: NodeId) -> &[NodeId] {
        &self.consumers[id.0]
    }

    pub fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn params_of(&self, id: NodeId) -> impl Iterator<Item = (usize, &ParamSpec)> {
        self.params.iter().enumerate().filter(move |(_, p)| p.node == id)
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name).map(NodeId)
    }

    pub fn total_params(&self) -> u64 {
        self.params.iter().map(ParamSpec::numel).sum()
    }

    pub fn sparsifiable_params(&self) -> u64 {
        self.params
            .iter()
            .filter(|p| p.sparsifiable)
            .map(ParamSpec::numel)
            .sum()
    }

    pub fn excluded_params(&self) -> u64 {
        self.params
            .iter()
            .filter(|p| !p.sparsifiable)
            .map(ParamSpec::numel)
            .sum()
    }

    pub fn is_executable(&self) -> bool {
        self.nodes.iter().all(|n| n.kind.is_executable())
    }

    /// Nodes whose storage class keeps something for the backward pass.
    pub fn storing_nodes(&self) -> Vec<NodeId> {
        self.ids()
            .filter(|&id| self.node(id).kind.storage_class() != StorageClass::Nothing)
            .collect()
    }

    /// The residual block containing `id`, if any.
    pub fn block_of(&self, id: NodeId) -> Option<usize> {
        self.blocks.iter().position(|b| b.contains(id))
    }
}

/// Incremental builder that infers output shapes as nodes are added.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    name: String,
    nodes: Vec<Node>,
    names: HashMap<String, NodeId>,
    loss: Option<NodeId>,
    blocks: Vec<ResidualBlock>,
    batch_unit: Option<BatchUnit>,
}

impl GraphBuilder {
    pub fn new(name: impl Into<String>) -> Self {
        GraphBuilder {
            name: name.into(),
            ..Default::default()
        }
    }

    pub fn batch_unit(&mut self, unit: BatchUnit) -> &mut Self {
        self.batch_unit = Some(unit);
        self
    }

    pub fn id(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: NodeKind, inputs: &[NodeId]) -> Result<NodeId> {
        self.add_node(name, kind, inputs, false)
    }

    pub fn add_sparse(&mut self, name: impl Into<String>, kind: NodeKind, inputs: &[NodeId]) -> Result<NodeId> {
        self.add_node(name, kind, inputs, true)
    }

    pub fn add_node(
        &mut self,
        name: impl Into<String>,
        kind: NodeKind,
        inputs: &[NodeId],
        sparse: bool,
    ) -> Result<NodeId> {
        let name = name.into();
        if self.names.contains_key(&name) {
            return Err(Error::semantic(&name, "duplicate node id"));
        }
        if inputs.len() != kind.arity() {
            return Err(Error::semantic(
                &name,
                format!("{} expects {} inputs, got {}", kind.tag(), kind.arity(), inputs.len()),
            ));
        }
        let id = NodeId(self.nodes.len());
        let in_specs: Vec<&TensorSpec> = inputs
            .iter()
            .map(|i| {
                self.nodes
                    .get(i.0)
                    .map(|n| &n.output)
                    .ok_or_else(|| Error::semantic(&name, format!("input {i} is not defined before this node")))
            })
            .collect::<Result<_>>()?;
        if in_specs.iter().any(|s| !s.batched) {
            return Err(Error::semantic(&name, "cannot consume the batch-free loss tensor"));
        }
        let output = infer_shape(&kind, &in_specs).map_err(|m| Error::semantic(&name, m))?;
        if sparse
            && !matches!(
                kind,
                NodeKind::Conv2D { .. }
                    | NodeKind::Linear { tied: false, .. }
                    | NodeKind::Embedding { .. }
                    | NodeKind::DynamicConvCost { .. }
            )
        {
            return Err(Error::semantic(
                &name,
                format!("{} has no sparsifiable weight", kind.tag()),
            ));
        }
        self.names.insert(name.clone(), id);
        self.nodes.push(Node {
            name,
            kind,
            inputs: inputs.to_vec(),
            output,
            sparse,
        });
        Ok(id)
    }

    /// Output spec of an already added node.
    pub fn output(&self, id: NodeId) -> &TensorSpec {
        &self.nodes[id.0].output
    }

    pub fn block(&mut self, entry: NodeId, exit: NodeId) -> &mut Self {
        self.blocks.push(ResidualBlock { entry, exit });
        self
    }

    pub fn loss(&mut self, id: NodeId) -> &mut Self {
        self.loss = Some(id);
        self
    }

    pub fn build(self) -> Result<ComputationGraph> {
        let n = self.nodes.len();
        let mut consumers = vec![Vec::new(); n];
        for (i, node) in self.nodes.iter().enumerate() {
            for inp in &node.inputs {
                consumers[inp.0].push(NodeId(i));
            }
        }
        let losses: Vec<NodeId> = (0..n)
            .filter(|&i| matches!(self.nodes[i].kind, NodeKind::SoftmaxCrossEntropy { .. }))
            .map(NodeId)
            .collect();
        if n > 0 {
            let loss = self
                .loss
                .ok_or_else(|| Error::semantic(&self.name, "graph has no `loss` line"))?;
            if losses != [loss] {
                return Err(Error::semantic(
                    self.nodes.get(loss.0).map(|n| n.name.as_str()).unwrap_or("?"),
                    "graph must have exactly one loss node and it must be the declared loss",
                ));
            }
            if !consumers[loss.0].is_empty() {
                return Err(Error::semantic(
                    &self.nodes[loss.0].name,
                    "loss node cannot have consumers",
                ));
            }
        }
        let mut prev_exit: Option<NodeId> = None;
        for b in &self.blocks {
            let label = self.nodes.get(b.entry.0).map(|n| n.name.clone()).unwrap_or_default();
            if b.entry > b.exit || b.exit.0 >= n {
                return Err(Error::semantic(label, "residual block entry must precede its exit"));
            }
            if prev_exit.is_some_and(|p| b.entry <= p) {
                return Err(Error::semantic(label, "residual blocks must be disjoint and ordered"));
            }
            prev_exit = Some(b.exit);
        }
        let params = collect_params(&self.nodes);
        Ok(ComputationGraph {
            name: self.name,
            nodes: self.nodes,
            loss: self.loss,
            blocks: self.blocks,
            batch_unit: self.batch_unit.unwrap_or(BatchUnit::Examples),
            consumers,
            params,
        })
    }
}

fn infer_shape(kind: &NodeKind, ins: &[&TensorSpec]) -> std::result::Result<TensorSpec, String> {
    use NodeKind::*;
    let positive = |vals: &[usize]| vals.iter().all(|&v| v > 0);
    let dims = |i: usize| -> &[usize] { &ins[i].dims };
    let spec = match kind {
        Input { shape } => {
            if shape.is_empty() || !positive(shape) {
                return Err("input shape must be nonempty with positive extents".into());
            }
            TensorSpec::batched(shape.clone())
        }
        Conv2D {
            c_in,
            c_out,
            k1,
            k2,
            stride,
            pad,
            ..
        } => {
            if !positive(&[*c_in, *c_out, *k1, *k2, *stride]) {
                return Err("conv2d parameters must be positive".into());
            }
            let d = dims(0);
            if d.len() != 3 || d[0] != *c_in {
                return Err(format!("conv2d expects [{c_in}, h, w] input, got {d:?}"));
            }
            let (h, w) = (d[1] + 2 * pad, d[2] + 2 * pad);
            if h < *k1 || w < *k2 {
                return Err("conv2d kernel larger than padded input".into());
            }
            TensorSpec::batched(vec![*c_out, (h - k1) / stride + 1, (w - k2) / stride + 1])
        }
        Linear { d_in, d_out, .. } => {
            let d = dims(0);
            if !positive(&[*d_in, *d_out]) || d.last() != Some(d_in) {
                return Err(format!("linear expects last dim {d_in}, got {d:?}"));
            }
            let mut out = d.to_vec();
            *out.last_mut().unwrap() = *d_out;
            TensorSpec::batched(out)
        }
        BatchNorm { c } => {
            if dims(0).first() != Some(c) {
                return Err(format!("batchnorm expects {c} channels, got {:?}", dims(0)));
            }
            ins[0].clone()
        }
        LayerNorm { d } => {
            if dims(0).last() != Some(d) {
                return Err(format!("layernorm expects last dim {d}, got {:?}", dims(0)));
            }
            ins[0].clone()
        }
        ReLU => ins[0].clone(),
        Add => {
            if ins[0].dims != ins[1].dims {
                return Err(format!("add operands differ: {:?} vs {:?}", ins[0].dims, ins[1].dims));
            }
            ins[0].clone()
        }
        Reshape { shape } => {
            let n: usize = shape.iter().product();
            if !positive(shape) || n as u64 != ins[0].per_example_elements() {
                return Err(format!("cannot reshape {:?} to {shape:?}", dims(0)));
            }
            TensorSpec::batched(shape.clone())
        }
        Transpose => {
            let mut d = dims(0).to_vec();
            let r = d.len();
            if r < 2 {
                return Err("transpose needs rank >= 2".into());
            }
            d.swap(r - 1, r - 2);
            TensorSpec::batched(d)
        }
        AvgPool { window } => {
            let d = dims(0);
            if d.len() != 3 || *window == 0 || d[1] % window != 0 || d[2] % window != 0 {
                return Err(format!("avgpool window {window} does not tile {d:?}"));
            }
            TensorSpec::batched(vec![d[0], d[1] / window, d[2] / window])
        }
        SubsamplePad { stride, c_out } => {
            let d = dims(0);
            if d.len() != 3 || *stride == 0 || *c_out < d[0] {
                return Err(format!("subsample_pad cannot map {d:?} to {c_out} channels"));
            }
            TensorSpec::batched(vec![*c_out, d[1].div_ceil(*stride), d[2].div_ceil(*stride)])
        }
        Embedding { vocab, d } => {
            if !positive(&[*vocab, *d]) || ins[0].per_example_elements() != 1 {
                return Err("embedding expects one token id per batch entry".into());
            }
            TensorSpec::batched(vec![*d])
        }
        SoftmaxCrossEntropy { classes } => {
            if dims(0) != [*classes] {
                return Err(format!("softmax_xent expects [{classes}] logits, got {:?}", dims(0)));
            }
            TensorSpec::scalar()
        }
        DynamicConvCost { d, heads, kernel } => {
            if !positive(&[*d, *heads, *kernel]) || dims(0) != [2 * d] {
                return Err(format!("dynconv_cost expects [{}] input, got {:?}", 2 * d, dims(0)));
            }
            TensorSpec::batched(vec![*d])
        }
        AttentionCost { d, heads, src_len } => {
            if !positive(&[*d, *heads, *src_len]) || ins.iter().any(|s| s.dims != [*d]) {
                return Err(format!("attention_cost expects three [{d}] inputs"));
            }
            TensorSpec::batched(vec![*d])
        }
        DropoutCost { p } => {
            if !(0.0..1.0).contains(p) {
                return Err(format!("dropout rate {p} outside [0, 1)"));
            }
            ins[0].clone()
        }
    };
    Ok(spec)
}

fn collect_params(nodes: &[Node]) -> Vec<ParamSpec> {
    let mut params = Vec::new();
    for (i, node) in nodes.iter().enumerate() {
        let id = NodeId(i);
        let mut push = |suffix: &str, shape: Vec<usize>, role: ParamRole, sparsifiable: bool| {
            params.push(ParamSpec {
                name: format!("{}.{suffix}", node.name),
                node: id,
                shape,
                role,
                sparsifiable,
            })
        };
        match &node.kind {
            NodeKind::Conv2D {
                c_in,
                c_out,
                k1,
                k2,
                bias,
                ..
            } => {
                push("weight", vec![*c_out, *c_in, *k1, *k2], ParamRole::Weight, node.sparse);
                if *bias {
                    push("bias", vec![*c_out], ParamRole::Bias, false);
                }
            }
            NodeKind::Linear {
                d_in,
                d_out,
                bias,
                tied,
            } => {
                if !tied {
                    push("weight", vec![*d_out, *d_in], ParamRole::Weight, node.sparse);
                }
                if *bias {
                    push("bias", vec![*d_out], ParamRole::Bias, false);
                }
            }
            NodeKind::BatchNorm { c } => {
                push("gamma", vec![*c], ParamRole::NormScale, false);
                push("beta", vec![*c], ParamRole::NormShift, false);
            }
            NodeKind::LayerNorm { d } => {
                push("gamma", vec![*d], ParamRole::NormScale, false);
                push("beta", vec![*d], ParamRole::NormShift, false);
            }
            NodeKind::Embedding { vocab, d } => {
                push("table", vec![*vocab, *d], ParamRole::Embedding, node.sparse);
            }
            NodeKind::DynamicConvCost { d, heads, kernel } => {
                push("kernel_proj", vec![heads * kernel, *d], ParamRole::Weight, node.sparse);
            }
            _ => {}
        }
    }
    params
}
