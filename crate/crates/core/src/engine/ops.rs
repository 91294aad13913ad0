//! Forward and backward kernels for the executable node kinds.
//!
//! Values live in `f64` buffers laid out `[batch, per-example dims...]` and are
//! rounded into the run's precision after every elementwise result and every
//! completed reduction.

use crate::error::{Error, Result};
use crate::graph::{ComputationGraph, NodeId, NodeKind};
use crate::half::half_round;
use crate::tensor::{DenseTensor, NumericFormat, SparsityMask};

/// Normalization epsilon.
pub const NORM_EPS: f64 = 1e-5;
/// Running-statistics momentum for batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;

/// Rounding rules for one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Numerics {
    pub precision: NumericFormat,
    /// Round every partial sum to binary16 instead of once per reduction.
    pub acc16: bool,
}

impl Numerics {
    pub fn new(precision: NumericFormat, accumulator_width: u32) -> Self {
        Numerics {
            precision,
            acc16: accumulator_width == 16 && precision == NumericFormat::Fp16,
        }
    }

    pub fn round(&self, x: f64) -> f64 {
        self.precision.round(x)
    }

    /// Format of gradient accumulation buffers.
    pub fn accumulator_format(&self) -> NumericFormat {
        match self.precision {
            NumericFormat::Fp64 => NumericFormat::Fp64,
            _ if self.acc16 => NumericFormat::Fp16,
            _ => NumericFormat::Fp32,
        }
    }

    fn acc(&self, start: f64) -> Acc {
        Acc {
            v: start,
            half: self.acc16,
        }
    }

    /// Completed reduction of `xs`.
    fn sum(&self, xs: impl IntoIterator<Item = f64>) -> f64 {
        let mut a = self.acc(0.0);
        for x in xs {
            a.add(x);
        }
        self.round(a.v)
    }
}

struct Acc {
    v: f64,
    half: bool,
}

impl Acc {
    fn add(&mut self, x: f64) {
        self.v += x;
        if self.half {
            self.v = half_round(self.v);
        }
    }
}

impl Numerics {
    /// Normalization statistics are kept in FP32, or FP64 when computing in FP64.
    pub fn stat(&self, x: f64) -> f64 {
        match self.precision {
            NumericFormat::Fp64 => x,
            _ => NumericFormat::Fp32.round(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Packed sign bits of a tensor (`x > 0`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmask {
    bits: Vec<u8>,
    len: usize,
}

impl Bitmask {
    pub fn positive(values: &[f64]) -> Self {
        let mut bits = vec![0u8; values.len().div_ceil(8)];
        for (i, &v) in values.iter().enumerate() {
            if v > 0.0 {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        Bitmask {
            bits,
            len: values.len(),
        }
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i / 8] >> (i % 8) & 1 == 1
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bytes(&self) -> u64 {
        self.bits.len() as u64
    }
}

/// Cached per-channel (batch norm, one set per group) or per-row (layer norm) statistics, kept in FP32.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl NormStats {
    pub fn bytes(&self) -> u64 {
        4 * (self.mean.len() + self.inv_std.len()) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(c: usize) -> Self {
        RunningStats {
            mean: vec![0.0; c],
            var: vec![1.0; c],
        }
    }

    /// Folds in one set of batch moments over `n` values per channel.
    pub fn update(&mut self, mean: &[f64], var: &[f64], n: usize, num: Numerics) {
        let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
        for c in 0..self.mean.len() {
            self.mean[c] = num.stat((1.0 - BN_MOMENTUM) * self.mean[c] + BN_MOMENTUM * mean[c]);
            self.var[c] = num.stat((1.0 - BN_MOMENTUM) * self.var[c] + BN_MOMENTUM * var[c] * unbias);
        }
    }
}

/// A node's parameters: `weight` is the weight matrix, embedding table or norm scale;
/// `bias` is the bias or norm shift.
#[derive(Debug, Default, Clone, Copy)]
pub struct NodeParams<'a> {
    pub weight: Option<&'a DenseTensor>,
    pub bias: Option<&'a DenseTensor>,
    pub mask: Option<&'a SparsityMask>,
}

/// Batch layout and numerics shared by every kernel in a pass.
#[derive(Debug, Clone, Copy)]
pub struct EvalCtx<'a> {
    pub batch: usize,
    /// Cross-example reductions (normalization statistics, parameter gradients,
    /// loss) run independently over this many equal slices of the batch.
    pub groups: usize,
    pub mode: Mode,
    pub num: Numerics,
    pub labels: &'a [usize],
}

impl EvalCtx<'_> {
    fn group_size(&self) -> usize {
        self.batch / self.groups
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub out: Vec<f64>,
    pub stats: Option<NormStats>,
    /// Per-group batch moments (mean, variance, count) from a training-mode batch norm.
    pub moments: Vec<(Vec<f64>, Vec<f64>, usize)>,
    pub flops: u64,
}

impl Forward {
    fn plain(out: Vec<f64>, flops: u64) -> Self {
        Forward {
            out,
            stats: None,
            moments: Vec::new(),
            flops,
        }
    }
}

/// A retained forward value as seen by a backward kernel.
#[derive(Debug, Clone, Copy)]
pub enum Saved<'a> {
    Full(&'a [f64]),
    Bits(&'a Bitmask),
}

/// Input gradients plus per-group parameter-gradient partial sums.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Backward {
    pub inputs: Vec<Option<Vec<f64>>>,
    pub weight: Option<Vec<Vec<f64>>>,
    pub bias: Option<Vec<Vec<f64>>>,
}

fn dims(graph: &ComputationGraph, id: NodeId) -> &[usize] {
    &graph.node(id).output.dims
}

fn per_example(graph: &ComputationGraph, id: NodeId) -> usize {
    graph.node(id).output.per_example_elements() as usize
}

fn need<T>(x: Option<T>, graph: &ComputationGraph, id: NodeId, what: &str) -> Result<T> {
    x.ok_or_else(|| Error::MissingPayload {
        node: graph.node(id).name.clone(),
        what: what.to_string(),
    })
}

fn on(mask: Option<&SparsityMask>, i: usize) -> bool {
    mask.is_none_or(|m| m.get(i))
}

fn check_len(graph: &ComputationGraph, id: NodeId, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::contract(format!(
            "node `{}` expected {want} values, got {got}",
            graph.node(id).name
        )));
    }
    Ok(())
}

/// Forward value of node `id`. `cached` statistics, when given, replace the batch
/// statistics of a training-mode normalization (re-execution reuses them).
pub fn eval_node(
    graph: &ComputationGraph,
    id: NodeId,
    inputs: &[&[f64]],
    p: NodeParams,
    ctx: &EvalCtx,
    cached: Option<&NormStats>,
    running: Option<&RunningStats>,
) -> Result<Forward> {
    let node = graph.node(id);
    if !node.kind.is_executable() {
        return Err(Error::Unsupported(format!(
            "node `{}` of kind {} has no executable semantics",
            node.name,
            node.kind.tag()
        )));
    }
    if ctx.groups == 0 || !ctx.batch.is_multiple_of(ctx.groups) {
        return Err(Error::config(format!(
            "{} groups do not split a batch of {}",
            ctx.groups, ctx.batch
        )));
    }
    for (k, &i) in node.inputs.iter().enumerate() {
        check_len(graph, id, inputs[k].len(), per_example(graph, i) * ctx.batch)?;
    }
    let num = ctx.num;
    let b = ctx.batch;
    let fwd = match &node.kind {
        NodeKind::Input { .. } => {
            return Err(Error::contract(format!(
                "input node `{}` is fed, not evaluated",
                node.name
            )));
        }
        NodeKind::Conv2D {
            c_in,
            c_out,
            k1,
            k2,
            stride,
            pad,
            ..
        } => {
            let (x, w) = (inputs[0], weight(p, graph, id)?);
            let d = dims(graph, node.inputs[0]);
            let (h, wd) = (d[1], d[2]);
            let (ho, wo) = (dims(graph, id)[1], dims(graph, id)[2]);
            let mut out = vec![0.0; b * c_out * ho * wo];
            let mut flops = 0;
            for n in 0..b {
                for o in 0..*c_out {
                    let start = p.bias.map_or(0.0, |t| t.data()[o]);
                    for y in 0..ho {
                        for xo in 0..wo {
                            let mut acc = num.acc(start);
                            for c in 0..*c_in {
                                for ky in 0..*k1 {
                                    for kx in 0..*k2 {
                                        let wi = ((o * c_in + c) * k1 + ky) * k2 + kx;
                                        if !on(p.mask, wi) {
                                            continue;
                                        }
                                        flops += 2;
                                        let iy = (y * stride + ky) as isize - *pad as isize;
                                        let ix = (xo * stride + kx) as isize - *pad as isize;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = ((n * c_in + c) * h + iy as usize) * wd + ix as usize;
                                        acc.add(x[xi] * w.data()[wi]);
                                    }
                                }
                            }
                            out[((n * c_out + o) * ho + y) * wo + xo] = num.round(acc.v);
                        }
                    }
                }
            }
            Forward::plain(out, flops)
        }
        NodeKind::Linear { d_in, d_out, tied, .. } => {
            if *tied {
                return Err(Error::Unsupported(format!(
                    "tied linear `{}` is cost-model only",
                    node.name
                )));
            }
            let (x, w) = (inputs[0], weight(p, graph, id)?);
            let rows = x.len() / d_in;
            let mut out = vec![0.0; rows * d_out];
            let mut flops = 0;
            for r in 0..rows {
                for o in 0..*d_out {
                    let mut acc = num.acc(p.bias.map_or(0.0, |t| t.data()[o]));
                    for i in 0..*d_in {
                        if on(p.mask, o * d_in + i) {
                            flops += 2;
                            acc.add(x[r * d_in + i] * w.data()[o * d_in + i]);
                        }
                    }
                    out[r * d_out + o] = num.round(acc.v);
                }
            }
            Forward::plain(out, flops)
        }
        NodeKind::BatchNorm { c } => batch_norm_forward(graph, id, inputs[0], *c, p, ctx, cached, running)?,
        NodeKind::LayerNorm { d } => layer_norm_forward(graph, id, inputs[0], *d, p, ctx, cached)?,
        NodeKind::ReLU => {
            let out: Vec<f64> = inputs[0].iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
            let n = out.len() as u64;
            Forward::plain(out, n)
        }
        NodeKind::Add => {
            let out: Vec<f64> = inputs[0].iter().zip(inputs[1]).map(|(a, c)| num.round(a + c)).collect();
            let n = out.len() as u64;
            Forward::plain(out, n)
        }
        NodeKind::Reshape { .. } => Forward::plain(inputs[0].to_vec(), 0),
        NodeKind::Transpose => {
            let d = dims(graph, node.inputs[0]);
            Forward::plain(transpose(inputs[0], d), 0)
        }
        NodeKind::AvgPool { window } => {
            let d = dims(graph, node.inputs[0]);
            let (c, h, w) = (d[0], d[1], d[2]);
            let (ho, wo) = (h / window, w / window);
            let area = (window * window) as f64;
            let x = inputs[0];
            let mut out = vec![0.0; b * c * ho * wo];
            for n in 0..b {
                for ch in 0..c {
                    for y in 0..ho {
                        for xo in 0..wo {
                            let s = num.sum((0..*window).flat_map(|dy| {
                                (0..*window)
                                    .map(move |dx| x[((n * c + ch) * h + y * window + dy) * w + xo * window + dx])
                            }));
                            out[((n * c + ch) * ho + y) * wo + xo] = num.round(s / area);
                        }
                    }
                }
            }
            Forward::plain(out, x.len() as u64)
        }
        NodeKind::SubsamplePad { stride, c_out } => {
            let d = dims(graph, node.inputs[0]);
            let (ci, h, w) = (d[0], d[1], d[2]);
            let (ho, wo) = (dims(graph, id)[1], dims(graph, id)[2]);
            let mut out = vec![0.0; b * c_out * ho * wo];
            for n in 0..b {
                for c in 0..ci {
                    for y in 0..ho {
                        for xo in 0..wo {
                            out[((n * c_out + c) * ho + y) * wo + xo] =
                                inputs[0][((n * ci + c) * h + y * stride) * w + xo * stride];
                        }
                    }
                }
            }
            Forward::plain(out, 0)
        }
        NodeKind::Embedding { vocab, d } => {
            let table = weight(p, graph, id)?;
            let mut out = Vec::with_capacity(b * d);
            for &t in inputs[0] {
                let t = token(t, *vocab, graph, id)?;
                out.extend_from_slice(&table.data()[t * d..(t + 1) * d]);
            }
            Forward::plain(out, 0)
        }
        NodeKind::SoftmaxCrossEntropy { classes } => {
            if ctx.labels.len() != b {
                return Err(Error::contract(format!(
                    "{} labels for a batch of {b}",
                    ctx.labels.len()
                )));
            }
            let x = inputs[0];
            let gs = ctx.group_size();
            let mut group_losses = Vec::with_capacity(ctx.groups);
            for g in 0..ctx.groups {
                let mut acc = num.acc(0.0);
                for n in g * gs..(g + 1) * gs {
                    let row = &x[n * classes..(n + 1) * classes];
                    let label = ctx.labels[n];
                    if label >= *classes {
                        return Err(Error::contract(format!("label {label} outside {classes} classes")));
                    }
                    acc.add(log_sum_exp(row, num) - row[label]);
                }
                group_losses.push(num.round(num.round(acc.v) / gs as f64));
            }
            let loss = if ctx.groups == 1 {
                group_losses[0]
            } else {
                num.round(num.sum(group_losses) / ctx.groups as f64)
            };
            Forward::plain(vec![loss], 4 * x.len() as u64)
        }
        NodeKind::DynamicConvCost { .. } | NodeKind::AttentionCost { .. } | NodeKind::DropoutCost { .. } => {
            unreachable!("rejected as non-executable")
        }
    };
    Ok(fwd)
}

fn weight<'a>(p: NodeParams<'a>, graph: &ComputationGraph, id: NodeId) -> Result<&'a DenseTensor> {
    p.weight
        .ok_or_else(|| Error::contract(format!("node `{}` is missing its weight", graph.node(id).name)))
}

fn token(t: f64, vocab: usize, graph: &ComputationGraph, id: NodeId) -> Result<usize> {
    if t < 0.0 || t.fract() != 0.0 || t as usize >= vocab {
        return Err(Error::contract(format!(
            "token {t} outside vocabulary of {vocab} at `{}`",
            graph.node(id).name
        )));
    }
    Ok(t as usize)
}

fn log_sum_exp(row: &[f64], num: Numerics) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s = num.sum(row.iter().map(|&v| num.round((v - m).exp())));
    num.round(m + s.ln())
}

fn transpose(x: &[f64], d: &[usize]) -> Vec<f64> {
    let (r, c) = (d[d.len() - 2], d[d.len() - 1]);
    let mut out = vec![0.0; x.len()];
    for (blk, chunk) in x.chunks(r * c).enumerate() {
        for i in 0..r {
            for j in 0..c {
                out[blk * r * c + j * r + i] = chunk[i * c + j];
            }
        }
    }
    out
}

fn norm_params<'a>(p: NodeParams<'a>, graph: &ComputationGraph, id: NodeId) -> Result<(&'a [f64], &'a [f64])> {
    match (p.weight, p.bias) {
        (Some(g), Some(b)) => Ok((g.data(), b.data())),
        _ => Err(Error::contract(format!(
            "node `{}` needs scale and shift",
            graph.node(id).name
        ))),
    }
}

/// `γ·(x−μ)·inv + β`; the single formula used by first execution, re-execution and rebuilds.
fn norm_apply(x: f64, mean: f64, inv: f64, gamma: f64, beta: f64, num: Numerics) -> f64 {
    num.round(gamma * ((x - mean) * inv) + beta)
}

#[allow(clippy::too_many_arguments)]
fn batch_norm_forward(
    graph: &ComputationGraph,
    id: NodeId,
    x: &[f64],
    c: usize,
    p: NodeParams,
    ctx: &EvalCtx,
    cached: Option<&NormStats>,
    running: Option<&RunningStats>,
) -> Result<Forward> {
    let (gamma, beta) = norm_params(p, graph, id)?;
    let num = ctx.num;
    let spatial = per_example(graph, id) / c;
    let gs = ctx.group_size();
    let mut moments = Vec::new();
    let (stats, flops) = match (ctx.mode, cached) {
        (Mode::Eval, _) => {
            let rs = need(running, graph, id, "running statistics")?;
            let inv = rs.var.iter().map(|v| num.stat(1.0 / (v + NORM_EPS).sqrt())).collect();
            let mean = rs.mean.clone();
            let stats = NormStats { mean, inv_std: inv };
            let stats = NormStats {
                mean: stats.mean.repeat(ctx.groups),
                inv_std: stats.inv_std.repeat(ctx.groups),
            };
            (stats, 4 * x.len() as u64)
        }
        (Mode::Train, Some(s)) => (s.clone(), 4 * x.len() as u64),
        (Mode::Train, None) => {
            let mut mean = vec![0.0; ctx.groups * c];
            let mut inv = vec![0.0; ctx.groups * c];
            let count = gs * spatial;
            for g in 0..ctx.groups {
                let mut gm = vec![0.0; c];
                let mut gv = vec![0.0; c];
                for ch in 0..c {
                    let vals = || {
                        (g * gs..(g + 1) * gs).flat_map(move |n| (0..spatial).map(move |s| (n * c + ch) * spatial + s))
                    };
                    let m = num.stat(num.sum(vals().map(|i| x[i])) / count as f64);
                    let v = num.stat(num.sum(vals().map(|i| (x[i] - m) * (x[i] - m))) / count as f64);
                    mean[g * c + ch] = m;
                    inv[g * c + ch] = num.stat(1.0 / (v + NORM_EPS).sqrt());
                    gm[ch] = m;
                    gv[ch] = v;
                }
                moments.push((gm, gv, count));
            }
            (NormStats { mean, inv_std: inv }, 8 * x.len() as u64)
        }
    };
    if stats.mean.len() != ctx.groups * c {
        return Err(Error::contract(format!(
            "cached statistics of `{}` cover {} channels, expected {}",
            graph.node(id).name,
            stats.mean.len(),
            ctx.groups * c
        )));
    }
    let mut out = vec![0.0; x.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let n = i / (c * spatial);
        let ch = (i / spatial) % c;
        let k = (n / gs) * c + ch;
        *o = norm_apply(x[i], stats.mean[k], stats.inv_std[k], gamma[ch], beta[ch], num);
    }
    Ok(Forward {
        out,
        stats: Some(stats),
        moments,
        flops,
    })
}

fn layer_norm_forward(
    graph: &ComputationGraph,
    id: NodeId,
    x: &[f64],
    d: usize,
    p: NodeParams,
    ctx: &EvalCtx,
    cached: Option<&NormStats>,
) -> Result<Forward> {
    let (gamma, beta) = norm_params(p, graph, id)?;
    let num = ctx.num;
    let rows = x.len() / d;
    let (stats, flops) = match cached {
        Some(s) => (s.clone(), 4 * x.len() as u64),
        None => {
            let mut mean = Vec::with_capacity(rows);
            let mut inv = Vec::with_capacity(rows);
            for row in x.chunks(d) {
                let m = num.stat(num.sum(row.iter().copied()) / d as f64);
                let v = num.stat(num.sum(row.iter().map(|&v| (v - m) * (v - m))) / d as f64);
                mean.push(m);
                inv.push(num.stat(1.0 / (v + NORM_EPS).sqrt()));
            }
            (NormStats { mean, inv_std: inv }, 8 * x.len() as u64)
        }
    };
    if stats.mean.len() != rows {
        return Err(Error::contract(format!(
            "cached statistics of `{}` do not match",
            graph.node(id).name
        )));
    }
    let out = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            norm_apply(
                v,
                stats.mean[i / d],
                stats.inv_std[i / d],
                gamma[i % d],
                beta[i % d],
                num,
            )
        })
        .collect();
    Ok(Forward {
        out,
        stats: Some(stats),
        moments: Vec::new(),
        flops,
    })
}

fn full<'a>(saved: &[Option<Saved<'a>>], k: usize, graph: &ComputationGraph, id: NodeId) -> Result<&'a [f64]> {
    match saved.get(k).copied().flatten() {
        Some(Saved::Full(v)) => Ok(v),
        _ => Err(Error::MissingPayload {
            node: graph.node(id).name.clone(),
            what: format!("full value of input {k}"),
        }),
    }
}

/// Reverse-mode step through node `id`. `want[k]` selects which input gradients to form;
/// parameter-gradient partials are produced per group.
#[allow(clippy::too_many_arguments)]
pub fn grad_node(
    graph: &ComputationGraph,
    id: NodeId,
    saved: &[Option<Saved>],
    stats: Option<&NormStats>,
    upstream: &[f64],
    p: NodeParams,
    ctx: &EvalCtx,
    want: &[bool],
) -> Result<Backward> {
    let node = graph.node(id);
    if !node.kind.is_executable() || matches!(node.kind, NodeKind::Linear { tied: true, .. }) {
        return Err(Error::Unsupported(format!(
            "node `{}` has no executable gradient",
            node.name
        )));
    }
    let num = ctx.num;
    let b = ctx.batch;
    let gs = ctx.group_size();
    let dy = upstream;
    let mut res = Backward {
        inputs: vec![None; node.inputs.len()],
        ..Backward::default()
    };
    let wants = |k: usize| want.get(k).copied().unwrap_or(false);
    match &node.kind {
        NodeKind::Input { .. } => {}
        NodeKind::Conv2D {
            c_in,
            c_out,
            k1,
            k2,
            stride,
            pad,
            bias,
        } => {
            let x = full(saved, 0, graph, id)?;
            let w = weight(p, graph, id)?.data();
            let d = dims(graph, node.inputs[0]);
            let (h, wd) = (d[1], d[2]);
            let (ho, wo) = (dims(graph, id)[1], dims(graph, id)[2]);
            let (s, pd) = (*stride as isize, *pad as isize);
            if wants(0) {
                let mut dx = vec![0.0; x.len()];
                for n in 0..b {
                    for c in 0..*c_in {
                        for iy in 0..h {
                            for ix in 0..wd {
                                let mut acc = num.acc(0.0);
                                for o in 0..*c_out {
                                    for ky in 0..*k1 {
                                        let ty = iy as isize + pd - ky as isize;
                                        if ty < 0 || ty % s != 0 || (ty / s) as usize >= ho {
                                            continue;
                                        }
                                        for kx in 0..*k2 {
                                            let tx = ix as isize + pd - kx as isize;
                                            if tx < 0 || tx % s != 0 || (tx / s) as usize >= wo {
                                                continue;
                                            }
                                            let wi = ((o * c_in + c) * k1 + ky) * k2 + kx;
                                            if !on(p.mask, wi) {
                                                continue;
                                            }
                                            let yi =
                                                ((n * c_out + o) * ho + (ty / s) as usize) * wo + (tx / s) as usize;
                                            acc.add(dy[yi] * w[wi]);
                                        }
                                    }
                                }
                                dx[((n * c_in + c) * h + iy) * wd + ix] = num.round(acc.v);
                            }
                        }
                    }
                }
                res.inputs[0] = Some(dx);
            }
            let mut dw = Vec::with_capacity(ctx.groups);
            let mut db = Vec::with_capacity(ctx.groups);
            for g in 0..ctx.groups {
                let mut gw = vec![0.0; w.len()];
                for o in 0..*c_out {
                    for c in 0..*c_in {
                        for ky in 0..*k1 {
                            for kx in 0..*k2 {
                                let wi = ((o * c_in + c) * k1 + ky) * k2 + kx;
                                if !on(p.mask, wi) {
                                    continue;
                                }
                                let mut acc = num.acc(0.0);
                                for n in g * gs..(g + 1) * gs {
                                    for y in 0..ho {
                                        let iy = (y * stride + ky) as isize - pd;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for xo in 0..wo {
                                            let ix = (xo * stride + kx) as isize - pd;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            let xi = ((n * c_in + c) * h + iy as usize) * wd + ix as usize;
                                            acc.add(dy[((n * c_out + o) * ho + y) * wo + xo] * x[xi]);
                                        }
                                    }
                                }
                                gw[wi] = num.round(acc.v);
                            }
                        }
                    }
                }
                dw.push(gw);
                if *bias {
                    let gb = (0..*c_out)
                        .map(|o| {
                            num.sum((g * gs..(g + 1) * gs).flat_map(|n| {
                                let base = (n * c_out + o) * ho * wo;
                                dy[base..base + ho * wo].iter().copied()
                            }))
                        })
                        .collect();
                    db.push(gb);
                }
            }
            res.weight = Some(dw);
            if *bias {
                res.bias = Some(db);
            }
        }
        NodeKind::Linear { d_in, d_out, bias, .. } => {
            let x = full(saved, 0, graph, id)?;
            let w = weight(p, graph, id)?.data();
            let rows = x.len() / d_in;
            let rpe = rows / b;
            if wants(0) {
                let mut dx = vec![0.0; x.len()];
                for r in 0..rows {
                    for i in 0..*d_in {
                        let mut acc = num.acc(0.0);
                        for o in 0..*d_out {
                            if on(p.mask, o * d_in + i) {
                                acc.add(dy[r * d_out + o] * w[o * d_in + i]);
                            }
                        }
                        dx[r * d_in + i] = num.round(acc.v);
                    }
                }
                res.inputs[0] = Some(dx);
            }
            let mut dw = Vec::with_capacity(ctx.groups);
            let mut db = Vec::with_capacity(ctx.groups);
            for g in 0..ctx.groups {
                let rr = g * gs * rpe..(g + 1) * gs * rpe;
                let mut gw = vec![0.0; w.len()];
                for o in 0..*d_out {
                    for i in 0..*d_in {
                        if on(p.mask, o * d_in + i) {
                            gw[o * d_in + i] = num.sum(rr.clone().map(|r| dy[r * d_out + o] * x[r * d_in + i]));
                        }
                    }
                }
                dw.push(gw);
                if *bias {
                    db.push(
                        (0..*d_out)
                            .map(|o| num.sum(rr.clone().map(|r| dy[r * d_out + o])))
                            .collect(),
                    );
                }
            }
            res.weight = Some(dw);
            if *bias {
                res.bias = Some(db);
            }
        }
        NodeKind::BatchNorm { c } => {
            let x = full(saved, 0, graph, id)?;
            let st = need(stats, graph, id, "normalization statistics")?;
            let (gamma, _) = norm_params(p, graph, id)?;
            let spatial = per_example(graph, id) / c;
            let count = (gs * spatial) as f64;
            let mut dx = vec![0.0; x.len()];
            let mut dg = Vec::with_capacity(ctx.groups);
            let mut dbeta = Vec::with_capacity(ctx.groups);
            for g in 0..ctx.groups {
                let mut gg = vec![0.0; *c];
                let mut gb = vec![0.0; *c];
                for ch in 0..*c {
                    let k = g * c + ch;
                    let (m, inv) = (st.mean[k], st.inv_std[k]);
                    let idx: Vec<usize> = (g * gs..(g + 1) * gs)
                        .flat_map(|n| (0..spatial).map(move |s| (n * c + ch) * spatial + s))
                        .collect();
                    let sdy = num.sum(idx.iter().map(|&i| dy[i]));
                    let sdyx = num.sum(idx.iter().map(|&i| dy[i] * ((x[i] - m) * inv)));
                    gg[ch] = sdyx;
                    gb[ch] = sdy;
                    for &i in &idx {
                        let xh = (x[i] - m) * inv;
                        dx[i] = num.round(gamma[ch] * inv * (dy[i] - sdy / count - xh * sdyx / count));
                    }
                }
                dg.push(gg);
                dbeta.push(gb);
            }
            if wants(0) {
                res.inputs[0] = Some(dx);
            }
            res.weight = Some(dg);
            res.bias = Some(dbeta);
        }
        NodeKind::LayerNorm { d } => {
            let x = full(saved, 0, graph, id)?;
            let st = need(stats, graph, id, "normalization statistics")?;
            let (gamma, _) = norm_params(p, graph, id)?;
            let rows = x.len() / d;
            let rpe = rows / b;
            if wants(0) {
                let mut dx = vec![0.0; x.len()];
                for r in 0..rows {
                    let (m, inv) = (st.mean[r], st.inv_std[r]);
                    let base = r * d;
                    let gdy = |j: usize| dy[base + j] * gamma[j];
                    let xh = |j: usize| (x[base + j] - m) * inv;
                    let m1 = num.sum((0..*d).map(gdy)) / *d as f64;
                    let m2 = num.sum((0..*d).map(|j| gdy(j) * xh(j))) / *d as f64;
                    for j in 0..*d {
                        dx[base + j] = num.round(inv * (gdy(j) - m1 - xh(j) * m2));
                    }
                }
                res.inputs[0] = Some(dx);
            }
            let mut dg = Vec::with_capacity(ctx.groups);
            let mut dbeta = Vec::with_capacity(ctx.groups);
            for g in 0..ctx.groups {
                let rr = g * gs * rpe..(g + 1) * gs * rpe;
                dg.push(
                    (0..*d)
                        .map(|j| {
                            num.sum(
                                rr.clone()
                                    .map(|r| dy[r * d + j] * ((x[r * d + j] - st.mean[r]) * st.inv_std[r])),
                            )
                        })
                        .collect(),
                );
                dbeta.push((0..*d).map(|j| num.sum(rr.clone().map(|r| dy[r * d + j]))).collect());
            }
            res.weight = Some(dg);
            res.bias = Some(dbeta);
        }
        NodeKind::ReLU => {
            if wants(0) {
                let dx = match saved.first().copied().flatten() {
                    Some(Saved::Bits(m)) => dy
                        .iter()
                        .enumerate()
                        .map(|(i, &g)| if m.get(i) { g } else { 0.0 })
                        .collect(),
                    Some(Saved::Full(x)) => dy.iter().zip(x).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect(),
                    None => return Err(need::<()>(None, graph, id, "sign bitmask of input 0").unwrap_err()),
                };
                res.inputs[0] = Some(dx);
            }
        }
        NodeKind::Add => {
            for k in 0..2 {
                if wants(k) {
                    res.inputs[k] = Some(dy.to_vec());
                }
            }
        }
        NodeKind::Reshape { .. } => {
            if wants(0) {
                res.inputs[0] = Some(dy.to_vec());
            }
        }
        NodeKind::Transpose => {
            if wants(0) {
                let mut d = dims(graph, node.inputs[0]).to_vec();
                let n = d.len();
                d.swap(n - 2, n - 1);
                res.inputs[0] = Some(transpose(dy, &d));
            }
        }
        NodeKind::AvgPool { window } => {
            if wants(0) {
                let d = dims(graph, node.inputs[0]);
                let (c, h, w) = (d[0], d[1], d[2]);
                let (ho, wo) = (h / window, w / window);
                let area = (window * window) as f64;
                let mut dx = vec![0.0; b * c * h * w];
                for (i, v) in dx.iter_mut().enumerate() {
                    let (n, ch, y, xo) = (i / (c * h * w), (i / (h * w)) % c, (i / w) % h, i % w);
                    *v = num.round(dy[((n * c + ch) * ho + y / window) * wo + xo / window] / area);
                }
                res.inputs[0] = Some(dx);
            }
        }
        NodeKind::SubsamplePad { stride, c_out } => {
            if wants(0) {
                let d = dims(graph, node.inputs[0]);
                let (ci, h, w) = (d[0], d[1], d[2]);
                let (ho, wo) = (dims(graph, id)[1], dims(graph, id)[2]);
                let mut dx = vec![0.0; b * ci * h * w];
                for n in 0..b {
                    for c in 0..ci {
                        for y in 0..ho {
                            for xo in 0..wo {
                                dx[((n * ci + c) * h + y * stride) * w + xo * stride] =
                                    dy[((n * c_out + c) * ho + y) * wo + xo];
                            }
                        }
                    }
                }
                res.inputs[0] = Some(dx);
            }
        }
        NodeKind::Embedding { vocab, d } => {
            let toks = full(saved, 0, graph, id)?;
            let mut dw = Vec::with_capacity(ctx.groups);
            for g in 0..ctx.groups {
                let mut acc: Vec<Acc> = (0..vocab * d).map(|_| num.acc(0.0)).collect();
                for n in g * gs..(g + 1) * gs {
                    let t = token(toks[n], *vocab, graph, id)?;
                    for j in 0..*d {
                        acc[t * d + j].add(dy[n * d + j]);
                    }
                }
                dw.push(
                    acc.iter()
                        .enumerate()
                        .map(|(i, a)| if on(p.mask, i) { num.round(a.v) } else { 0.0 })
                        .collect(),
                );
            }
            res.weight = Some(dw);
        }
        NodeKind::SoftmaxCrossEntropy { classes } => {
            if wants(0) {
                let x = full(saved, 0, graph, id)?;
                let seed = dy[0] / gs as f64;
                let mut dx = vec![0.0; x.len()];
                for n in 0..b {
                    let row = &x[n * classes..(n + 1) * classes];
                    let lse = log_sum_exp(row, num);
                    for k in 0..*classes {
                        let pk = num.round((row[k] - lse).exp());
                        let t = if k == ctx.labels[n] { 1.0 } else { 0.0 };
                        dx[n * classes + k] = num.round(seed * (pk - t));
                    }
                }
                res.inputs[0] = Some(dx);
            }
        }
        NodeKind::DynamicConvCost { .. } | NodeKind::AttentionCost { .. } | NodeKind::DropoutCost { .. } => {
            unreachable!("rejected as non-executable")
        }
    }
    Ok(res)
}

/// Rebuilds a tensor from its producer's stored input and cached statistics
/// (normalization output) or from a rebuilt normalization output (ReLU).
pub fn rebuild(
    graph: &ComputationGraph,
    id: NodeId,
    norm_input: &[f64],
    stats: &NormStats,
    p: NodeParams,
    ctx: &EvalCtx,
) -> Result<(Vec<f64>, u64)> {
    let node = graph.node(id);
    match node.kind {
        NodeKind::BatchNorm { .. } | NodeKind::LayerNorm { .. } => {
            let f = eval_node(graph, id, &[norm_input], p, ctx, Some(stats), None)?;
            Ok((f.out, f.flops))
        }
        _ => Err(Error::contract(format!(
            "`{}` cannot be rebuilt from statistics",
            node.name
        ))),
    }
}

/// Mixes gradient partials: `buf ← round_acc(buf + round(w·g))`.
pub fn accumulate(buf: &mut [f64], g: &[f64], w: f64, num: Numerics) {
    let acc = num.accumulator_format();
    for (a, &v) in buf.iter_mut().zip(g) {
        *a = acc.round(*a + num.round(w * v));
    }
}

/// Combines per-group partials; a single group is returned unchanged.
pub fn combine_groups(mut partials: Vec<Vec<f64>>, num: Numerics) -> Vec<f64> {
    if partials.len() == 1 {
        return partials.pop().unwrap_or_default();
    }
    let w = 1.0 / partials.len() as f64;
    let mut buf = vec![0.0; partials.first().map_or(0, Vec::len)];
    for g in &partials {
        accumulate(&mut buf, g, w, num);
    }
    buf
}
