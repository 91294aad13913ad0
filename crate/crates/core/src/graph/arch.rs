//! Text architecture format.
//!
//! ```text
//! # comment
//! name wrn-28-2
//! batch_unit examples            # or: batch_unit tokens 250
//! x    = input(shape=3x32x32)
//! c0   = conv2d(c_in=3, c_out=16, k1=3, k2=3, stride=1, pad=1) <- x
//! c1   = conv2d(c_in=16, c_out=16, k1=3, k2=3, pad=1, sparse=1) <- c0
//! residual_block c1 c1
//! loss out
//! ```
//!
//! Node declarations may appear in any order; they are sorted topologically
//! (stable with respect to file order).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use super::{BatchUnit, ComputationGraph, GraphBuilder, NodeKind};
use crate::error::{Error, Result};

struct Decl {
    line: usize,
    name: String,
    kind: NodeKind,
    sparse: bool,
    inputs: Vec<(String, usize)>,
}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
    line: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Syntax {
            line: self.line,
            column: self.src[..self.pos].chars().count() + 1,
            message: msg.into(),
        }
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn at_end(&mut self) -> bool {
        self.skip_ws();
        self.pos >= self.src.len()
    }

    fn ident(&mut self) -> Result<(String, usize)> {
        self.skip_ws();
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-') {
                self.pos += 1;
            } else {
                break;
            }
        }
        if start == self.pos {
            return Err(match self.peek() {
                Some(c) => self.err(format!("expected identifier, found `{c}`")),
                None => self.err("expected identifier, found end of line"),
            });
        }
        Ok((self.src[start..self.pos].to_string(), start))
    }

    fn expect(&mut self, tok: &str) -> Result<()> {
        self.skip_ws();
        if self.src[self.pos..].starts_with(tok) {
            self.pos += tok.len();
            Ok(())
        } else {
            Err(self.err(format!("expected `{tok}`")))
        }
    }

    fn eat(&mut self, tok: &str) -> bool {
        self.skip_ws();
        if self.src[self.pos..].starts_with(tok) {
            self.pos += tok.len();
            true
        } else {
            false
        }
    }
}

fn strip_comment(line: &str) -> &str {
    line.split('#').next().unwrap_or("")
}

/// Parses an architecture description into a validated graph.
pub fn parse_arch(text: &str) -> Result<ComputationGraph> {
    let mut name = String::from("graph");
    let mut unit = BatchUnit::Examples;
    let mut decls: Vec<Decl> = Vec::new();
    let mut blocks: Vec<(String, String, usize)> = Vec::new();
    let mut loss: Option<(String, usize)> = None;

    for (i, raw) in text.lines().enumerate() {
        let mut c = Cursor {
            src: strip_comment(raw),
            pos: 0,
            line: i + 1,
        };
        if c.at_end() {
            continue;
        }
        let (head, _) = c.ident()?;
        let is_decl = c.eat("=");
        match head.as_str() {
            "name" if !is_decl => {
                name = c.ident()?.0;
            }
            "batch_unit" if !is_decl => {
                let (u, _) = c.ident()?;
                unit = match u.as_str() {
                    "examples" => BatchUnit::Examples,
                    "tokens" => {
                        let (v, _) = c.ident()?;
                        let min = v.parse().map_err(|_| c.err(format!("`{v}` is not an integer")))?;
                        BatchUnit::Tokens { min_microbatch: min }
                    }
                    other => return Err(c.err(format!("unknown batch unit `{other}`"))),
                };
            }
            "residual_block" if !is_decl => {
                let (a, _) = c.ident()?;
                let (b, _) = c.ident()?;
                blocks.push((a, b, i + 1));
            }
            "loss" if !is_decl => {
                loss = Some((c.ident()?.0, i + 1));
            }
            _ => {
                if !is_decl {
                    return Err(c.err("expected `=`"));
                }
                let (kind_name, _) = c.ident()?;
                c.expect("(")?;
                let mut args: BTreeMap<String, String> = BTreeMap::new();
                if !c.eat(")") {
                    loop {
                        let (k, _) = c.ident()?;
                        c.expect("=")?;
                        let (v, _) = c.ident()?;
                        if args.insert(k.clone(), v).is_some() {
                            return Err(c.err(format!("duplicate parameter `{k}`")));
                        }
                        if c.eat(")") {
                            break;
                        }
                        c.expect(",")?;
                    }
                }
                let mut inputs = Vec::new();
                if c.eat("<-") {
                    loop {
                        inputs.push((c.ident()?.0, i + 1));
                        if !c.eat(",") {
                            break;
                        }
                    }
                }
                if !c.at_end() {
                    return Err(c.err("unexpected trailing input"));
                }
                let (kind, sparse) = build_kind(&head, &kind_name, args)?;
                decls.push(Decl {
                    line: i + 1,
                    name: head,
                    kind,
                    sparse,
                    inputs,
                });
            }
        }
    }

    let order = topo_order(&decls)?;
    let mut b = GraphBuilder::new(name);
    b.batch_unit(unit);
    for idx in order {
        let d = &decls[idx];
        let inputs: Vec<_> = d.inputs.iter().map(|(n, _)| b.id(n).expect("sorted")).collect();
        b.add_node(d.name.clone(), d.kind.clone(), &inputs, d.sparse)?;
    }
    let resolve = |b: &GraphBuilder, n: &str, line: usize| {
        b.id(n)
            .ok_or_else(|| Error::semantic(n, format!("unknown node referenced on line {line}")))
    };
    for (entry, exit, line) in &blocks {
        let (e, x) = (resolve(&b, entry, *line)?, resolve(&b, exit, *line)?);
        b.block(e, x);
    }
    if let Some((l, line)) = &loss {
        let id = resolve(&b, l, *line)?;
        b.loss(id);
    }
    b.build()
}

fn topo_order(decls: &[Decl]) -> Result<Vec<usize>> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, d) in decls.iter().enumerate() {
        if index.insert(&d.name, i).is_some() {
            return Err(Error::semantic(
                &d.name,
                format!("duplicate node id on line {}", d.line),
            ));
        }
    }
    let mut deps: Vec<Vec<usize>> = Vec::with_capacity(decls.len());
    for d in decls {
        let mut v = Vec::new();
        for (n, line) in &d.inputs {
            let j = *index
                .get(n.as_str())
                .ok_or_else(|| Error::semantic(&d.name, format!("unknown input `{n}` on line {line}")))?;
            v.push(j);
        }
        deps.push(v);
    }
    // Depth-first post-order visiting declarations in file order keeps the result stable.
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let mut mark = vec![Mark::New; decls.len()];
    let mut order = Vec::with_capacity(decls.len());
    for root in 0..decls.len() {
        if mark[root] != Mark::New {
            continue;
        }
        let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
        mark[root] = Mark::Active;
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            if let Some(&dep) = deps[node].get(*next) {
                *next += 1;
                match mark[dep] {
                    Mark::New => {
                        mark[dep] = Mark::Active;
                        stack.push((dep, 0));
                    }
                    Mark::Active => {
                        return Err(Error::semantic(
                            &decls[node].name,
                            format!(
                                "cycle: `{}` consumes `{}` which depends on it",
                                decls[node].name, decls[dep].name
                            ),
                        ));
                    }
                    Mark::Done => {}
                }
            } else {
                mark[node] = Mark::Done;
                order.push(node);
                stack.pop();
            }
        }
    }
    Ok(order)
}

struct Args<'a> {
    node: &'a str,
    map: BTreeMap<String, String>,
}

impl Args<'_> {
    fn opt(&mut self, key: &str) -> Result<Option<usize>> {
        self.map
            .remove(key)
            .map(|s| {
                s.parse::<usize>().map_err(|_| {
                    Error::semantic(
                        self.node,
                        format!("parameter `{key}` = `{s}` is not a nonnegative integer"),
                    )
                })
            })
            .transpose()
    }

    fn req(&mut self, key: &str) -> Result<usize> {
        self.opt(key)?
            .ok_or_else(|| Error::semantic(self.node, format!("missing parameter `{key}`")))
    }

    fn flag(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.opt(key)? {
            None => Ok(default),
            Some(0) => Ok(false),
            Some(1) => Ok(true),
            Some(x) => Err(Error::semantic(
                self.node,
                format!("flag `{key}` must be 0 or 1, got {x}"),
            )),
        }
    }

    fn rate(&mut self, key: &str) -> Result<f64> {
        let s = self
            .map
            .remove(key)
            .ok_or_else(|| Error::semantic(self.node, format!("missing parameter `{key}`")))?;
        match s.parse::<f64>() {
            Ok(p) if (0.0..1.0).contains(&p) => Ok(p),
            _ => Err(Error::semantic(
                self.node,
                format!("`{key}` = `{s}` is not a rate in [0, 1)"),
            )),
        }
    }

    fn shape(&mut self) -> Result<Vec<usize>> {
        let s = self
            .map
            .remove("shape")
            .ok_or_else(|| Error::semantic(self.node, "missing parameter `shape`"))?;
        s.split('x')
            .map(|p| {
                p.parse()
                    .map_err(|_| Error::semantic(self.node, format!("bad shape `{s}`")))
            })
            .collect()
    }
}

fn build_kind(node: &str, kind: &str, args: BTreeMap<String, String>) -> Result<(NodeKind, bool)> {
    let mut a = Args { node, map: args };
    let sparse = a.flag("sparse", false)?;
    let k = match kind {
        "input" => NodeKind::Input { shape: a.shape()? },
        "conv2d" => NodeKind::Conv2D {
            c_in: a.req("c_in")?,
            c_out: a.req("c_out")?,
            k1: a.req("k1")?,
            k2: a.req("k2")?,
            stride: a.opt("stride")?.unwrap_or(1),
            pad: a.opt("pad")?.unwrap_or(0),
            bias: a.flag("bias", false)?,
        },
        "linear" => NodeKind::Linear {
            d_in: a.req("d_in")?,
            d_out: a.req("d_out")?,
            bias: a.flag("bias", true)?,
            tied: a.flag("tied", false)?,
        },
        "batchnorm" => NodeKind::BatchNorm { c: a.req("c")? },
        "layernorm" => NodeKind::LayerNorm { d: a.req("d")? },
        "relu" => NodeKind::ReLU,
        "add" => NodeKind::Add,
        "transpose" => NodeKind::Transpose,
        "reshape" => NodeKind::Reshape { shape: a.shape()? },
        "avgpool" => NodeKind::AvgPool {
            window: a.req("window")?,
        },
        "subsample_pad" => NodeKind::SubsamplePad {
            stride: a.req("stride")?,
            c_out: a.req("c_out")?,
        },
        "embedding" => NodeKind::Embedding {
            vocab: a.req("vocab")?,
            d: a.req("d")?,
        },
        "softmax_xent" => NodeKind::SoftmaxCrossEntropy {
            classes: a.req("classes")?,
        },
        "dynconv_cost" => NodeKind::DynamicConvCost {
            d: a.req("d")?,
            heads: a.req("heads")?,
            kernel: a.req("kernel")?,
        },
        "attention_cost" => NodeKind::AttentionCost {
            d: a.req("d")?,
            heads: a.req("heads")?,
            src_len: a.req("src_len")?,
        },
        "dropout_cost" => NodeKind::DropoutCost { p: a.rate("p")? },
        other => return Err(Error::semantic(node, format!("unknown node kind `{other}`"))),
    };
    if let Some(extra) = a.map.keys().next() {
        return Err(Error::semantic(node, format!("unknown parameter `{extra}` for {kind}")));
    }
    Ok((k, sparse))
}

fn kind_args(kind: &NodeKind) -> String {
    let dims = |s: &[usize]| s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
    let b = |f: bool| u8::from(f);
    match kind {
        NodeKind::Input { shape } => format!("shape={}", dims(shape)),
        NodeKind::Conv2D {
            c_in,
            c_out,
            k1,
            k2,
            stride,
            pad,
            bias,
        } => format!(
            "c_in={c_in}, c_out={c_out}, k1={k1}, k2={k2}, stride={stride}, pad={pad}, bias={}",
            b(*bias)
        ),
        NodeKind::Linear {
            d_in,
            d_out,
            bias,
            tied,
        } => {
            format!("d_in={d_in}, d_out={d_out}, bias={}, tied={}", b(*bias), b(*tied))
        }
        NodeKind::BatchNorm { c } => format!("c={c}"),
        NodeKind::LayerNorm { d } => format!("d={d}"),
        NodeKind::ReLU | NodeKind::Add | NodeKind::Transpose => String::new(),
        NodeKind::Reshape { shape } => format!("shape={}", dims(shape)),
        NodeKind::AvgPool { window } => format!("window={window}"),
        NodeKind::SubsamplePad { stride, c_out } => format!("stride={stride}, c_out={c_out}"),
        NodeKind::Embedding { vocab, d } => format!("vocab={vocab}, d={d}"),
        NodeKind::SoftmaxCrossEntropy { classes } => format!("classes={classes}"),
        NodeKind::DynamicConvCost { d, heads, kernel } => format!("d={d}, heads={heads}, kernel={kernel}"),
        NodeKind::AttentionCost { d, heads, src_len } => format!("d={d}, heads={heads}, src_len={src_len}"),
        NodeKind::DropoutCost { p } => format!("p={p}"),
    }
}

/// Writes `graph` in the text format; `parse_arch` of the result reproduces the graph.
pub fn serialize_arch(graph: &ComputationGraph) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "name {}", graph.name);
    match graph.batch_unit {
        BatchUnit::Examples => out.push_str("batch_unit examples\n"),
        BatchUnit::Tokens { min_microbatch } => {
            let _ = writeln!(out, "batch_unit tokens {min_microbatch}");
        }
    }
    for node in graph.nodes() {
        let mut args = kind_args(&node.kind);
        if node.sparse {
            if !args.is_empty() {
                args.push_str(", ");
            }
            args.push_str("sparse=1");
        }
        let _ = write!(out, "{} = {}({args})", node.name, node.kind.tag());
        if !node.inputs.is_empty() {
            let ins: Vec<&str> = node.inputs.iter().map(|&i| graph.node(i).name.as_str()).collect();
            let _ = write!(out, " <- {}", ins.join(", "));
        }
        out.push('\n');
    }
    for b in graph.blocks() {
        let _ = writeln!(
            out,
            "residual_block {} {}",
            graph.node(b.entry).name,
            graph.node(b.exit).name
        );
    }
    if let Some(l) = graph.loss() {
        let _ = writeln!(out, "loss {}", graph.node(l).name);
    }
    out
}
