//! Checkpoint plans and the backward-pass schedule derived from them.
//!
//! A plan is a tree of regions. The root region is executed by the real
//! forward pass; each [`Segment`] is re-executed (only the nodes whose
//! outputs are needed) right before its nodes are backpropagated. The
//! [`schedule`] turns a plan into a flat list of [`Event`]s that both the
//! static cost model and the engine interpret, so they agree by
//! construction on what is stored when.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ComputationGraph, NodeId, NodeKind, StorageClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "m", rename_all = "snake_case")]
pub enum CheckpointStrategy {
    None,
    EveryM(usize),
    NoBn,
    ResidualM(usize),
    ResidualMStar(usize),
}

impl CheckpointStrategy {
    pub fn m(&self) -> Option<usize> {
        match *self {
            CheckpointStrategy::EveryM(m) | CheckpointStrategy::ResidualM(m) | CheckpointStrategy::ResidualMStar(m) => {
                Some(m)
            }
            _ => None,
        }
    }

    /// Parses `none`, `no-bn`, `every-4`, `residual-2`, `residual-2*`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let num = |rest: &str| -> Result<usize> {
            match rest.parse::<usize>() {
                Ok(m) if m >= 1 => Ok(m),
                _ => Err(Error::config(format!(
                    "bad checkpoint strategy `{s}`: m must be a positive integer"
                ))),
            }
        };
        if s == "none" {
            Ok(CheckpointStrategy::None)
        } else if s == "no-bn" || s == "nobn" {
            Ok(CheckpointStrategy::NoBn)
        } else if let Some(rest) = s.strip_prefix("every-") {
            Ok(CheckpointStrategy::EveryM(num(rest)?))
        } else if let Some(rest) = s.strip_prefix("residual-") {
            match rest.strip_suffix('*') {
                Some(r) => Ok(CheckpointStrategy::ResidualMStar(num(r)?)),
                None => Ok(CheckpointStrategy::ResidualM(num(rest)?)),
            }
        } else {
            Err(Error::config(format!("unknown checkpoint strategy `{s}`")))
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m() == Some(0) {
            return Err(Error::config("checkpoint strategy m must be >= 1"));
        }
        Ok(())
    }
}

impl fmt::Display for CheckpointStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointStrategy::None => write!(f, "none"),
            CheckpointStrategy::EveryM(m) => write!(f, "every-{m}"),
            CheckpointStrategy::NoBn => write!(f, "no-bn"),
            CheckpointStrategy::ResidualM(m) => write!(f, "residual-{m}"),
            CheckpointStrategy::ResidualMStar(m) => write!(f, "residual-{m}*"),
        }
    }
}

/// How much of a tensor a backward pass needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    Bitmask,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Item {
    Node(NodeId),
    Segment(Segment),
}

/// Contiguous node range re-executed before its backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub first: NodeId,
    pub last: NodeId,
    /// Tensors produced before `first` and consumed inside the range.
    pub entries: Vec<NodeId>,
    pub items: Vec<Item>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub strategy: CheckpointStrategy,
    pub items: Vec<Item>,
    /// Tensors never stored; rebuilt from cached statistics when a backward pass needs them.
    pub cheap: Vec<bool>,
}

/// What a node's backward pass reads: tensors at a level, plus private extras.
pub fn requirements(graph: &ComputationGraph, id: NodeId) -> Vec<(NodeId, Level)> {
    let node = graph.node(id);
    let mut out: Vec<(NodeId, Level)> = Vec::new();
    let level = match node.kind.storage_class() {
        StorageClass::Nothing => return out,
        StorageClass::BitmaskInput => Level::Bitmask,
        StorageClass::FullInput | StorageClass::CachedStats => Level::Full,
    };
    for &t in &node.inputs {
        if !out.iter().any(|(x, _)| *x == t) {
            out.push((t, level));
        }
    }
    out
}

/// Whether the node keeps private state (statistics, attention probabilities,
/// generated kernels) between forward and backward.
pub fn has_extras(kind: &NodeKind) -> bool {
    matches!(
        kind,
        NodeKind::BatchNorm { .. }
            | NodeKind::LayerNorm { .. }
            | NodeKind::AttentionCost { .. }
            | NodeKind::DynamicConvCost { .. }
            | NodeKind::DropoutCost { .. }
    )
}

/// Whether a tensor carries a gradient (it depends on some parameter).
pub fn requires_grad(graph: &ComputationGraph) -> Vec<bool> {
    let mut rg = vec![false; graph.len()];
    for id in graph.ids() {
        let n = graph.node(id);
        rg[id.0] = graph.params_of(id).next().is_some()
            || matches!(n.kind, NodeKind::Linear { tied: true, .. })
            || n.inputs.iter().any(|i| rg[i.0]);
    }
    rg
}

fn cheap_tensors(graph: &ComputationGraph) -> Vec<bool> {
    let mut cheap = vec![false; graph.len()];
    for id in graph.ids() {
        let n = graph.node(id);
        cheap[id.0] = match n.kind {
            NodeKind::BatchNorm { .. } | NodeKind::LayerNorm { .. } => !cheap[n.inputs[0].0],
            NodeKind::ReLU => graph.node(n.inputs[0]).kind.is_norm() && cheap[n.inputs[0].0],
            _ => false,
        };
    }
    cheap
}

fn segment(graph: &ComputationGraph, first: NodeId, last: NodeId, items: Vec<Item>) -> Segment {
    let mut entries: Vec<NodeId> = Vec::new();
    for i in first.0..=last.0 {
        for &t in &graph.node(NodeId(i)).inputs {
            if t < first && !entries.contains(&t) {
                entries.push(t);
            }
        }
    }
    entries.sort();
    Segment {
        first,
        last,
        entries,
        items,
    }
}

/// Node items for the half-open index range `a..end`.
fn node_items(a: usize, end: usize) -> Vec<Item> {
    (a..end).map(|i| Item::Node(NodeId(i))).collect()
}

fn require_blocks(graph: &ComputationGraph, s: CheckpointStrategy) -> Result<()> {
    if graph.blocks().is_empty() {
        return Err(Error::config(format!("strategy {s} needs residual block annotations")));
    }
    Ok(())
}

/// Builds the region tree for a strategy.
pub fn build_plan(graph: &ComputationGraph, strategy: CheckpointStrategy) -> Result<Plan> {
    strategy.validate()?;
    let n = graph.len();
    let mut cheap = vec![false; n];
    let items = match strategy {
        CheckpointStrategy::None => node_items(0, n),
        CheckpointStrategy::NoBn => {
            cheap = cheap_tensors(graph);
            node_items(0, n)
        }
        CheckpointStrategy::EveryM(m) => {
            let cps = every_m_checkpoints(graph, m);
            let lead = graph
                .nodes()
                .iter()
                .take_while(|nd| matches!(nd.kind, NodeKind::Input { .. }))
                .count();
            let mut items = node_items(0, lead);
            let mut starts: Vec<usize> = Vec::new();
            if lead < n {
                starts.push(lead);
            }
            for c in cps {
                if c.0 > lead {
                    starts.push(c.0);
                }
            }
            for (k, &s) in starts.iter().enumerate() {
                let e = starts.get(k + 1).map(|&x| x - 1).unwrap_or(n - 1);
                items.push(Item::Segment(segment(
                    graph,
                    NodeId(s),
                    NodeId(e),
                    node_items(s, e + 1),
                )));
            }
            items
        }
        CheckpointStrategy::ResidualM(m) | CheckpointStrategy::ResidualMStar(m) => {
            require_blocks(graph, strategy)?;
            let star = matches!(strategy, CheckpointStrategy::ResidualMStar(_));
            if star {
                cheap = cheap_tensors(graph);
            }
            let blocks = graph.blocks();
            let mut items = Vec::new();
            let mut next = 0usize;
            for group in blocks.chunks(m) {
                let (first, last) = (group[0].entry, group[group.len() - 1].exit);
                items.extend(node_items(next, first.0));
                let inner = if star {
                    let mut v = Vec::new();
                    let mut cur = first.0;
                    for b in group {
                        v.extend(node_items(cur, b.entry.0));
                        v.push(Item::Segment(segment(
                            graph,
                            b.entry,
                            b.exit,
                            node_items(b.entry.0, b.exit.0 + 1),
                        )));
                        cur = b.exit.0 + 1;
                    }
                    v
                } else {
                    node_items(first.0, last.0 + 1)
                };
                items.push(Item::Segment(segment(graph, first, last, inner)));
                next = last.0 + 1;
            }
            items.extend(node_items(next, n));
            items
        }
    };
    Ok(Plan { strategy, items, cheap })
}

/// Storing nodes at 1-based positions m, 2m, ... strictly before the last storing node.
fn every_m_checkpoints(graph: &ComputationGraph, m: usize) -> Vec<NodeId> {
    let storing = graph.storing_nodes();
    storing
        .iter()
        .enumerate()
        .filter(|(i, _)| (i + 1) % m == 0 && i + 1 < storing.len())
        .map(|(_, &id)| id)
        .collect()
}

/// Nodes whose backward payload is retained by the forward pass under `strategy`.
pub fn checkpoint_nodes(graph: &ComputationGraph, strategy: CheckpointStrategy) -> Result<Vec<NodeId>> {
    strategy.validate()?;
    Ok(match strategy {
        CheckpointStrategy::None => graph.storing_nodes(),
        CheckpointStrategy::EveryM(m) => every_m_checkpoints(graph, m),
        CheckpointStrategy::NoBn => {
            let cheap = cheap_tensors(graph);
            graph
                .storing_nodes()
                .into_iter()
                .filter(|&id| requirements(graph, id).iter().all(|(t, _)| !cheap[t.0]))
                .collect()
        }
        CheckpointStrategy::ResidualM(m) | CheckpointStrategy::ResidualMStar(m) => {
            require_blocks(graph, strategy)?;
            let mut out: Vec<NodeId> = graph
                .storing_nodes()
                .into_iter()
                .filter(|&id| graph.block_of(id).is_none())
                .collect();
            out.extend(
                graph
                    .blocks()
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| (i + 1) % m == 0)
                    .map(|(_, b)| b.exit),
            );
            out.sort();
            out
        }
    })
}

/// One step of the forward/backward schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    /// Execute a node's forward function into the pass workspace.
    Compute {
        node: NodeId,
        recompute: bool,
    },
    /// Retain a tensor from the workspace for later backward passes.
    Store {
        tensor: NodeId,
        level: Level,
    },
    /// Retain a node's private extras (normalization statistics and the like).
    StoreExtras {
        node: NodeId,
    },
    /// End of a forward or recompute pass; unretained values are dropped.
    ClearWorkspace,
    /// Allocate the unit gradient of the loss.
    Seed,
    /// Backpropagate through a node after rebuilding the listed cheap tensors transiently.
    Backward {
        node: NodeId,
        materialize: Vec<(NodeId, Level)>,
    },
    Release {
        tensor: NodeId,
    },
    ReleaseExtras {
        node: NodeId,
    },
}

struct Walker<'a> {
    graph: &'a ComputationGraph,
    plan: &'a Plan,
    events: Vec<Event>,
    held: BTreeMap<NodeId, Level>,
    extras_held: BTreeMap<NodeId, ()>,
    /// Nodes (not yet backpropagated) that read each tensor from storage.
    readers: Vec<Vec<NodeId>>,
    /// Unfinished segments (by first node) listing each tensor as an entry.
    entry_of: Vec<Vec<NodeId>>,
    done: Vec<bool>,
    seg_done: BTreeMap<NodeId, bool>,
}

impl Walker<'_> {
    fn store(&mut self, tensor: NodeId, level: Level) {
        match self.held.get(&tensor) {
            Some(&l) if l >= level => {}
            Some(_) => {
                self.events.push(Event::Release { tensor });
                self.events.push(Event::Store { tensor, level });
                self.held.insert(tensor, level);
            }
            None => {
                self.events.push(Event::Store { tensor, level });
                self.held.insert(tensor, level);
            }
        }
    }

    fn release_finished(&mut self) {
        let finished: Vec<NodeId> = self
            .held
            .keys()
            .copied()
            .filter(|t| {
                self.readers[t.0].iter().all(|r| self.done[r.0])
                    && self.entry_of[t.0]
                        .iter()
                        .all(|s| self.seg_done.get(s).copied().unwrap_or(false))
            })
            .collect();
        for t in finished {
            self.held.remove(&t);
            self.events.push(Event::Release { tensor: t });
        }
    }

    /// Tensor/extras retained by the pass that executes `items` over `[first, last]`.
    fn pass_targets(&self, items: &[Item], first: NodeId, last: NodeId) -> (BTreeMap<NodeId, Level>, Vec<NodeId>) {
        let in_range = |t: NodeId| first <= t && t <= last;
        let mut stores: BTreeMap<NodeId, Level> = BTreeMap::new();
        let mut extras = Vec::new();
        for item in items {
            match item {
                Item::Node(x) => {
                    for (t, l) in requirements(self.graph, *x) {
                        if in_range(t) && !self.plan.cheap[t.0] {
                            let e = stores.entry(t).or_insert(l);
                            *e = (*e).max(l);
                        }
                    }
                    let k = &self.graph.node(*x).kind;
                    if has_extras(k) && !k.is_norm() {
                        extras.push(*x);
                    }
                }
                Item::Segment(s) => {
                    for &t in &s.entries {
                        if in_range(t) {
                            stores.insert(t, Level::Full);
                        }
                    }
                }
            }
        }
        (stores, extras)
    }

    fn recompute_pass(&mut self, seg: &Segment) {
        let (stores, extras) = self.pass_targets(&seg.items, seg.first, seg.last);
        let (a, b) = (seg.first.0, seg.last.0);
        let mut needed = vec![false; b - a + 1];
        for t in stores.keys().chain(extras.iter()) {
            needed[t.0 - a] = true;
        }
        for i in (a..=b).rev() {
            if needed[i - a] {
                for inp in &self.graph.node(NodeId(i)).inputs {
                    if inp.0 >= a {
                        needed[inp.0 - a] = true;
                    }
                }
            }
        }
        for i in a..=b {
            if needed[i - a] {
                self.events.push(Event::Compute {
                    node: NodeId(i),
                    recompute: true,
                });
            }
        }
        for x in extras {
            self.events.push(Event::StoreExtras { node: x });
            self.extras_held.insert(x, ());
        }
        for (t, l) in stores {
            self.store(t, l);
        }
        self.events.push(Event::ClearWorkspace);
    }

    fn walk(&mut self, items: &[Item]) {
        for item in items.iter().rev() {
            match item {
                Item::Node(x) => {
                    let materialize: Vec<(NodeId, Level)> = requirements(self.graph, *x)
                        .into_iter()
                        .filter(|(t, _)| self.plan.cheap[t.0])
                        .collect();
                    self.events.push(Event::Backward { node: *x, materialize });
                    self.done[x.0] = true;
                    if self.extras_held.remove(x).is_some() {
                        self.events.push(Event::ReleaseExtras { node: *x });
                    }
                    self.release_finished();
                }
                Item::Segment(s) => {
                    self.recompute_pass(s);
                    self.walk(&s.items);
                    self.seg_done.insert(s.first, true);
                    self.release_finished();
                }
            }
        }
    }
}

fn collect_entries(items: &[Item], entry_of: &mut [Vec<NodeId>], seg_done: &mut BTreeMap<NodeId, bool>) {
    for item in items {
        if let Item::Segment(s) = item {
            for &t in &s.entries {
                entry_of[t.0].push(s.first);
            }
            seg_done.insert(s.first, false);
            collect_entries(&s.items, entry_of, seg_done);
        }
    }
}

/// Flattens a plan into the event sequence of one training step.
pub fn schedule(graph: &ComputationGraph, plan: &Plan) -> Vec<Event> {
    let n = graph.len();
    let mut readers = vec![Vec::new(); n];
    for id in graph.ids() {
        for (t, _) in requirements(graph, id) {
            if !plan.cheap[t.0] {
                readers[t.0].push(id);
            }
        }
    }
    let mut entry_of = vec![Vec::new(); n];
    let mut seg_done = BTreeMap::new();
    collect_entries(&plan.items, &mut entry_of, &mut seg_done);
    let mut w = Walker {
        graph,
        plan,
        events: Vec::new(),
        held: BTreeMap::new(),
        extras_held: BTreeMap::new(),
        readers,
        entry_of,
        done: vec![false; n],
        seg_done,
    };
    if n == 0 {
        return w.events;
    }
    for id in graph.ids() {
        w.events.push(Event::Compute {
            node: id,
            recompute: false,
        });
    }
    // Normalization statistics are always cached by the real forward pass.
    for id in graph.ids() {
        if graph.node(id).kind.is_norm() {
            w.events.push(Event::StoreExtras { node: id });
            w.extras_held.insert(id, ());
        }
    }
    let (stores, extras) = w.pass_targets(&plan.items, NodeId(0), NodeId(n - 1));
    for x in extras {
        w.events.push(Event::StoreExtras { node: x });
        w.extras_held.insert(x, ());
    }
    for (t, l) in stores {
        w.store(t, l);
    }
    w.events.push(Event::ClearWorkspace);
    w.events.push(Event::Seed);
    w.walk(&plan.items);
    debug_assert!(w.held.is_empty(), "all payloads released at the end of backward");
    w.events
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_wrn, GraphBuilder};

    fn chain(len: usize) -> ComputationGraph {
        let mut b = GraphBuilder::new("chain");
        let x = b.add("x", NodeKind::Input { shape: vec![4] }, &[]).unwrap();
        let mut h = b.add("flat", NodeKind::Reshape { shape: vec![4] }, &[x]).unwrap();
        for i in 1..len {
            h = b
                .add(
                    format!("n{i}"),
                    NodeKind::Linear {
                        d_in: 4,
                        d_out: 4,
                        bias: true,
                        tied: false,
                    },
                    &[h],
                )
                .unwrap();
        }
        let l = b
            .add("loss", NodeKind::SoftmaxCrossEntropy { classes: 4 }, &[h])
            .unwrap();
        b.loss(l);
        b.build().unwrap()
    }

    #[test]
    fn parses_strategies() {
        for s in ["none", "no-bn", "every-3", "residual-2", "residual-1*"] {
            assert_eq!(CheckpointStrategy::parse(s).unwrap().to_string(), s);
        }
        assert!(CheckpointStrategy::parse("every-0").is_err());
        assert!(CheckpointStrategy::parse("sometimes").is_err());
    }

    #[test]
    fn every_m_positions() {
        let g = chain(20);
        let cps = checkpoint_nodes(&g, CheckpointStrategy::EveryM(4)).unwrap();
        let storing = g.storing_nodes();
        let pos: Vec<usize> = cps
            .iter()
            .map(|c| storing.iter().position(|s| s == c).unwrap() + 1)
            .collect();
        assert_eq!(pos, [4, 8, 12, 16]);
        assert_eq!(checkpoint_nodes(&g, CheckpointStrategy::None).unwrap(), storing);
    }

    #[test]
    fn residual_needs_blocks() {
        let g = chain(5);
        assert!(matches!(
            build_plan(&g, CheckpointStrategy::ResidualM(1)),
            Err(Error::Config(_))
        ));
        assert!(checkpoint_nodes(&g, CheckpointStrategy::ResidualMStar(2)).is_err());
    }

    #[test]
    fn wrn_residual_2_checkpoints_six_exits() {
        let g = build_wrn(28, 2.0, 10, [3, 32, 32]).unwrap();
        let cps = checkpoint_nodes(&g, CheckpointStrategy::ResidualM(2)).unwrap();
        let exits: Vec<_> = cps
            .iter()
            .filter(|c| g.blocks().iter().any(|b| b.exit == **c))
            .collect();
        assert_eq!(exits.len(), 6);
    }

    #[test]
    fn schedules_release_everything_and_none_never_recomputes() {
        let g = build_wrn(10, 1.0, 10, [3, 8, 8]).unwrap();
        for s in [
            CheckpointStrategy::None,
            CheckpointStrategy::NoBn,
            CheckpointStrategy::EveryM(3),
            CheckpointStrategy::ResidualM(1),
            CheckpointStrategy::ResidualMStar(2),
        ] {
            let plan = build_plan(&g, s).unwrap();
            let ev = schedule(&g, &plan);
            let stores = ev.iter().filter(|e| matches!(e, Event::Store { .. })).count();
            let releases = ev.iter().filter(|e| matches!(e, Event::Release { .. })).count();
            assert_eq!(stores, releases, "{s}");
            let backs = ev.iter().filter(|e| matches!(e, Event::Backward { .. })).count();
            assert_eq!(backs, g.len(), "{s}");
            let recomputes = ev
                .iter()
                .filter(|e| matches!(e, Event::Compute { recompute: true, .. }))
                .count();
            assert_eq!(
                recomputes == 0,
                s == CheckpointStrategy::None || s == CheckpointStrategy::NoBn,
                "{s}"
            );
        }
    }
}
