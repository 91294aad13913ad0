//! Dynamic sparse reparameterization: global magnitude pruning with an adaptive
//! threshold and regrowth at a constant nonzero budget.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::ParamStore;
use crate::optim::Optimizer;
use crate::profiler::nnz_at;
use crate::{ComputationGraph, DenseTensor, Error, Result, SparsityMask};

/// Rewire every `period` updates within `[start, end)`; 0 disables rewiring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewirePeriod {
    pub start: u64,
    pub end: u64,
    pub period: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsrConfig {
    /// Prune target as a fraction of the sparsified group's element count.
    pub target_prune_fraction: f64,
    pub initial_threshold: f64,
    pub adjust_factor: f64,
    pub schedule: Vec<RewirePeriod>,
    pub fraction_multiplier: f64,
    pub frequency_multiplier: f64,
}

const WRN_SCHEDULE: [(u64, u64, u64); 5] = [
    (0, 12_500, 100),
    (12_500, 40_000, 200),
    (40_000, 70_000, 400),
    (70_000, 95_000, 800),
    (95_000, 100_000, 0),
];

impl Default for DsrConfig {
    fn default() -> Self {
        Self::wrn()
    }
}

impl DsrConfig {
    /// 100k-update WideResNet schedule (500 updates per epoch).
    pub fn wrn() -> Self {
        DsrConfig {
            target_prune_fraction: 0.01377866,
            initial_threshold: 0.001,
            adjust_factor: 2.0,
            schedule: WRN_SCHEDULE
                .iter()
                .map(|&(start, end, period)| RewirePeriod { start, end, period })
                .collect(),
            fraction_multiplier: 1.0,
            frequency_multiplier: 1.0,
        }
    }

    /// The WideResNet schedule with every range halved (50k updates).
    pub fn transformer() -> Self {
        let mut c = Self::wrn();
        for p in &mut c.schedule {
            p.start /= 2;
            p.end /= 2;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.target_prune_fraction * self.fraction_multiplier;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::config(format!("effective prune fraction {f} outside (0, 1)")));
        }
        if !(self.adjust_factor > 1.0 && self.adjust_factor.is_finite()) {
            return Err(Error::config("adjust factor must exceed 1"));
        }
        if !(self.initial_threshold > 0.0 && self.initial_threshold.is_finite()) {
            return Err(Error::config("initial threshold must be positive"));
        }
        if !(self.frequency_multiplier > 0.0 && self.frequency_multiplier.is_finite()) {
            return Err(Error::config("frequency multiplier must be positive"));
        }
        for (i, p) in self.schedule.iter().enumerate() {
            if p.start >= p.end {
                return Err(Error::config(format!("rewire range {}..{} is empty", p.start, p.end)));
            }
            if i > 0 && self.schedule[i - 1].end > p.start {
                return Err(Error::config("rewire ranges must be disjoint and ordered"));
            }
        }
        Ok(())
    }

    /// Prune count aimed for at each rewire.
    pub fn target_count(&self, group_elements: u64) -> u64 {
        (self.target_prune_fraction * self.fraction_multiplier * group_elements as f64).round() as u64
    }

    /// Period in force at `update`, after the frequency multiplier; 0 means none.
    pub fn period_at(&self, update: u64) -> u64 {
        self.schedule
            .iter()
            .find(|p| (p.start..p.end).contains(&update))
            .map_or(0, |p| {
                if p.period == 0 {
                    0
                } else {
                    ((p.period as f64 / self.frequency_multiplier).round() as u64).max(1)
                }
            })
    }
}

pub fn rewire_due(update: u64, cfg: &DsrConfig) -> bool {
    match cfg.period_at(update) {
        0 => false,
        p => update.is_multiple_of(p),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DsrState {
    pub threshold: f64,
    /// One per parameter; `None` for tensors outside the sparsified group.
    pub masks: Vec<Option<SparsityMask>>,
    pub budget: u64,
    pub updates_since_rewire: u64,
}

impl DsrState {
    pub fn nnz(&self) -> u64 {
        self.masks.iter().flatten().map(|m| m.nnz() as u64).sum()
    }

    pub fn group_elements(&self) -> u64 {
        self.masks.iter().flatten().map(|m| m.len() as u64).sum()
    }

    pub fn per_tensor_nnz(&self) -> Vec<u64> {
        self.masks.iter().flatten().map(|m| m.nnz() as u64).collect()
    }
}

/// Random fixed-density pattern on every sparsifiable tensor; the rest stay dense.
pub fn init_sparse_pattern(graph: &ComputationGraph, density: f64, threshold: f64, seed: u64) -> Result<DsrState> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::config(format!("density {density} outside (0, 1]")));
    }
    if !graph.params().iter().any(|p| p.sparsifiable) {
        return Err(Error::config(format!(
            "graph `{}` has no sparsifiable tensors",
            graph.name
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut budget = 0;
    let masks = graph
        .params()
        .iter()
        .map(|p| {
            if !p.sparsifiable {
                return Ok(None);
            }
            let n = p.numel() as usize;
            let k = nnz_at(n as u64, density) as usize;
            budget += k as u64;
            let mut bits = vec![false; n];
            for i in sample(&mut rng, n, k) {
                bits[i] = true;
            }
            SparsityMask::from_bits(&p.shape, bits).map(Some)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DsrState {
        threshold,
        masks,
        budget,
        updates_since_rewire: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Pruned {
    /// `(parameter index, element index)` pairs.
    pub positions: Vec<(usize, usize)>,
    pub count: u64,
}

/// Removes every live weight with magnitude below `threshold`, across all masked tensors.
pub fn prune_global(weights: &mut [DenseTensor], masks: &mut [Option<SparsityMask>], threshold: f64) -> Result<Pruned> {
    check_masks(weights, masks)?;
    let mut out = Pruned::default();
    for (t, (w, m)) in weights.iter_mut().zip(masks.iter_mut()).enumerate() {
        let Some(m) = m else { continue };
        for i in 0..w.len() {
            if m.get(i) && w.data()[i].abs() < threshold {
                m.set(i, false);
                w.set(i, 0.0);
                out.positions.push((t, i));
            }
        }
    }
    out.count = out.positions.len() as u64;
    Ok(out)
}

fn check_masks(weights: &[DenseTensor], masks: &[Option<SparsityMask>]) -> Result<()> {
    if weights.len() != masks.len() {
        return Err(Error::contract(format!(
            "{} masks for {} tensors",
            masks.len(),
            weights.len()
        )));
    }
    for (w, m) in weights.iter().zip(masks) {
        if let Some(m) = m {
            if m.shape() != w.shape() {
                return Err(Error::contract(format!(
                    "mask shape {:?} vs weight {:?}",
                    m.shape(),
                    w.shape()
                )));
            }
        }
    }
    Ok(())
}

/// Multiplicative band rule around `target`.
pub fn adapt_threshold(count: u64, target: u64, threshold: f64, factor: f64) -> f64 {
    let (c, t) = (count as f64, target as f64);
    if c < t / factor {
        threshold * factor
    } else if c > t * factor {
        threshold / factor
    } else {
        threshold
    }
}

/// Splits `count` proportionally to `weights` (largest remainder), never exceeding
/// `capacity`; overflow moves to tensors with room left.
pub fn allocate(count: u64, weights: &[u64], capacity: &[u64]) -> Result<Vec<u64>> {
    let room: u64 = capacity.iter().sum();
    if count > room {
        return Err(Error::contract(format!(
            "cannot place {count} nonzeros in {room} free positions"
        )));
    }
    let mut alloc = vec![0u64; weights.len()];
    let mut left = count;
    while left > 0 {
        let open: Vec<usize> = (0..weights.len()).filter(|&i| alloc[i] < capacity[i]).collect();
        let mut w: Vec<f64> = open.iter().map(|&i| weights[i] as f64).collect();
        if w.iter().sum::<f64>() == 0.0 {
            w = open.iter().map(|&i| (capacity[i] - alloc[i]) as f64).collect();
        }
        let total: f64 = w.iter().sum();
        let exact: Vec<f64> = w.iter().map(|x| left as f64 * x / total).collect();
        let mut share: Vec<u64> = exact.iter().map(|x| x.floor() as u64).collect();
        let rest = left - share.iter().sum::<u64>();
        let mut order: Vec<usize> = (0..open.len()).collect();
        order.sort_by(|&a, &b| {
            (exact[b] - exact[b].floor())
                .total_cmp(&(exact[a] - exact[a].floor()))
                .then(a.cmp(&b))
        });
        for &k in order.iter().take(rest as usize) {
            share[k] += 1;
        }
        for (k, &i) in open.iter().enumerate() {
            let take = share[k].min(capacity[i] - alloc[i]);
            alloc[i] += take;
            left -= take;
        }
    }
    Ok(alloc)
}

/// Adds `count` nonzeros at random zero positions, allocated by surviving nnz. New
/// weights are 0. Returns the per-tensor allocation over masked tensors.
pub fn regrow(
    count: u64,
    weights: &mut [DenseTensor],
    masks: &mut [Option<SparsityMask>],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u64>> {
    check_masks(weights, masks)?;
    let idx: Vec<usize> = (0..masks.len()).filter(|&i| masks[i].is_some()).collect();
    let live: Vec<u64> = idx
        .iter()
        .map(|&i| masks[i].as_ref().map_or(0, |m| m.nnz() as u64))
        .collect();
    let free: Vec<u64> = idx
        .iter()
        .map(|&i| masks[i].as_ref().map_or(0, |m| (m.len() - m.nnz()) as u64))
        .collect();
    let alloc = allocate(count, &live, &free)?;
    for (k, &t) in idx.iter().enumerate() {
        if alloc[k] == 0 {
            continue;
        }
        let Some(m) = masks[t].as_mut() else { continue };
        let zeros: Vec<usize> = (0..m.len()).filter(|&i| !m.get(i)).collect();
        for j in sample(rng, zeros.len(), alloc[k] as usize) {
            m.set(zeros[j], true);
            weights[t].set(zeros[j], 0.0);
        }
    }
    Ok(alloc)
}

/// One JSON-lines record per rewire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewireEvent {
    pub update: u64,
    pub pruned: u64,
    pub regrown: u64,
    pub threshold_before: f64,
    pub threshold_after: f64,
    pub per_tensor_nnz: Vec<u64>,
}

impl RewireEvent {
    pub fn json_line(&self) -> String {
        serde_json::to_string(self).unwrap_or_default()
    }
}

/// Prune, adapt the threshold, regrow to the budget, then zero all momentum.
pub fn rewire(
    params: &mut ParamStore,
    optimizer: &mut Optimizer,
    state: &mut DsrState,
    cfg: &DsrConfig,
    update: u64,
    seed: u64,
) -> Result<RewireEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let before = state.threshold;
    let pruned = prune_global(&mut params.values, &mut state.masks, before)?;
    let target = cfg.target_count(state.group_elements());
    state.threshold = adapt_threshold(pruned.count, target, before, cfg.adjust_factor);
    let missing = state.budget.saturating_sub(state.nnz());
    let alloc = regrow(missing, &mut params.values, &mut state.masks, &mut rng)?;
    params.set_masks(state.masks.clone())?;
    for t in 0..params.values.len() {
        optimizer.reset(t);
    }
    state.updates_since_rewire = 0;
    Ok(RewireEvent {
        update,
        pruned: pruned.count,
        regrown: alloc.iter().sum(),
        threshold_before: before,
        threshold_after: state.threshold,
        per_tensor_nnz: state.per_tensor_nnz(),
    })
}
