//! Configuration files, sweeps over the configuration space, Pareto frontiers and
//! desk-scale training runs.

pub mod config;
pub mod train;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::plan::CheckpointStrategy;
use crate::profiler::{csv_row, total_report, FlopReport, MemoryReport, OptimizerKind, TrainingConfig, CSV_HEADER};
use crate::{ComputationGraph, Error, NumericFormat, Result};
use config::{parse_precision, KeyValues};

/// A grid over the configuration space of one architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub arch: String,
    pub minibatch: u64,
    pub densities: Vec<f64>,
    pub precisions: Vec<NumericFormat>,
    pub microbatches: Vec<u64>,
    pub strategies: Vec<CheckpointStrategy>,
    pub optimizers: Vec<OptimizerKind>,
    pub out: Option<String>,
}

const SWEEP_KEYS: [&str; 8] = [
    "arch",
    "minibatch",
    "densities",
    "precisions",
    "microbatches",
    "strategies",
    "optimizers",
    "out",
];

impl SweepSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        kv.expect_only(&SWEEP_KEYS)?;
        let minibatch: u64 = kv
            .parsed("minibatch", "a positive integer")?
            .ok_or_else(|| Error::config("sweep needs `minibatch`"))?;
        let nums = |key: &str| -> Result<Vec<f64>> {
            kv.list(key)
                .iter()
                .map(|s| {
                    s.parse()
                        .map_err(|_| Error::config(format!("`{key}` entry `{s}` is not a number")))
                })
                .collect()
        };
        let spec = SweepSpec {
            arch: kv.get("arch").unwrap_or_default().to_string(),
            minibatch,
            densities: if kv.get("densities").is_some() {
                nums("densities")?
            } else {
                vec![1.0]
            },
            precisions: match kv.get("precisions") {
                Some(_) => kv
                    .list("precisions")
                    .iter()
                    .map(|s| parse_precision(s))
                    .collect::<Result<_>>()?,
                None => vec![NumericFormat::Fp32],
            },
            microbatches: match kv.get("microbatches") {
                Some(_) => nums("microbatches")?.into_iter().map(|x| x as u64).collect(),
                None => vec![minibatch],
            },
            strategies: match kv.get("strategies") {
                Some(_) => kv
                    .list("strategies")
                    .iter()
                    .map(|s| CheckpointStrategy::parse(s))
                    .collect::<Result<_>>()?,
                None => vec![CheckpointStrategy::None],
            },
            optimizers: match kv.get("optimizers") {
                Some(_) => kv
                    .list("optimizers")
                    .iter()
                    .map(|s| OptimizerKind::parse(s))
                    .collect::<Result<_>>()?,
                None => vec![OptimizerKind::SgdNesterov],
            },
            out: kv.get("out").map(str::to_string),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.densities.is_empty()
            || self.precisions.is_empty()
            || self.microbatches.is_empty()
            || self.strategies.is_empty()
            || self.optimizers.is_empty()
        {
            return Err(Error::config("every sweep list must be nonempty"));
        }
        Ok(())
    }

    /// Every combination, in list order (densities outermost).
    pub fn configs(&self) -> Vec<TrainingConfig> {
        let mut out = Vec::new();
        for &density in &self.densities {
            for &precision in &self.precisions {
                for &microbatch in &self.microbatches {
                    for &strategy in &self.strategies {
                        for &optimizer in &self.optimizers {
                            let mut c = TrainingConfig::baseline(precision, self.minibatch, optimizer);
                            c.density = density;
                            c.microbatch = microbatch;
                            c.strategy = strategy;
                            out.push(c);
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub config: TrainingConfig,
    pub memory: MemoryReport,
    pub flops: FlopReport,
    pub total_bytes: u64,
    pub flops_ratio: f64,
    pub on_frontier: bool,
    /// Optional measured desk-task metric.
    pub metric: Option<f64>,
}

/// Marks the points not dominated in (bytes, flops ratio).
pub fn mark_frontier(points: &mut [ParetoPoint]) {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .total_bytes
            .cmp(&points[b].total_bytes)
            .then(points[a].flops_ratio.total_cmp(&points[b].flops_ratio))
    });
    let mut best = f64::INFINITY;
    let mut i = 0;
    while i < order.len() {
        let bytes = points[order[i]].total_bytes;
        let mut j = i;
        while j < order.len() && points[order[j]].total_bytes == bytes {
            j += 1;
        }
        let group_min = points[order[i]].flops_ratio;
        for &k in &order[i..j] {
            points[k].on_frontier = points[k].flops_ratio < best && points[k].flops_ratio == group_min;
        }
        best = best.min(group_min);
        i = j;
    }
}

/// Evaluates every valid combination and flags the frontier; sorted by bytes, then
/// flops ratio, then sweep order.
pub fn evaluate_sweep(graph: &ComputationGraph, spec: &SweepSpec) -> Result<Vec<ParetoPoint>> {
    spec.validate()?;
    let mut points = Vec::new();
    for cfg in spec.configs() {
        match total_report(graph, &cfg) {
            Ok((memory, flops)) => points.push(ParetoPoint {
                total_bytes: memory.total_bytes,
                flops_ratio: flops.ratio_to_baseline,
                config: cfg,
                memory,
                flops,
                on_frontier: false,
                metric: None,
            }),
            Err(e @ Error::Config(_)) => warn!("skipping configuration: {e}"),
            Err(e) => return Err(e),
        }
    }
    points.sort_by(|a, b| {
        a.total_bytes
            .cmp(&b.total_bytes)
            .then(a.flops_ratio.total_cmp(&b.flops_ratio))
    });
    mark_frontier(&mut points);
    Ok(points)
}

/// Report CSV with a trailing `on_frontier` column.
pub fn frontier_csv(arch: &str, points: &[ParetoPoint]) -> String {
    let mut s = format!("{CSV_HEADER},on_frontier\n");
    for p in points {
        s.push_str(&csv_row(arch, &p.config, &p.memory, &p.flops));
        s.push_str(if p.on_frontier { ",true\n" } else { ",false\n" });
    }
    s
}
