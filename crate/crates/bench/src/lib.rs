//! Fixtures shared by the benchmarks.

use lowmem_core::graph::{build_dc_transformer_cost, build_desk_cnn, build_wrn, DcTransformerPreset};
use lowmem_core::planner::SweepSpec;
use lowmem_core::ComputationGraph;

pub fn wrn_28_2() -> ComputationGraph {
    build_wrn(28, 2.0, 10, [3, 32, 32]).expect("wrn preset")
}

pub fn dc_transformer() -> ComputationGraph {
    build_dc_transformer_cost(&DcTransformerPreset::default()).expect("dc preset")
}

pub fn desk() -> ComputationGraph {
    build_desk_cnn(&[4, 6], 4, true).expect("desk preset")
}

/// Densities × precisions × microbatches × strategies over WRN-28-2.
pub fn wrn_sweep() -> SweepSpec {
    SweepSpec::parse(
        "minibatch = 100\ndensities = 1, 0.3, 0.2, 0.1\nprecisions = fp16, fp32\n\
         microbatches = 100, 10, 4\nstrategies = none, no-bn, residual-1, residual-2*",
    )
    .expect("sweep")
}
