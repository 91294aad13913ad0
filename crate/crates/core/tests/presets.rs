use std::path::PathBuf;

use lowmem_core::graph::{
    build_dc_transformer_cost, build_desk_cnn, build_wrn, parse_arch, serialize_arch, DcTransformerPreset,
};
use lowmem_core::profiler::{total_report, OptimizerKind, TrainingConfig};
use lowmem_core::{ComputationGraph, NodeKind, NumericFormat};

fn preset(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../presets")
        .join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn check(file: &str, built: ComputationGraph, minibatch: u64, optimizer: OptimizerKind) {
    let text = preset(file);
    let parsed = parse_arch(&text).unwrap();
    assert_eq!(parsed.total_params(), built.total_params(), "{file}");
    assert_eq!(parsed.sparsifiable_params(), built.sparsifiable_params(), "{file}");
    assert_eq!(parsed.blocks().len(), built.blocks().len(), "{file}");
    assert_eq!(serialize_arch(&parsed), text, "{file} does not round-trip");
    assert_eq!(serialize_arch(&built), text, "{file} is stale");
    let cfg = TrainingConfig::baseline(NumericFormat::Fp32, minibatch, optimizer);
    assert_eq!(
        total_report(&parsed, &cfg).unwrap(),
        total_report(&built, &cfg).unwrap(),
        "{file}"
    );
}

#[test]
fn wrn_preset_matches_builder() {
    let built = build_wrn(28, 2.0, 10, [3, 32, 32]).unwrap();
    check("wrn-28-2.arch", built, 100, OptimizerKind::SgdNesterov);
}

#[test]
fn dc_transformer_preset_matches_builder() {
    let built = build_dc_transformer_cost(&DcTransformerPreset::default()).unwrap();
    check("dc-transformer-iwslt.arch", built, 4000, OptimizerKind::Adam);
}

#[test]
fn dc_transformer_preset_keeps_dropout_nodes() {
    let g = parse_arch(&preset("dc-transformer-iwslt.arch")).unwrap();
    let dropouts = g
        .nodes()
        .iter()
        .filter(|n| matches!(n.kind, NodeKind::DropoutCost { p } if p == 0.3))
        .count();
    assert!(dropouts > 0);
    assert!(!g.is_executable());
}

#[test]
fn desk_preset_matches_builder_and_runs() {
    let built = build_desk_cnn(&[4, 6], 4, true).unwrap();
    check("desk-cnn.arch", built, 32, OptimizerKind::SgdNesterov);
    assert!(parse_arch(&preset("desk-cnn.arch")).unwrap().is_executable());
}
