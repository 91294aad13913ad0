use lowmem_core::graph::{build_desk_cnn, parse_arch, serialize_arch, GraphBuilder};
use lowmem_core::{ComputationGraph, NodeKind};
use proptest::prelude::*;

/// Random DAG over width-`w` vectors: each node draws its inputs from earlier nodes.
fn random_dag(choices: &[(u8, usize, usize, bool)], w: usize) -> ComputationGraph {
    let mut b = GraphBuilder::new("dag");
    let x = b.add("x", NodeKind::Input { shape: vec![w] }, &[]).unwrap();
    let mut ids = vec![x];
    for (i, &(op, a, c, sparse)) in choices.iter().enumerate() {
        let pa = ids[a % ids.len()];
        let pc = ids[c % ids.len()];
        let name = format!("n{i}");
        let id = match op % 3 {
            0 => {
                let kind = NodeKind::Linear {
                    d_in: w,
                    d_out: w,
                    bias: true,
                    tied: false,
                };
                b.add_node(name, kind, &[pa], sparse).unwrap()
            }
            1 => b.add(name, NodeKind::ReLU, &[pa]).unwrap(),
            _ => b.add(name, NodeKind::Add, &[pa, pc]).unwrap(),
        };
        ids.push(id);
    }
    let last = *ids.last().unwrap();
    let loss = b
        .add("loss", NodeKind::SoftmaxCrossEntropy { classes: w }, &[last])
        .unwrap();
    b.loss(loss);
    b.build().unwrap()
}

fn dag_choices() -> impl Strategy<Value = Vec<(u8, usize, usize, bool)>> {
    prop::collection::vec((any::<u8>(), any::<usize>(), any::<usize>(), any::<bool>()), 0..30)
}

proptest! {
    #[test]
    fn inputs_precede_their_consumers(choices in dag_choices(), w in 1usize..6) {
        let g = random_dag(&choices, w);
        let order: Vec<_> = g.ids().collect();
        for (pos, &id) in order.iter().enumerate() {
            for input in &g.node(id).inputs {
                let at = order.iter().position(|x| x == input).unwrap();
                prop_assert!(at < pos);
            }
        }
    }

    #[test]
    fn rebuilding_from_text_gives_identical_shapes(choices in dag_choices(), w in 1usize..6) {
        let g = random_dag(&choices, w);
        let text = serialize_arch(&g);
        let again = parse_arch(&text).unwrap();
        prop_assert_eq!(serialize_arch(&again), text);
        for id in g.ids() {
            prop_assert_eq!(&g.node(id).output, &again.node(id).output);
        }
        prop_assert_eq!(again, g);
    }

    #[test]
    fn group_and_excluded_counts_sum_to_total(choices in dag_choices(), w in 1usize..6) {
        let g = random_dag(&choices, w);
        prop_assert_eq!(g.sparsifiable_params() + g.excluded_params(), g.total_params());
        let per_tensor: u64 = g.params().iter().map(|p| p.numel()).sum();
        prop_assert_eq!(per_tensor, g.total_params());
    }

    #[test]
    fn desk_cnn_parses_back(channels in prop::collection::vec(1usize..6, 1..4), bn in any::<bool>()) {
        let mut ch = channels.clone();
        ch.sort();
        let g = build_desk_cnn(&ch, 3, bn).unwrap();
        prop_assert_eq!(parse_arch(&serialize_arch(&g)).unwrap(), g);
    }
}
