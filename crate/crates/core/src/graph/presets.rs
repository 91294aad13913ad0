//! Programmatic builders for the shipped architectures.

use serde::{Deserialize, Serialize};

use super::{BatchUnit, ComputationGraph, GraphBuilder, NodeId, NodeKind};
use crate::error::{Error, Result};

fn conv(c_in: usize, c_out: usize, stride: usize) -> NodeKind {
    NodeKind::Conv2D {
        c_in,
        c_out,
        k1: 3,
        k2: 3,
        stride,
        pad: 1,
        bias: false,
    }
}

fn linear(d_in: usize, d_out: usize) -> NodeKind {
    NodeKind::Linear {
        d_in,
        d_out,
        bias: true,
        tied: false,
    }
}

/// Pre-activation wide residual network with parameter-free shortcuts.
///
/// `depth` must satisfy `(depth - 4) % 6 == 0`; group widths are `16k, 32k, 64k`.
pub fn build_wrn(depth: usize, width: f64, classes: usize, input: [usize; 3]) -> Result<ComputationGraph> {
    if depth < 10 || !(depth - 4).is_multiple_of(6) {
        return Err(Error::config(format!("wrn depth {depth} is not 6n+4 with n >= 1")));
    }
    if width.is_nan() || width <= 0.0 || classes < 2 {
        return Err(Error::config("wrn width must be positive and classes >= 2"));
    }
    let n = (depth - 4) / 6;
    let widths = [16.0, 32.0, 64.0].map(|w: f64| ((w * width).round() as usize).max(1));
    let mut b = GraphBuilder::new(format!("wrn-{depth}-{width}"));
    let x = b.add("input", NodeKind::Input { shape: input.to_vec() }, &[])?;
    let mut h = b.add("conv0", conv(input[0], 16, 1), &[x])?;
    let mut ch = 16;
    for (g, &out) in widths.iter().enumerate() {
        for k in 0..n {
            let stride = if g > 0 && k == 0 { 2 } else { 1 };
            let p = format!("g{}b{}", g + 1, k + 1);
            let bn1 = b.add(format!("{p}.bn1"), NodeKind::BatchNorm { c: ch }, &[h])?;
            let r1 = b.add(format!("{p}.relu1"), NodeKind::ReLU, &[bn1])?;
            let c1 = b.add_sparse(format!("{p}.conv1"), conv(ch, out, stride), &[r1])?;
            let bn2 = b.add(format!("{p}.bn2"), NodeKind::BatchNorm { c: out }, &[c1])?;
            let r2 = b.add(format!("{p}.relu2"), NodeKind::ReLU, &[bn2])?;
            let c2 = b.add_sparse(format!("{p}.conv2"), conv(out, out, 1), &[r2])?;
            let sc = if stride != 1 || ch != out {
                b.add(
                    format!("{p}.shortcut"),
                    NodeKind::SubsamplePad { stride, c_out: out },
                    &[h],
                )?
            } else {
                h
            };
            let add = b.add(format!("{p}.add"), NodeKind::Add, &[c2, sc])?;
            b.block(bn1, add);
            h = add;
            ch = out;
        }
    }
    let hw = b_spatial(&b, h)?;
    let bn = b.add("final.bn", NodeKind::BatchNorm { c: ch }, &[h])?;
    let r = b.add("final.relu", NodeKind::ReLU, &[bn])?;
    let pool = b.add("pool", NodeKind::AvgPool { window: hw }, &[r])?;
    let flat = b.add("flatten", NodeKind::Reshape { shape: vec![ch] }, &[pool])?;
    let fc = b.add("fc", linear(ch, classes), &[flat])?;
    let loss = b.add("loss", NodeKind::SoftmaxCrossEntropy { classes }, &[fc])?;
    b.loss(loss);
    b.build()
}

fn b_spatial(b: &GraphBuilder, id: NodeId) -> Result<usize> {
    let d = &b.nodes[id.0].output.dims;
    if d.len() != 3 || d[1] != d[2] {
        return Err(Error::config(format!(
            "global pooling needs a square feature map, got {d:?}"
        )));
    }
    Ok(d[1])
}

/// Small executable residual CNN used for training experiments.
///
/// One pre-activation block per entry in `channels`; every stage after the first halves the
/// spatial size. `with_batchnorm = false` drops all normalization layers.
pub fn build_desk_cnn(channels: &[usize], classes: usize, with_batchnorm: bool) -> Result<ComputationGraph> {
    build_desk_cnn_with_input(channels, classes, with_batchnorm, [3, 8, 8])
}

pub fn build_desk_cnn_with_input(
    channels: &[usize],
    classes: usize,
    with_batchnorm: bool,
    input: [usize; 3],
) -> Result<ComputationGraph> {
    if channels.is_empty() || channels.contains(&0) || classes < 2 {
        return Err(Error::config("desk cnn needs nonzero channels and classes >= 2"));
    }
    let mut b = GraphBuilder::new(format!("desk-cnn-{}", if with_batchnorm { "bn" } else { "nobn" }));
    let x = b.add("input", NodeKind::Input { shape: input.to_vec() }, &[])?;
    let mut h = b.add("stem", conv(input[0], channels[0], 1), &[x])?;
    let mut ch = channels[0];
    for (s, &out) in channels.iter().enumerate() {
        let stride = if s == 0 { 1 } else { 2 };
        let p = format!("s{}", s + 1);
        let pre = |b: &mut GraphBuilder, tag: &str, c: usize, from: NodeId| -> Result<NodeId> {
            let from = if with_batchnorm {
                b.add(format!("{p}.bn{tag}"), NodeKind::BatchNorm { c }, &[from])?
            } else {
                from
            };
            b.add(format!("{p}.relu{tag}"), NodeKind::ReLU, &[from])
        };
        let r1 = pre(&mut b, "1", ch, h)?;
        let entry = if with_batchnorm {
            b.id(&format!("{p}.bn1")).unwrap()
        } else {
            r1
        };
        let c1 = b.add_sparse(format!("{p}.conv1"), conv(ch, out, stride), &[r1])?;
        let r2 = pre(&mut b, "2", out, c1)?;
        let c2 = b.add_sparse(format!("{p}.conv2"), conv(out, out, 1), &[r2])?;
        let sc = if stride != 1 || ch != out {
            b.add(
                format!("{p}.shortcut"),
                NodeKind::SubsamplePad { stride, c_out: out },
                &[h],
            )?
        } else {
            h
        };
        let add = b.add(format!("{p}.add"), NodeKind::Add, &[c2, sc])?;
        b.block(entry, add);
        h = add;
        ch = out;
    }
    let hw = b_spatial(&b, h)?;
    let r = if with_batchnorm {
        let bn = b.add("final.bn", NodeKind::BatchNorm { c: ch }, &[h])?;
        b.add("final.relu", NodeKind::ReLU, &[bn])?
    } else {
        b.add("final.relu", NodeKind::ReLU, &[h])?
    };
    let pool = b.add("pool", NodeKind::AvgPool { window: hw }, &[r])?;
    let flat = b.add("flatten", NodeKind::Reshape { shape: vec![ch] }, &[pool])?;
    let fc = b.add("fc", linear(ch, classes), &[flat])?;
    let loss = b.add("loss", NodeKind::SoftmaxCrossEntropy { classes }, &[fc])?;
    b.loss(loss);
    b.build()
}

/// Dimensions of the dynamic-convolution encoder-decoder cost graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcTransformerPreset {
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// One kernel width per encoder layer.
    pub encoder_kernels: Vec<usize>,
    /// One kernel width per decoder layer.
    pub decoder_kernels: Vec<usize>,
    /// Source positions attended to per target token.
    pub src_len: usize,
    /// Residual dropout rate; 0 drops the mask-storing nodes.
    pub dropout: f64,
    pub min_microbatch_tokens: u64,
}

impl Default for DcTransformerPreset {
    fn default() -> Self {
        DcTransformerPreset {
            embed_dim: 512,
            ffn_dim: 1024,
            heads: 4,
            src_vocab: 8848,
            tgt_vocab: 6632,
            encoder_kernels: vec![3, 7, 15, 31, 31, 31, 31],
            decoder_kernels: vec![3, 7, 15, 31, 31, 31],
            src_len: 25,
            dropout: 0.3,
            min_microbatch_tokens: 250,
        }
    }
}

impl DcTransformerPreset {
    /// Same widths with half the layers in each stack (rounded up).
    pub fn halved(&self) -> Self {
        let half = |k: &[usize]| k[..k.len().div_ceil(2)].to_vec();
        DcTransformerPreset {
            encoder_kernels: half(&self.encoder_kernels),
            decoder_kernels: half(&self.decoder_kernels),
            ..self.clone()
        }
    }
}

/// Cost-model graph of a post-norm encoder-decoder with lightweight dynamic convolutions.
///
/// Each encoder and decoder layer is annotated as one residual block.
/// The batch unit is target tokens. The decoder output projection is tied to the target
/// embedding table.
pub fn build_dc_transformer_cost(p: &DcTransformerPreset) -> Result<ComputationGraph> {
    let d = p.embed_dim;
    if d == 0 || p.ffn_dim == 0 || p.heads == 0 || !d.is_multiple_of(p.heads) {
        return Err(Error::config("embed_dim must be a positive multiple of heads"));
    }
    if p.encoder_kernels.is_empty() || p.decoder_kernels.is_empty() {
        return Err(Error::config("encoder and decoder need at least one layer"));
    }
    let mut b = GraphBuilder::new("dc-transformer");
    b.batch_unit(BatchUnit::Tokens {
        min_microbatch: p.min_microbatch_tokens,
    });
    let src = b.add("src_tokens", NodeKind::Input { shape: vec![1] }, &[])?;
    let tgt = b.add("tgt_tokens", NodeKind::Input { shape: vec![1] }, &[])?;

    let drop = |b: &mut GraphBuilder, name: String, x: NodeId| -> Result<NodeId> {
        if p.dropout > 0.0 {
            b.add(name, NodeKind::DropoutCost { p: p.dropout }, &[x])
        } else {
            Ok(x)
        }
    };
    let conv_block = |b: &mut GraphBuilder, p_: &str, h: NodeId, k: usize| -> Result<NodeId> {
        let l1 = b.add_sparse(format!("{p_}.conv.in"), linear(d, 2 * d), &[h])?;
        let dc = b.add_sparse(
            format!("{p_}.conv.dyn"),
            NodeKind::DynamicConvCost {
                d,
                heads: p.heads,
                kernel: k,
            },
            &[l1],
        )?;
        let l2 = b.add_sparse(format!("{p_}.conv.out"), linear(d, d), &[dc])?;
        let l2 = drop(b, format!("{p_}.conv.drop"), l2)?;
        let a = b.add(format!("{p_}.conv.add"), NodeKind::Add, &[l2, h])?;
        b.add(format!("{p_}.conv.norm"), NodeKind::LayerNorm { d }, &[a])
    };
    let ffn_block = |b: &mut GraphBuilder, p_: &str, h: NodeId| -> Result<NodeId> {
        let f1 = b.add_sparse(format!("{p_}.ffn.fc1"), linear(d, p.ffn_dim), &[h])?;
        let r = b.add(format!("{p_}.ffn.relu"), NodeKind::ReLU, &[f1])?;
        let f2 = b.add_sparse(format!("{p_}.ffn.fc2"), linear(p.ffn_dim, d), &[r])?;
        let f2 = drop(b, format!("{p_}.ffn.drop"), f2)?;
        let a = b.add(format!("{p_}.ffn.add"), NodeKind::Add, &[f2, h])?;
        b.add(format!("{p_}.ffn.norm"), NodeKind::LayerNorm { d }, &[a])
    };

    let mut h = b.add_sparse("enc.embed", NodeKind::Embedding { vocab: p.src_vocab, d }, &[src])?;
    h = drop(&mut b, "enc.embed.drop".into(), h)?;
    for (i, &k) in p.encoder_kernels.iter().enumerate() {
        let pre = format!("enc{}", i + 1);
        let first = NodeId(b.nodes.len());
        h = conv_block(&mut b, &pre, h, k)?;
        h = ffn_block(&mut b, &pre, h)?;
        b.block(first, h);
    }
    let enc_out = h;

    let mut h = b.add_sparse("dec.embed", NodeKind::Embedding { vocab: p.tgt_vocab, d }, &[tgt])?;
    h = drop(&mut b, "dec.embed.drop".into(), h)?;
    for (i, &k) in p.decoder_kernels.iter().enumerate() {
        let pre = format!("dec{}", i + 1);
        let first = NodeId(b.nodes.len());
        h = conv_block(&mut b, &pre, h, k)?;
        let q = b.add_sparse(format!("{pre}.attn.q"), linear(d, d), &[h])?;
        let kk = b.add_sparse(format!("{pre}.attn.k"), linear(d, d), &[enc_out])?;
        let v = b.add_sparse(format!("{pre}.attn.v"), linear(d, d), &[enc_out])?;
        let att = b.add(
            format!("{pre}.attn.mix"),
            NodeKind::AttentionCost {
                d,
                heads: p.heads,
                src_len: p.src_len,
            },
            &[q, kk, v],
        )?;
        let o = b.add_sparse(format!("{pre}.attn.out"), linear(d, d), &[att])?;
        let o = drop(&mut b, format!("{pre}.attn.drop"), o)?;
        let a = b.add(format!("{pre}.attn.add"), NodeKind::Add, &[o, h])?;
        let n = b.add(format!("{pre}.attn.norm"), NodeKind::LayerNorm { d }, &[a])?;
        h = ffn_block(&mut b, &pre, n)?;
        b.block(first, h);
    }
    let out = b.add(
        "dec.output",
        NodeKind::Linear {
            d_in: d,
            d_out: p.tgt_vocab,
            bias: false,
            tied: true,
        },
        &[h],
    )?;
    let loss = b.add("loss", NodeKind::SoftmaxCrossEntropy { classes: p.tgt_vocab }, &[out])?;
    b.loss(loss);
    b.build()
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent closed-form count for pre-activation WRN with identity shortcuts.
    fn wrn_params_oracle(depth: usize, k: usize, classes: usize) -> (u64, u64) {
        let n = ((depth - 4) / 6) as u64;
        let w = [16 * k as u64, 32 * k as u64, 64 * k as u64];
        let mut sparse = 0;
        let mut bn = 0;
        let mut cin = 16u64;
        for &c in &w {
            for j in 0..n {
                let ci = if j == 0 { cin } else { c };
                sparse += 9 * ci * c + 9 * c * c;
                bn += 2 * ci + 2 * c;
            }
            cin = c;
        }
        bn += 2 * w[2];
        let total = 27 * 16 + sparse + bn + w[2] * classes as u64 + classes as u64;
        (total, sparse)
    }

    #[test]
    fn wrn_28_2_counts() {
        let g = build_wrn(28, 2.0, 10, [3, 32, 32]).unwrap();
        let (total, sparse) = wrn_params_oracle(28, 2, 10);
        assert_eq!(g.total_params(), total);
        assert_eq!(g.sparsifiable_params(), sparse);
        assert_eq!(g.blocks().len(), 12);
        assert!((g.total_params() as f64 / 1.46e6 - 1.0).abs() < 0.01);
    }

    #[test]
    fn wrn_rejects_bad_depth() {
        assert!(build_wrn(27, 2.0, 10, [3, 32, 32]).is_err());
    }

    #[test]
    fn dc_transformer_counts() {
        let p = DcTransformerPreset::default();
        let g = build_dc_transformer_cost(&p).unwrap();
        let d = 512u64;
        let f = 1024u64;
        let gen = |k: u64| 4 * k * d;
        let enc_layer = (d * 2 * d + 2 * d) + (d * d + d) + (d * f + f) + (f * d + d) + 4 * d;
        let dec_layer = enc_layer + 4 * (d * d + d) + 2 * d;
        let kernels_enc: u64 = p.encoder_kernels.iter().map(|&k| gen(k as u64)).sum();
        let kernels_dec: u64 = p.decoder_kernels.iter().map(|&k| gen(k as u64)).sum();
        let expect = 7 * enc_layer + 6 * dec_layer + kernels_enc + kernels_dec + (8848 + 6632) * d;
        assert_eq!(g.total_params(), expect);
        assert!(g.sparsifiable_params() as f64 / g.total_params() as f64 > 0.99);
        let halved = build_dc_transformer_cost(&p.halved()).unwrap();
        assert!(halved.total_params() < g.total_params());
    }

    #[test]
    fn desk_cnn_variants() {
        let g = build_desk_cnn(&[8, 16], 4, true).unwrap();
        assert!(g.is_executable());
        assert_eq!(g.blocks().len(), 2);
        let nb = build_desk_cnn(&[8, 16], 4, false).unwrap();
        assert!(nb.nodes().iter().all(|n| !n.kind.is_norm()));
        assert_eq!(g.sparsifiable_params(), nb.sparsifiable_params());
    }
}
