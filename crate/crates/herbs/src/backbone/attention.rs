use herbs_tensor::{ParamId, Session, Var};

use super::Backbone;
use crate::error::Result;
use crate::nn::{Activation, Conv2d, LayerNorm, Linear, ParamBuilder};

/// Preferred attention window edge; shrunk per stage to a divisor of the map size.
pub const WINDOW: usize = 4;
const HEAD_DIM: usize = 8;

#[derive(Debug, Clone)]
struct AttentionBlock {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

#[derive(Debug, Clone)]
struct AttentionStage {
    /// 2x2 patch merge as a stride-2 conv, absent for the first stage.
    merge: Option<(Conv2d, LayerNorm)>,
    block: AttentionBlock,
}

/// Windowed self-attention extractor in the spirit of hierarchical vision
/// transformers: 4x4 patch embedding, one attention block per stage and 2x2
/// patch merging between stages.
#[derive(Debug, Clone)]
pub struct ToyAttentionBackbone {
    embed: Conv2d,
    embed_norm: LayerNorm,
    stages: Vec<AttentionStage>,
    channels: Vec<usize>,
    strides: Vec<usize>,
    activation: Activation,
}

fn largest_divisor_at_most(n: usize, cap: usize) -> usize {
    (1..=cap.min(n)).rev().find(|d| n.is_multiple_of(*d)).unwrap_or(1)
}

impl ToyAttentionBackbone {
    pub fn new(b: &mut ParamBuilder<'_>, base_width: usize, num_stages: usize, activation: Activation) -> Self {
        let channels: Vec<usize> = (0..num_stages).map(|i| base_width << i).collect();
        let strides: Vec<usize> = (0..num_stages).map(|i| 4 << i).collect();
        let embed = Conv2d::new(b, "embed", 3, base_width, 4, 4, 0, true);
        let embed_norm = LayerNorm::new(b, "embed_norm", base_width);
        let mut stages = Vec::with_capacity(num_stages);
        let mut prev = base_width;
        for (i, &c) in channels.iter().enumerate() {
            let mut s = b.scope(&format!("stage{i}"));
            let merge = (i > 0).then(|| {
                (Conv2d::new(&mut s, "merge", prev, c, 2, 2, 0, true), LayerNorm::new(&mut s, "merge_norm", c))
            });
            let block = AttentionBlock {
                norm1: LayerNorm::new(&mut s, "norm1", c),
                qkv: Linear::new(&mut s, "qkv", c, 3 * c, true),
                proj: Linear::new(&mut s, "proj", c, c, true),
                norm2: LayerNorm::new(&mut s, "norm2", c),
                fc1: Linear::new(&mut s, "fc1", c, 2 * c, true),
                fc2: Linear::new(&mut s, "fc2", 2 * c, c, true),
                heads: (c / HEAD_DIM).max(1),
            };
            stages.push(AttentionStage { merge, block });
            prev = c;
        }
        Self { embed, embed_norm, stages, channels, strides, activation }
    }
}

impl AttentionBlock {
    fn params(&self) -> Vec<ParamId> {
        [
            &self.norm1.params()[..],
            &self.qkv.params(),
            &self.proj.params(),
            &self.norm2.params(),
            &self.fc1.params(),
            &self.fc2.params(),
        ]
        .concat()
    }

    /// `x: [b, h, w, c]` channels-last.
    fn forward<'t>(&self, sess: &Session<'t>, x: Var<'t>, act: Activation) -> Var<'t> {
        let s = x.shape();
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (wh, ww) = (largest_divisor_at_most(h, WINDOW), largest_divisor_at_most(w, WINDOW));
        let (nh, nw) = (h / wh, w / ww);
        let n = b * nh * nw;
        let t = wh * ww;
        let windows = x.reshape([b, nh, wh, nw, ww, c]).permute(&[0, 1, 3, 2, 4, 5]).reshape([n, t, c]);

        let heads = self.heads;
        let d = c / heads;
        let qkv = self.qkv.forward(sess, self.norm1.forward(sess, windows));
        let split = |i: usize| {
            qkv.narrow(2, i * c, c).reshape([n, t, heads, d]).permute(&[0, 2, 1, 3]).reshape([n * heads, t, d])
        };
        let (q, k, v) = (split(0), split(1), split(2));
        let attn = q.matmul(k.t()).scale(1.0 / (d as f64).sqrt()).softmax();
        let mixed = attn.matmul(v).reshape([n, heads, t, d]).permute(&[0, 2, 1, 3]).reshape([n, t, c]);
        let windows = windows.add(self.proj.forward(sess, mixed));
        let hidden = act.apply(self.fc1.forward(sess, self.norm2.forward(sess, windows)));
        let windows = windows.add(self.fc2.forward(sess, hidden));

        windows.reshape([b, nh, nw, wh, ww, c]).permute(&[0, 1, 3, 2, 4, 5]).reshape([b, h, w, c])
    }
}

impl Backbone for ToyAttentionBackbone {
    fn name(&self) -> &str {
        "toy-attention"
    }

    fn stage_channels(&self) -> &[usize] {
        &self.channels
    }

    fn stage_strides(&self) -> &[usize] {
        &self.strides
    }

    fn block_params(&self) -> Vec<Vec<ParamId>> {
        self.stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut p = if i == 0 { [self.embed.params(), self.embed_norm.params()].concat() } else { vec![] };
                if let Some((conv, norm)) = &s.merge {
                    p.extend(conv.params());
                    p.extend(norm.params());
                }
                p.extend(s.block.params());
                p
            })
            .collect()
    }

    fn forward<'t>(&self, sess: &Session<'t>, pixels: Var<'t>) -> Result<Vec<Var<'t>>> {
        let to_last = |x: Var<'t>| x.permute(&[0, 2, 3, 1]);
        let to_first = |x: Var<'t>| x.permute(&[0, 3, 1, 2]);
        let mut x = self.embed_norm.forward(sess, to_last(self.embed.forward(sess, pixels)));
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            if let Some((conv, norm)) = &stage.merge {
                x = norm.forward(sess, to_last(conv.forward(sess, to_first(x))));
            }
            x = stage.block.forward(sess, x, self.activation);
            out.push(to_first(x));
        }
        Ok(out)
    }
}
