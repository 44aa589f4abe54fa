use herbs_tensor::{ParamId, Session, Var};

use super::Backbone;
use crate::error::Result;
use crate::nn::{Activation, Conv2d, ParamBuilder};

#[derive(Debug, Clone)]
struct ConvStage {
    down: Conv2d,
    refine: Conv2d,
}

/// Plain convolutional extractor.
///
/// Stage 1 is a stride-2 stem followed by a stride-2 conv (total stride 4);
/// every later stage halves resolution and doubles width. Each stage ends with
/// a residual 3x3 refinement conv.
#[derive(Debug, Clone)]
pub struct ToyConvBackbone {
    stem: Conv2d,
    stages: Vec<ConvStage>,
    channels: Vec<usize>,
    strides: Vec<usize>,
    activation: Activation,
}

impl ToyConvBackbone {
    pub fn new(b: &mut ParamBuilder<'_>, base_width: usize, num_stages: usize, activation: Activation) -> Self {
        let channels: Vec<usize> = (0..num_stages).map(|i| base_width << i).collect();
        let strides: Vec<usize> = (0..num_stages).map(|i| 4 << i).collect();
        let stem = Conv2d::new(b, "stem", 3, base_width, 3, 2, 1, true);
        let mut stages = Vec::with_capacity(num_stages);
        let mut prev = base_width;
        for (i, &c) in channels.iter().enumerate() {
            let mut s = b.scope(&format!("stage{i}"));
            stages.push(ConvStage {
                down: Conv2d::new(&mut s, "down", prev, c, 3, 2, 1, true),
                refine: Conv2d::new(&mut s, "refine", c, c, 3, 1, 1, true),
            });
            prev = c;
        }
        Self { stem, stages, channels, strides, activation }
    }
}

impl Backbone for ToyConvBackbone {
    fn name(&self) -> &str {
        "toy-conv"
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
                let mut p = if i == 0 { self.stem.params() } else { vec![] };
                p.extend(s.down.params());
                p.extend(s.refine.params());
                p
            })
            .collect()
    }

    fn forward<'t>(&self, sess: &Session<'t>, pixels: Var<'t>) -> Result<Vec<Var<'t>>> {
        let act = self.activation;
        let mut x = act.apply(self.stem.forward(sess, pixels));
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let d = act.apply(stage.down.forward(sess, x));
            x = d.add(act.apply(stage.refine.forward(sess, d)));
            out.push(x);
        }
        Ok(out)
    }
}
