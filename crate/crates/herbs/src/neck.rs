//! Top-down and bottom-up feature fusion.
//!
//! Top-down pass (coarse to fine):
//!   `td[n-1] = act(smooth(lateral(stage[n-1])))`
//!   `td[i]   = act(smooth(lateral(stage[i]) + upsample2(td[i+1])))`
//!
//! Bottom-up pass (fine to coarse):
//!   `bu[0] = act(smooth(transform(td[0])))`
//!   `bu[i] = act(smooth(transform(td[i]) + down(bu[i-1])))`
//!
//! `lateral`/`transform` are 1x1 convs into the common width, `smooth` is a
//! 3x3 conv and `down` a stride-2 3x3 conv. Upsampling is nearest-neighbour.

use herbs_tensor::{ParamId, Session, Var};
use serde::{Deserialize, Serialize};

use crate::error::{HerbsError, Result};
use crate::nn::{Activation, Conv2d, ParamBuilder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeckConfig {
    /// Common channel width of all fused maps.
    pub dim: usize,
    pub activation: Activation,
    /// Biases on every conv; disable for an exactly linear neck.
    pub bias: bool,
}

impl NeckConfig {
    pub fn new(dim: usize) -> Self {
        Self { dim, activation: Activation::default(), bias: true }
    }
}

impl Default for NeckConfig {
    fn default() -> Self {
        Self::new(256)
    }
}

/// Output of both fusion passes, one map per stage.
#[derive(Debug, Clone)]
pub struct FusedFeatures<'t> {
    pub top_down: Vec<Var<'t>>,
    pub bottom_up: Vec<Var<'t>>,
    pub neck_dim: usize,
}

#[derive(Debug, Clone)]
pub struct FusionNeck {
    pub lateral: Vec<Conv2d>,
    pub td_smooth: Vec<Conv2d>,
    pub transform: Vec<Conv2d>,
    pub bu_smooth: Vec<Conv2d>,
    /// `down[i]` maps `bu[i]` onto the grid of `bu[i + 1]`.
    pub down: Vec<Conv2d>,
    pub cfg: NeckConfig,
}

impl FusionNeck {
    pub fn new(b: &mut ParamBuilder<'_>, stage_channels: &[usize], cfg: NeckConfig) -> Self {
        let d = cfg.dim;
        let n = stage_channels.len();
        let mut lateral = Vec::with_capacity(n);
        let mut td_smooth = Vec::with_capacity(n);
        let mut transform = Vec::with_capacity(n);
        let mut bu_smooth = Vec::with_capacity(n);
        let mut down = Vec::with_capacity(n.saturating_sub(1));
        for (i, &c) in stage_channels.iter().enumerate() {
            let mut s = b.scope(&format!("level{i}"));
            lateral.push(Conv2d::new(&mut s, "lateral", c, d, 1, 1, 0, cfg.bias));
            td_smooth.push(Conv2d::new(&mut s, "td_smooth", d, d, 3, 1, 1, cfg.bias));
            transform.push(Conv2d::new(&mut s, "transform", d, d, 1, 1, 0, cfg.bias));
            bu_smooth.push(Conv2d::new(&mut s, "bu_smooth", d, d, 3, 1, 1, cfg.bias));
            if i + 1 < n {
                down.push(Conv2d::new(&mut s, "down", d, d, 3, 2, 1, cfg.bias));
            }
        }
        Self { lateral, td_smooth, transform, bu_smooth, down, cfg }
    }

    pub fn num_levels(&self) -> usize {
        self.lateral.len()
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.lateral, &self.td_smooth, &self.transform, &self.bu_smooth, &self.down]
            .iter()
            .flat_map(|convs| convs.iter().flat_map(|c| c.params()))
            .collect()
    }

    fn check_levels(&self, maps: &[Var<'_>], what: &str) -> Result<()> {
        if maps.len() != self.num_levels() {
            return Err(HerbsError::ShapeMismatch(format!(
                "{what}: neck has {} levels, got {} maps",
                self.num_levels(),
                maps.len()
            )));
        }
        for i in 1..maps.len() {
            let (a, b) = (maps[i - 1].shape(), maps[i].shape());
            if a[2] != 2 * b[2] || a[3] != 2 * b[3] {
                return Err(HerbsError::ShapeMismatch(format!(
                    "{what}: level {} is {}x{} but level {i} is {}x{}; adjacent levels must differ by exactly 2x",
                    i - 1,
                    a[2],
                    a[3],
                    b[2],
                    b[3]
                )));
            }
        }
        Ok(())
    }

    pub fn top_down_fuse<'t>(&self, sess: &Session<'t>, stages: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        self.check_levels(stages, "top-down")?;
        for (i, s) in stages.iter().enumerate() {
            if s.shape()[1] != self.lateral[i].in_channels {
                return Err(HerbsError::ShapeMismatch(format!(
                    "stage {i} has {} channels, lateral expects {}",
                    s.shape()[1],
                    self.lateral[i].in_channels
                )));
            }
        }
        let act = self.cfg.activation;
        let n = stages.len();
        let mut out: Vec<Option<Var<'t>>> = vec![None; n];
        for i in (0..n).rev() {
            let mut merged = self.lateral[i].forward(sess, stages[i]);
            if let Some(coarser) = out.get(i + 1).copied().flatten() {
                merged = merged.add(coarser.upsample_nearest(2));
            }
            out[i] = Some(act.apply(self.td_smooth[i].forward(sess, merged)));
        }
        Ok(out.into_iter().map(|v| v.expect("every level filled")).collect())
    }

    pub fn bottom_up_fuse<'t>(&self, sess: &Session<'t>, top_down: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        self.check_levels(top_down, "bottom-up")?;
        let act = self.cfg.activation;
        let mut out: Vec<Var<'t>> = Vec::with_capacity(top_down.len());
        for (i, &td) in top_down.iter().enumerate() {
            let mut merged = self.transform[i].forward(sess, td);
            if let Some(&finer) = out.last() {
                merged = merged.add(self.down[i - 1].forward(sess, finer));
            }
            out.push(act.apply(self.bu_smooth[i].forward(sess, merged)));
        }
        Ok(out)
    }

    pub fn forward<'t>(&self, sess: &Session<'t>, stages: &[Var<'t>]) -> Result<FusedFeatures<'t>> {
        let top_down = self.top_down_fuse(sess, stages)?;
        let bottom_up = self.bottom_up_fuse(sess, &top_down)?;
        Ok(FusedFeatures { top_down, bottom_up, neck_dim: self.cfg.dim })
    }
}
