//! High-temperature refinement: top-down heads learn the softened output
//! distribution of their bottom-up partners under a decaying temperature.

use herbs_tensor::Var;
use serde::{Deserialize, Serialize};

use crate::error::{HerbsError, Result};

/// Reading of the halving rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TemperatureMode {
    /// `T * 0.5^floor(e / interval)`: starts at `T`.
    #[default]
    Scaled,
    /// `0.5^floor(e / -log2(0.0625 / T))` exactly as written: starts at 1.
    Literal,
}

impl TemperatureMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "scaled" => Ok(Self::Scaled),
            "literal" => Ok(Self::Literal),
            other => Err(HerbsError::InvalidConfig(format!("unknown temperature mode `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TemperatureMode::Scaled => "scaled",
            TemperatureMode::Literal => "literal",
        }
    }
}

/// Smallest initial temperature with a halving interval of at least one epoch.
pub const MIN_TEMPERATURE: f64 = 0.125;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub initial: f64,
    pub mode: TemperatureMode,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self { initial: 64.0, mode: TemperatureMode::Scaled }
    }
}

impl TemperatureSchedule {
    pub fn new(initial: f64, mode: TemperatureMode) -> Result<Self> {
        if !(initial.is_finite() && initial >= MIN_TEMPERATURE) {
            return Err(HerbsError::InvalidTemperature(initial));
        }
        Ok(Self { initial, mode })
    }

    /// The real divisor `-log2(0.0625 / T)`.
    pub fn divisor(&self) -> f64 {
        -(0.0625 / self.initial).log2()
    }

    /// Epochs per plateau, `floor(-log2(0.0625 / T))`; `log2(T) + 4` for powers of two.
    pub fn halving_interval(&self) -> u64 {
        self.divisor().floor() as u64
    }

    pub fn at(&self, epoch: u64) -> f64 {
        match self.mode {
            TemperatureMode::Scaled => self.initial * 0.5f64.powi((epoch / self.halving_interval()) as i32),
            TemperatureMode::Literal => 0.5f64.powf((epoch as f64 / self.divisor()).floor()),
        }
    }
}

pub fn temperature_at(epoch: u64, sched: &TemperatureSchedule) -> Result<f64> {
    if !(sched.initial.is_finite() && sched.initial >= MIN_TEMPERATURE) {
        return Err(HerbsError::InvalidTemperature(sched.initial));
    }
    Ok(sched.at(epoch))
}

/// Student (top-down) and teacher (bottom-up) logits, both `[b, classes]`.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierPair<'t> {
    pub student: Var<'t>,
    pub teacher: Var<'t>,
}

/// `KL(softmax(teacher / T) || softmax(student / T))`, batch-mean per pair and
/// then averaged over pairs. The teacher is detached. With `t_squared` the
/// result is multiplied by `T^2`.
pub fn refinement_loss<'t>(pairs: &[ClassifierPair<'t>], temperature: f64, t_squared: bool) -> Result<Var<'t>> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(HerbsError::InvalidTemperature(temperature));
    }
    if pairs.is_empty() {
        return Err(HerbsError::MissingHeads("refinement needs at least one classifier pair".into()));
    }
    let inv_t = 1.0 / temperature;
    let mut total: Option<Var<'t>> = None;
    for (i, pair) in pairs.iter().enumerate() {
        let (s, t) = (pair.student.shape(), pair.teacher.shape());
        if s != t || s.len() != 2 {
            return Err(HerbsError::ShapeMismatch(format!("pair {i}: student {s:?} vs teacher {t:?}")));
        }
        let teacher = pair.teacher.detach().scale(inv_t);
        let p = teacher.softmax();
        let log_p = teacher.log_softmax();
        let log_q = pair.student.scale(inv_t).log_softmax();
        let kl = p.mul(log_p.sub(log_q)).sum().scale(1.0 / s[0] as f64);
        total = Some(match total {
            Some(acc) => acc.add(kl),
            None => kl,
        });
    }
    let mut loss = total.expect("non-empty").scale(1.0 / pairs.len() as f64);
    if t_squared {
        loss = loss.scale(temperature * temperature);
    }
    Ok(loss)
}

/// Plain-slice KL used by tests and reports.
pub fn kl_softened(teacher: &[f64], student: &[f64], temperature: f64) -> f64 {
    let soft = |v: &[f64]| log_softmax(&v.iter().map(|x| x / temperature).collect::<Vec<_>>());
    let (lp, lq) = (soft(teacher), soft(student));
    lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum()
}

fn log_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RefinementMode {
    /// One pair per stage between the top-down and bottom-up heads.
    #[default]
    Full,
    /// One pair on a plain backbone: the penultimate block's head learns from
    /// the final classifier.
    Basic,
}

/// A classifier head the refinement wiring can point at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadRef {
    TopDown(usize),
    BottomUp(usize),
    /// Auxiliary head on a raw backbone block.
    Block(usize),
    Final,
}

/// Heads a network exposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HeadLayout {
    pub top_down: usize,
    pub bottom_up: usize,
    pub blocks: usize,
    pub has_final: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinementPlan {
    pub mode: RefinementMode,
    /// `(student, teacher)`.
    pub pairs: Vec<(HeadRef, HeadRef)>,
}

/// Wires the classifier pairs for `mode` against the heads in `layout`.
pub fn plan_refinement(layout: &HeadLayout, mode: RefinementMode) -> Result<RefinementPlan> {
    let pairs = match mode {
        RefinementMode::Full => {
            if layout.top_down == 0 || layout.top_down != layout.bottom_up {
                return Err(HerbsError::MissingHeads(format!(
                    "full refinement pairs top-down with bottom-up heads, found {} and {}",
                    layout.top_down, layout.bottom_up
                )));
            }
            (0..layout.top_down).map(|i| (HeadRef::TopDown(i), HeadRef::BottomUp(i))).collect()
        }
        RefinementMode::Basic => {
            if layout.blocks < 2 || !layout.has_final {
                return Err(HerbsError::MissingHeads(format!(
                    "basic refinement needs two blocks and a final classifier, found {} block(s)",
                    layout.blocks
                )));
            }
            vec![(HeadRef::Block(layout.blocks - 2), HeadRef::Final)]
        }
    };
    Ok(RefinementPlan { mode, pairs })
}
