//! The assembled network: backbone, fusion neck, per-stage heads, background
//! suppression and refinement, plus the ablation variants.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use herbs_tensor::{ChaCha8Rng, ParamId, ParamStore, Session, Tape, Tensor, Var};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::backbone::{add_toy_backbone, extract_stages, Backbone, BackboneHandle, ImageBatch, ToyBackboneConfig};
use crate::bs::{
    bs_total, classify_locations, combine, dropped_loss_stages, layer_loss, merged_loss, pooled_logits, select_stage,
    validate_top_k, validate_top_k_order, BsLossWeights, Combiner, DropMapping, Selection, DEFAULT_TOP_K,
};
use crate::error::{HerbsError, Result};
use crate::neck::{FusionNeck, NeckConfig};
use crate::nn::{cross_entropy, Linear, ParamBuilder};
use crate::refinement::{
    plan_refinement, refinement_loss, ClassifierPair, HeadLayout, HeadRef, RefinementMode, RefinementPlan,
    TemperatureSchedule,
};

/// Network structure.
///
/// `A`..`E` are the ablation ladder: backbone only, plus neck, plus four
/// bottom-up heads, plus four top-down heads, full model. The two basic
/// variants attach a single module directly to a plain backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    A,
    B,
    C,
    D,
    #[default]
    E,
    BasicSuppression,
    BasicRefinement,
}

impl Variant {
    pub const LADDER: [Variant; 5] = [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E];

    /// Number of classifier heads, counting the combiner.
    pub fn head_count(self, num_stages: usize) -> usize {
        match self {
            Variant::A | Variant::B => 1,
            Variant::C => num_stages,
            Variant::D => 2 * num_stages,
            Variant::E => 2 * num_stages + 1,
            Variant::BasicSuppression | Variant::BasicRefinement => 2,
        }
    }

    pub fn uses_neck(self) -> bool {
        matches!(self, Variant::B | Variant::C | Variant::D | Variant::E)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::A => "a",
            Variant::B => "b",
            Variant::C => "c",
            Variant::D => "d",
            Variant::E => "e",
            Variant::BasicSuppression => "basic-bs",
            Variant::BasicRefinement => "basic-refine",
        }
    }
}

impl FromStr for Variant {
    type Err = HerbsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Variant::A),
            "b" => Ok(Variant::B),
            "c" => Ok(Variant::C),
            "d" => Ok(Variant::D),
            "e" | "herbs" => Ok(Variant::E),
            "basic-bs" | "basic-suppression" => Ok(Variant::BasicSuppression),
            "basic-refine" | "basic-refinement" => Ok(Variant::BasicRefinement),
            other => Err(HerbsError::InvalidVariant(other.to_string())),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How a bottom-up stage is read out into a single logit vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Readout {
    /// Head applied to the globally averaged map.
    #[default]
    Pooled,
    /// Mean of the selected locations' logits.
    SelectedMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HerbsConfig {
    pub variant: Variant,
    pub num_classes: usize,
    pub backbone: ToyBackboneConfig,
    pub neck_dim: usize,
    pub top_k: Vec<usize>,
    pub weights: BsLossWeights,
    pub lambda_r: f64,
    pub temperature: TemperatureSchedule,
    pub drop_mapping: DropMapping,
    /// Multiply the refinement loss by `T^2`.
    pub t_squared: bool,
    pub readout: Readout,
    pub seed: u64,
}

impl Default for HerbsConfig {
    fn default() -> Self {
        Self {
            variant: Variant::E,
            num_classes: 10,
            backbone: ToyBackboneConfig::new(crate::backbone::BackboneKind::Conv, 16),
            neck_dim: 64,
            top_k: DEFAULT_TOP_K.to_vec(),
            weights: BsLossWeights::default(),
            lambda_r: 1.0,
            temperature: TemperatureSchedule::default(),
            drop_mapping: DropMapping::Tanh,
            t_squared: false,
            readout: Readout::Pooled,
            seed: 0,
        }
    }
}

impl HerbsConfig {
    /// Small network for 32x32 inputs; its stage maps are 8, 4, 2 and 1 wide.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            num_classes,
            backbone: ToyBackboneConfig::new(crate::backbone::BackboneKind::Conv, 8),
            neck_dim: 16,
            top_k: vec![16, 8, 2, 1],
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(HerbsError::InvalidConfig(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.neck_dim == 0 {
            return Err(HerbsError::InvalidConfig("neck_dim must be positive".into()));
        }
        let w = self.weights;
        if [w.merged, w.dropped, w.layer, self.lambda_r].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(HerbsError::InvalidConfig("loss weights must be finite and nonnegative".into()));
        }
        TemperatureSchedule::new(self.temperature.initial, self.temperature.mode)?;
        match self.variant {
            Variant::E => {
                if self.top_k.len() != self.backbone.num_stages {
                    return Err(HerbsError::InvalidConfig(format!(
                        "{} top-k values for {} stages",
                        self.top_k.len(),
                        self.backbone.num_stages
                    )));
                }
                validate_top_k_order(&self.top_k)
            }
            Variant::BasicSuppression if self.top_k.is_empty() => {
                Err(HerbsError::InvalidConfig("basic suppression needs a top-k value".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Per-location logits of one head over one map, kept for heat maps and
/// suppression diagnostics.
#[derive(Debug, Clone)]
pub struct LocationMap {
    /// `[b, h * w, classes]`
    pub logits: Tensor,
    pub height: usize,
    pub width: usize,
    /// Input pixels per map cell.
    pub stride: usize,
}

/// Owned logits of every head plus the fused prediction, all `[b, classes]`.
#[derive(Debug, Clone)]
pub struct PredictionBundle {
    pub td_logits: Vec<Tensor>,
    pub bu_logits: Vec<Tensor>,
    pub comb_logits: Option<Tensor>,
    /// Heads outside the two paths: the final classifier of `A`/`B`, the
    /// stage head of the basic modules.
    pub other_logits: Vec<Tensor>,
    pub fused: Tensor,
}

impl PredictionBundle {
    /// Every head's logits in the order top-down, bottom-up, combiner, others.
    pub fn heads(&self) -> Vec<&Tensor> {
        self.td_logits.iter().chain(&self.bu_logits).chain(&self.comb_logits).chain(&self.other_logits).collect()
    }

    pub fn batch(&self) -> usize {
        self.fused.dim(0)
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.fused.argmax_rows()
    }
}

/// Scalar loss components of one forward pass.
///
/// `loss_herbs = loss_bs + loss_heads + lambda_r * loss_r`. `loss_heads` is the
/// plain cross-entropy of variants without suppression and 0 otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub loss_m: f64,
    pub loss_d: f64,
    pub loss_l: f64,
    pub loss_r: f64,
    pub loss_heads: f64,
    pub loss_bs: f64,
    pub loss_herbs: f64,
    pub lambda_r: f64,
    pub temperature: f64,
}

impl LossBreakdown {
    pub fn recomposed(&self) -> f64 {
        self.loss_bs + self.loss_heads + self.lambda_r * self.loss_r
    }

    /// The weighted terms whose sum is `loss_herbs`, given the suppression weights.
    pub fn weighted_terms(&self, w: &BsLossWeights) -> [f64; 5] {
        [
            w.merged * self.loss_m,
            w.dropped * self.loss_d,
            w.layer * self.loss_l,
            self.loss_heads,
            self.lambda_r * self.loss_r,
        ]
    }

    /// Name of the first non-finite component.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("merged", self.loss_m),
            ("dropped", self.loss_d),
            ("layer", self.loss_l),
            ("refinement", self.loss_r),
            ("heads", self.loss_heads),
            ("total", self.loss_herbs),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Output of one forward pass with owned values.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub bundle: PredictionBundle,
    pub losses: Option<LossBreakdown>,
    /// Discrete choices and detached values of this pass.
    pub replay: Replay,
    pub maps: Vec<LocationMap>,
}

impl ForwardOutput {
    /// Per suppression stage, per image.
    pub fn selections(&self) -> &[Vec<Selection>] {
        &self.replay.selections
    }
}

/// Everything a forward pass treats as constant with respect to the weights:
/// the top-K selections and the detached refinement teachers.
///
/// Feeding a recorded replay back into a pass with perturbed weights yields
/// exactly the function whose gradient backpropagation computes, which is
/// what finite-difference checks need.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Replay {
    /// Per suppression stage, per image.
    pub selections: Vec<Vec<Selection>>,
    /// One `[b, classes]` teacher per refinement pair.
    pub teachers: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    pub epoch: u64,
    pub with_loss: bool,
    /// Record per-location logits of every spatial head.
    pub with_maps: bool,
    /// Reuse recorded selections and teachers instead of recomputing them.
    pub frozen: Option<&'a Replay>,
}

struct LossVars<'t> {
    merged: Var<'t>,
    dropped: Var<'t>,
    layer: Var<'t>,
    refine: Var<'t>,
    heads: Var<'t>,
    bs: Var<'t>,
    total: Var<'t>,
    temperature: f64,
}

struct Trace<'t> {
    td: Vec<Var<'t>>,
    bu: Vec<Var<'t>>,
    comb: Option<Var<'t>>,
    other: Vec<Var<'t>>,
    selections: Vec<Vec<Selection>>,
    teachers: Vec<Tensor>,
    maps: Vec<LocationMap>,
    losses: Option<LossVars<'t>>,
}

/// Head modules and wiring; all weights live in [`HerbsNet::store`].
#[derive(Debug, Clone)]
pub struct HerbsArch {
    pub backbone: Arc<dyn Backbone>,
    pub neck: Option<FusionNeck>,
    pub td_heads: Vec<Linear>,
    pub bu_heads: Vec<Linear>,
    pub combiner: Option<Combiner>,
    /// Classifier on the last map (variants `A`/`B`, basic modules).
    pub final_head: Option<Linear>,
    /// Auxiliary head on a raw backbone block, `(block, head)`.
    pub block_head: Option<(usize, Linear)>,
    pub refinement: Option<RefinementPlan>,
}

#[derive(Debug, Clone)]
pub struct HerbsNet {
    pub cfg: HerbsConfig,
    pub arch: HerbsArch,
    pub store: ParamStore,
}

impl HerbsNet {
    /// Builds `cfg.variant` on a toy backbone.
    pub fn new(cfg: HerbsConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let backbone = add_toy_backbone(&mut ParamBuilder::new(&mut store, &mut rng).scope("backbone"), cfg.backbone)?;
        Self::assemble(cfg, backbone, store, &mut rng)
    }

    /// Builds `cfg.variant` on an existing backbone; its parameters are kept.
    pub fn with_backbone(mut cfg: HerbsConfig, backbone: BackboneHandle) -> Result<Self> {
        cfg.backbone.num_stages = backbone.num_stages();
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Self::assemble(cfg, backbone.arch, backbone.params, &mut rng)
    }

    fn assemble(
        cfg: HerbsConfig,
        backbone: Arc<dyn Backbone>,
        mut store: ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let channels = backbone.stage_channels().to_vec();
        let n = channels.len();
        let c = cfg.num_classes;
        let d = cfg.neck_dim;
        let act = cfg.backbone.activation;
        let mut b = ParamBuilder::new(&mut store, rng);
        let neck = cfg.variant.uses_neck().then(|| {
            let neck_cfg = NeckConfig { dim: d, activation: act, bias: true };
            FusionNeck::new(&mut b.scope("neck"), &channels, neck_cfg)
        });
        let mut heads = b.scope("heads");
        let stage_heads = |h: &mut ParamBuilder<'_>, path: &str| -> Vec<Linear> {
            (0..n).map(|i| Linear::new(h, &format!("{path}{i}"), d, c, true)).collect()
        };
        let (mut td_heads, mut bu_heads, mut final_head, mut combiner) = (vec![], vec![], None, None);
        let last = *channels.last().expect("validated layout");
        match cfg.variant {
            Variant::A | Variant::BasicRefinement => final_head = Some(Linear::new(&mut heads, "final", last, c, true)),
            Variant::B => final_head = Some(Linear::new(&mut heads, "final", d, c, true)),
            Variant::C => bu_heads = stage_heads(&mut heads, "bu"),
            Variant::D | Variant::E => {
                td_heads = stage_heads(&mut heads, "td");
                bu_heads = stage_heads(&mut heads, "bu");
            }
            Variant::BasicSuppression => final_head = Some(Linear::new(&mut heads, "final", last, c, true)),
        }
        drop(heads);
        match cfg.variant {
            Variant::E => combiner = Some(Combiner::new(&mut b.scope("combiner"), d, c, act)),
            Variant::BasicSuppression => combiner = Some(Combiner::new(&mut b.scope("combiner"), last, c, act)),
            _ => {}
        }
        let arch =
            HerbsArch { backbone, neck, td_heads, bu_heads, combiner, final_head, block_head: None, refinement: None };
        let variant = cfg.variant;
        let net = Self { cfg, arch, store };
        match variant {
            Variant::E => net.attach_refinement(RefinementMode::Full),
            Variant::BasicRefinement => {
                let mut net = net;
                net.cfg.variant = Variant::A;
                net.attach_refinement(RefinementMode::Basic)
            }
            _ => Ok(net),
        }
    }

    pub fn head_layout(&self) -> HeadLayout {
        HeadLayout {
            top_down: self.arch.td_heads.len(),
            bottom_up: self.arch.bu_heads.len(),
            blocks: self.num_stages(),
            has_final: self.arch.final_head.is_some() && !self.cfg.variant.uses_neck(),
        }
    }

    /// Wires refinement pairs. Basic mode adds a head on the penultimate
    /// backbone block when the net has none.
    pub fn attach_refinement(mut self, mode: RefinementMode) -> Result<Self> {
        let plan = plan_refinement(&self.head_layout(), mode)?;
        if mode == RefinementMode::Basic {
            if self.arch.block_head.is_none() {
                let block = self.num_stages() - 2;
                let dim = self.arch.backbone.stage_channels()[block];
                let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x5EED_0B10C);
                let mut b = ParamBuilder::new(&mut self.store, &mut rng);
                let head =
                    Linear::new(&mut b.scope("heads"), &format!("block{block}"), dim, self.cfg.num_classes, true);
                self.arch.block_head = Some((block, head));
            }
            self.cfg.variant = Variant::BasicRefinement;
        }
        self.arch.refinement = Some(plan);
        Ok(self)
    }

    pub fn num_stages(&self) -> usize {
        self.arch.backbone.stage_channels().len()
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    /// Trainable classifier heads, the combiner included.
    pub fn num_heads(&self) -> usize {
        let a = &self.arch;
        a.td_heads.len()
            + a.bu_heads.len()
            + a.combiner.is_some() as usize
            + a.final_head.is_some() as usize
            + a.block_head.is_some() as usize
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Parameter ids grouped by submodule name, in a stable order.
    pub fn module_params(&self) -> Vec<(String, Vec<ParamId>)> {
        let a = &self.arch;
        let mut out: Vec<(String, Vec<ParamId>)> = Vec::new();
        for (i, p) in a.backbone.block_params().into_iter().enumerate() {
            out.push((format!("backbone.block{i}"), p));
        }
        if let Some(neck) = &a.neck {
            out.push(("neck".into(), neck.params()));
        }
        let heads = |hs: &[Linear]| hs.iter().flat_map(|h| h.params()).collect::<Vec<_>>();
        if !a.td_heads.is_empty() {
            out.push(("heads.top_down".into(), heads(&a.td_heads)));
        }
        if !a.bu_heads.is_empty() {
            out.push(("heads.bottom_up".into(), heads(&a.bu_heads)));
        }
        if let Some(h) = &a.final_head {
            out.push(("heads.final".into(), h.params()));
        }
        if let Some((_, h)) = &a.block_head {
            out.push(("heads.block".into(), h.params()));
        }
        if let Some(comb) = &a.combiner {
            out.push(("combiner".into(), comb.params()));
        }
        out
    }

    /// Inference only; labels are never read.
    pub fn predict(&self, batch: &ImageBatch) -> Result<ForwardOutput> {
        self.run(&self.store, batch, ForwardOptions { with_maps: true, ..Default::default() })
    }

    /// Predictions plus every loss component.
    pub fn forward(&self, batch: &ImageBatch, epoch: u64) -> Result<(PredictionBundle, LossBreakdown)> {
        let out = self.run(&self.store, batch, ForwardOptions { epoch, with_loss: true, ..Default::default() })?;
        Ok((out.bundle, out.losses.expect("losses requested")))
    }

    pub fn run(&self, store: &ParamStore, batch: &ImageBatch, opts: ForwardOptions<'_>) -> Result<ForwardOutput> {
        let tape = Tape::new();
        let sess = Session::frozen(&tape, store);
        let trace = self.trace(&sess, batch, opts)?;
        Ok(self.finish(trace))
    }

    /// Forward, loss and gradient of `loss_herbs` for every parameter in store order.
    pub fn loss_and_grads(&self, batch: &ImageBatch, opts: ForwardOptions<'_>) -> Result<(ForwardOutput, Vec<Tensor>)> {
        let tape = Tape::new();
        let sess = Session::new(&tape, &self.store);
        let trace = self.trace(&sess, batch, ForwardOptions { with_loss: true, ..opts })?;
        let total = trace.losses.as_ref().expect("losses requested").total;
        let grads = sess.param_grads(&tape.backward(total));
        Ok((self.finish(trace), grads))
    }

    /// Loss components evaluated with weights from `store`.
    pub fn losses_with(
        &self,
        store: &ParamStore,
        batch: &ImageBatch,
        opts: ForwardOptions<'_>,
    ) -> Result<LossBreakdown> {
        let out = self.run(store, batch, ForwardOptions { with_loss: true, with_maps: false, ..opts })?;
        Ok(out.losses.expect("losses requested"))
    }

    fn finish(&self, t: Trace<'_>) -> ForwardOutput {
        let own = |v: &Var<'_>| (*v.value()).clone();
        let td_logits: Vec<Tensor> = t.td.iter().map(own).collect();
        let bu_logits: Vec<Tensor> = t.bu.iter().map(own).collect();
        let comb_logits = t.comb.as_ref().map(own);
        let other_logits: Vec<Tensor> = t.other.iter().map(own).collect();
        let all: Vec<&Tensor> = td_logits.iter().chain(&bu_logits).chain(&comb_logits).chain(&other_logits).collect();
        let fused = fuse_batch(&all).expect("heads share a shape");
        let losses = t.losses.map(|l| LossBreakdown {
            loss_m: l.merged.item(),
            loss_d: l.dropped.item(),
            loss_l: l.layer.item(),
            loss_r: l.refine.item(),
            loss_heads: l.heads.item(),
            loss_bs: l.bs.item(),
            loss_herbs: l.total.item(),
            lambda_r: self.cfg.lambda_r,
            temperature: l.temperature,
        });
        ForwardOutput {
            bundle: PredictionBundle { td_logits, bu_logits, comb_logits, other_logits, fused },
            losses,
            replay: Replay { selections: t.selections, teachers: t.teachers },
            maps: t.maps,
        }
    }

    fn trace<'t>(&self, sess: &Session<'t>, batch: &ImageBatch, opts: ForwardOptions<'_>) -> Result<Trace<'t>> {
        let tape = sess.tape();
        let labels = if opts.with_loss { Some(batch.checked_labels(self.cfg.num_classes)?) } else { None };
        let a = &self.arch;
        let stages = extract_stages(sess, a.backbone.as_ref(), batch)?;
        let strides = stages.strides.clone();
        let zero = || tape.constant(Tensor::scalar(0.0));
        let mut t = Trace {
            td: vec![],
            bu: vec![],
            comb: None,
            other: vec![],
            selections: vec![],
            teachers: vec![],
            maps: vec![],
            losses: None,
        };
        let map_of = |v: Var<'t>, head: &Linear, stride: usize, maps: &mut Vec<LocationMap>| -> Result<()> {
            let cm = classify_locations(sess, v, head)?;
            maps.push(LocationMap { logits: (*cm.logits.value()).clone(), height: cm.height, width: cm.width, stride });
            Ok(())
        };

        // Suppression over a list of maps. Returns (merged logits, selections, dropped loss, layer loss).
        let (mut merged, mut dropped, mut layer, mut heads_loss) = (zero(), zero(), zero(), zero());
        let variant = self.cfg.variant;

        match variant {
            Variant::A | Variant::BasicRefinement | Variant::BasicSuppression => {
                let last = *stages.stages.last().expect("at least one stage");
                let head = a.final_head.as_ref().expect("plain variants have a final head");
                let logits = pooled_logits(sess, last, head);
                t.other.push(logits);
                if opts.with_maps && variant != Variant::BasicSuppression {
                    map_of(last, head, *strides.last().unwrap(), &mut t.maps)?;
                }
                if let Some((block, bh)) = &a.block_head {
                    t.other.push(pooled_logits(sess, stages.stages[*block], bh));
                }
                if variant == Variant::BasicSuppression {
                    let cm = classify_locations(sess, last, head)?;
                    let hw = cm.num_locations();
                    let k = *self.cfg.top_k.last().expect("validated");
                    validate_top_k(&[k], &[hw])?;
                    let frozen = opts.frozen.map(|f| f.selections[0].as_slice());
                    let sel = select_stage(&cm, last, k, frozen)?;
                    if opts.with_maps {
                        t.maps.push(LocationMap {
                            logits: (*cm.logits.value()).clone(),
                            height: cm.height,
                            width: cm.width,
                            stride: *strides.last().unwrap(),
                        });
                    }
                    let comb = a.combiner.as_ref().expect("suppression variant has a combiner");
                    let y_m = combine(sess, comb, std::slice::from_ref(&sel))?;
                    t.comb = Some(y_m);
                    if let Some(labels) = labels {
                        merged = merged_loss(y_m, labels);
                        dropped = dropped_loss_stages(tape, std::slice::from_ref(&sel), self.cfg.drop_mapping);
                        layer = layer_loss(tape, &[logits], labels);
                    }
                    t.selections.push(sel.selections);
                } else if let Some(labels) = labels {
                    heads_loss = cross_entropy(logits, labels);
                }
            }
            Variant::B | Variant::C | Variant::D | Variant::E => {
                let neck = a.neck.as_ref().expect("neck variants have a neck");
                let fused = neck.forward(sess, &stages.stages)?;
                if variant == Variant::B {
                    let last = *fused.bottom_up.last().unwrap();
                    let head = a.final_head.as_ref().unwrap();
                    let logits = pooled_logits(sess, last, head);
                    if opts.with_maps {
                        map_of(last, head, *strides.last().unwrap(), &mut t.maps)?;
                    }
                    if let Some(labels) = labels {
                        heads_loss = cross_entropy(logits, labels);
                    }
                    t.other.push(logits);
                } else {
                    t.td = a.td_heads.iter().zip(&fused.top_down).map(|(h, &m)| pooled_logits(sess, m, h)).collect();
                    t.bu = a.bu_heads.iter().zip(&fused.bottom_up).map(|(h, &m)| pooled_logits(sess, m, h)).collect();
                    if variant == Variant::E {
                        let hw: Vec<usize> = fused.bottom_up.iter().map(|m| m.shape()[2] * m.shape()[3]).collect();
                        validate_top_k(&self.cfg.top_k, &hw)?;
                        let mut sels = Vec::with_capacity(hw.len());
                        for (i, (&m, h)) in fused.bottom_up.iter().zip(&a.bu_heads).enumerate() {
                            let cm = classify_locations(sess, m, h)?;
                            let frozen = opts.frozen.map(|f| f.selections[i].as_slice());
                            let sel = select_stage(&cm, m, self.cfg.top_k[i], frozen)?;
                            if opts.with_maps {
                                t.maps.push(LocationMap {
                                    logits: (*cm.logits.value()).clone(),
                                    height: cm.height,
                                    width: cm.width,
                                    stride: strides[i],
                                });
                            }
                            sels.push(sel);
                        }
                        if self.cfg.readout == Readout::SelectedMean {
                            t.bu = sels.iter().map(|s| s.selected_logits.mean_axis(1)).collect();
                        }
                        let comb = a.combiner.as_ref().unwrap();
                        let y_m = combine(sess, comb, &sels)?;
                        t.comb = Some(y_m);
                        if let Some(labels) = labels {
                            merged = merged_loss(y_m, labels);
                            dropped = dropped_loss_stages(tape, &sels, self.cfg.drop_mapping);
                            let pooled: Vec<Var<'t>> = a
                                .bu_heads
                                .iter()
                                .zip(&fused.bottom_up)
                                .map(|(h, &m)| pooled_logits(sess, m, h))
                                .collect();
                            layer = layer_loss(tape, &pooled, labels);
                        }
                        t.selections = sels.into_iter().map(|s| s.selections).collect();
                    } else {
                        if opts.with_maps {
                            for (i, (&m, h)) in fused.bottom_up.iter().zip(&a.bu_heads).enumerate() {
                                map_of(m, h, strides[i], &mut t.maps)?;
                            }
                        }
                        if let Some(labels) = labels {
                            let all: Vec<Var<'t>> = t.td.iter().chain(&t.bu).copied().collect();
                            let n = all.len() as f64;
                            heads_loss = layer_loss(tape, &all, labels).scale(1.0 / n);
                        }
                    }
                }
            }
        }

        if labels.is_some() {
            let temperature = self.cfg.temperature.at(opts.epoch);
            let refine = match &a.refinement {
                Some(plan) => {
                    let mut pairs = Vec::with_capacity(plan.pairs.len());
                    for (i, &(s, te)) in plan.pairs.iter().enumerate() {
                        let teacher = match opts.frozen {
                            Some(f) => tape.constant(f.teachers[i].clone()),
                            None => self.head_var(&t, te),
                        };
                        t.teachers.push((*teacher.value()).clone());
                        pairs.push(ClassifierPair { student: self.head_var(&t, s), teacher });
                    }
                    refinement_loss(&pairs, temperature, self.cfg.t_squared)?
                }
                None => zero(),
            };
            let bs = if matches!(variant, Variant::E | Variant::BasicSuppression) {
                bs_total(merged, dropped, layer, self.cfg.weights)
            } else {
                zero()
            };
            let total = bs.add(heads_loss).add(refine.scale(self.cfg.lambda_r));
            t.losses = Some(LossVars { merged, dropped, layer, refine, heads: heads_loss, bs, total, temperature });
        }
        Ok(t)
    }

    fn head_var<'t>(&self, t: &Trace<'t>, h: HeadRef) -> Var<'t> {
        match h {
            HeadRef::TopDown(i) => t.td[i],
            HeadRef::BottomUp(i) => t.bu[i],
            HeadRef::Final => t.other[0],
            HeadRef::Block(_) => t.other[1],
        }
    }
}

/// `softmax` of the element-wise sum of head logits.
///
/// Per class the terms are summed in sorted order, so any permutation of
/// `heads` gives a bit-identical result.
pub fn fuse_predictions(heads: &[&[f64]]) -> Result<Vec<f64>> {
    let first = heads.first().ok_or_else(|| HerbsError::Empty("no logits to fuse".into()))?;
    let c = first.len();
    if let Some(bad) = heads.iter().find(|h| h.len() != c) {
        return Err(HerbsError::LengthMismatch(format!("logit vectors of length {c} and {}", bad.len())));
    }
    let mut column = Vec::with_capacity(heads.len());
    let sums: Vec<f64> = (0..c)
        .map(|j| {
            column.clear();
            column.extend(heads.iter().map(|h| h[j]));
            column.sort_by(f64::total_cmp);
            column.iter().sum()
        })
        .collect();
    let m = sums.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = sums.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Row-wise [`fuse_predictions`] over `[b, classes]` tensors.
pub fn fuse_batch(heads: &[&Tensor]) -> Result<Tensor> {
    let first = heads.first().ok_or_else(|| HerbsError::Empty("no logits to fuse".into()))?;
    let shape = first.shape().to_vec();
    if heads.iter().any(|h| h.shape() != shape.as_slice()) {
        return Err(HerbsError::LengthMismatch("head logits differ in shape".into()));
    }
    let mut data = Vec::with_capacity(first.len());
    for r in 0..shape[0] {
        let rows: Vec<&[f64]> = heads.iter().map(|h| h.row(r)).collect();
        data.extend(fuse_predictions(&rows)?);
    }
    Ok(Tensor::new(shape, data))
}
