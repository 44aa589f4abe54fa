//! Multi-stage feature extractors.
//!
//! A backbone maps a normalised image batch `[b, 3, h, w]` to an ordered list
//! of stage feature maps `[b, c_i, h / s_i, w / s_i]` with strictly increasing
//! strides `s_i` and non-decreasing channel counts `c_i`. The head modules only
//! depend on this contract, so the two toy extractors here and any adapted
//! external network are interchangeable.

mod attention;
mod conv;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use herbs_tensor::{ChaCha8Rng, ParamId, ParamStore, Session, Tape, Tensor, Var};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

pub use attention::ToyAttentionBackbone;
pub use conv::ToyConvBackbone;

use crate::error::{HerbsError, Result};
use crate::nn::{Activation, ParamBuilder};

/// Smallest accepted toy width.
pub const MIN_BASE_WIDTH: usize = 4;

/// Normalised pixels plus sample identifiers and optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub pixels: Tensor,
    pub ids: Vec<String>,
    pub labels: Option<Vec<usize>>,
}

impl ImageBatch {
    pub fn new(pixels: Tensor, ids: Vec<String>, labels: Option<Vec<usize>>) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(HerbsError::ShapeMismatch(format!("expected pixels [b, 3, h, w], got {s:?}")));
        }
        if ids.len() != s[0] {
            return Err(HerbsError::LengthMismatch(format!("{} ids for batch of {}", ids.len(), s[0])));
        }
        if let Some(l) = &labels {
            if l.len() != s[0] {
                return Err(HerbsError::LengthMismatch(format!("{} labels for batch of {}", l.len(), s[0])));
            }
        }
        Ok(Self { pixels, ids, labels })
    }

    pub fn len(&self) -> usize {
        self.pixels.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.pixels.dim(2)
    }

    pub fn width(&self) -> usize {
        self.pixels.dim(3)
    }

    /// Labels checked against `num_classes`.
    pub fn checked_labels(&self, num_classes: usize) -> Result<&[usize]> {
        let labels = self.labels.as_deref().ok_or(HerbsError::MissingLabels)?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(HerbsError::LabelOutOfRange { label: bad, classes: num_classes });
        }
        Ok(labels)
    }
}

/// Per-stage feature maps recorded on a tape.
#[derive(Debug, Clone)]
pub struct StageFeatures<'t> {
    pub stages: Vec<Var<'t>>,
    pub strides: Vec<usize>,
}

impl StageFeatures<'_> {
    /// `[c_i, h_i, w_i]` per stage (batch axis dropped).
    pub fn shapes(&self) -> Vec<[usize; 3]> {
        self.stages
            .iter()
            .map(|s| {
                let sh = s.shape();
                [sh[1], sh[2], sh[3]]
            })
            .collect()
    }
}

/// Supported toy extractors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Conv,
    Attention,
}

impl FromStr for BackboneKind {
    type Err = HerbsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "conv" | "convolution" => Ok(Self::Conv),
            "attention" | "swin" | "window" => Ok(Self::Attention),
            other => Err(HerbsError::UnsupportedBackbone(other.to_string())),
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::Conv => "conv",
            BackboneKind::Attention => "attention",
        })
    }
}

/// The architecture half of a backbone; weights live in a [`ParamStore`].
///
/// Implementations hold only parameter ids, so they are freely shareable
/// across threads for read-only inference.
pub trait Backbone: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    fn stage_channels(&self) -> &[usize];

    fn stage_strides(&self) -> &[usize];

    /// Input height and width must be multiples of this.
    fn input_multiple(&self) -> usize {
        *self.stage_strides().last().unwrap_or(&1)
    }

    /// Parameters grouped by the stage block that owns them.
    fn block_params(&self) -> Vec<Vec<ParamId>>;

    fn forward<'t>(&self, sess: &Session<'t>, pixels: Var<'t>) -> Result<Vec<Var<'t>>>;
}

/// Signature of an adapted external stage extractor.
pub type StageFn = dyn for<'t> Fn(&Session<'t>, Var<'t>) -> Result<Vec<Var<'t>>> + Send + Sync;

/// Wraps an arbitrary stage extractor (for example a port of a large
/// pretrained network) behind the stage contract.
pub struct AdapterBackbone {
    name: String,
    channels: Vec<usize>,
    strides: Vec<usize>,
    blocks: Vec<Vec<ParamId>>,
    extract: Box<StageFn>,
}

impl fmt::Debug for AdapterBackbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AdapterBackbone")
            .field("name", &self.name)
            .field("channels", &self.channels)
            .field("strides", &self.strides)
            .finish()
    }
}

impl AdapterBackbone {
    pub fn new(
        name: impl Into<String>,
        channels: Vec<usize>,
        strides: Vec<usize>,
        blocks: Vec<Vec<ParamId>>,
        extract: Box<StageFn>,
    ) -> Result<Self> {
        validate_layout(&channels, &strides)?;
        Ok(Self { name: name.into(), channels, strides, blocks, extract })
    }
}

impl Backbone for AdapterBackbone {
    fn name(&self) -> &str {
        &self.name
    }

    fn stage_channels(&self) -> &[usize] {
        &self.channels
    }

    fn stage_strides(&self) -> &[usize] {
        &self.strides
    }

    fn block_params(&self) -> Vec<Vec<ParamId>> {
        self.blocks.clone()
    }

    fn forward<'t>(&self, sess: &Session<'t>, pixels: Var<'t>) -> Result<Vec<Var<'t>>> {
        (self.extract)(sess, pixels)
    }
}

fn validate_layout(channels: &[usize], strides: &[usize]) -> Result<()> {
    if channels.is_empty() || channels.len() != strides.len() {
        return Err(HerbsError::InvalidConfig(format!(
            "stage layout needs matching non-empty channel/stride lists, got {channels:?} / {strides:?}"
        )));
    }
    if strides.windows(2).any(|w| w[1] <= w[0]) {
        return Err(HerbsError::InvalidConfig(format!("stage strides must increase strictly: {strides:?}")));
    }
    if channels.windows(2).any(|w| w[1] < w[0]) {
        return Err(HerbsError::InvalidConfig(format!("stage channels must not decrease: {channels:?}")));
    }
    Ok(())
}

/// A backbone architecture together with its weights.
#[derive(Debug, Clone)]
pub struct BackboneHandle {
    pub arch: Arc<dyn Backbone>,
    pub params: ParamStore,
}

impl BackboneHandle {
    pub fn new(arch: Arc<dyn Backbone>, params: ParamStore) -> Self {
        Self { arch, params }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn num_stages(&self) -> usize {
        self.arch.stage_channels().len()
    }

    /// Stage features for a batch without gradient tracking.
    pub fn extract(&self, batch: &ImageBatch) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let sess = Session::frozen(&tape, &self.params);
        let feats = extract_stages(&sess, self.arch.as_ref(), batch)?;
        Ok(feats.stages.iter().map(|v| (*v.value()).clone()).collect())
    }
}

/// Toy-backbone construction options.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyBackboneConfig {
    pub kind: BackboneKind,
    pub base_width: usize,
    pub num_stages: usize,
    pub activation: Activation,
}

impl ToyBackboneConfig {
    pub fn new(kind: BackboneKind, base_width: usize) -> Self {
        Self { kind, base_width, num_stages: 4, activation: Activation::default() }
    }
}

/// Deterministically initialised toy backbone with four stride-2 stages and
/// channel doubling.
pub fn build_toy_backbone(kind: BackboneKind, base_width: usize, seed: u64) -> Result<BackboneHandle> {
    build_toy_backbone_with(ToyBackboneConfig::new(kind, base_width), seed)
}

pub fn build_toy_backbone_with(cfg: ToyBackboneConfig, seed: u64) -> Result<BackboneHandle> {
    let mut params = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = ParamBuilder::new(&mut params, &mut rng);
    let arch = add_toy_backbone(&mut b.scope("backbone"), cfg)?;
    Ok(BackboneHandle { arch, params })
}

/// Registers a toy backbone's parameters through `b`.
pub fn add_toy_backbone(b: &mut ParamBuilder<'_>, cfg: ToyBackboneConfig) -> Result<Arc<dyn Backbone>> {
    if cfg.base_width < MIN_BASE_WIDTH {
        return Err(HerbsError::InvalidConfig(format!(
            "base_width must be at least {MIN_BASE_WIDTH}, got {}",
            cfg.base_width
        )));
    }
    if cfg.num_stages < 1 {
        return Err(HerbsError::InvalidConfig("a backbone needs at least one stage".into()));
    }
    Ok(match cfg.kind {
        BackboneKind::Conv => Arc::new(ToyConvBackbone::new(b, cfg.base_width, cfg.num_stages, cfg.activation)),
        BackboneKind::Attention => {
            Arc::new(ToyAttentionBackbone::new(b, cfg.base_width, cfg.num_stages, cfg.activation))
        }
    })
}

/// Runs the backbone and checks the returned stages against its declared layout.
pub fn extract_stages<'t>(
    sess: &Session<'t>,
    backbone: &dyn Backbone,
    batch: &ImageBatch,
) -> Result<StageFeatures<'t>> {
    let pixels = sess.input(batch.pixels.clone());
    extract_stages_var(sess, backbone, pixels)
}

pub fn extract_stages_var<'t>(
    sess: &Session<'t>,
    backbone: &dyn Backbone,
    pixels: Var<'t>,
) -> Result<StageFeatures<'t>> {
    let shape = pixels.shape();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(HerbsError::ShapeMismatch(format!("expected pixels [b, 3, h, w], got {shape:?}")));
    }
    let (h, w) = (shape[2], shape[3]);
    let m = backbone.input_multiple();
    if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
        return Err(HerbsError::DimensionMismatch(format!(
            "input {h}x{w} is not a multiple of {m} required by backbone `{}`",
            backbone.name()
        )));
    }
    let stages = backbone.forward(sess, pixels)?;
    let strides = backbone.stage_strides().to_vec();
    let channels = backbone.stage_channels();
    if stages.len() != strides.len() {
        return Err(HerbsError::ShapeMismatch(format!(
            "backbone returned {} stages, declared {}",
            stages.len(),
            strides.len()
        )));
    }
    for (i, s) in stages.iter().enumerate() {
        let expect = [shape[0], channels[i], h / strides[i], w / strides[i]];
        if s.shape() != expect {
            return Err(HerbsError::ShapeMismatch(format!("stage {i} has shape {:?}, expected {expect:?}", s.shape())));
        }
    }
    Ok(StageFeatures { stages, strides })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(b: usize, h: usize, w: usize) -> ImageBatch {
        let pixels = Tensor::from_fn([b, 3, h, w], |i| ((i % 17) as f64) / 17.0 - 0.5);
        ImageBatch::new(pixels, (0..b).map(|i| format!("img{i}")).collect(), None).unwrap()
    }

    #[test]
    fn conv_stage_shapes() {
        let bb = build_toy_backbone(BackboneKind::Conv, 16, 0).unwrap();
        let feats = bb.extract(&batch(2, 64, 64)).unwrap();
        let shapes: Vec<_> = feats.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 16, 16, 16], vec![2, 32, 8, 8], vec![2, 64, 4, 4], vec![2, 128, 2, 2]]);
    }

    #[test]
    fn attention_stage_sizes_at_384() {
        let bb = build_toy_backbone(BackboneKind::Attention, 4, 0).unwrap();
        let feats = bb.extract(&batch(1, 384, 384)).unwrap();
        let sizes: Vec<_> = feats.iter().map(|t| (t.dim(2), t.dim(3))).collect();
        assert_eq!(sizes, vec![(96, 96), (48, 48), (24, 24), (12, 12)]);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let bb = build_toy_backbone(BackboneKind::Conv, 8, 0).unwrap();
        assert!(matches!(bb.extract(&batch(1, 50, 50)), Err(HerbsError::DimensionMismatch(_))));
    }

    #[test]
    fn construction_is_seeded() {
        let a = build_toy_backbone(BackboneKind::Conv, 16, 0).unwrap();
        let b = build_toy_backbone(BackboneKind::Conv, 16, 0).unwrap();
        assert_eq!(a.params, b.params);
        let c = build_toy_backbone(BackboneKind::Attention, 16, 0).unwrap();
        let d = build_toy_backbone(BackboneKind::Attention, 16, 1).unwrap();
        assert_ne!(c.params, d.params);
        assert!(c.num_parameters() > 0);
    }

    #[test]
    fn narrow_width_and_unknown_kind_fail() {
        assert!(matches!(build_toy_backbone(BackboneKind::Conv, 2, 0), Err(HerbsError::InvalidConfig(_))));
        assert!(matches!("resnet50".parse::<BackboneKind>(), Err(HerbsError::UnsupportedBackbone(_))));
    }

    #[test]
    fn adapter_output_is_validated() {
        let mut store = ParamStore::new();
        let w = store.insert("proj", Tensor::ones([4, 3, 1, 1]));
        let adapter = AdapterBackbone::new(
            "pool-only",
            vec![4, 4],
            vec![2, 4],
            vec![vec![w], vec![]],
            Box::new(move |sess: &Session<'_>, x: Var<'_>| {
                let a = x.conv2d(sess.param(w), None, 2, 0);
                // wrong on purpose: stage two keeps stride 2
                Ok(vec![a, a])
            }),
        )
        .unwrap();
        let handle = BackboneHandle::new(Arc::new(adapter), store);
        assert!(matches!(handle.extract(&batch(1, 8, 8)), Err(HerbsError::ShapeMismatch(_))));
    }

    #[test]
    fn adapter_layout_checks() {
        let f: Box<StageFn> = Box::new(|_: &Session<'_>, x: Var<'_>| Ok(vec![x]));
        assert!(AdapterBackbone::new("bad", vec![8, 4], vec![4, 8], vec![], f).is_err());
    }
}
