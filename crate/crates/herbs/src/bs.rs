//! Background suppression: per-location classification maps, confidence-based
//! top-K selection, the graph-convolution combiner and the merged / dropped /
//! layer losses.

use std::cmp::Ordering;

use herbs_tensor::{ParamId, Session, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{HerbsError, Result};
use crate::nn::{cross_entropy, Activation, Linear, ParamBuilder};

/// Per-stage selection sizes used with full-resolution inputs.
pub const DEFAULT_TOP_K: [usize; 4] = [256, 128, 64, 32];

/// Weights of the merged, dropped and layer terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BsLossWeights {
    pub merged: f64,
    pub dropped: f64,
    pub layer: f64,
}

impl Default for BsLossWeights {
    fn default() -> Self {
        Self { merged: 1.0, dropped: 5.0, layer: 0.3 }
    }
}

/// How dropped logits are mapped before comparison with the pseudo target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DropMapping {
    /// `tanh(y)` against -1.
    #[default]
    Tanh,
    /// `softmax(y)` against `1 / classes`.
    Softmax,
}

impl DropMapping {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tanh" => Ok(Self::Tanh),
            "softmax" => Ok(Self::Softmax),
            other => Err(HerbsError::InvalidConfig(format!("unknown dropped mapping `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DropMapping::Tanh => "tanh",
            DropMapping::Softmax => "softmax",
        }
    }
}

/// Class logits at every location of one stage.
#[derive(Debug, Clone)]
pub struct ClassificationMap<'t> {
    /// `[b, h * w, classes]`, locations in row-major order.
    pub logits: Var<'t>,
    /// `[b, h * w]`, the largest softmax probability per location.
    pub max_score: Tensor,
    pub height: usize,
    pub width: usize,
}

impl ClassificationMap<'_> {
    pub fn num_locations(&self) -> usize {
        self.height * self.width
    }

    pub fn batch(&self) -> usize {
        self.max_score.dim(0)
    }

    /// Scores of image `b`.
    pub fn scores(&self, b: usize) -> &[f64] {
        self.max_score.row(b)
    }
}

/// Max over the last axis of `softmax(logits)`.
pub fn max_score(logits: &Tensor) -> Tensor {
    let c = *logits.shape().last().expect("max_score on scalar");
    let rows = logits.len() / c.max(1);
    let data = (0..rows)
        .map(|r| {
            let row = logits.row(r);
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            // max softmax = exp(m - m) / sum exp(y - m)
            1.0 / row.iter().map(|v| (v - m).exp()).sum::<f64>()
        })
        .collect();
    Tensor::new(logits.shape()[..logits.rank() - 1].to_vec(), data)
}

/// Applies a per-stage linear classifier independently at every location of
/// `feat: [b, d, h, w]`.
pub fn classify_locations<'t>(sess: &Session<'t>, feat: Var<'t>, head: &Linear) -> Result<ClassificationMap<'t>> {
    let s = feat.shape();
    if s.len() != 4 {
        return Err(HerbsError::ShapeMismatch(format!("expected [b, d, h, w], got {s:?}")));
    }
    let (b, d, h, w) = (s[0], s[1], s[2], s[3]);
    if d != head.in_dim {
        return Err(HerbsError::DimensionMismatch(format!("feature width {d}, head expects {}", head.in_dim)));
    }
    let tokens = feat.permute(&[0, 2, 3, 1]).reshape([b, h * w, d]);
    let logits = head.forward(sess, tokens);
    let max_score = max_score(&logits.value());
    Ok(ClassificationMap { logits, max_score, height: h, width: w })
}

/// Location indices of one image split into kept and dropped sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    /// Top-K locations, best first.
    pub selected: Vec<usize>,
    /// Remaining locations in ascending order.
    pub dropped: Vec<usize>,
}

/// Picks the `k` highest scores. Equal scores rank by ascending index.
pub fn select_topk(scores: &[f64], k: usize) -> Result<Selection> {
    if k == 0 || k > scores.len() {
        return Err(HerbsError::TopKOutOfRange { k, locations: scores.len() });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    let selected = order[..k].to_vec();
    let mut dropped = order[k..].to_vec();
    dropped.sort_unstable();
    Ok(Selection { selected, dropped })
}

/// Selected features and logits for one stage across the batch.
#[derive(Debug, Clone)]
pub struct SelectionResult<'t> {
    pub selections: Vec<Selection>,
    /// `[b, k, d]`
    pub selected_feats: Var<'t>,
    /// `[b, k, classes]`
    pub selected_logits: Var<'t>,
    /// `[b * (h*w - k), classes]`, `None` when nothing is dropped.
    pub dropped_logits: Option<Var<'t>>,
}

impl SelectionResult<'_> {
    pub fn k(&self) -> usize {
        self.selections.first().map_or(0, |s| s.selected.len())
    }
}

/// Splits a stage into its top-`k` locations and the rest.
///
/// `frozen` replays earlier selections instead of ranking the current scores;
/// finite-difference checks use it to hold the discrete choice fixed.
pub fn select_stage<'t>(
    cmap: &ClassificationMap<'t>,
    feat: Var<'t>,
    k: usize,
    frozen: Option<&[Selection]>,
) -> Result<SelectionResult<'t>> {
    let s = feat.shape();
    let (b, d, hw) = (s[0], s[1], s[2] * s[3]);
    if hw != cmap.num_locations() || b != cmap.batch() {
        return Err(HerbsError::ShapeMismatch(format!(
            "features {s:?} do not match a {}x{} classification map",
            cmap.height, cmap.width
        )));
    }
    let selections: Vec<Selection> = match frozen {
        Some(f) => {
            if f.len() != b || f.iter().any(|s| s.selected.len() != k || s.selected.len() + s.dropped.len() != hw) {
                return Err(HerbsError::ShapeMismatch("frozen selection does not fit this stage".into()));
            }
            f.to_vec()
        }
        None => (0..b).map(|i| select_topk(cmap.scores(i), k)).collect::<Result<_>>()?,
    };
    let classes = cmap.logits.shape()[2];
    let flat_feats = feat.permute(&[0, 2, 3, 1]).reshape([b * hw, d]);
    let flat_logits = cmap.logits.reshape([b * hw, classes]);
    let keep: Vec<usize> =
        selections.iter().enumerate().flat_map(|(i, s)| s.selected.iter().map(move |&j| i * hw + j)).collect();
    let drop: Vec<usize> =
        selections.iter().enumerate().flat_map(|(i, s)| s.dropped.iter().map(move |&j| i * hw + j)).collect();
    let selected_feats = flat_feats.index_select(0, &keep).reshape([b, k, d]);
    let selected_logits = flat_logits.index_select(0, &keep).reshape([b, k, classes]);
    let dropped_logits = (!drop.is_empty()).then(|| flat_logits.index_select(0, &drop));
    Ok(SelectionResult { selections, selected_feats, selected_logits, dropped_logits })
}

/// Graph convolution over the selected tokens of all stages.
///
/// Tokens are projected, a fully connected graph is weighted by the
/// row-softmax of scaled pairwise dot products, one propagation step
/// `act(A X W + b)` is applied, tokens are mean-pooled and classified.
#[derive(Debug, Clone)]
pub struct Combiner {
    pub proj: Linear,
    pub graph: Linear,
    pub classifier: Linear,
    pub activation: Activation,
    pub dim: usize,
}

impl Combiner {
    pub fn new(b: &mut ParamBuilder<'_>, dim: usize, classes: usize, activation: Activation) -> Self {
        Self {
            proj: Linear::new(b, "proj", dim, dim, true),
            graph: Linear::new(b, "graph", dim, dim, true),
            classifier: Linear::new(b, "classifier", dim, classes, true),
            activation,
            dim,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.proj.params(), self.graph.params(), self.classifier.params()].concat()
    }

    /// `tokens: [b, n, d]` to merged logits `[b, classes]`.
    pub fn forward<'t>(&self, sess: &Session<'t>, tokens: Var<'t>) -> Var<'t> {
        let q = self.proj.forward(sess, tokens);
        let adjacency = q.matmul(q.t()).scale(1.0 / (self.dim as f64).sqrt()).softmax();
        let propagated = self.activation.apply(self.graph.forward(sess, adjacency.matmul(tokens)));
        self.classifier.forward(sess, propagated.mean_axis(1))
    }
}

/// Concatenates every stage's selected features and runs the combiner.
pub fn combine<'t>(sess: &Session<'t>, combiner: &Combiner, stages: &[SelectionResult<'t>]) -> Result<Var<'t>> {
    let feats: Vec<Var<'t>> = stages.iter().map(|s| s.selected_feats).filter(|f| f.shape()[1] > 0).collect();
    if feats.is_empty() {
        return Err(HerbsError::EmptySelection);
    }
    for f in &feats {
        if f.shape()[2] != combiner.dim {
            return Err(HerbsError::DimensionMismatch(format!(
                "selected features have width {}, combiner expects {}",
                f.shape()[2],
                combiner.dim
            )));
        }
    }
    Ok(combiner.forward(sess, Var::concat(&feats, 1)))
}

/// Cross-entropy of the merged prediction, averaged over the batch.
pub fn merged_loss<'t>(merged_logits: Var<'t>, labels: &[usize]) -> Var<'t> {
    cross_entropy(merged_logits, labels)
}

/// Mean over dropped locations of the per-location squared distance to the
/// pseudo target, summed over classes. `dropped: [m, classes]`.
pub fn dropped_loss<'t>(tape: &'t Tape, dropped: Option<Var<'t>>, mapping: DropMapping) -> Var<'t> {
    let Some(y) = dropped else { return tape.constant(Tensor::scalar(0.0)) };
    let shape = y.shape();
    let (m, c) = (shape[0], shape[1]);
    if m == 0 {
        return tape.constant(Tensor::scalar(0.0));
    }
    let dist = match mapping {
        DropMapping::Tanh => y.tanh().add_scalar(1.0),
        DropMapping::Softmax => y.softmax().add_scalar(-1.0 / c as f64),
    };
    dist.square().sum().scale(1.0 / m as f64)
}

/// Dropped loss averaged over the stages that dropped anything.
pub fn dropped_loss_stages<'t>(tape: &'t Tape, stages: &[SelectionResult<'t>], mapping: DropMapping) -> Var<'t> {
    let terms: Vec<Var<'t>> =
        stages.iter().filter_map(|s| s.dropped_logits).map(|d| dropped_loss(tape, Some(d), mapping)).collect();
    if terms.is_empty() {
        return tape.constant(Tensor::scalar(0.0));
    }
    let n = terms.len() as f64;
    terms.into_iter().reduce(|a, b| a.add(b)).expect("non-empty").scale(1.0 / n)
}

/// Per-stage prediction from the spatially averaged map, `[b, classes]`.
pub fn pooled_logits<'t>(sess: &Session<'t>, feat: Var<'t>, head: &Linear) -> Var<'t> {
    head.forward(sess, feat.global_avg_pool())
}

/// Sum over stages of the batch-mean cross-entropy of pooled predictions.
pub fn layer_loss<'t>(tape: &'t Tape, stage_logits: &[Var<'t>], labels: &[usize]) -> Var<'t> {
    stage_logits
        .iter()
        .map(|&l| cross_entropy(l, labels))
        .reduce(|a, b| a.add(b))
        .unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)))
}

pub fn bs_total<'t>(merged: Var<'t>, dropped: Var<'t>, layer: Var<'t>, w: BsLossWeights) -> Var<'t> {
    merged.scale(w.merged).add(dropped.scale(w.dropped)).add(layer.scale(w.layer))
}

/// Checks a top-K list against stage sizes: every `k` in `1..=h*w` and
/// strictly decreasing with depth.
pub fn validate_top_k(top_k: &[usize], locations: &[usize]) -> Result<()> {
    if top_k.len() != locations.len() {
        return Err(HerbsError::InvalidConfig(format!("{} top-k values for {} stages", top_k.len(), locations.len())));
    }
    for (&k, &hw) in top_k.iter().zip(locations) {
        if k == 0 || k > hw {
            return Err(HerbsError::TopKOutOfRange { k, locations: hw });
        }
    }
    Ok(())
}

pub fn validate_top_k_order(top_k: &[usize]) -> Result<()> {
    if top_k.windows(2).any(|w| w[1] >= w[0]) {
        return Err(HerbsError::InvalidConfig(format!("top-k must strictly decrease with depth, got {top_k:?}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use herbs_tensor::{ChaCha8Rng, ParamStore};
    use rand::SeedableRng;

    fn head(store: &mut ParamStore, d: usize, c: usize) -> Linear {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Linear::new(&mut ParamBuilder::new(store, &mut rng), "head", d, c, true)
    }

    #[test]
    fn identity_head_reproduces_features() {
        let mut store = ParamStore::new();
        let h = head(&mut store, 3, 3);
        store.set(h.weight, Tensor::eye(3));
        let tape = Tape::new();
        let sess = Session::frozen(&tape, &store);
        let feat = sess.input(Tensor::new([1, 3, 1, 1], vec![0.5, -1.0, 2.0]));
        let map = classify_locations(&sess, feat, &h).unwrap();
        assert_eq!(map.logits.value().data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn max_score_of_known_logits() {
        assert!((max_score(&Tensor::new([1, 2], vec![0.0, 0.0])).item() - 0.5).abs() < 1e-15);
        let e = std::f64::consts::E;
        let expect = e.powi(3) / (e + e * e + e.powi(3));
        assert!((max_score(&Tensor::new([1, 3], vec![1.0, 2.0, 3.0])).item() - expect).abs() < 1e-15);
        assert!((expect - 0.6652).abs() < 5e-5);
    }

    #[test]
    fn head_width_mismatch() {
        let mut store = ParamStore::new();
        let h = head(&mut store, 4, 2);
        let tape = Tape::new();
        let sess = Session::frozen(&tape, &store);
        let feat = sess.input(Tensor::zeros([1, 3, 2, 2]));
        assert!(matches!(classify_locations(&sess, feat, &h), Err(HerbsError::DimensionMismatch(_))));
    }

    #[test]
    fn topk_examples() {
        let s = select_topk(&[0.9, 0.2, 0.7, 0.4], 2).unwrap();
        assert_eq!(s.selected, vec![0, 2]);
        assert_eq!(s.dropped, vec![1, 3]);
        let all = select_topk(&[0.1, 0.2, 0.3, 0.4], 4).unwrap();
        assert!(all.dropped.is_empty());
        let tie = select_topk(&[0.25; 4], 3).unwrap();
        assert_eq!(tie.selected, vec![0, 1, 2]);
        assert!(select_topk(&[0.1, 0.2], 0).is_err());
        assert!(select_topk(&[0.1, 0.2], 3).is_err());
    }

    #[test]
    fn merged_loss_closed_forms() {
        let tape = Tape::new();
        let uniform = tape.constant(Tensor::zeros([1, 200]));
        assert!((merged_loss(uniform, &[17]).item() - 200f64.ln()).abs() < 1e-9);
        let mut sat = vec![-30.0; 200];
        sat[5] = 30.0;
        assert!(merged_loss(tape.constant(Tensor::new([1, 200], sat)), &[5]).item() < 1e-9);
        let e = std::f64::consts::E;
        let expect = -(e / (e + e * e + e.powi(3))).ln();
        let l = merged_loss(tape.constant(Tensor::new([1, 3], vec![1.0, 2.0, 3.0])), &[0]).item();
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 2.4076).abs() < 5e-5);
    }

    #[test]
    fn dropped_loss_closed_forms() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros([1, 5]));
        assert!((dropped_loss(&tape, Some(z), DropMapping::Tanh).item() - 5.0).abs() < 1e-12);
        let far = tape.constant(Tensor::full([3, 4], -40.0));
        assert!(dropped_loss(&tape, Some(far), DropMapping::Tanh).item() < 1e-12);
        let half = tape.constant(Tensor::new([1, 1], vec![(-0.5f64).atanh()]));
        assert!((dropped_loss(&tape, Some(half), DropMapping::Tanh).item() - 0.25).abs() < 1e-12);
        assert_eq!(dropped_loss(&tape, None, DropMapping::Tanh).item(), 0.0);
        let sm = tape.constant(Tensor::zeros([2, 4]));
        assert!(dropped_loss(&tape, Some(sm), DropMapping::Softmax).item().abs() < 1e-15);
    }

    #[test]
    fn bs_total_weights() {
        let tape = Tape::new();
        let c = |v: f64| tape.constant(Tensor::scalar(v));
        let total = bs_total(c(1.0), c(0.5), c(2.0), BsLossWeights::default()).item();
        assert!((total - 4.1).abs() < 1e-12);
        assert_eq!(bs_total(c(0.0), c(0.0), c(0.0), BsLossWeights::default()).item(), 0.0);
        let w = BsLossWeights { dropped: 0.0, ..Default::default() };
        assert_eq!(bs_total(c(1.0), c(123.0), c(2.0), w).item(), bs_total(c(1.0), c(-7.0), c(2.0), w).item());
    }

    #[test]
    fn layer_loss_of_uniform_stages() {
        let tape = Tape::new();
        let stages: Vec<_> = (0..4).map(|_| tape.constant(Tensor::zeros([2, 10]))).collect();
        assert!((layer_loss(&tape, &stages, &[1, 9]).item() - 4.0 * 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_token_combiner_degenerates_to_classifier() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let comb = Combiner::new(&mut ParamBuilder::new(&mut store, &mut rng), 3, 2, Activation::Identity);
        store.set(comb.graph.weight, Tensor::eye(3));
        store.set(comb.graph.bias.unwrap(), Tensor::zeros([3]));
        let tape = Tape::new();
        let sess = Session::frozen(&tape, &store);
        let token = sess.input(Tensor::new([1, 1, 3], vec![0.3, -0.2, 1.1]));
        let ym = comb.forward(&sess, token).value();
        let direct = comb.classifier.forward(&sess, token.reshape([1, 3])).value();
        for (a, b) in ym.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn top_k_validation() {
        assert!(validate_top_k(&[4, 2], &[16, 4]).is_ok());
        assert!(validate_top_k(&[4, 5], &[16, 4]).is_err());
        assert!(validate_top_k_order(&DEFAULT_TOP_K).is_ok());
        assert!(validate_top_k_order(&[4, 4]).is_err());
    }
}
