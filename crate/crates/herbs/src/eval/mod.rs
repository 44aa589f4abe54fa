//! Prediction dumps, accuracy reports, heat maps and suppression diagnostics.

mod heatmap;
mod metrics;
mod plot;
mod report;

pub use heatmap::{
    background_tanh, heatmap_from_maps, mask_for_input, render_heatmap, save_heatmap, HeatMap, HeatSource,
};
pub use metrics::{
    false_true_counts, false_true_rate, generic_class_report, top_k_accuracy, top_k_indices, AverageRow, FalseTrue,
    GenericClassRow, GenericReport,
};
pub use plot::plot_series;
pub use report::{EvalReport, PathAccuracy};

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use herbs_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, Dataset, Phase};
use crate::error::{HerbsError, Result};
use crate::net::HerbsNet;

/// One evaluated image: every head's logits and the fused prediction.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub label: usize,
    pub generic: usize,
    pub td_logits: Vec<Vec<f64>>,
    pub bu_logits: Vec<Vec<f64>>,
    pub comb_logits: Option<Vec<f64>>,
    pub other_logits: Vec<Vec<f64>>,
    /// Fused class probabilities.
    pub fused: Vec<f64>,
    pub fused_pred: usize,
    /// Argmax of the summed top-down logits.
    pub td_pred: Option<usize>,
    pub bu_pred: Option<usize>,
    /// Selected locations per suppression stage, best first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected: Option<Vec<Vec<usize>>>,
    /// Mean `|tanh|` of classification-map logits over background cells.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background_tanh: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub batch_size: usize,
    /// Keep the top-K selections in every record.
    pub selections: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { batch_size: 32, selections: false }
    }
}

fn row(t: &Tensor, b: usize) -> Vec<f64> {
    let c = t.dim(1);
    t.data()[b * c..(b + 1) * c].to_vec()
}

fn path_argmax(heads: &[Vec<f64>]) -> Option<usize> {
    let first = heads.first()?;
    let sum: Vec<f64> = (0..first.len()).map(|c| heads.iter().map(|h| h[c]).sum()).collect();
    Some(top_k_indices(&sum, 1)[0])
}

/// Runs the test-time transform and inference over every sample, in order.
pub fn evaluate(
    net: &HerbsNet,
    data: &Dataset,
    aug: &AugmentConfig,
    opts: EvalOptions,
) -> Result<Vec<PredictionRecord>> {
    if data.is_empty() {
        return Err(HerbsError::Empty("evaluation set".into()));
    }
    if !net.store.all_finite() {
        return Err(HerbsError::NonFiniteParams);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(opts.batch_size.max(1)) {
        let batch = data.batch(chunk, Phase::Test, aug, 0, 0)?;
        let fwd = net.predict(&batch)?;
        let bundle = &fwd.bundle;
        for (b, &i) in chunk.iter().enumerate() {
            let sample = &data.samples[i];
            let td_logits: Vec<Vec<f64>> = bundle.td_logits.iter().map(|t| row(t, b)).collect();
            let bu_logits: Vec<Vec<f64>> = bundle.bu_logits.iter().map(|t| row(t, b)).collect();
            let fused = row(&bundle.fused, b);
            let background = match &sample.mask {
                Some(mask) => {
                    let m = mask_for_input(mask, sample.image.height, sample.image.width, aug);
                    background_tanh(&fwd.maps, b, &m, aug.input_size, aug.input_size)
                }
                None => None,
            };
            out.push(PredictionRecord {
                id: sample.id.clone(),
                label: sample.label,
                generic: sample.generic,
                td_pred: path_argmax(&td_logits),
                bu_pred: path_argmax(&bu_logits),
                td_logits,
                bu_logits,
                comb_logits: bundle.comb_logits.as_ref().map(|t| row(t, b)),
                other_logits: bundle.other_logits.iter().map(|t| row(t, b)).collect(),
                fused_pred: top_k_indices(&fused, 1)[0],
                fused,
                selected: opts.selections.then(|| fwd.selections().iter().map(|s| s[b].selected.clone()).collect()),
                background_tanh: background,
            });
        }
    }
    Ok(out)
}

pub fn write_dump(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dump(path: &Path) -> Result<Vec<PredictionRecord>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
