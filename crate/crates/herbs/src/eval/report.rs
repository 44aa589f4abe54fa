use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{
    false_true_counts, generic_class_report, top_k_accuracy, top_k_indices, FalseTrue, GenericReport,
};
use super::PredictionRecord;
use crate::error::{HerbsError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathAccuracy {
    pub head: String,
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub samples: usize,
    pub num_classes: usize,
    pub top1: f64,
    /// Only when there are at least five classes.
    pub top5: Option<f64>,
    pub heads: Vec<PathAccuracy>,
    /// Present when both paths have heads.
    pub false_true: Option<FalseTrue>,
    pub generic: GenericReport,
    /// Mean over images with a foreground mask.
    pub background_tanh: Option<f64>,
}

fn head_top1(dump: &[PredictionRecord], pick: impl Fn(&PredictionRecord) -> Option<&Vec<f64>>) -> Option<f64> {
    let mut hits = 0;
    for r in dump {
        hits += (top_k_indices(pick(r)?, 1)[0] == r.label) as usize;
    }
    Some(100.0 * hits as f64 / dump.len() as f64)
}

impl EvalReport {
    pub fn build(
        variant: &str,
        dump: &[PredictionRecord],
        fine_to_generic: &[usize],
        generic_names: &[String],
        threshold: usize,
    ) -> Result<Self> {
        let first = dump.first().ok_or_else(|| HerbsError::Empty("prediction dump".into()))?;
        let num_classes = first.fused.len();
        let mut heads = Vec::new();
        for i in 0..first.td_logits.len() {
            heads.extend(
                head_top1(dump, |r| r.td_logits.get(i)).map(|top1| PathAccuracy { head: format!("td{i}"), top1 }),
            );
        }
        for i in 0..first.bu_logits.len() {
            heads.extend(
                head_top1(dump, |r| r.bu_logits.get(i)).map(|top1| PathAccuracy { head: format!("bu{i}"), top1 }),
            );
        }
        heads.extend(
            head_top1(dump, |r| r.comb_logits.as_ref()).map(|top1| PathAccuracy { head: "combiner".into(), top1 }),
        );
        for i in 0..first.other_logits.len() {
            heads.extend(
                head_top1(dump, |r| r.other_logits.get(i)).map(|top1| PathAccuracy { head: format!("other{i}"), top1 }),
            );
        }
        let false_true = match dump.iter().map(|r| Some((r.td_pred?, r.bu_pred?))).collect::<Option<Vec<_>>>() {
            Some(pairs) => {
                let (td, bu): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
                let labels: Vec<usize> = dump.iter().map(|r| r.label).collect();
                Some(false_true_counts(&td, &bu, &labels)?)
            }
            None => None,
        };
        let bg: Vec<f64> = dump.iter().filter_map(|r| r.background_tanh).collect();
        Ok(Self {
            variant: variant.to_string(),
            samples: dump.len(),
            num_classes,
            top1: top_k_accuracy(dump, 1)?,
            top5: (num_classes >= 5).then(|| top_k_accuracy(dump, 5)).transpose()?,
            heads,
            false_true,
            generic: generic_class_report(dump, fine_to_generic, generic_names, threshold)?,
            background_tanh: (!bg.is_empty()).then(|| bg.iter().sum::<f64>() / bg.len() as f64),
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "variant {}  samples {}  classes {}", self.variant, self.samples, self.num_classes);
        let _ = write!(s, "top-1 {:.2}%", self.top1);
        if let Some(t5) = self.top5 {
            let _ = write!(s, "  top-5 {t5:.2}%");
        }
        s.push('\n');
        if !self.heads.is_empty() {
            let _ = writeln!(s, "\n{:<10} {:>8}", "head", "top-1");
            for h in &self.heads {
                let _ = writeln!(s, "{:<10} {:>7.2}%", h.head, h.top1);
            }
        }
        if let Some(ft) = &self.false_true {
            let _ = write!(s, "\nfalse-true {}  false-false {}  rate {:.4}", ft.false_true, ft.false_false, ft.rate);
            if ft.degenerate {
                s.push_str("  (no top-down mistakes; rate set to 0)");
            }
            s.push('\n');
        }
        if let Some(bg) = self.background_tanh {
            let _ = writeln!(s, "background |tanh| {bg:.4}");
        }
        let g = &self.generic;
        let _ = writeln!(s, "\ngeneric classes with more than {} categories", g.threshold);
        if g.rows.is_empty() {
            s.push_str("(none)\n");
        } else {
            let _ = writeln!(s, "{:<16} {:>6} {:>6} {:>8} {:>5}", "generic", "cats", "num", "pr.(%)", "fp");
            for r in &g.rows {
                let _ = writeln!(s, "{:<16} {:>6} {:>6} {:>8.2} {:>5}", r.name, r.categories, r.num, r.precision, r.fp);
            }
            if let Some(a) = &g.average {
                let _ = writeln!(s, "{:<16} {:>6} {:>6.1} {:>8.2} {:>5.2}", "average", "", a.num, a.precision, a.fp);
            }
        }
        s
    }
}
