use serde::{Deserialize, Serialize};

use super::PredictionRecord;
use crate::error::{HerbsError, Result};

/// Class indices of the `k` largest scores, best first; equal scores rank by
/// ascending index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Percentage of records whose label is among the `k` best fused probabilities.
pub fn top_k_accuracy(dump: &[PredictionRecord], k: usize) -> Result<f64> {
    let first = dump.first().ok_or_else(|| HerbsError::Empty("prediction dump".into()))?;
    let classes = first.fused.len();
    if k == 0 || k > classes {
        return Err(HerbsError::InvalidConfig(format!("top-{k} accuracy over {classes} classes")));
    }
    let mut hits = 0;
    for r in dump {
        if r.fused.len() != classes {
            return Err(HerbsError::LengthMismatch(format!("record `{}` has {} classes", r.id, r.fused.len())));
        }
        hits += top_k_indices(&r.fused, k).contains(&r.label) as usize;
    }
    Ok(100.0 * hits as f64 / dump.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenericClassRow {
    pub name: String,
    /// Fine classes in the group.
    pub categories: usize,
    /// Test samples in the group.
    pub num: usize,
    /// Percent of the group's samples predicted with the right fine class.
    pub precision: f64,
    /// Group samples predicted as a fine class of another group.
    pub fp: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenericReport {
    pub threshold: usize,
    pub rows: Vec<GenericClassRow>,
    /// Unweighted means over `rows`; `None` when no group passes the filter.
    pub average: Option<AverageRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AverageRow {
    pub num: f64,
    pub precision: f64,
    pub fp: f64,
}

impl AverageRow {
    pub fn of(rows: &[GenericClassRow]) -> Option<Self> {
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some(Self {
            num: rows.iter().map(|r| r.num as f64).sum::<f64>() / n,
            precision: rows.iter().map(|r| r.precision).sum::<f64>() / n,
            fp: rows.iter().map(|r| r.fp as f64).sum::<f64>() / n,
        })
    }
}

/// Per-generic-class precision and false positives over groups with more
/// than `threshold` fine classes that have test samples.
pub fn generic_class_report(
    dump: &[PredictionRecord],
    fine_to_generic: &[usize],
    generic_names: &[String],
    threshold: usize,
) -> Result<GenericReport> {
    let generic_of = |fine: usize| -> Result<usize> {
        let g = *fine_to_generic
            .get(fine)
            .ok_or_else(|| HerbsError::Dataset(format!("fine class {fine} has no generic class")))?;
        if g >= generic_names.len() {
            return Err(HerbsError::Dataset(format!("generic class {g} has no name")));
        }
        Ok(g)
    };
    let groups = generic_names.len();
    let mut categories = vec![0usize; groups];
    for f in 0..fine_to_generic.len() {
        categories[generic_of(f)?] += 1;
    }
    let (mut num, mut correct, mut fp) = (vec![0usize; groups], vec![0usize; groups], vec![0usize; groups]);
    for r in dump {
        let g = generic_of(r.label)?;
        let pred = r.fused_pred;
        num[g] += 1;
        if pred == r.label {
            correct[g] += 1;
        } else if generic_of(pred)? != g {
            fp[g] += 1;
        }
    }
    let rows: Vec<GenericClassRow> = (0..groups)
        .filter(|&g| categories[g] > threshold && num[g] > 0)
        .map(|g| GenericClassRow {
            name: generic_names[g].clone(),
            categories: categories[g],
            num: num[g],
            precision: 100.0 * correct[g] as f64 / num[g] as f64,
            fp: fp[g],
        })
        .collect();
    let average = AverageRow::of(&rows);
    Ok(GenericReport { threshold, rows, average })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FalseTrue {
    /// Top-down wrong, bottom-up right.
    pub false_true: usize,
    /// Both paths wrong.
    pub false_false: usize,
    pub rate: f64,
    /// No top-down mistakes; the rate is reported as 0.
    pub degenerate: bool,
}

pub fn false_true_counts(td_preds: &[usize], bu_preds: &[usize], labels: &[usize]) -> Result<FalseTrue> {
    if td_preds.len() != labels.len() || bu_preds.len() != labels.len() {
        return Err(HerbsError::LengthMismatch(format!(
            "{} top-down, {} bottom-up and {} labels",
            td_preds.len(),
            bu_preds.len(),
            labels.len()
        )));
    }
    let (mut ft, mut ff) = (0, 0);
    for ((&td, &bu), &y) in td_preds.iter().zip(bu_preds).zip(labels) {
        if td != y {
            if bu == y {
                ft += 1;
            } else {
                ff += 1;
            }
        }
    }
    let degenerate = ft + ff == 0;
    let rate = if degenerate { 0.0 } else { ft as f64 / (ft + ff) as f64 };
    Ok(FalseTrue { false_true: ft, false_false: ff, rate, degenerate })
}

/// `ft / (ft + ff)`, or 0 when the top-down path makes no mistakes.
pub fn false_true_rate(td_preds: &[usize], bu_preds: &[usize], labels: &[usize]) -> Result<f64> {
    Ok(false_true_counts(td_preds, bu_preds, labels)?.rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(label: usize, fused: Vec<f64>) -> PredictionRecord {
        let fused_pred = top_k_indices(&fused, 1)[0];
        PredictionRecord { label, fused, fused_pred, ..PredictionRecord::default() }
    }

    #[test]
    fn crafted_top1() {
        let dump = vec![rec(0, vec![0.7, 0.2, 0.1]), rec(1, vec![0.1, 0.8, 0.1]), rec(2, vec![0.5, 0.3, 0.2])];
        assert!((top_k_accuracy(&dump, 1).unwrap() - 66.67).abs() < 0.01);
        assert_eq!(top_k_accuracy(&dump, 3).unwrap(), 100.0);
        assert!(top_k_accuracy(&dump, 0).is_err());
        assert!(top_k_accuracy(&dump, 4).is_err());
        assert!(top_k_accuracy(&[], 1).is_err());
    }

    #[test]
    fn ties_rank_by_index() {
        assert_eq!(top_k_indices(&[0.2, 0.4, 0.4, 0.0], 2), vec![1, 2]);
        let dump = vec![rec(2, vec![0.4, 0.4, 0.4])];
        assert_eq!(top_k_accuracy(&dump, 2).unwrap(), 0.0);
    }

    #[test]
    fn hand_built_confusion() {
        // Fine 0, 1 in group A; fine 2 in group B.
        let map = [0, 0, 1];
        let names = vec!["A".to_string(), "B".to_string()];
        let one_hot = |c: usize| (0..3).map(|i| (i == c) as u8 as f64).collect::<Vec<_>>();
        let dump = vec![rec(0, one_hot(0)), rec(0, one_hot(0)), rec(0, one_hot(1)), rec(0, one_hot(2))];
        let report = generic_class_report(&dump, &map, &names, 0).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!((report.rows[0].precision, report.rows[0].fp), (50.0, 1));
        assert!(generic_class_report(&[rec(5, vec![1.0; 6])], &map, &names, 0).is_err());
    }

    #[test]
    fn average_row() {
        let row = |precision, fp| GenericClassRow { name: String::new(), categories: 7, num: 10, precision, fp };
        let avg = AverageRow::of(&[row(80.0, 2), row(100.0, 0)]).unwrap();
        assert_eq!((avg.precision, avg.fp), (90.0, 1.0));
    }

    #[test]
    fn false_true() {
        let labels = [0, 0, 0, 0, 0];
        let td = [1, 1, 1, 1, 0];
        let bu = [0, 0, 0, 2, 0];
        assert_eq!(false_true_rate(&td, &bu, &labels).unwrap(), 0.75);
        let all_right = false_true_counts(&labels, &td, &labels).unwrap();
        assert!(all_right.degenerate && all_right.rate == 0.0);
        assert!(false_true_rate(&td[..2], &bu, &labels).is_err());
    }
}
