//! Classification metrics: confusion matrix, macro-averaged scores and
//! one-vs-rest ROC AUC.

use std::io::Write;

use serde::Serialize;

use crate::error::{invalid, shape_err, Error, Result};
use crate::resample::csv_err;
use crate::tensor::Tensor;

/// `m[true][pred]` counts.
pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    if y_true.len() != y_pred.len() {
        return Err(shape_err!("{} labels but {} predictions", y_true.len(), y_pred.len()));
    }
    let mut m = vec![vec![0; n_classes]; n_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= n_classes || p >= n_classes {
            return Err(Error::Data(format!("label out of range for {n_classes} classes")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision, recall and F1 from a confusion matrix. Undefined
/// ratios (0/0) count as 0.
pub fn per_class_scores(m: &[Vec<usize>]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let k = m.len();
    let mut p = Vec::with_capacity(k);
    let mut r = Vec::with_capacity(k);
    let mut f = Vec::with_capacity(k);
    for c in 0..k {
        let tp = m[c][c];
        let predicted: usize = (0..k).map(|t| m[t][c]).sum();
        let actual: usize = m[c].iter().sum();
        let pc = ratio(tp, predicted);
        let rc = ratio(tp, actual);
        p.push(pc);
        r.push(rc);
        f.push(if pc + rc > 0.0 { 2.0 * pc * rc / (pc + rc) } else { 0.0 });
    }
    (p, r, f)
}

/// Area under the ROC curve of `scores` for the positives in `is_pos`,
/// via the rank-sum statistic with tied ranks averaged. NaN when either
/// class is absent.
///
/// ```
/// let auc = admri::train::roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]);
/// assert_eq!(auc, 0.75);
/// ```
pub fn roc_auc(scores: &[f64], is_pos: &[bool]) -> f64 {
    let n_pos = is_pos.iter().filter(|&&p| p).count();
    let n_neg = is_pos.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return f64::NAN;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(is_pos).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let np = n_pos as f64;
    (rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64)
}

/// Held-out evaluation of one model.
#[derive(Clone, Debug, Serialize)]
pub struct EvaluationReport {
    pub class_names: Vec<String>,
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// One-vs-rest AUC per class; NaN for a class absent from the test set.
    pub auc: Vec<f64>,
    /// Mean over the classes whose AUC is defined.
    pub macro_auc: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl EvaluationReport {
    /// Score class probabilities `probs: [N, K]` against true labels.
    pub fn from_probs(y_true: &[usize], probs: &Tensor, class_names: &[String]) -> Result<Self> {
        let k = class_names.len();
        if y_true.is_empty() {
            return Err(invalid!("cannot evaluate on an empty set"));
        }
        if probs.rank() != 2 || probs.shape() != [y_true.len(), k] {
            return Err(shape_err!(
                "expected probabilities [{}, {k}], got {:?}",
                y_true.len(),
                probs.shape()
            ));
        }
        let y_pred = probs.argmax_rows();
        let confusion = confusion_matrix(y_true, &y_pred, k)?;
        let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
        let (precision, recall, f1) = per_class_scores(&confusion);
        let auc: Vec<f64> = (0..k)
            .map(|c| {
                let scores: Vec<f64> = probs.rows().map(|r| r[c]).collect();
                let pos: Vec<bool> = y_true.iter().map(|&t| t == c).collect();
                roc_auc(&scores, &pos)
            })
            .collect();
        let defined: Vec<f64> = auc.iter().cloned().filter(|a| !a.is_nan()).collect();
        let macro_auc = if defined.is_empty() { f64::NAN } else { mean(&defined) };
        Ok(Self {
            class_names: class_names.to_vec(),
            accuracy: correct as f64 / y_true.len() as f64,
            macro_precision: mean(&precision),
            macro_recall: mean(&recall),
            macro_f1: mean(&f1),
            confusion,
            precision,
            recall,
            f1,
            auc,
            macro_auc,
        })
    }

    pub fn csv_header(class_names: &[String]) -> Vec<String> {
        let mut h: Vec<String> = [
            "model",
            "resampled",
            "accuracy",
            "recall",
            "precision",
            "f1",
            "auc_macro",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        h.extend(class_names.iter().map(|c| format!("auc_{c}")));
        h
    }

    pub fn csv_record(&self, model: &str, resampled: bool) -> Vec<String> {
        let mut r = vec![
            model.to_string(),
            resampled.to_string(),
            self.accuracy.to_string(),
            self.macro_recall.to_string(),
            self.macro_precision.to_string(),
            self.macro_f1.to_string(),
            self.macro_auc.to_string(),
        ];
        r.extend(self.auc.iter().map(|a| a.to_string()));
        r
    }

    /// Header plus a single metrics row.
    pub fn write_csv(&self, model: &str, resampled: bool, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(Self::csv_header(&self.class_names)).map_err(csv_err)?;
        wr.write_record(self.csv_record(model, resampled)).map_err(csv_err)?;
        wr.flush()?;
        Ok(())
    }

    /// Confusion matrix with true classes as rows.
    pub fn write_confusion_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["true\\pred".to_string()];
        header.extend(self.class_names.iter().cloned());
        wr.write_record(&header).map_err(csv_err)?;
        for (name, row) in self.class_names.iter().zip(&self.confusion) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            wr.write_record(&rec).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_class_confusion_scores() {
        let m = vec![vec![5, 5], vec![0, 10]];
        let (p, r, _) = per_class_scores(&m);
        assert_eq!(p[0], 1.0);
        assert_eq!(r[0], 0.5);
    }

    #[test]
    fn never_predicted_class_scores_zero() {
        let m = vec![vec![3, 0], vec![2, 0]];
        let (p, r, f) = per_class_scores(&m);
        assert_eq!((p[1], r[1], f[1]), (0.0, 0.0, 0.0));
    }

    #[test]
    fn auc_extremes_and_ties() {
        let pos = [false, false, true, true];
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &pos), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &pos), 0.0);
        assert_eq!(roc_auc(&[0.5; 4], &pos), 0.5);
        assert!(roc_auc(&[0.5; 2], &[true, true]).is_nan());
    }

    #[test]
    fn perfect_report() {
        let probs = Tensor::matrix(&[&[0.9, 0.1], &[0.2, 0.8], &[0.7, 0.3]]).unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        let r = EvaluationReport::from_probs(&[0, 1, 0], &probs, &names).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.macro_auc, 1.0);
        let mut buf = Vec::new();
        r.write_csv("cnn", false, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("model,resampled,accuracy,recall,precision,f1,auc_macro,auc_a,auc_b\n"));
        assert!(EvaluationReport::from_probs(&[], &probs, &names).is_err());
    }
}
