//! Classical classifiers over fused features (decision tree, random forest,
//! gradient-boosted trees), the 80/20 evaluation protocol, and LDA/KDE
//! class-separability analysis.

mod gbt;
mod lda;
mod tree;

pub use gbt::{gbt_train, GbtModel, GbtParams};
pub use lda::{kde1d, lda_project, Kde1d, LdaProjection};
pub use tree::{dt_train, rf_train, DtParams, ForestModel, RfParams, TreeModel};

use crate::dataio::{EmotionLabel, NUM_CLASSES};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Feature matrix plus labels: the unit of classifier training.
#[derive(Debug, Clone)]
pub struct LabeledFeatures {
    pub n: usize,
    pub d: usize,
    /// Row-major n×d.
    pub values: Vec<f32>,
    pub labels: Vec<EmotionLabel>,
}

impl LabeledFeatures {
    pub fn new(values: Vec<f32>, d: usize, labels: Vec<EmotionLabel>) -> Result<LabeledFeatures> {
        let n = labels.len();
        if values.len() != n * d {
            return Err(Error::shape(
                "LabeledFeatures",
                format!("{} values for {n} samples x {d} features", n * d),
                format!("{}", values.len()),
            ));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::numeric("LabeledFeatures", "NaN in feature matrix"));
        }
        Ok(LabeledFeatures { n, d, values, labels })
    }

    pub fn from_rows(rows: &[Vec<f32>], labels: Vec<EmotionLabel>) -> Result<LabeledFeatures> {
        let d = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut values = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::shape("LabeledFeatures", format!("{d} features"), format!("{}", r.len())));
            }
            values.extend_from_slice(r);
        }
        LabeledFeatures::new(values, d, labels)
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0usize; NUM_CLASSES];
        for l in &self.labels {
            counts[l.index()] += 1;
        }
        counts
    }
}

/// Classification quality report: accuracy plus macro-averaged
/// precision/recall/F1 and the confusion matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// confusion[truth][predicted]
    pub confusion: Vec<Vec<usize>>,
}

/// Accuracy plus macro-averaged precision/recall/F1 (per-class values
/// averaged unweighted; 0/0 ratios count as 0).
pub fn evaluate(predictions: &[EmotionLabel], truth: &[EmotionLabel]) -> Result<EvalReport> {
    if predictions.len() != truth.len() {
        return Err(Error::shape(
            "evaluate",
            format!("{} predictions", truth.len()),
            format!("{}", predictions.len()),
        ));
    }
    if truth.is_empty() {
        return Err(Error::Data("evaluate: empty input".to_string()));
    }
    let c = NUM_CLASSES;
    let mut confusion = vec![vec![0usize; c]; c];
    for (&p, &t) in predictions.iter().zip(truth.iter()) {
        confusion[t.index()][p.index()] += 1;
    }
    let n = truth.len() as f64;
    let correct: usize = (0..c).map(|i| confusion[i][i]).sum();
    let ratio = |num: f64, den: f64| if den == 0.0 { 0.0 } else { num / den };
    let mut precision = 0.0;
    let mut recall = 0.0;
    let mut f1 = 0.0;
    for k in 0..c {
        let tp = confusion[k][k] as f64;
        let pred_k: f64 = (0..c).map(|i| confusion[i][k] as f64).sum();
        let true_k: f64 = (0..c).map(|j| confusion[k][j] as f64).sum();
        let p = ratio(tp, pred_k);
        let r = ratio(tp, true_k);
        precision += p;
        recall += r;
        f1 += ratio(2.0 * p * r, p + r);
    }
    Ok(EvalReport {
        accuracy: correct as f64 / n,
        macro_precision: precision / c as f64,
        macro_recall: recall / c as f64,
        macro_f1: f1 / c as f64,
        confusion,
    })
}
