//! Classification metrics: per-class precision/recall/F1, supports, weighted
//! F1 (class-prevalence weights), plus the 0.5-threshold multi-label protocol.

use serde::Serialize;

use crate::error::MetricsError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-class metrics plus aggregates for one evaluation run.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub support: Vec<usize>,
    /// Sum of per-class F1 weighted by support share.
    pub weighted_f1: f64,
    pub accuracy: f64,
}

impl MetricsReport {
    /// Unweighted mean of the per-class F1 scores.
    pub fn macro_f1(&self) -> f64 {
        if self.f1.is_empty() {
            0.0
        } else {
            self.f1.iter().sum::<f64>() / self.f1.len() as f64
        }
    }

    /// Tab-separated rows, one class per line, 3-decimal rendering.
    pub fn to_delimited(&self) -> String {
        let mut out = String::from("class\tprecision\trecall\tf1\tsupport\n");
        for i in 0..self.class_names.len() {
            out.push_str(&format!(
                "{}\t{:.3}\t{:.3}\t{:.3}\t{}\n",
                self.class_names[i], self.precision[i], self.recall[i], self.f1[i], self.support[i]
            ));
        }
        out.push_str(&format!("# weighted_f1\t{:.3}\n", self.weighted_f1));
        out.push_str(&format!("# macro_f1\t{:.3}\n", self.macro_f1()));
        out.push_str(&format!("# accuracy\t{:.3}\n", self.accuracy));
        out
    }

    /// Structured form for machine consumption.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Full<'a> {
            #[serde(flatten)]
            report: &'a MetricsReport,
            macro_f1: f64,
        }
        serde_json::to_string_pretty(&Full {
            report: self,
            macro_f1: self.macro_f1(),
        })
        .expect("serializable report")
    }
}

fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (precision, recall, f1)
}

/// Row argmax with ties resolved to the lowest index.
pub fn argmax_row<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Metrics for single-label predictions: confusion-matrix counts per class,
/// weighted F1 over support shares, top-1 accuracy.
pub fn single_label_metrics<T: Scalar>(
    y_true: &[usize],
    y_pred: &Tensor<T>,
    class_names: &[String],
) -> Result<MetricsReport, MetricsError> {
    let dims = y_pred.dims();
    if y_true.is_empty() || dims.len() != 2 || dims[0] != y_true.len() {
        return Err(MetricsError::EmptyInput(format!(
            "need non-empty [N,K] predictions matching {} labels, got {:?}",
            y_true.len(),
            dims
        )));
    }
    let k = dims[1];
    if class_names.len() != k {
        return Err(MetricsError::Config(format!(
            "{} class names for {} prediction columns",
            class_names.len(),
            k
        )));
    }
    if let Some(&bad) = y_true.iter().find(|&&c| c >= k) {
        return Err(MetricsError::Contract(format!(
            "label index {} out of range for {} classes",
            bad, k
        )));
    }

    let mut confusion = vec![0usize; k * k]; // [true][pred]
    for (n, &truth) in y_true.iter().enumerate() {
        let pred = argmax_row(&y_pred.data()[n * k..(n + 1) * k]);
        confusion[truth * k + pred] += 1;
    }

    let mut precision = Vec::with_capacity(k);
    let mut recall = Vec::with_capacity(k);
    let mut f1 = Vec::with_capacity(k);
    let mut support = Vec::with_capacity(k);
    let mut correct = 0usize;
    for c in 0..k {
        let tp = confusion[c * k + c];
        let fp: usize = (0..k).filter(|&t| t != c).map(|t| confusion[t * k + c]).sum();
        let fn_: usize = (0..k).filter(|&p| p != c).map(|p| confusion[c * k + p]).sum();
        let (p, r, f) = prf(tp, fp, fn_);
        precision.push(p);
        recall.push(r);
        f1.push(f);
        support.push((0..k).map(|p| confusion[c * k + p]).sum());
        correct += tp;
    }
    let total: usize = support.iter().sum();
    let weighted_f1 = f1
        .iter()
        .zip(&support)
        .map(|(f, &s)| f * s as f64 / total as f64)
        .sum();

    Ok(MetricsReport {
        class_names: class_names.to_vec(),
        precision,
        recall,
        f1,
        support,
        weighted_f1,
        accuracy: correct as f64 / total as f64,
    })
}

/// Metrics for multi-label predictions over a class subset. A class is
/// assigned when its probability is strictly greater than `threshold`.
/// Accuracy is the exact-match ratio over the subset.
pub fn multilabel_metrics<T: Scalar>(
    y_true: &Tensor<T>,
    y_pred: &Tensor<T>,
    threshold: f64,
    class_subset: &[usize],
    class_names: &[String],
) -> Result<MetricsReport, MetricsError> {
    let dims = y_pred.dims();
    if dims.len() != 2 || dims[0] == 0 {
        return Err(MetricsError::EmptyInput(format!(
            "need non-empty [N,K] predictions, got {:?}",
            dims
        )));
    }
    if y_true.dims() != dims {
        return Err(MetricsError::Contract(format!(
            "label shape {:?} differs from prediction shape {:?}",
            y_true.dims(),
            dims
        )));
    }
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(MetricsError::Config(format!(
            "threshold must be in (0,1), got {}",
            threshold
        )));
    }
    let (n, k) = (dims[0], dims[1]);
    if let Some(&bad) = class_subset.iter().find(|&&c| c >= k) {
        return Err(MetricsError::Config(format!(
            "subset class index {} outside vocabulary of {} classes",
            bad, k
        )));
    }
    if class_subset.is_empty() {
        return Err(MetricsError::Config("empty class subset".into()));
    }

    let thr = T::from_f64(threshold);
    let mut precision = Vec::new();
    let mut recall = Vec::new();
    let mut f1 = Vec::new();
    let mut support = Vec::new();
    let mut names = Vec::new();
    for &c in class_subset {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for row in 0..n {
            let truth = y_true.data()[row * k + c] == T::one();
            let pred = y_pred.data()[row * k + c] > thr;
            match (truth, pred) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => {}
            }
        }
        let (p, r, f) = prf(tp, fp, fn_);
        precision.push(p);
        recall.push(r);
        f1.push(f);
        support.push(tp + fn_);
        names.push(class_names.get(c).cloned().unwrap_or_else(|| format!("class{}", c)));
    }

    let exact_match = (0..n)
        .filter(|&row| {
            class_subset.iter().all(|&c| {
                let truth = y_true.data()[row * k + c] == T::one();
                let pred = y_pred.data()[row * k + c] > thr;
                truth == pred
            })
        })
        .count();

    let total: usize = support.iter().sum();
    let weighted_f1 = if total > 0 {
        f1.iter()
            .zip(&support)
            .map(|(f, &s)| f * s as f64 / total as f64)
            .sum()
    } else {
        0.0
    };

    Ok(MetricsReport {
        class_names: names,
        precision,
        recall,
        f1,
        support,
        weighted_f1,
        accuracy: exact_match as f64 / n as f64,
    })
}
