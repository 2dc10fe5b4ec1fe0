use crate::error::{Error, Result};

/// `(MSE, MAE)` of `pred` against `truth`.
pub fn error_metrics(pred: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape {
            op: "error_metrics",
            left: (pred.len(), 1),
            right: (truth.len(), 1),
        });
    }
    let n = pred.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        let d = p - t;
        se += d * d;
        ae += d.abs();
    }
    Ok((se / n, ae / n))
}

/// `(accuracy, macro-F1)`. Classes that appear in neither `pred` nor
/// `truth` are left out of the macro average.
pub fn classification_metrics(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<(f64, f64)> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape {
            op: "classification_metrics",
            left: (pred.len(), 1),
            right: (truth.len(), 1),
        });
    }
    for &l in pred.iter().chain(truth) {
        if l >= num_classes {
            return Err(Error::Index {
                what: "class label",
                index: l,
                min: 0,
                max: num_classes.saturating_sub(1),
            });
        }
    }
    let mut tp = vec![0usize; num_classes];
    let mut pred_count = vec![0usize; num_classes];
    let mut true_count = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        pred_count[p] += 1;
        true_count[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let correct: usize = tp.iter().sum();
    let accuracy = correct as f64 / pred.len() as f64;
    let mut f1_sum = 0.0;
    let mut present = 0;
    for c in 0..num_classes {
        if pred_count[c] == 0 && true_count[c] == 0 {
            continue;
        }
        present += 1;
        let denom = pred_count[c] + true_count[c];
        f1_sum += 2.0 * tp[c] as f64 / denom as f64;
    }
    Ok((accuracy, f1_sum / present as f64))
}
