//! Softmax cross-entropy math shared by training, objectives and metrics.
//!
//! Losses are reduced in f64 from f32 logits so downstream tolerances
//! (1e-6 against straight-line oracles) hold regardless of batch size.

use ndarray::Array2;

/// Per-row log-softmax in f64.
pub fn log_softmax_rows(logits: &Array2<f32>) -> Array2<f64> {
    let (n, c) = logits.dim();
    let mut out = Array2::<f64>::zeros((n, c));
    for i in 0..n {
        let row = logits.row(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
        let mut lse = 0.0f64;
        for &v in row.iter() {
            lse += ((v as f64) - m).exp();
        }
        let lse = m + lse.ln();
        for (j, &v) in row.iter().enumerate() {
            out[[i, j]] = (v as f64) - lse;
        }
    }
    out
}

/// Cross-entropy of each row against its label: -log softmax(logits)[label].
pub fn ce_from_logits(logits: &Array2<f32>, labels: &[usize]) -> Vec<f64> {
    let ls = log_softmax_rows(logits);
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -ls[[i, y]])
        .collect()
}

/// Gradient of sum_i coeff[i] * CE(logits_i, labels_i) with respect to the
/// logits: coeff_i * (softmax - onehot).
pub fn ce_grad(logits: &Array2<f32>, labels: &[usize], coeff: &[f64]) -> Array2<f32> {
    let (n, c) = logits.dim();
    assert_eq!(labels.len(), n);
    assert_eq!(coeff.len(), n);
    let ls = log_softmax_rows(logits);
    let mut g = Array2::<f32>::zeros((n, c));
    for i in 0..n {
        for j in 0..c {
            let p = ls[[i, j]].exp();
            let onehot = if j == labels[i] { 1.0 } else { 0.0 };
            g[[i, j]] = (coeff[i] * (p - onehot)) as f32;
        }
    }
    g
}

/// Row argmax with ties broken by the lowest index.
pub fn argmax_rows(logits: &Array2<f32>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut bv = f32::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if v > bv {
                    bv = v;
                    best = j;
                }
            }
            best
        })
        .collect()
}
