//! Training objectives with their analytic gradients.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct TripletLoss {
    pub loss: f64,
    pub grad_anchor: Array1<f64>,
    pub grad_positive: Array1<f64>,
    pub grad_negative: Array1<f64>,
}

/// Unit vector from `b` towards `a`, or zero when they coincide.
fn direction(a: ArrayView1<f64>, b: ArrayView1<f64>) -> (f64, Array1<f64>) {
    let diff = &a - &b;
    let d = diff.dot(&diff).sqrt();
    if d > 0.0 {
        (d, diff / d)
    } else {
        (0.0, Array1::zeros(a.len()))
    }
}

/// `max(0, |a-p| - |a-n| + margin)`.
pub fn triplet_hinge_loss(
    anchor: ArrayView1<f64>,
    positive: ArrayView1<f64>,
    negative: ArrayView1<f64>,
    margin: f64,
) -> TripletLoss {
    let (dap, uap) = direction(anchor, positive);
    let (dan, uan) = direction(anchor, negative);
    let raw = dap - dan + margin;
    if raw > 0.0 {
        TripletLoss {
            loss: raw,
            grad_anchor: &uap - &uan,
            grad_positive: -uap,
            grad_negative: uan,
        }
    } else {
        let z = Array1::zeros(anchor.len());
        TripletLoss {
            loss: 0.0,
            grad_anchor: z.clone(),
            grad_positive: z.clone(),
            grad_negative: z,
        }
    }
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut p = logits.to_owned();
    for mut row in p.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    p
}

/// Mean over nodes of `w[y_i] * -log softmax(logits_i)[y_i]`, with the
/// gradient with respect to the logits.
pub fn weighted_ce_loss(
    logits: ArrayView2<f64>,
    labels: &[usize],
    class_weights: &[f64],
) -> Result<(f64, Array2<f64>)> {
    let (n, c) = logits.dim();
    if labels.len() != n || class_weights.len() != c {
        return Err(Error::Shape(format!(
            "{n}x{c} logits with {} labels and {} class weights",
            labels.len(),
            class_weights.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside 0..{c}"
        )));
    }
    let mut grad = Array2::zeros((n, c));
    let mut loss = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let y = labels[i];
        let w = class_weights[y];
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = row.fold(0.0, |s, &v| s + (v - max).exp()).ln() + max;
        loss += w * (lse - row[y]);
        for j in 0..c {
            grad[[i, j]] = w * (row[j] - lse).exp();
        }
        grad[[i, y]] -= w;
    }
    let inv_n = 1.0 / n as f64;
    grad *= inv_n;
    Ok((loss * inv_n, grad))
}

/// Square root of inverse class frequency, scaled to mean 1.
pub fn label_weights(labels: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; n_classes];
    for &y in labels {
        if y >= n_classes {
            return Err(Error::InvalidArgument(format!(
                "label {y} outside 0..{n_classes}"
            )));
        }
        counts[y] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::MissingClass(missing));
    }
    let total = labels.len() as f64;
    let raw: Vec<f64> = counts.iter().map(|&c| (total / c as f64).sqrt()).collect();
    let mean = raw.iter().sum::<f64>() / n_classes as f64;
    Ok(raw.into_iter().map(|w| w / mean).collect())
}
