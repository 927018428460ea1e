//! Per-class Dice overlap and its aggregation over shapes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dice scores of one shape. Classes absent from both prediction and
/// ground truth are `None` and excluded from `mean`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeDice {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    /// Scored classes, in the order of `per_class`.
    pub classes: Vec<u32>,
    /// Mean over the shapes where the class occurs; `None` if it never does.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
    pub std: f64,
    pub per_shape: Vec<f64>,
}

/// `2|P∩G| / (|P| + |G|)` for every class in `classes`.
pub fn shape_dice(pred: &[u32], gt: &[u32], n_labels: usize, classes: &[u32]) -> Result<ShapeDice> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            gt.len()
        )));
    }
    if let Some(&bad) = pred
        .iter()
        .chain(gt)
        .chain(classes)
        .find(|&&l| l as usize >= n_labels)
    {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside [0, {n_labels})"
        )));
    }
    let mut inter = vec![0usize; n_labels];
    let mut n_pred = vec![0usize; n_labels];
    let mut n_gt = vec![0usize; n_labels];
    for (&p, &g) in pred.iter().zip(gt) {
        n_pred[p as usize] += 1;
        n_gt[g as usize] += 1;
        if p == g {
            inter[p as usize] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = classes
        .iter()
        .map(|&c| {
            let c = c as usize;
            let denom = n_pred[c] + n_gt[c];
            (denom > 0).then(|| 2.0 * inter[c] as f64 / denom as f64)
        })
        .collect();
    let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    Ok(ShapeDice { per_class, mean })
}

impl DiceReport {
    /// Aggregate per-shape scores; `std` is the population standard
    /// deviation of the per-shape means.
    pub fn from_shapes(classes: &[u32], shapes: &[ShapeDice]) -> Result<DiceReport> {
        if shapes.is_empty() {
            return Err(Error::InvalidArgument("no shapes to aggregate".into()));
        }
        let per_class = (0..classes.len())
            .map(|c| {
                let vals: Vec<f64> = shapes.iter().filter_map(|s| s.per_class[c]).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect();
        let per_shape: Vec<f64> = shapes.iter().map(|s| s.mean).collect();
        let n = per_shape.len() as f64;
        let mean = per_shape.iter().sum::<f64>() / n;
        let std = (per_shape.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Ok(DiceReport {
            classes: classes.to_vec(),
            per_class,
            mean,
            std,
            per_shape,
        })
    }
}

/// Dice over a set of shapes given predicted and ground-truth labels.
pub fn dice_report(
    preds: &[Vec<u32>],
    gts: &[Vec<u32>],
    n_labels: usize,
    classes: &[u32],
) -> Result<DiceReport> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} shapes",
            preds.len(),
            gts.len()
        )));
    }
    let shapes = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| shape_dice(p, g, n_labels, classes))
        .collect::<Result<Vec<_>>>()?;
    DiceReport::from_shapes(classes, &shapes)
}
