//! Evaluation protocols: retrieval curves for descriptors, Dice for
//! segmentations, and the robustness sweep.

mod curves;
mod dice;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointset::{add_gaussian_noise, add_outliers, remove_points, PointCloud};
use crate::rng;
use crate::tasks::{predict_labels, Checkpoint};

pub use curves::{
    auc, cmc_curve, correspondence_quality, matched_pairs, roc_curve, roc_pairs, MetricCurve,
};
pub use dice::{dice_report, shape_dice, DiceReport, ShapeDice};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Disturbance {
    Noise,
    Missing,
    Outlier,
}

impl std::str::FromStr for Disturbance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(Disturbance::Noise),
            "missing" => Ok(Disturbance::Missing),
            "outlier" => Ok(Disturbance::Outlier),
            other => Err(Error::InvalidArgument(format!(
                "unknown disturbance {other:?}"
            ))),
        }
    }
}

/// Apply one disturbance of the given magnitude.
pub fn perturb(
    cloud: &PointCloud,
    kind: Disturbance,
    magnitude: f64,
    seed: u64,
) -> Result<PointCloud> {
    match kind {
        Disturbance::Noise => add_gaussian_noise(cloud, magnitude, seed),
        Disturbance::Missing => remove_points(cloud, magnitude, seed),
        Disturbance::Outlier => add_outliers(cloud, magnitude, seed),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub magnitude: f64,
    pub report: DiceReport,
}

/// Dice of a fixed checkpoint on disturbed copies of `test`, one row per
/// grid value. Each cloud uses the same seed at every magnitude.
pub fn robustness_sweep(
    ckpt: &Checkpoint,
    test: &[PointCloud],
    kind: Disturbance,
    grid: &[f64],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let cfg = &ckpt.config;
    let mut classes = cfg.scored_labels();
    if kind == Disturbance::Outlier && classes.first() != Some(&0) {
        classes.insert(0, 0);
    }
    grid.iter()
        .map(|&magnitude| {
            let mut preds = Vec::with_capacity(test.len());
            let mut gts = Vec::with_capacity(test.len());
            for (i, cloud) in test.iter().enumerate() {
                let disturbed = perturb(
                    cloud,
                    kind,
                    magnitude,
                    rng::derive_seed(seed, "sweep", i as u64, 0),
                )?;
                preds.push(predict_labels(ckpt, &disturbed)?);
                gts.push(
                    disturbed
                        .labels
                        .clone()
                        .ok_or_else(|| Error::InvalidArgument("test shapes need labels".into()))?,
                );
            }
            Ok(SweepRow {
                magnitude,
                report: dice_report(&preds, &gts, cfg.n_classes + 1, &classes)?,
            })
        })
        .collect()
}
