//! Point clouds, their on-disk formats, the synthetic articulated body
//! generator and the data-disturbance transforms used by the robustness
//! experiments.

mod io;
mod manifest;
mod perturb;
mod synth;

use ndarray::Array2;

use crate::error::{Error, Result};

pub use io::{load_cloud, save_cloud, CloudFormat};
pub use manifest::{DatasetManifest, ShapeEntry, Split};
pub use perturb::{add_gaussian_noise, add_outliers, remove_points};
pub use synth::{
    generate_synthetic_body, subject_split, synthetic_dataset, Pose, SyntheticShape, BODY_PARTS,
    N_BODY_PARTS, POSES_PER_SUBJECT,
};

/// Correspondence index carried by points that have no counterpart on other
/// shapes (added outliers).
pub const NO_CORRESPONDENCE: i64 = -1;

/// Label of the background class (outliers).
pub const BACKGROUND: u32 = 0;

/// A set of points in 3-space with optional per-point data.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub coords: Vec<[f64; 3]>,
    /// Input features, one row per point. `None` means featureless (ones).
    pub features: Option<Array2<f64>>,
    pub labels: Option<Vec<u32>>,
    /// Index shared by corresponding points across the shapes of a dataset.
    pub corr: Option<Vec<i64>>,
}

impl PointCloud {
    pub fn new(coords: Vec<[f64; 3]>) -> Result<Self> {
        let cloud = PointCloud {
            coords,
            features: None,
            labels: None,
            corr: None,
        };
        cloud.validate(None)?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Check the structural invariants. Labels are range-checked only when
    /// `n_classes` is given.
    pub fn validate(&self, n_classes: Option<usize>) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::InvalidArgument("point cloud is empty".into()));
        }
        if let Some(i) = self
            .coords
            .iter()
            .position(|p| p.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite(format!("coordinates of point {i}")));
        }
        if let Some(f) = &self.features {
            if f.nrows() != n {
                return Err(Error::Shape(format!(
                    "features have {} rows for {n} points",
                    f.nrows()
                )));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::Shape(format!(
                    "{} labels for {n} points",
                    labels.len()
                )));
            }
            if let Some(c) = n_classes {
                if let Some(bad) = labels.iter().find(|&&l| l as usize >= c) {
                    return Err(Error::InvalidArgument(format!(
                        "label {bad} outside [0, {c})"
                    )));
                }
            }
        }
        if let Some(corr) = &self.corr {
            if corr.len() != n {
                return Err(Error::Shape(format!(
                    "{} correspondence indices for {n} points",
                    corr.len()
                )));
            }
            let mut seen: Vec<i64> = corr
                .iter()
                .copied()
                .filter(|&c| c != NO_CORRESPONDENCE)
                .collect();
            seen.sort_unstable();
            if seen.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::InvalidArgument(
                    "correspondence indices are not unique".into(),
                ));
            }
        }
        Ok(())
    }

    /// Input feature matrix; all-ones column when the cloud is featureless.
    pub fn input_features(&self) -> Array2<f64> {
        match &self.features {
            Some(f) => f.clone(),
            None => Array2::ones((self.len(), 1)),
        }
    }

    /// Per-axis (min, max) of the coordinates.
    pub fn bounding_box(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.coords {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }

    /// Keep the points at `indices` (in the given order).
    pub fn subset(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
            features: self
                .features
                .as_ref()
                .map(|f| f.select(ndarray::Axis(0), indices)),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            corr: self
                .corr
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
        }
    }
}
