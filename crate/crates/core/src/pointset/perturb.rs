//! Data disturbances for the robustness experiments. All transforms are
//! deterministic in `(cloud, parameters, seed)`.

use ndarray::{concatenate, Array2, Axis};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{PointCloud, BACKGROUND, NO_CORRESPONDENCE};
use crate::error::{Error, Result};
use crate::rng;

/// Add i.i.d. zero-mean Gaussian noise of standard deviation `std` to every
/// coordinate.
pub fn add_gaussian_noise(cloud: &PointCloud, std: f64, seed: u64) -> Result<PointCloud> {
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise std must be >= 0, got {std}"
        )));
    }
    let mut out = cloud.clone();
    if std == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, std).expect("std validated");
    let mut r = rng::stream(seed, "noise", 0, 0);
    for p in &mut out.coords {
        for v in p.iter_mut() {
            *v += normal.sample(&mut r);
        }
    }
    Ok(out)
}

/// Keep a uniformly random subset of `round(n * (1 - ratio))` points, in
/// their original order.
pub fn remove_points(cloud: &PointCloud, ratio: f64, seed: u64) -> Result<PointCloud> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "removal ratio must lie in [0, 1), got {ratio}"
        )));
    }
    let n = cloud.len();
    let keep = (n as f64 * (1.0 - ratio)).round() as usize;
    if keep == 0 {
        return Err(Error::InvalidArgument(format!(
            "removing {ratio} of {n} points leaves none"
        )));
    }
    if keep == n {
        return Ok(cloud.clone());
    }
    let mut r = rng::stream(seed, "remove", 0, 0);
    let mut kept = index::sample(&mut r, n, keep).into_vec();
    kept.sort_unstable();
    Ok(cloud.subset(&kept))
}

/// Append `round(n * ratio)` points drawn uniformly from the axis-aligned
/// bounding box. They are labeled background and carry no correspondence.
pub fn add_outliers(cloud: &PointCloud, ratio: f64, seed: u64) -> Result<PointCloud> {
    if !(ratio >= 0.0 && ratio.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "outlier ratio must be >= 0, got {ratio}"
        )));
    }
    let extra = (cloud.len() as f64 * ratio).round() as usize;
    let mut out = cloud.clone();
    if extra == 0 {
        return Ok(out);
    }
    let (lo, hi) = cloud.bounding_box();
    let mut r = rng::stream(seed, "outliers", 0, 0);
    out.coords.extend((0..extra).map(|_| {
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = if hi[a] > lo[a] {
                r.gen_range(lo[a]..=hi[a])
            } else {
                lo[a]
            };
        }
        p
    }));
    if let Some(labels) = &mut out.labels {
        labels.extend(std::iter::repeat_n(BACKGROUND, extra));
    }
    if let Some(corr) = &mut out.corr {
        corr.extend(std::iter::repeat_n(NO_CORRESPONDENCE, extra));
    }
    if let Some(f) = &out.features {
        let ones = Array2::ones((extra, f.ncols()));
        out.features = Some(concatenate![Axis(0), f.view(), ones.view()]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointset::{generate_synthetic_body, Pose};

    fn body(n: usize) -> PointCloud {
        generate_synthetic_body(1, n, &Pose::zero()).unwrap()
    }

    #[test]
    fn zero_magnitudes_are_identity() {
        let c = body(300);
        assert_eq!(add_gaussian_noise(&c, 0.0, 1).unwrap(), c);
        assert_eq!(remove_points(&c, 0.0, 1).unwrap(), c);
        assert_eq!(add_outliers(&c, 0.0, 1).unwrap(), c);
    }

    #[test]
    fn noise_sample_std_matches() {
        let c = PointCloud::new(vec![[0.0; 3]; 100_000]).unwrap();
        let noisy = add_gaussian_noise(&c, 0.02, 5).unwrap();
        for a in 0..3 {
            let vals: Vec<f64> = noisy.coords.iter().map(|p| p[a]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var =
                vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
            assert!(
                (var.sqrt() - 0.02).abs() < 0.02 * 0.02,
                "axis {a}: {}",
                var.sqrt()
            );
        }
    }

    #[test]
    fn noise_keeps_labels_and_corr() {
        let c = body(300);
        let n = add_gaussian_noise(&c, 0.03, 2).unwrap();
        assert_eq!(n.labels, c.labels);
        assert_eq!(n.corr, c.corr);
        assert_ne!(n.coords, c.coords);
    }

    #[test]
    fn removal_counts_and_consistency() {
        let c = body(6890);
        assert_eq!(remove_points(&c, 0.5, 3).unwrap().len(), 3445);
        let c = body(1000);
        let r = remove_points(&c, 0.3, 3).unwrap();
        assert_eq!(r.len(), 700);
        let labels = c.labels.as_ref().unwrap();
        for (l, k) in r
            .labels
            .as_ref()
            .unwrap()
            .iter()
            .zip(r.corr.as_ref().unwrap())
        {
            assert_eq!(*l, labels[*k as usize]);
        }
        assert!(remove_points(&c, 1.0, 3).is_err());
    }

    #[test]
    fn outliers_are_background_inside_bbox() {
        let c = body(1000);
        let o = add_outliers(&c, 0.5, 4).unwrap();
        assert_eq!(o.len(), 1500);
        let labels = o.labels.as_ref().unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == BACKGROUND).count(), 500);
        assert_eq!(&o.coords[..1000], &c.coords[..]);
        assert_eq!(&labels[..1000], &c.labels.as_ref().unwrap()[..]);
        let (lo, hi) = c.bounding_box();
        for p in &o.coords[1000..] {
            for a in 0..3 {
                assert!(p[a] >= lo[a] && p[a] <= hi[a]);
            }
        }
        assert!(o.corr.as_ref().unwrap()[1000..]
            .iter()
            .all(|&k| k == NO_CORRESPONDENCE));
    }

    #[test]
    fn perturbations_are_deterministic() {
        let c = body(400);
        assert_eq!(
            add_gaussian_noise(&c, 0.01, 9).unwrap(),
            add_gaussian_noise(&c, 0.01, 9).unwrap()
        );
        assert_eq!(
            remove_points(&c, 0.2, 9).unwrap(),
            remove_points(&c, 0.2, 9).unwrap()
        );
        assert_eq!(
            add_outliers(&c, 0.2, 9).unwrap(),
            add_outliers(&c, 0.2, 9).unwrap()
        );
    }
}
