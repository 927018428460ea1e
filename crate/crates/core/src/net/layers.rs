//! Node-wise building blocks: instance normalization, dropout, ReLU.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::rng;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, masks drawn from the given seed.
    Train {
        seed: u64,
    },
    Eval,
}

#[derive(Debug, Clone)]
pub struct NormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Per-channel standardization over the rows (nodes) of `x`, followed by
/// the affine `scale * xhat + shift`.
pub fn instance_norm_forward(
    x: ArrayView2<f64>,
    scale: ArrayView1<f64>,
    shift: ArrayView1<f64>,
    eps: f64,
) -> (Array2<f64>, NormCache) {
    let n = x.nrows() as f64;
    let mean = x.sum_axis(Axis(0)) / n;
    let centered = &x - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
    let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
    let xhat = centered * &inv_std;
    let y = &xhat * &scale + shift;
    (y, NormCache { xhat, inv_std })
}

/// Returns `(dx, dscale, dshift)`.
pub fn instance_norm_backward(
    cache: &NormCache,
    scale: ArrayView1<f64>,
    dy: ArrayView2<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let n = dy.nrows() as f64;
    let dshift = dy.sum_axis(Axis(0));
    let dscale = (&dy * &cache.xhat).sum_axis(Axis(0));
    let dxhat = &dy * &scale;
    let mean_dxhat = dxhat.sum_axis(Axis(0)) / n;
    let mean_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0)) / n;
    let mut dx = dxhat - &mean_dxhat - &cache.xhat * &mean_dxhat_xhat;
    dx *= &cache.inv_std;
    (dx, dscale, dshift)
}

/// Inverted dropout. The mask holds `0` or `1/(1-p)` per entry and is
/// `None` whenever the layer is the identity (eval mode or `p == 0`).
pub fn dropout(x: Array2<f64>, p: f64, mode: Mode) -> (Array2<f64>, Option<Array2<f64>>) {
    let seed = match mode {
        Mode::Train { seed } if p > 0.0 => seed,
        _ => return (x, None),
    };
    let mut r = rng::stream(seed, "dropout-mask", 0, 0);
    let keep = 1.0 / (1.0 - p);
    let mask =
        Array2::from_shape_simple_fn(x.raw_dim(), || if r.gen::<f64>() < p { 0.0 } else { keep });
    (x * &mask, Some(mask))
}

pub fn relu(mut x: Array2<f64>) -> Array2<f64> {
    x.mapv_inplace(|v| v.max(0.0));
    x
}

/// Zero `dy` wherever the pre-activation was not positive.
pub fn relu_backward(pre: ArrayView2<f64>, mut dy: Array2<f64>) -> Array2<f64> {
    Zip::from(&mut dy).and(pre).for_each(|d, &p| {
        if p <= 0.0 {
            *d = 0.0;
        }
    });
    dy
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_node_channel() {
        let x = array![[1.0], [-1.0]];
        let (y, _) =
            instance_norm_forward(x.view(), array![1.0].view(), array![0.0].view(), NORM_EPS);
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y[[0, 0]] - expect).abs() < 1e-15);
        assert!((y[[1, 0]] + expect).abs() < 1e-15);
        assert!((expect - 0.999995).abs() < 1e-9);
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let x = Array2::from_elem((5, 2), 3.5);
        let (y, _) = instance_norm_forward(
            x.view(),
            array![2.0, 1.0].view(),
            array![0.0, 0.0].view(),
            NORM_EPS,
        );
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_statistics() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_simple_fn((200, 4), || r.gen_range(-3.0..5.0));
        let (y, _) = instance_norm_forward(
            x.view(),
            Array1::ones(4).view(),
            Array1::zeros(4).view(),
            NORM_EPS,
        );
        for col in y.axis_iter(Axis(1)) {
            let mean = col.mean().unwrap();
            let var = col.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn norm_backward_matches_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_simple_fn((7, 3), || r.gen_range(-1.0..1.0));
        let g = Array2::from_shape_simple_fn((7, 3), || r.gen_range(-1.0..1.0));
        let scale = array![0.5, 1.5, -2.0];
        let shift = array![0.1, 0.0, 0.3];
        let f = |x: &Array2<f64>| {
            let (y, _) = instance_norm_forward(x.view(), scale.view(), shift.view(), NORM_EPS);
            (&y * &g).sum()
        };
        let (_, cache) = instance_norm_forward(x.view(), scale.view(), shift.view(), NORM_EPS);
        let (dx, _, _) = instance_norm_backward(&cache, scale.view(), g.view());
        let h = 1e-6;
        for idx in [(0, 0), (3, 1), (6, 2), (2, 2)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-7, "{idx:?}: {fd} vs {}", dx[idx]);
        }
    }

    #[test]
    fn dropout_modes() {
        let x = Array2::from_shape_fn((10, 10), |(i, j)| (i * 10 + j) as f64);
        let (y, mask) = dropout(x.clone(), 0.5, Mode::Eval);
        assert_eq!(y, x);
        assert!(mask.is_none());
        let (y, mask) = dropout(x.clone(), 0.0, Mode::Train { seed: 3 });
        assert_eq!(y, x);
        assert!(mask.is_none());
    }

    #[test]
    fn dropout_rate_on_large_sample() {
        let x = Array2::ones((1000, 1000));
        let (y, _) = dropout(x, 0.2, Mode::Train { seed: 11 });
        let zeros = y.iter().filter(|&&v| v == 0.0).count() as f64 / 1e6;
        assert!((zeros - 0.2).abs() < 0.002, "{zeros}");
        assert!(y.iter().all(|&v| v == 0.0 || v == 1.25));
    }
}
