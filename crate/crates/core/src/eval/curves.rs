//! Retrieval curves over descriptor matrices: CMC, ROC, and geodesic
//! correspondence quality.

use std::collections::HashMap;

use ndarray::{ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::rng;
use crate::spgraph::{geodesics_from, SparseMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCurve {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub meta: Map<String, Value>,
}

impl MetricCurve {
    fn with_protocol(protocol: &str, xs: Vec<f64>, ys: Vec<f64>) -> Self {
        let mut meta = Map::new();
        meta.insert("protocol".into(), Value::from(protocol));
        MetricCurve { xs, ys, meta }
    }

    /// Value at abscissa `x`, if sampled.
    pub fn at(&self, x: f64) -> Option<f64> {
        self.xs.iter().position(|&v| v == x).map(|i| self.ys[i])
    }

    /// `# meta <json>` line, `x,y` header, one row per sample.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# meta {}\nx,y\n", Value::Object(self.meta.clone()));
        for (x, y) in self.xs.iter().zip(&self.ys) {
            out.push_str(&format!("{x},{y}\n"));
        }
        out
    }

    /// Pointwise mean of curves sampled on identical abscissae.
    pub fn mean(curves: &[MetricCurve]) -> Result<MetricCurve> {
        let first = curves
            .first()
            .ok_or_else(|| Error::InvalidArgument("no curves to average".into()))?;
        if curves.iter().any(|c| c.xs != first.xs) {
            return Err(Error::Shape("curves sampled on different abscissae".into()));
        }
        let n = curves.len() as f64;
        let ys = (0..first.xs.len())
            .map(|i| curves.iter().map(|c| c.ys[i]).sum::<f64>() / n)
            .collect();
        let mut out = MetricCurve {
            xs: first.xs.clone(),
            ys,
            meta: first.meta.clone(),
        };
        out.meta
            .insert("n_curves".into(), Value::from(curves.len()));
        Ok(out)
    }
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `(source index, target index)` for every source point whose
/// correspondence index also occurs on the target.
pub fn matched_pairs(corr_src: &[i64], corr_tgt: &[i64]) -> Vec<(usize, usize)> {
    let lookup: HashMap<i64, usize> = corr_tgt
        .iter()
        .enumerate()
        .filter(|(_, &c)| c >= 0)
        .map(|(j, &c)| (c, j))
        .collect();
    corr_src
        .iter()
        .enumerate()
        .filter(|(_, &c)| c >= 0)
        .filter_map(|(i, c)| lookup.get(c).map(|&j| (i, j)))
        .collect()
}

fn check_dims(
    src: ArrayView2<f64>,
    tgt: ArrayView2<f64>,
    corr_src: &[i64],
    corr_tgt: &[i64],
) -> Result<()> {
    if src.ncols() != tgt.ncols() {
        return Err(Error::Shape(format!(
            "descriptor dimensions differ: {} vs {}",
            src.ncols(),
            tgt.ncols()
        )));
    }
    if corr_src.len() != src.nrows() || corr_tgt.len() != tgt.nrows() {
        return Err(Error::Shape(
            "correspondence vectors do not match descriptor rows".into(),
        ));
    }
    Ok(())
}

/// Rank (1-based) of target `truth` among all targets ordered by distance
/// to `query`, ties broken by smaller index.
fn rank_of(query: ndarray::ArrayView1<f64>, tgt: ArrayView2<f64>, truth: usize) -> usize {
    let d_true = sq_dist(query, tgt.row(truth));
    1 + tgt
        .axis_iter(Axis(0))
        .enumerate()
        .filter(|&(j, row)| {
            let d = sq_dist(query, row);
            d < d_true || (d == d_true && j < truth)
        })
        .count()
}

/// Cumulative match characteristic for ranks `1..=k_max`.
pub fn cmc_curve(
    desc_src: ArrayView2<f64>,
    desc_tgt: ArrayView2<f64>,
    corr_src: &[i64],
    corr_tgt: &[i64],
    k_max: usize,
) -> Result<MetricCurve> {
    check_dims(desc_src, desc_tgt, corr_src, corr_tgt)?;
    let pairs = matched_pairs(corr_src, corr_tgt);
    if pairs.is_empty() || k_max == 0 {
        return Err(Error::InvalidArgument(
            "no corresponding points to rank".into(),
        ));
    }
    let ranks: Vec<usize> = pairs
        .par_iter()
        .map(|&(i, j)| rank_of(desc_src.row(i), desc_tgt, j))
        .collect();
    let mut hist = vec![0usize; k_max + 1];
    for r in ranks {
        if r <= k_max {
            hist[r] += 1;
        }
    }
    let total = pairs.len() as f64;
    let mut acc = 0usize;
    let mut xs = Vec::with_capacity(k_max);
    let mut ys = Vec::with_capacity(k_max);
    for (k, &h) in hist.iter().enumerate().skip(1) {
        acc += h;
        xs.push(k as f64);
        ys.push(acc as f64 / total);
    }
    let mut curve = MetricCurve::with_protocol("cmc", xs, ys);
    curve
        .meta
        .insert("n_queries".into(), Value::from(pairs.len()));
    Ok(curve)
}

/// Descriptor distances of corresponding pairs and of one sampled
/// non-corresponding pair per positive.
pub fn roc_pairs(
    desc_src: ArrayView2<f64>,
    desc_tgt: ArrayView2<f64>,
    corr_src: &[i64],
    corr_tgt: &[i64],
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dims(desc_src, desc_tgt, corr_src, corr_tgt)?;
    let pairs = matched_pairs(corr_src, corr_tgt);
    if pairs.is_empty() || desc_tgt.nrows() < 2 {
        return Err(Error::InvalidArgument(
            "need corresponding and non-corresponding pairs".into(),
        ));
    }
    let mut r = rng::stream(seed, "roc-negatives", 0, 0);
    let mut pos = Vec::with_capacity(pairs.len());
    let mut neg = Vec::with_capacity(pairs.len());
    for &(i, j) in &pairs {
        pos.push(sq_dist(desc_src.row(i), desc_tgt.row(j)).sqrt());
        let mut other = r.gen_range(0..desc_tgt.nrows() - 1);
        if other >= j {
            other += 1;
        }
        neg.push(sq_dist(desc_src.row(i), desc_tgt.row(other)).sqrt());
    }
    Ok((pos, neg))
}

/// Area under the ROC curve as the Mann-Whitney statistic (ties count one
/// half), which depends only on the ordering of the distances.
pub fn auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&d| (d, true))
        .chain(neg.iter().map(|&d| (d, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut wins = 0.0;
    let mut negs_above = neg.len() as f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut p, mut q) = (0.0, 0.0);
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                p += 1.0;
            } else {
                q += 1.0;
            }
            j += 1;
        }
        negs_above -= q;
        wins += p * (negs_above + 0.5 * q);
        i = j;
    }
    wins / (pos.len() as f64 * neg.len() as f64)
}

/// TPR against FPR over `n_thresholds` distance thresholds spanning the
/// observed range; a pair is accepted when its distance is at most the
/// threshold. The AUC is stored in `meta["auc"]`.
pub fn roc_curve(pos: &[f64], neg: &[f64], n_thresholds: usize) -> Result<MetricCurve> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidArgument(
            "ROC needs positive and negative pairs".into(),
        ));
    }
    if n_thresholds < 2 {
        return Err(Error::InvalidArgument(
            "ROC needs at least two thresholds".into(),
        ));
    }
    let lo = pos.iter().chain(neg).copied().fold(f64::INFINITY, f64::min);
    let hi = pos
        .iter()
        .chain(neg)
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sp = pos.to_vec();
    let mut sn = neg.to_vec();
    sp.sort_by(f64::total_cmp);
    sn.sort_by(f64::total_cmp);
    let frac = |s: &[f64], th: f64| s.partition_point(|&d| d <= th) as f64 / s.len() as f64;
    let mut xs: Vec<f64> = vec![0.0];
    let mut ys: Vec<f64> = vec![0.0];
    for i in 0..n_thresholds {
        let th = if i + 1 == n_thresholds {
            hi
        } else {
            lo + (hi - lo) * i as f64 / (n_thresholds - 1) as f64
        };
        let (fpr, tpr) = (frac(&sn, th), frac(&sp, th));
        if fpr == *xs.last().unwrap() {
            *ys.last_mut().unwrap() = tpr;
        } else {
            xs.push(fpr);
            ys.push(tpr);
        }
    }
    let mut curve = MetricCurve::with_protocol("roc", xs, ys);
    curve.meta.insert("auc".into(), Value::from(auc(pos, neg)));
    curve
        .meta
        .insert("n_positive".into(), Value::from(pos.len()));
    curve
        .meta
        .insert("n_negative".into(), Value::from(neg.len()));
    Ok(curve)
}

/// Fraction of nearest-descriptor matches whose geodesic distance on the
/// target graph to the true correspondent is at most each radius.
/// Unreachable matches count as infinitely far.
pub fn correspondence_quality(
    desc_src: ArrayView2<f64>,
    desc_tgt: ArrayView2<f64>,
    corr_src: &[i64],
    corr_tgt: &[i64],
    target_graph: &SparseMatrix,
    radii: &[f64],
) -> Result<MetricCurve> {
    check_dims(desc_src, desc_tgt, corr_src, corr_tgt)?;
    if target_graph.n() != desc_tgt.nrows() {
        return Err(Error::Shape(
            "target graph does not match target descriptors".into(),
        ));
    }
    if radii.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "radii must be strictly increasing".into(),
        ));
    }
    let pairs = matched_pairs(corr_src, corr_tgt);
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "no corresponding points to match".into(),
        ));
    }
    let errors = pairs
        .par_iter()
        .map(|&(i, truth)| {
            let q = desc_src.row(i);
            let mut best = (f64::INFINITY, 0usize);
            for (j, row) in desc_tgt.axis_iter(Axis(0)).enumerate() {
                let d = sq_dist(q, row);
                if d < best.0 {
                    best = (d, j);
                }
            }
            if best.1 == truth {
                return Ok(0.0);
            }
            Ok(geodesics_from(target_graph, truth)?[best.1])
        })
        .collect::<Result<Vec<f64>>>()?;
    let total = errors.len() as f64;
    let ys = radii
        .iter()
        .map(|&r| errors.iter().filter(|&&e| e <= r).count() as f64 / total)
        .collect();
    Ok(MetricCurve::with_protocol(
        "correspondence-quality",
        radii.to_vec(),
        ys,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spgraph::{build_knn, distance_graph};
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_corr(n: usize) -> Vec<i64> {
        (0..n as i64).collect()
    }

    #[test]
    fn one_hot_descriptors_retrieve_perfectly() {
        let n = 20;
        let d = Array2::from_shape_fn((n, n), |(i, j)| f64::from(u8::from(i == j)));
        let c = cmc_curve(d.view(), d.view(), &identity_corr(n), &identity_corr(n), n).unwrap();
        assert_eq!(c.ys[0], 1.0);
        assert_eq!(*c.ys.last().unwrap(), 1.0);
    }

    #[test]
    fn random_descriptors_give_chance_level() {
        let n = 100;
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let mut hits = Vec::new();
        for _ in 0..20 {
            let a = Array2::from_shape_simple_fn((n, 16), || r.gen_range(-1.0..1.0));
            let b = Array2::from_shape_simple_fn((n, 16), || r.gen_range(-1.0..1.0));
            let c = cmc_curve(a.view(), b.view(), &identity_corr(n), &identity_corr(n), n).unwrap();
            assert_eq!(c.ys[n - 1], 1.0);
            assert!(c.ys.windows(2).all(|w| w[0] <= w[1]));
            hits.push(c.at(10.0).unwrap());
        }
        let mean = hits.iter().sum::<f64>() / hits.len() as f64;
        assert!((mean - 0.1).abs() < 0.03, "{mean}");
    }

    proptest! {
        #[test]
        fn cmc_matches_sorted_ranking(seed in 0u64..10_000, n in 2usize..60, perm_seed in 0u64..1000) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let a = Array2::from_shape_simple_fn((n, 3), || f64::from(r.gen_range(0..4)));
            let b = Array2::from_shape_simple_fn((n, 3), || f64::from(r.gen_range(0..4)));
            let mut corr_t: Vec<i64> = identity_corr(n);
            let mut pr = ChaCha8Rng::seed_from_u64(perm_seed);
            for i in (1..n).rev() {
                corr_t.swap(i, pr.gen_range(0..=i));
            }
            let c = cmc_curve(a.view(), b.view(), &identity_corr(n), &corr_t, n).unwrap();
            let mut hist = vec![0usize; n + 1];
            for i in 0..n {
                let truth = corr_t.iter().position(|&c| c == i as i64).unwrap();
                let mut order: Vec<(f64, usize)> = (0..n).map(|j| (sq_dist(a.row(i), b.row(j)), j)).collect();
                order.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
                let rank = order.iter().position(|&(_, j)| j == truth).unwrap() + 1;
                hist[rank] += 1;
            }
            let mut acc = 0;
            for k in 1..=n {
                acc += hist[k];
                prop_assert!((c.ys[k - 1] - acc as f64 / n as f64).abs() < 1e-15);
            }
        }

        #[test]
        fn auc_invariant_under_monotone_transform(seed in 0u64..10_000) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let pos: Vec<f64> = (0..40).map(|_| r.gen_range(0.0..1.0)).collect();
            let neg: Vec<f64> = (0..40).map(|_| r.gen_range(0.3..1.5)).collect();
            let f = |v: &[f64]| v.iter().map(|d| (3.0 * d).exp() + d).collect::<Vec<_>>();
            prop_assert_eq!(auc(&pos, &neg), auc(&f(&pos), &f(&neg)));
        }
    }

    #[test]
    fn roc_examples() {
        let c = roc_curve(&[0.1, 0.2, 0.3], &[0.5, 0.9], 50).unwrap();
        assert_eq!(c.meta["auc"], 1.0);
        assert!(c.xs.windows(2).all(|w| w[0] < w[1]));
        assert!(c.ys.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*c.ys.last().unwrap(), 1.0);

        let mut r = ChaCha8Rng::seed_from_u64(1);
        let pos: Vec<f64> = (0..5000).map(|_| r.gen()).collect();
        let neg: Vec<f64> = (0..5000).map(|_| r.gen()).collect();
        let c = roc_curve(&pos, &neg, 100).unwrap();
        let a = c.meta["auc"].as_f64().unwrap();
        assert!((a - 0.5).abs() < 0.02, "{a}");
        assert!(roc_curve(&[], &[1.0], 10).is_err());
    }

    #[test]
    fn roc_pairs_are_balanced() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let a = Array2::from_shape_simple_fn((30, 4), || r.gen::<f64>());
        let (p, n) = roc_pairs(
            a.view(),
            a.view(),
            &identity_corr(30),
            &identity_corr(30),
            5,
        )
        .unwrap();
        assert_eq!(p.len(), n.len());
        assert!(p.iter().all(|&d| d == 0.0));
        assert_eq!(
            (p.clone(), n.clone()),
            roc_pairs(
                a.view(),
                a.view(),
                &identity_corr(30),
                &identity_corr(30),
                5
            )
            .unwrap()
        );
    }

    #[test]
    fn correspondence_quality_examples() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let coords: Vec<[f64; 3]> = (0..50).map(|_| [r.gen(), r.gen(), r.gen()]).collect();
        let g = distance_graph(&build_knn(&coords, 6).unwrap()).unwrap();
        let desc = Array2::from_shape_fn((50, 3), |(i, j)| coords[i][j]);
        let radii = [0.0, 0.05, 0.1, 0.5];
        let c = correspondence_quality(
            desc.view(),
            desc.view(),
            &identity_corr(50),
            &identity_corr(50),
            &g,
            &radii,
        )
        .unwrap();
        assert!(c.ys.iter().all(|&y| y == 1.0));

        let noisy = Array2::from_shape_simple_fn((50, 3), || r.gen::<f64>());
        let c = correspondence_quality(
            noisy.view(),
            desc.view(),
            &identity_corr(50),
            &identity_corr(50),
            &g,
            &radii,
        )
        .unwrap();
        assert!(c.ys.windows(2).all(|w| w[0] <= w[1]));
        assert!(c.ys.iter().all(|&y| (0.0..=1.0).contains(&y)));
    }

    #[test]
    fn csv_layout() {
        let c = MetricCurve::with_protocol("cmc", vec![1.0, 2.0], vec![0.5, 1.0]);
        let csv = c.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("# meta {"));
        assert_eq!(&lines[1..], &["x,y", "1,0.5", "2,1"]);
    }
}
