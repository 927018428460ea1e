//! Triplet sampling over shapes with index-aligned correspondences.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// `(shape, point)` indices for the three legs of a triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: (usize, usize),
    pub positive: (usize, usize),
    pub negative: (usize, usize),
}

/// Correspondence lookup tables for a list of shapes.
#[derive(Debug, Clone)]
pub struct CorrIndex {
    corr: Vec<Vec<i64>>,
    lookup: Vec<HashMap<i64, usize>>,
}

impl CorrIndex {
    pub fn new(corr: Vec<Vec<i64>>) -> Result<Self> {
        let usable = corr.iter().filter(|c| c.iter().any(|&v| v >= 0)).count();
        if usable < 2 {
            return Err(Error::InvalidArgument(
                "triplet sampling needs at least two shapes with correspondences".into(),
            ));
        }
        let lookup = corr
            .iter()
            .map(|c| {
                c.iter()
                    .enumerate()
                    .filter(|(_, &v)| v >= 0)
                    .map(|(i, &v)| (v, i))
                    .collect()
            })
            .collect();
        Ok(CorrIndex { corr, lookup })
    }

    pub fn n_shapes(&self) -> usize {
        self.corr.len()
    }

    fn draw(&self, anchor_shape: usize, pool: &[usize], r: &mut impl Rng) -> Option<Triplet> {
        let ca = &self.corr[anchor_shape];
        if ca.is_empty() {
            return None;
        }
        let ia = r.gen_range(0..ca.len());
        let c = ca[ia];
        if c < 0 {
            return None;
        }
        let holders: Vec<usize> = pool
            .iter()
            .copied()
            .filter(|&s| s != anchor_shape && self.lookup[s].contains_key(&c))
            .collect();
        let &sp = holders.choose(r)?;
        let ip = self.lookup[sp][&c];
        let negatives: Vec<usize> = pool
            .iter()
            .copied()
            .filter(|&s| s != anchor_shape)
            .collect();
        let &sn = negatives.choose(r)?;
        let cn = &self.corr[sn];
        let i_n = r.gen_range(0..cn.len());
        if cn[i_n] < 0 || cn[i_n] == c {
            return None;
        }
        Some(Triplet {
            anchor: (anchor_shape, ia),
            positive: (sp, ip),
            negative: (sn, i_n),
        })
    }

    /// Triplets anchored on `anchor_shape` whose positives and negatives lie
    /// on shapes of `pool`.
    pub fn sample_anchored(
        &self,
        anchor_shape: usize,
        pool: &[usize],
        n_triplets: usize,
        r: &mut impl Rng,
    ) -> Result<Vec<Triplet>> {
        let mut out = Vec::with_capacity(n_triplets);
        let mut failures = 0usize;
        while out.len() < n_triplets {
            match self.draw(anchor_shape, pool, r) {
                Some(t) => out.push(t),
                None => {
                    failures += 1;
                    if failures > 1000 + 100 * n_triplets {
                        return Err(Error::InvalidArgument(format!(
                            "could not sample triplets anchored on shape {anchor_shape}"
                        )));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// `n_triplets` triplets, each anchored on a uniformly chosen shape, with
/// positive and negative drawn from any other shape.
pub fn sample_triplets(corr: &[Vec<i64>], n_triplets: usize, seed: u64) -> Result<Vec<Triplet>> {
    let index = CorrIndex::new(corr.to_vec())?;
    let mut r = rng::stream(seed, "triplets", 0, 0);
    let all: Vec<usize> = (0..index.n_shapes()).collect();
    let mut out = Vec::with_capacity(n_triplets);
    while out.len() < n_triplets {
        let a = r.gen_range(0..index.n_shapes());
        out.extend(index.sample_anchored(a, &all, 1, &mut r)?);
    }
    Ok(out)
}
