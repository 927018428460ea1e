//! Exact k-nearest-neighbour search with a 3-d tree.
//!
//! Candidates are ordered by `(squared distance, index)`, so equidistant
//! neighbours resolve to the smaller index and the result is identical to a
//! brute-force sort.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::error::{Error, Result};

const LEAF_SIZE: usize = 12;

/// The `k` nearest neighbours of every point, self excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborLists {
    pub k: usize,
    /// Row-major `n x k`.
    pub indices: Vec<usize>,
    /// Row-major `n x k` Euclidean distances, nondecreasing along each row.
    pub dists: Vec<f64>,
}

impl NeighborLists {
    pub fn n(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.indices.len() / self.k
        }
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = i * self.k..(i + 1) * self.k;
        (&self.indices[r.clone()], &self.dists[r])
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    idx: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.idx.cmp(&other.idx))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

struct KdTree<'a> {
    points: &'a [[f64; 3]],
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl<'a> KdTree<'a> {
    fn build(points: &'a [[f64; 3]]) -> Self {
        let mut tree = KdTree {
            points,
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        tree.build_node(0, points.len());
        tree
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        if hi[axis] <= lo[axis] {
            // All points coincide.
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis])
        });
        let value = points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    fn query(&self, q: usize, k: usize) -> Vec<Candidate> {
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        self.search(0, q, k, &mut heap);
        let mut out = heap.into_vec();
        out.sort_unstable();
        out
    }

    fn search(&self, node: usize, q: usize, k: usize, heap: &mut BinaryHeap<Candidate>) {
        let qp = &self.points[q];
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if i == q {
                        continue;
                    }
                    let c = Candidate {
                        d2: sq_dist(qp, &self.points[i]),
                        idx: i,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = qp[axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, q, k, heap);
                // Points on the far side are at least |diff| away along `axis`.
                // Equality must still be explored for index tie-breaking.
                if heap.len() < k || diff * diff <= heap.peek().expect("heap is full").d2 {
                    self.search(far, q, k, heap);
                }
            }
        }
    }
}

/// Exact Euclidean kNN for every point.
pub fn build_knn(coords: &[[f64; 3]], k: usize) -> Result<NeighborLists> {
    let n = coords.len();
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!(
            "k must satisfy 1 <= k < n (k = {k}, n = {n})"
        )));
    }
    let tree = KdTree::build(coords);
    let rows: Vec<Vec<Candidate>> = (0..n).into_par_iter().map(|q| tree.query(q, k)).collect();
    let mut indices = Vec::with_capacity(n * k);
    let mut dists = Vec::with_capacity(n * k);
    for row in rows {
        for c in row {
            indices.push(c.idx);
            dists.push(c.d2.sqrt());
        }
    }
    Ok(NeighborLists { k, indices, dists })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(coords: &[[f64; 3]], k: usize) -> NeighborLists {
        let n = coords.len();
        let mut indices = Vec::new();
        let mut dists = Vec::new();
        for i in 0..n {
            let mut all: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(&coords[i], &coords[j]), j))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(d2, j) in &all[..k] {
                indices.push(j);
                dists.push(d2.sqrt());
            }
        }
        NeighborLists { k, indices, dists }
    }

    #[test]
    fn collinear_example() {
        let coords = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let nb = build_knn(&coords, 1).unwrap();
        assert_eq!(nb.indices, vec![1, 0, 1]);
        assert_eq!(nb.dists, vec![1.0, 1.0, 2.0]);
    }

    #[test]
    fn complete_graph_when_k_is_n_minus_one() {
        let coords: Vec<[f64; 3]> = (0..9).map(|i| [i as f64, (i * i) as f64, 0.5]).collect();
        let nb = build_knn(&coords, 8).unwrap();
        for i in 0..9 {
            let mut row = nb.row(i).0.to_vec();
            row.sort_unstable();
            let expect: Vec<usize> = (0..9).filter(|&j| j != i).collect();
            assert_eq!(row, expect);
        }
    }

    #[test]
    fn k_out_of_range() {
        let coords = [[0.0; 3], [1.0, 0.0, 0.0]];
        assert!(build_knn(&coords, 2).is_err());
        assert!(build_knn(&coords, 0).is_err());
    }

    #[test]
    fn ties_resolve_to_smaller_index() {
        // A cube lattice has many equidistant neighbours.
        let mut coords = Vec::new();
        for x in 0..5 {
            for y in 0..5 {
                for z in 0..5 {
                    coords.push([x as f64, y as f64, z as f64]);
                }
            }
        }
        assert_eq!(build_knn(&coords, 7).unwrap(), brute_force(&coords, 7));
        let dup = vec![[0.0; 3]; 30];
        assert_eq!(build_knn(&dup, 5).unwrap(), brute_force(&dup, 5));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn matches_brute_force(
            pts in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 2..500),
            kfrac in 0.0f64..1.0,
        ) {
            let n = pts.len();
            let k = 1 + ((n - 2) as f64 * kfrac * 0.2) as usize;
            let nb = build_knn(&pts, k).unwrap();
            prop_assert_eq!(nb, brute_force(&pts, k));
        }
    }
}
