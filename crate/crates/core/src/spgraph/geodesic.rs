use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{distance_graph, NeighborLists, SparseMatrix};
use crate::error::{Error, Result};

#[derive(PartialEq)]
struct Item(f64, usize);

impl Eq for Item {}

impl Ord for Item {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on distance.
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Item {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra shortest paths on a distance graph (values are edge lengths).
/// Unreached nodes get `+∞`.
pub fn geodesics_from(graph: &SparseMatrix, source: usize) -> Result<Vec<f64>> {
    let n = graph.n();
    if source >= n {
        return Err(Error::InvalidArgument(format!(
            "source {source} outside [0, {n})"
        )));
    }
    let mut dist = vec![f64::INFINITY; n];
    dist[source] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(Item(0.0, source));
    while let Some(Item(d, u)) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        let (cols, lens) = graph.row(u);
        for (&v, &w) in cols.iter().zip(lens) {
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(Item(nd, v));
            }
        }
    }
    Ok(dist)
}

/// Shortest-path lengths from `source` over the symmetrized kNN graph with
/// Euclidean edge lengths.
pub fn graph_geodesics(nb: &NeighborLists, source: usize) -> Result<Vec<f64>> {
    geodesics_from(&distance_graph(nb)?, source)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spgraph::build_knn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn path_graph() {
        let coords = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let nb = build_knn(&coords, 1).unwrap();
        assert_eq!(graph_geodesics(&nb, 0).unwrap(), vec![0.0, 1.0, 3.0]);
    }

    #[test]
    fn long_edge_is_bypassed() {
        let g = SparseMatrix::from_triplets(
            3,
            vec![
                (0, 1, 1.0),
                (1, 0, 1.0),
                (1, 2, 1.0),
                (2, 1, 1.0),
                (0, 2, 3.0),
                (2, 0, 3.0),
            ],
        )
        .unwrap();
        assert_eq!(geodesics_from(&g, 0).unwrap()[2], 2.0);
        assert_eq!(geodesics_from(&g, 2).unwrap()[2], 0.0);
    }

    #[test]
    fn disconnected_nodes_are_infinite() {
        let g = SparseMatrix::from_triplets(3, vec![(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        assert!(geodesics_from(&g, 0).unwrap()[2].is_infinite());
    }

    #[test]
    fn triangle_inequality_on_random_graph() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let coords: Vec<[f64; 3]> = (0..150).map(|_| [r.gen(), r.gen(), r.gen()]).collect();
        let nb = build_knn(&coords, 6).unwrap();
        let g = distance_graph(&nb).unwrap();
        let all: Vec<Vec<f64>> = (0..150).map(|s| geodesics_from(&g, s).unwrap()).collect();
        for _ in 0..2000 {
            let (a, b, c) = (
                r.gen_range(0..150),
                r.gen_range(0..150),
                r.gen_range(0..150),
            );
            assert!(all[a][c] <= all[a][b] + all[b][c] + 1e-12);
            assert!((all[a][b] - all[b][a]).abs() < 1e-12);
        }
    }
}
