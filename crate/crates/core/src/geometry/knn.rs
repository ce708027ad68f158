use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::Error;
use crate::kernels;
use crate::scalar::Scalar;
use crate::Result;

use super::{CorrespondenceMap, PointCloud};

/// Map each query point to its Euclidean nearest reference point. Ties
/// break to the lowest reference index, so the result is deterministic.
pub fn nearest_neighbor_match<T: Scalar>(
    query: &[T],
    reference: &[T],
) -> Result<CorrespondenceMap> {
    if query.is_empty() || reference.is_empty() {
        return Err(Error::Geometry("nearest-neighbor match: empty set".into()));
    }
    let hits = kernels::min_sqdist(query, reference);
    let target_of: Vec<usize> = hits.iter().map(|&(_, j)| j).collect();
    let residuals: Vec<f64> = hits.iter().map(|&(d, _)| d.as_f64().sqrt()).collect();
    CorrespondenceMap::new(target_of, reference.len() / 3)?.with_residuals(residuals)
}

/// Symmetrized k-nearest-neighbor graph with Euclidean edge weights,
/// supporting single-source shortest-path queries. Distances are computed
/// and reported at f64 regardless of the cloud's scalar type.
#[derive(Debug)]
pub struct GeodesicGraph {
    adjacency: Vec<Vec<(u32, f64)>>,
}

#[derive(PartialEq)]
struct HeapEntry {
    dist: f64,
    node: u32,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed: BinaryHeap is a max-heap, we want smallest first
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl GeodesicGraph {
    /// Builds the symmetrized k-NN graph and verifies it is connected;
    /// a disconnected graph reports its component sizes.
    pub fn build<T: Scalar>(pc: &PointCloud<T>, k: usize) -> Result<Self> {
        if k < 1 {
            return Err(Error::Domain("geodesic graph needs k >= 1".into()));
        }
        let n = pc.len();
        let pts = pc.points();
        let k = k.min(n - 1);

        let neighbor_lists: Vec<Vec<(u32, f64)>> = kernels::map_indexed(n, |i| {
            let p = [pts[i * 3], pts[i * 3 + 1], pts[i * 3 + 2]];
            // keep k smallest distances, excluding self
            let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
            for (j, q) in pts.chunks_exact(3).enumerate() {
                if j == i {
                    continue;
                }
                let dx = (p[0] - q[0]).as_f64();
                let dy = (p[1] - q[1]).as_f64();
                let dz = (p[2] - q[2]).as_f64();
                let d2 = dx * dx + dy * dy + dz * dz;
                if best.len() < k {
                    best.push((d2, j as u32));
                    best.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                } else if d2 < best[k - 1].0 {
                    best[k - 1] = (d2, j as u32);
                    best.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                }
            }
            best.into_iter()
                .map(|(d2, j)| (j, d2.sqrt()))
                .collect::<Vec<_>>()
        });

        let mut adjacency: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
        for (i, list) in neighbor_lists.iter().enumerate() {
            for &(j, w) in list {
                adjacency[i].push((j, w));
                adjacency[j as usize].push((i as u32, w));
            }
        }
        for adj in adjacency.iter_mut() {
            adj.sort_by(|a, b| a.0.cmp(&b.0));
            adj.dedup_by(|a, b| a.0 == b.0);
        }

        let graph = GeodesicGraph { adjacency };
        let sizes = graph.component_sizes();
        if sizes.len() > 1 {
            return Err(Error::Geometry(format!(
                "k-NN graph (k={k}) is disconnected: component sizes {sizes:?}"
            )));
        }
        Ok(graph)
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    fn component_sizes(&self) -> Vec<usize> {
        let n = self.adjacency.len();
        let mut seen = vec![false; n];
        let mut sizes = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            let mut stack = vec![start];
            seen[start] = true;
            let mut size = 0usize;
            while let Some(i) = stack.pop() {
                size += 1;
                for &(j, _) in &self.adjacency[i] {
                    if !seen[j as usize] {
                        seen[j as usize] = true;
                        stack.push(j as usize);
                    }
                }
            }
            sizes.push(size);
        }
        sizes
    }

    /// Dijkstra from a single source.
    pub fn distances_from(&self, source: usize) -> Vec<f64> {
        let n = self.adjacency.len();
        let mut dist = vec![f64::INFINITY; n];
        dist[source] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(HeapEntry {
            dist: 0.0,
            node: source as u32,
        });
        while let Some(HeapEntry { dist: d, node }) = heap.pop() {
            let i = node as usize;
            if d > dist[i] {
                continue;
            }
            for &(j, w) in &self.adjacency[i] {
                let nd = d + w;
                if nd < dist[j as usize] {
                    dist[j as usize] = nd;
                    heap.push(HeapEntry { dist: nd, node: j });
                }
            }
        }
        dist
    }

    /// Exact graph diameter: the largest finite shortest-path distance
    /// over all source/destination pairs.
    pub fn diameter(&self) -> f64 {
        let n = self.adjacency.len();
        let eccentricities = kernels::map_indexed(n, |i| {
            self.distances_from(i)
                .into_iter()
                .fold(0.0f64, f64::max)
        });
        eccentricities.into_iter().fold(0.0f64, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_clouds_match_identically() {
        let pts = [0.0f64, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let m = nearest_neighbor_match(&pts, &pts).unwrap();
        assert_eq!(m.target_of(), &[0, 1, 2]);
        assert!(m.residuals().unwrap().iter().all(|&r| r == 0.0));
    }

    #[test]
    fn permuted_reference_is_recovered() {
        let reference = [0.0f64, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        // query = reference rows in order [2, 0, 3, 1]
        let query = [0.0f64, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let m = nearest_neighbor_match(&query, &reference).unwrap();
        assert_eq!(m.target_of(), &[2, 0, 3, 1]);
    }

    #[test]
    fn rigid_motion_invariance() {
        let query = [0.3f64, 0.1, 0.0, -0.2, 0.5, 0.4, 0.9, -0.1, 0.2];
        let reference = [0.25f64, 0.12, 0.0, 0.8, 0.0, 0.3, -0.3, 0.4, 0.5, 0.0, 0.0, 0.0];
        let base = nearest_neighbor_match(&query, &reference).unwrap();

        // rotate both by the same rotation about z and translate
        let th: f64 = 0.83;
        let rot = |p: &[f64]| {
            [
                p[0] * th.cos() - p[1] * th.sin() + 5.0,
                p[0] * th.sin() + p[1] * th.cos() - 2.0,
                p[2] + 1.0,
            ]
        };
        let mut q2 = Vec::new();
        for p in query.chunks_exact(3) {
            q2.extend_from_slice(&rot(p));
        }
        let mut r2 = Vec::new();
        for p in reference.chunks_exact(3) {
            r2.extend_from_slice(&rot(p));
        }
        let moved = nearest_neighbor_match(&q2, &r2).unwrap();
        assert_eq!(base.target_of(), moved.target_of());
    }

    #[test]
    fn self_distance_is_zero_and_path_sums() {
        // three collinear points spaced 0.1, k=1
        let pc = PointCloud::from_rows(&[
            [0.0f64, 0.0, 0.0],
            [0.1, 0.0, 0.0],
            [0.2, 0.0, 0.0],
        ])
        .unwrap();
        let g = GeodesicGraph::build(&pc, 1).unwrap();
        let d = g.distances_from(0);
        assert_eq!(d[0], 0.0);
        assert!((d[2] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn disconnected_graph_reports_components() {
        // two distant pairs, k=1 keeps them separate
        let pc = PointCloud::from_rows(&[
            [0.0f64, 0.0, 0.0],
            [0.1, 0.0, 0.0],
            [10.0, 0.0, 0.0],
            [10.1, 0.0, 0.0],
        ])
        .unwrap();
        let err = GeodesicGraph::build(&pc, 1).unwrap_err();
        match err {
            Error::Geometry(msg) => assert!(msg.contains("2, 2"), "message: {msg}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn circle_distances_approximate_arc_length() {
        let n = 256;
        let rows: Vec<[f64; 3]> = (0..n)
            .map(|i| {
                let t = i as f64 / n as f64 * std::f64::consts::TAU;
                [t.cos(), t.sin(), 0.0]
            })
            .collect();
        let pc = PointCloud::from_rows(&rows).unwrap();
        let g = GeodesicGraph::build(&pc, 2).unwrap();
        let d = g.distances_from(0);
        // opposite point: arc length pi
        let err = (d[n / 2] - std::f64::consts::PI).abs() / std::f64::consts::PI;
        assert!(err < 0.05, "relative error {err}");
    }
}
