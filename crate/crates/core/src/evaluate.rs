//! Evaluation metrics for predicted correspondences and registrations:
//! graph-approximated geodesic error, Chamfer distance, and Euclidean
//! error statistics against ground truth.

use std::collections::HashMap;

use crate::error::Error;
use crate::geometry::{chamfer_value, CorrespondenceMap, GeodesicGraph, PointCloud};
use crate::kernels;
use crate::scalar::Scalar;
use crate::Result;

#[derive(Clone, Debug)]
pub struct EvalReport {
    /// Mean graph-geodesic distance between predicted and true target
    /// points (falls back to Euclidean when the k-NN graph is
    /// disconnected; see `geodesic_fallback`).
    pub mean_geodesic: f64,
    /// Mean geodesic normalized by the graph diameter, when available.
    pub mean_geodesic_relative: Option<f64>,
    pub chamfer: f64,
    pub max_euclidean: f64,
    pub mean_euclidean: f64,
    pub per_point_geodesic: Vec<f64>,
    pub per_point_euclidean: Vec<f64>,
    /// Set when the geodesic graph was disconnected and Euclidean
    /// distances were substituted.
    pub geodesic_fallback: bool,
}

impl EvalReport {
    /// Plain-text tabular form: summary rows, then per-point rows.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# metric\tvalue\n");
        out.push_str(&format!("mean_geodesic\t{:.9e}\n", self.mean_geodesic));
        if let Some(rel) = self.mean_geodesic_relative {
            out.push_str(&format!("mean_geodesic_relative\t{rel:.9e}\n"));
        }
        out.push_str(&format!("chamfer\t{:.9e}\n", self.chamfer));
        out.push_str(&format!("max_euclidean\t{:.9e}\n", self.max_euclidean));
        out.push_str(&format!("mean_euclidean\t{:.9e}\n", self.mean_euclidean));
        out.push_str(&format!("geodesic_fallback\t{}\n", self.geodesic_fallback));
        out.push_str("# point\tgeodesic\teuclidean\n");
        for (i, (g, e)) in self
            .per_point_geodesic
            .iter()
            .zip(&self.per_point_euclidean)
            .enumerate()
        {
            out.push_str(&format!("{i}\t{g:.9e}\t{e:.9e}\n"));
        }
        out
    }
}

/// Number of neighbors for the geodesic graph.
pub const EVAL_KNN: usize = 8;

/// Scores a predicted correspondence (and optionally the registered
/// geometry behind it) against ground truth on the target cloud.
///
/// Euclidean errors compare the registered point (or the predicted target
/// point when no registration is given) with the true target point.
pub fn evaluate<T: Scalar>(
    pred: &CorrespondenceMap,
    registered: Option<&PointCloud<T>>,
    gt: &CorrespondenceMap,
    target: &PointCloud<T>,
    knn_k: usize,
) -> Result<EvalReport> {
    if pred.len() != gt.len() {
        return Err(Error::Contract(format!(
            "prediction maps {} points, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if let Some(reg) = registered {
        if reg.len() != pred.len() {
            return Err(Error::Contract(format!(
                "registered cloud has {} points, prediction {}",
                reg.len(),
                pred.len()
            )));
        }
    }
    let n = pred.len();
    let tp = target.points();
    let point = |i: usize| -> [f64; 3] {
        [
            tp[i * 3].as_f64(),
            tp[i * 3 + 1].as_f64(),
            tp[i * 3 + 2].as_f64(),
        ]
    };

    // Euclidean: registered (or moved) point vs true target point
    let mut per_point_euclidean = Vec::with_capacity(n);
    for i in 0..n {
        let truth = point(gt.target_of()[i]);
        let moved = match registered {
            Some(reg) => {
                let p = reg.point(i);
                [p[0].as_f64(), p[1].as_f64(), p[2].as_f64()]
            }
            None => point(pred.target_of()[i]),
        };
        let d = (0..3)
            .map(|c| (moved[c] - truth[c]).powi(2))
            .sum::<f64>()
            .sqrt();
        per_point_euclidean.push(d);
    }
    let mean_euclidean = per_point_euclidean.iter().sum::<f64>() / n as f64;
    let max_euclidean = per_point_euclidean.iter().copied().fold(0.0, f64::max);

    // Chamfer between the registered (or moved) points and the target
    let chamfer = match registered {
        Some(reg) => chamfer_value(reg.points(), tp)?,
        None => {
            let moved: Vec<T> = pred
                .target_of()
                .iter()
                .flat_map(|&j| tp[j * 3..j * 3 + 3].to_vec())
                .collect();
            chamfer_value(&moved, tp)?
        }
    };

    // Geodesic errors on the target graph, grouped per unique predicted
    // source node so each Dijkstra run is shared.
    let (per_point_geodesic, mean_geodesic_relative, geodesic_fallback) =
        match GeodesicGraph::build(target, knn_k) {
            Ok(graph) => {
                let mut by_source: HashMap<usize, Vec<usize>> = HashMap::new();
                for (i, &p) in pred.target_of().iter().enumerate() {
                    by_source.entry(p).or_default().push(i);
                }
                let sources: Vec<usize> = {
                    let mut s: Vec<usize> = by_source.keys().copied().collect();
                    s.sort_unstable();
                    s
                };
                let distance_rows = kernels::map_indexed(sources.len(), |si| {
                    graph.distances_from(sources[si])
                });
                let mut per = vec![0.0f64; n];
                for (si, src) in sources.iter().enumerate() {
                    for &i in &by_source[src] {
                        per[i] = distance_rows[si][gt.target_of()[i]];
                    }
                }
                let diameter = graph.diameter();
                let mean = per.iter().sum::<f64>() / n as f64;
                let rel = (diameter > 0.0).then(|| mean / diameter);
                (per, rel, false)
            }
            Err(Error::Geometry(_)) => (per_point_euclidean.clone(), None, true),
            Err(other) => return Err(other),
        };
    let mean_geodesic = per_point_geodesic.iter().sum::<f64>() / n as f64;

    Ok(EvalReport {
        mean_geodesic,
        mean_geodesic_relative,
        chamfer,
        max_euclidean,
        mean_euclidean,
        per_point_geodesic,
        per_point_euclidean,
        geodesic_fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PointCloud;

    fn line_cloud(n: usize, spacing: f64) -> PointCloud<f64> {
        let rows: Vec<[f64; 3]> = (0..n).map(|i| [i as f64 * spacing, 0.0, 0.0]).collect();
        PointCloud::from_rows(&rows).unwrap()
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let target = line_cloud(10, 0.1);
        let gt = CorrespondenceMap::identity(10);
        let report = evaluate::<f64>(&gt.clone(), None, &gt, &target, 2).unwrap();
        assert_eq!(report.mean_geodesic, 0.0);
        assert_eq!(report.mean_euclidean, 0.0);
        assert_eq!(report.max_euclidean, 0.0);
        assert_eq!(report.chamfer, 0.0);
        assert!(!report.geodesic_fallback);
    }

    #[test]
    fn single_neighbor_slip_contributes_edge_length_over_n() {
        let n = 10;
        let target = line_cloud(n, 0.1);
        let gt = CorrespondenceMap::identity(n);
        // point 4 predicted as its neighbor 5, rest exact
        let mut pred = (0..n).collect::<Vec<_>>();
        pred[4] = 5;
        let pred = CorrespondenceMap::new(pred, n).unwrap();
        let report = evaluate::<f64>(&pred, None, &gt, &target, 1).unwrap();
        assert!((report.mean_geodesic - 0.1 / n as f64).abs() < 1e-12);
        assert!(report.max_euclidean >= report.mean_euclidean);
    }

    #[test]
    fn disconnected_graph_falls_back_to_euclidean() {
        // two far clusters; k=1 cannot connect them
        let rows = [
            [0.0, 0.0, 0.0],
            [0.1, 0.0, 0.0],
            [10.0, 0.0, 0.0],
            [10.1, 0.0, 0.0],
        ];
        let target = PointCloud::from_rows(&rows).unwrap();
        let gt = CorrespondenceMap::identity(4);
        let mut pred = vec![0usize, 1, 2, 3];
        pred[0] = 2;
        let pred = CorrespondenceMap::new(pred, 4).unwrap();
        let report = evaluate::<f64>(&pred, None, &gt, &target, 1).unwrap();
        assert!(report.geodesic_fallback);
        assert_eq!(report.per_point_geodesic, report.per_point_euclidean);
        assert!((report.per_point_euclidean[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn max_is_at_least_mean() {
        let target = line_cloud(6, 0.2);
        let gt = CorrespondenceMap::identity(6);
        let pred = CorrespondenceMap::new(vec![1, 0, 3, 2, 5, 4], 6).unwrap();
        let report = evaluate::<f64>(&pred, None, &gt, &target, 2).unwrap();
        assert!(report.max_euclidean >= report.mean_euclidean);
        assert!(report.mean_euclidean > 0.0);
        assert!(report.mean_geodesic_relative.is_some());
    }

    #[test]
    fn report_serializes_with_per_point_rows() {
        let target = line_cloud(4, 0.1);
        let gt = CorrespondenceMap::identity(4);
        let report = evaluate::<f64>(&gt.clone(), None, &gt, &target, 2).unwrap();
        let text = report.to_text();
        assert!(text.contains("mean_geodesic\t"));
        assert!(text.contains("chamfer\t"));
        assert!(text.lines().count() >= 4 + 4);
    }
}
