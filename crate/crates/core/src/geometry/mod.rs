//! Point-cloud representation, normalization, and local-area (density)
//! estimation, plus Chamfer distance, nearest-neighbor correspondence,
//! graph geodesics, and resampling in the submodules. All operations are
//! pure functions of their inputs.

mod chamfer;
mod knn;
mod resample;

pub use chamfer::{chamfer_graph, chamfer_value};
pub use knn::{nearest_neighbor_match, GeodesicGraph};
pub use resample::{resample, ResampleStrategy};

use crate::error::Error;
use crate::kernels;
use crate::scalar::Scalar;
use crate::Result;

/// Inverse of the transform applied by [`PointCloud::normalize`]:
/// original = point * scale + centroid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormMeta<T> {
    pub centroid: [T; 3],
    pub scale: T,
}

/// Ordered list of 3D points with optional per-point correspondence labels
/// (indices into a canonical template ordering) and the normalization
/// metadata needed to undo [`PointCloud::normalize`].
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<T> {
    points: Vec<T>,
    labels: Option<Vec<usize>>,
    norm_meta: Option<NormMeta<T>>,
}

impl<T: Scalar> PointCloud<T> {
    pub fn new(points: Vec<T>, labels: Option<Vec<usize>>) -> Result<Self> {
        if points.len() % 3 != 0 {
            return Err(Error::Geometry(format!(
                "point buffer length {} is not a multiple of 3",
                points.len()
            )));
        }
        let n = points.len() / 3;
        if n < 2 {
            return Err(Error::Geometry(format!("need at least 2 points, got {n}")));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point coordinates".into()));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Geometry(format!(
                    "{} labels for {n} points",
                    l.len()
                )));
            }
        }
        Ok(PointCloud {
            points,
            labels,
            norm_meta: None,
        })
    }

    pub fn from_rows(rows: &[[T; 3]]) -> Result<Self> {
        let mut points = Vec::with_capacity(rows.len() * 3);
        for r in rows {
            points.extend_from_slice(r);
        }
        Self::new(points, None)
    }

    pub fn len(&self) -> usize {
        self.points.len() / 3
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Flat row-major [x y z x y z ...] coordinate buffer.
    pub fn points(&self) -> &[T] {
        &self.points
    }

    pub fn point(&self, i: usize) -> [T; 3] {
        [
            self.points[i * 3],
            self.points[i * 3 + 1],
            self.points[i * 3 + 2],
        ]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn set_labels(&mut self, labels: Option<Vec<usize>>) -> Result<()> {
        if let Some(l) = &labels {
            if l.len() != self.len() {
                return Err(Error::Geometry(format!(
                    "{} labels for {} points",
                    l.len(),
                    self.len()
                )));
            }
        }
        self.labels = labels;
        Ok(())
    }

    pub fn norm_meta(&self) -> Option<&NormMeta<T>> {
        self.norm_meta.as_ref()
    }

    /// Translate the centroid to the origin and scale uniformly so the
    /// farthest point has norm 1. The inverse transform is kept in
    /// `norm_meta`. Arithmetic runs at f64 regardless of `T` so the
    /// centered/unit-radius invariants hold to well under 1e-6.
    pub fn normalize(&self) -> Result<PointCloud<T>> {
        let n = self.len();
        let mut c = [0.0f64; 3];
        for p in self.points.chunks_exact(3) {
            for (ci, &v) in c.iter_mut().zip(p) {
                *ci += v.as_f64();
            }
        }
        for ci in c.iter_mut() {
            *ci /= n as f64;
        }
        let mut max_r2 = 0.0f64;
        for p in self.points.chunks_exact(3) {
            let mut r2 = 0.0;
            for (ci, &v) in c.iter().zip(p) {
                let d = v.as_f64() - ci;
                r2 += d * d;
            }
            max_r2 = max_r2.max(r2);
        }
        let scale = max_r2.sqrt();
        if scale < 1e-12 {
            return Err(Error::Geometry(
                "degenerate cloud: all points coincide".into(),
            ));
        }
        let inv = 1.0 / scale;
        let mut points = Vec::with_capacity(self.points.len());
        for p in self.points.chunks_exact(3) {
            for (ci, &v) in c.iter().zip(p) {
                points.push(T::from_f64((v.as_f64() - ci) * inv));
            }
        }
        Ok(PointCloud {
            points,
            labels: self.labels.clone(),
            norm_meta: Some(NormMeta {
                centroid: [T::from_f64(c[0]), T::from_f64(c[1]), T::from_f64(c[2])],
                scale: T::from_f64(scale),
            }),
        })
    }

    /// Undo [`normalize`](Self::normalize) using the stored metadata.
    pub fn denormalize(&self) -> Result<PointCloud<T>> {
        let meta = self.norm_meta.ok_or_else(|| {
            Error::Geometry("denormalize: cloud has no normalization metadata".into())
        })?;
        let mut points = Vec::with_capacity(self.points.len());
        for p in self.points.chunks_exact(3) {
            for (c, &v) in meta.centroid.iter().zip(p) {
                points.push(T::from_f64(v.as_f64() * meta.scale.as_f64() + c.as_f64()));
            }
        }
        Ok(PointCloud {
            points,
            labels: self.labels.clone(),
            norm_meta: None,
        })
    }

    /// Replaces the coordinates, keeping labels and metadata.
    pub fn with_points(&self, points: Vec<T>) -> Result<PointCloud<T>> {
        if points.len() != self.points.len() {
            return Err(Error::Geometry("with_points: size change".into()));
        }
        Ok(PointCloud {
            points,
            labels: self.labels.clone(),
            norm_meta: self.norm_meta,
        })
    }
}

/// Per-point local-area estimates: the reciprocal of the number of points
/// strictly within `radius`, the point itself included. Values live in
/// (0, 1]; a value of 1 means the point has no other neighbor in range.
#[derive(Clone, Debug)]
pub struct AreaWeights<T> {
    values: Vec<T>,
    radius: T,
}

impl<T: Scalar> AreaWeights<T> {
    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn radius(&self) -> T {
        self.radius
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Uniform weights, handy for writing classic attention as a special
    /// case of the weighted form.
    pub fn uniform(n: usize) -> Self {
        AreaWeights {
            values: vec![T::one(); n],
            radius: T::zero(),
        }
    }
}

/// A_i = 1 / |{ x_j : ||x_j - x_i|| < r }| over the cloud's own points.
/// The cloud is expected to be normalized so that `r` is comparable across
/// datasets.
pub fn estimate_areas<T: Scalar>(pc: &PointCloud<T>, radius: T) -> Result<AreaWeights<T>> {
    if !(radius > T::zero()) || !radius.is_finite() {
        return Err(Error::Domain(format!(
            "area estimation radius must be positive and finite, got {radius}"
        )));
    }
    let counts = kernels::neighbor_counts(pc.points(), radius);
    let values = counts
        .into_iter()
        .map(|c| T::from_f64(1.0 / c as f64))
        .collect();
    Ok(AreaWeights { values, radius })
}

/// For each source index, a matched target index.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceMap {
    target_of: Vec<usize>,
    residuals: Option<Vec<f64>>,
}

impl CorrespondenceMap {
    pub fn new(target_of: Vec<usize>, target_size: usize) -> Result<Self> {
        if let Some(&bad) = target_of.iter().find(|&&t| t >= target_size) {
            return Err(Error::Contract(format!(
                "correspondence target index {bad} out of range {target_size}"
            )));
        }
        Ok(CorrespondenceMap {
            target_of,
            residuals: None,
        })
    }

    pub fn with_residuals(mut self, residuals: Vec<f64>) -> Result<Self> {
        if residuals.len() != self.target_of.len() {
            return Err(Error::Contract(format!(
                "{} residuals for {} correspondences",
                residuals.len(),
                self.target_of.len()
            )));
        }
        self.residuals = Some(residuals);
        Ok(self)
    }

    pub fn identity(n: usize) -> Self {
        CorrespondenceMap {
            target_of: (0..n).collect(),
            residuals: None,
        }
    }

    pub fn target_of(&self) -> &[usize] {
        &self.target_of
    }

    pub fn residuals(&self) -> Option<&[f64]> {
        self.residuals.as_deref()
    }

    pub fn len(&self) -> usize {
        self.target_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_of.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_two_point_cloud() {
        let pc = PointCloud::from_rows(&[[0.0f64, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        let norm = pc.normalize().unwrap();
        assert_eq!(norm.points(), &[-1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_is_idempotent_on_normalized_input() {
        let pc = PointCloud::from_rows(&[
            [1.0f64, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 0.5, 0.0],
            [0.0, -0.5, 0.0],
        ])
        .unwrap();
        let norm = pc.normalize().unwrap();
        for (a, b) in norm.points().iter().zip(pc.points()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_round_trip() {
        let pc = PointCloud::from_rows(&[
            [10.0f64, -3.0, 2.0],
            [11.5, -2.0, 2.5],
            [9.0, -4.0, 1.0],
            [10.5, -3.5, 3.0],
        ])
        .unwrap();
        let back = pc.normalize().unwrap().denormalize().unwrap();
        for (a, b) in back.points().iter().zip(pc.points()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_invariants_hold() {
        let pc = PointCloud::from_rows(&[
            [3.0f32, 1.0, -2.0],
            [5.0, 2.0, 0.0],
            [4.0, -1.0, 1.0],
            [2.5, 0.5, -0.5],
            [6.0, 1.5, 2.0],
        ])
        .unwrap();
        let norm = pc.normalize().unwrap();
        let n = norm.len() as f64;
        let mut c = [0.0f64; 3];
        let mut max_r: f64 = 0.0;
        for p in norm.points().chunks_exact(3) {
            let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
            c[0] += x;
            c[1] += y;
            c[2] += z;
            max_r = max_r.max((x * x + y * y + z * z).sqrt());
        }
        for ci in c {
            assert!((ci / n).abs() < 1e-6);
        }
        assert!((max_r - 1.0).abs() < 1e-6);
    }

    #[test]
    fn degenerate_cloud_is_rejected() {
        let pc = PointCloud::from_rows(&[[1.0f64, 1.0, 1.0], [1.0, 1.0, 1.0]]).unwrap();
        assert!(matches!(pc.normalize(), Err(Error::Geometry(_))));
    }

    #[test]
    fn single_point_cloud_is_rejected() {
        assert!(PointCloud::new(vec![1.0f64, 2.0, 3.0], None).is_err());
    }

    #[test]
    fn isolated_point_has_unit_area() {
        let pc = PointCloud::from_rows(&[[0.0f64, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let areas = estimate_areas(&pc, 0.05).unwrap();
        assert_eq!(areas.values(), &[1.0, 1.0]);
    }

    #[test]
    fn close_pair_halves_areas() {
        let pc = PointCloud::from_rows(&[[0.0f64, 0.0, 0.0], [0.03, 0.0, 0.0]]).unwrap();
        let areas = estimate_areas(&pc, 0.05).unwrap();
        assert_eq!(areas.values(), &[0.5, 0.5]);
    }

    #[test]
    fn area_radius_is_strict() {
        // distance exactly r is not a neighbor
        let pc = PointCloud::from_rows(&[[0.0f64, 0.0, 0.0], [0.05, 0.0, 0.0]]).unwrap();
        let areas = estimate_areas(&pc, 0.05).unwrap();
        assert_eq!(areas.values(), &[1.0, 1.0]);
    }

    #[test]
    fn non_positive_radius_rejected() {
        let pc = PointCloud::from_rows(&[[0.0f64, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(estimate_areas(&pc, 0.0), Err(Error::Domain(_))));
        assert!(matches!(estimate_areas(&pc, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn areas_are_permutation_equivariant() {
        let rows: Vec<[f64; 3]> = (0..40)
            .map(|i| {
                let t = i as f64 * 0.37;
                [t.sin() * 0.5, t.cos() * 0.5, (t * 0.3).sin() * 0.2]
            })
            .collect();
        let pc = PointCloud::from_rows(&rows).unwrap();
        let areas = estimate_areas(&pc, 0.3).unwrap();

        let perm: Vec<usize> = (0..40).map(|i| (i * 7) % 40).collect();
        let permuted_rows: Vec<[f64; 3]> = perm.iter().map(|&i| rows[i]).collect();
        let ppc = PointCloud::from_rows(&permuted_rows).unwrap();
        let pareas = estimate_areas(&ppc, 0.3).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(pareas.values()[j], areas.values()[i]);
        }
    }

    #[test]
    fn correspondence_validates_range() {
        assert!(CorrespondenceMap::new(vec![0, 1, 2], 3).is_ok());
        assert!(CorrespondenceMap::new(vec![0, 3], 3).is_err());
    }
}
