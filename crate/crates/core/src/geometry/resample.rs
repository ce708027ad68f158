use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::kernels;
use crate::scalar::Scalar;
use crate::Result;

use super::PointCloud;

/// How to draw a subset of points when varying the sampling of a shape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ResampleStrategy<T> {
    /// m indices drawn uniformly without replacement.
    UniformRandom,
    /// Points kept with probability proportional to their local density
    /// (neighbor count within the radius), so dense regions stay dense.
    DensityBiased { radius: T },
    /// Greedy farthest-point selection from a seeded start index; with
    /// m = n this produces a permutation of the input.
    FarthestPoint,
}

/// Draws `m` points per strategy, deterministic per seed. Labels (and the
/// normalization metadata) are carried through; the selected original
/// indices are returned alongside the subcloud.
pub fn resample<T: Scalar>(
    pc: &PointCloud<T>,
    strategy: ResampleStrategy<T>,
    m: usize,
    seed: u64,
) -> Result<(PointCloud<T>, Vec<usize>)> {
    let n = pc.len();
    if m < 1 || m > n {
        return Err(Error::Domain(format!(
            "resample count {m} out of range [1, {n}]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = match strategy {
        ResampleStrategy::UniformRandom => {
            let mut pool: Vec<usize> = (0..n).collect();
            for i in 0..m {
                let j = rng.gen_range(i..n);
                pool.swap(i, j);
            }
            pool.truncate(m);
            pool
        }
        ResampleStrategy::DensityBiased { radius } => {
            if !(radius > T::zero()) {
                return Err(Error::Domain("density-biased radius must be positive".into()));
            }
            // weighted sampling without replacement: key = u^(1/w), keep
            // the m largest keys
            let counts = kernels::neighbor_counts(pc.points(), radius);
            let mut keyed: Vec<(f64, usize)> = counts
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    (u.powf(1.0 / c as f64), i)
                })
                .collect();
            keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            keyed.truncate(m);
            keyed.into_iter().map(|(_, i)| i).collect()
        }
        ResampleStrategy::FarthestPoint => {
            let pts = pc.points();
            let start = rng.gen_range(0..n);
            let mut selected = Vec::with_capacity(m);
            selected.push(start);
            let sqd = |i: usize, j: usize| {
                let mut d = T::zero();
                for c in 0..3 {
                    let v = pts[i * 3 + c] - pts[j * 3 + c];
                    d = d + v * v;
                }
                d
            };
            let mut best = vec![T::infinity(); n];
            for i in 0..n {
                best[i] = sqd(i, start);
            }
            while selected.len() < m {
                let mut far = 0usize;
                let mut far_d = T::neg_infinity();
                for i in 0..n {
                    if best[i] > far_d {
                        far_d = best[i];
                        far = i;
                    }
                }
                selected.push(far);
                for i in 0..n {
                    let d = sqd(i, far);
                    if d < best[i] {
                        best[i] = d;
                    }
                }
            }
            selected
        }
    };

    let mut points = Vec::with_capacity(m * 3);
    for &i in &indices {
        points.extend_from_slice(&pc.points()[i * 3..i * 3 + 3]);
    }
    let labels = pc
        .labels()
        .map(|l| indices.iter().map(|&i| l[i]).collect::<Vec<_>>());
    let mut out = PointCloud::new(points, labels)?;
    if let Some(meta) = pc.norm_meta() {
        // subclouds stay in the same normalized frame
        out.norm_meta = Some(*meta);
    }
    Ok((out, indices))
}
