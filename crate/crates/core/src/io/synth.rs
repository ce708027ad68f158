//! Synthetic deformable shape families with exact ground-truth
//! correspondence: a deterministic base sampling of a parametric shape,
//! deformed per member by a smooth low-frequency displacement field.
//! Family members share point indices, so index i of every member is the
//! same material point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::geometry::PointCloud;
use crate::scalar::Scalar;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaseShape {
    Sphere,
    Torus,
    /// A capped cylinder (a capsule-like solid of revolution).
    CylinderFigure,
}

impl BaseShape {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(BaseShape::Sphere),
            "torus" => Ok(BaseShape::Torus),
            "cylinder-figure" => Ok(BaseShape::CylinderFigure),
            other => Err(Error::Config(format!(
                "unknown base shape {other:?} (expected sphere, torus, or cylinder-figure)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BaseShape::Sphere => "sphere",
            BaseShape::Torus => "torus",
            BaseShape::CylinderFigure => "cylinder-figure",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthFamilyConfig {
    pub base: BaseShape,
    pub points: usize,
    pub members: usize,
    /// Upper bound on the per-point displacement magnitude.
    pub amplitude: f64,
    pub seed: u64,
}

impl Default for SynthFamilyConfig {
    fn default() -> Self {
        SynthFamilyConfig {
            base: BaseShape::Sphere,
            points: 1000,
            members: 20,
            amplitude: 0.35,
            seed: 7,
        }
    }
}

impl SynthFamilyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points < 2 {
            return Err(Error::Config("family needs at least 2 points per cloud".into()));
        }
        if self.members == 0 {
            return Err(Error::Config("family needs at least 1 member".into()));
        }
        if !(self.amplitude >= 0.0) || !self.amplitude.is_finite() {
            return Err(Error::Config(format!(
                "amplitude must be non-negative, got {}",
                self.amplitude
            )));
        }
        Ok(())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn base_points(cfg: &SynthFamilyConfig) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0xba5e_5a17));
    let mut pts = Vec::with_capacity(cfg.points);
    match cfg.base {
        BaseShape::Sphere => {
            while pts.len() < cfg.points {
                // gaussian direction, normalized
                let g = [gauss(&mut rng), gauss(&mut rng), gauss(&mut rng)];
                let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
                if n > 1e-9 {
                    pts.push([g[0] / n, g[1] / n, g[2] / n]);
                }
            }
        }
        BaseShape::Torus => {
            let (major, minor) = (0.7, 0.3);
            while pts.len() < cfg.points {
                let u = rng.gen_range(0.0..std::f64::consts::TAU);
                let v = rng.gen_range(0.0..std::f64::consts::TAU);
                // area element is proportional to major + minor*cos(v)
                let accept = (major + minor * v.cos()) / (major + minor);
                if rng.gen_range(0.0..1.0) < accept {
                    pts.push([
                        (major + minor * v.cos()) * u.cos(),
                        minor * v.sin(),
                        (major + minor * v.cos()) * u.sin(),
                    ]);
                }
            }
        }
        BaseShape::CylinderFigure => {
            let (radius, half_h) = (0.4, 0.6);
            let side_area = std::f64::consts::TAU * radius * (2.0 * half_h);
            let cap_area = 2.0 * std::f64::consts::TAU * radius * radius; // both hemispheres
            while pts.len() < cfg.points {
                let u = rng.gen_range(0.0..std::f64::consts::TAU);
                if rng.gen_range(0.0..side_area + cap_area) < side_area {
                    let y = rng.gen_range(-half_h..half_h);
                    pts.push([radius * u.cos(), y, radius * u.sin()]);
                } else {
                    // hemisphere cap, area-uniform in cos(polar)
                    let up = rng.gen_range(0..2) == 0;
                    let cos_t: f64 = rng.gen_range(0.0..1.0);
                    let sin_t = (1.0 - cos_t * cos_t).sqrt();
                    let y = half_h * if up { 1.0 } else { -1.0 } + radius * cos_t * if up { 1.0 } else { -1.0 };
                    pts.push([radius * sin_t * u.cos(), y, radius * sin_t * u.sin()]);
                }
            }
        }
    }
    pts
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    (-2.0 * u1.ln()).sqrt() * u2.cos()
}

const BANDS: usize = 3;

struct DisplacementField {
    // per band: amplitude, wave vector, phase, unit direction
    bands: [(f64, [f64; 3], f64, [f64; 3]); BANDS],
}

impl DisplacementField {
    fn sample(amplitude: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut weights = [0.0f64; BANDS];
        let mut total = 0.0;
        for w in weights.iter_mut() {
            *w = rng.gen_range(0.3..1.0);
            total += *w;
        }
        let mut bands = [(0.0, [0.0; 3], 0.0, [0.0; 3]); BANDS];
        for (i, band) in bands.iter_mut().enumerate() {
            let amp = amplitude * weights[i] / total;
            let freq_scale = rng.gen_range(0.4..1.2);
            let omega = random_unit(rng).map(|v| v * freq_scale);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let dir = random_unit(rng);
            *band = (amp, omega, phase, dir);
        }
        DisplacementField { bands }
    }

    fn displace(&self, p: [f64; 3]) -> [f64; 3] {
        let mut d = [0.0f64; 3];
        for (amp, omega, phase, dir) in &self.bands {
            let arg = omega[0] * p[0] + omega[1] * p[1] + omega[2] * p[2] + phase;
            let s = amp * arg.sin();
            for c in 0..3 {
                d[c] += s * dir[c];
            }
        }
        d
    }

    /// Upper bound on the field's Lipschitz constant: sum of amp * |omega|.
    fn lipschitz_bound(&self) -> f64 {
        self.bands
            .iter()
            .map(|(amp, omega, _, _)| {
                amp * (omega[0] * omega[0] + omega[1] * omega[1] + omega[2] * omega[2]).sqrt()
            })
            .sum()
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let g = [gauss(rng), gauss(rng), gauss(rng)];
        let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        if n > 1e-9 {
            return [g[0] / n, g[1] / n, g[2] / n];
        }
    }
}

/// Sampled injectivity check: for every base point and its nearest base
/// neighbor, the deformed pair must keep positive separation along the
/// original direction (no local folding).
fn check_injective(base: &[[f64; 3]], deformed: &[[f64; 3]]) -> bool {
    let n = base.len();
    for i in 0..n {
        // nearest base neighbor by linear scan on a subsample for large n
        let stride = (n / 512).max(1);
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for j in (0..n).step_by(stride) {
            if j == i {
                continue;
            }
            let d = dist2(base[i], base[j]);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        if best == usize::MAX {
            continue;
        }
        let dir0 = sub(base[best], base[i]);
        let dir1 = sub(deformed[best], deformed[i]);
        let dot: f64 = dir0
            .iter()
            .zip(&dir1)
            .map(|(a, b)| a * b)
            .sum();
        if dot <= 0.0 {
            return false;
        }
    }
    true
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c]).powi(2)).sum()
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Deterministic family of deformed clouds sharing index-wise
/// correspondence (labels are the identity indices). Each member is
/// independently normalized; `denormalize` restores the raw frame.
pub fn generate_family<T: Scalar>(cfg: &SynthFamilyConfig) -> Result<Vec<PointCloud<T>>> {
    cfg.validate()?;
    let base = base_points(cfg);
    let mut members = Vec::with_capacity(cfg.members);
    for m in 0..cfg.members {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ splitmix64(m as u64 + 1)));
        let field = DisplacementField::sample(cfg.amplitude, &mut rng);
        if field.lipschitz_bound() >= 0.95 {
            return Err(Error::Config(format!(
                "deformation field for member {m} risks folding (Lipschitz bound {:.2}); \
                 use a lower amplitude",
                field.lipschitz_bound()
            )));
        }
        let deformed: Vec<[f64; 3]> = base.iter().map(|&p| {
            let d = field.displace(p);
            [p[0] + d[0], p[1] + d[1], p[2] + d[2]]
        }).collect();
        if cfg.amplitude > 0.0 && !check_injective(&base, &deformed) {
            return Err(Error::Config(format!(
                "deformation for member {m} folds the sampling at amplitude {}; \
                 use a lower amplitude",
                cfg.amplitude
            )));
        }
        let mut flat = Vec::with_capacity(deformed.len() * 3);
        for p in &deformed {
            for c in 0..3 {
                flat.push(T::from_f64(p[c]));
            }
        }
        let mut pc = PointCloud::new(flat, Some((0..cfg.points).collect()))?;
        pc = pc.normalize()?;
        members.push(pc);
    }
    Ok(members)
}
