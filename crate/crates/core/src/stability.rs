//! Attention-map introspection: ranking latent probes by the decoder
//! cross-attention mass a point region sends them, and quantifying how
//! much the encoder's attention distributions drift when the cloud is
//! resampled — the comparison that separates surface from classic
//! attention.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::autodiff::Tensor;
use crate::error::Error;
use crate::geometry::{nearest_neighbor_match, resample, PointCloud, ResampleStrategy};
use crate::kernels;
use crate::model::{decode_with_maps, encode_with_maps, LatentState, ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::Result;

/// Which layer's cross-attention maps to inspect.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapLayer {
    First,
    Last,
}

fn pick_layer<T: Clone>(maps: &[T], layer: MapLayer) -> &T {
    match layer {
        MapLayer::First => &maps[0],
        MapLayer::Last => maps.last().expect("at least one layer"),
    }
}

/// Head-averaged map as f64: rows sum to one.
fn mean_over_heads<T: Scalar>(heads: &[Tensor<T>]) -> (Vec<f64>, usize, usize) {
    let shape = heads[0].shape();
    let (rows, cols) = (shape[0], shape[1]);
    let mut out = vec![0.0f64; rows * cols];
    for h in heads {
        for (o, &v) in out.iter_mut().zip(h.data()) {
            *o += v.as_f64();
        }
    }
    let inv = 1.0 / heads.len() as f64;
    for o in out.iter_mut() {
        *o *= inv;
    }
    (out, rows, cols)
}

/// Ranks latent probes by the total cross-attention mass they receive
/// from `region` (source-point indices) at the chosen decoder layer,
/// descending, ties broken by the lower probe index.
pub fn probes_by_region<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    source: &PointCloud<T>,
    latents: &LatentState<T>,
    region: &[usize],
    layer: MapLayer,
) -> Result<Vec<usize>> {
    if region.is_empty() {
        return Err(Error::Contract("probe ranking needs a non-empty region".into()));
    }
    if let Some(&bad) = region.iter().find(|&&i| i >= source.len()) {
        return Err(Error::Dimension(format!(
            "region index {bad} out of {} source points",
            source.len()
        )));
    }
    let (_, maps) = decode_with_maps(params, cfg, source, latents)?;
    let (map, _rows, probes) = mean_over_heads(pick_layer(&maps, layer));
    let mut masses = vec![0.0f64; probes];
    for &i in region {
        for (p, m) in masses.iter_mut().enumerate() {
            *m += map[i * probes + p];
        }
    }
    let mut order: Vec<usize> = (0..probes).collect();
    order.sort_by(|&a, &b| masses[b].total_cmp(&masses[a]).then(a.cmp(&b)));
    let _ = masses;
    Ok(order)
}

/// Per-probe region masses at the chosen decoder layer (the quantity
/// behind [`probes_by_region`]), exposed for additivity checks and export.
pub fn region_masses<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    source: &PointCloud<T>,
    latents: &LatentState<T>,
    region: &[usize],
    layer: MapLayer,
) -> Result<Vec<f64>> {
    if region.is_empty() {
        return Err(Error::Contract("probe ranking needs a non-empty region".into()));
    }
    let (_, maps) = decode_with_maps(params, cfg, source, latents)?;
    let (map, _rows, probes) = mean_over_heads(pick_layer(&maps, layer));
    let mut masses = vec![0.0f64; probes];
    for &i in region {
        for (p, m) in masses.iter_mut().enumerate() {
            *m += map[i * probes + p];
        }
    }
    Ok(masses)
}

/// Per-probe attention distributions over cloud points at the chosen
/// encoder layer, head-averaged: a (num_probes x n) row-stochastic matrix.
pub fn encoder_probe_distributions<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    cloud: &PointCloud<T>,
    layer: MapLayer,
) -> Result<(Vec<f64>, usize, usize)> {
    let (_, maps) = encode_with_maps(params, cfg, cloud)?;
    Ok(mean_over_heads(pick_layer(&maps, layer)))
}

/// L1 distance between a probe's attention distribution on the full cloud
/// and its distribution on a resampling, mass re-aggregated to the nearest
/// full-cloud point. Lies in [0, 2].
pub fn attention_drift<T: Scalar>(
    full: &[f64],
    n_full: usize,
    sub: &[f64],
    sub_cloud: &PointCloud<T>,
    full_cloud: &PointCloud<T>,
    probes: usize,
) -> Result<Vec<f64>> {
    let m = sub_cloud.len();
    let back = nearest_neighbor_match(sub_cloud.points(), full_cloud.points())?;
    let mut drifts = Vec::with_capacity(probes);
    for p in 0..probes {
        let mut agg = vec![0.0f64; n_full];
        for (j, &fi) in back.target_of().iter().enumerate() {
            agg[fi] += sub[p * m + j];
        }
        let l1: f64 = (0..n_full)
            .map(|i| (full[p * n_full + i] - agg[i]).abs())
            .sum();
        drifts.push(l1);
    }
    Ok(drifts)
}

#[derive(Clone, Debug)]
pub struct StabilityReport {
    /// Mean L1 drift over probes, one entry per resampling trial.
    pub per_trial_surface: Vec<f64>,
    pub per_trial_classic: Vec<f64>,
    pub surface_mean: f64,
    pub classic_mean: f64,
    /// classic_mean - surface_mean; positive favors surface attention.
    pub mean_difference: f64,
    pub t_statistic: f64,
    /// One-sided paired t-test p-value for "classic drifts more".
    pub p_value: f64,
}

impl StabilityReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# metric\tvalue\n");
        out.push_str(&format!("surface_mean_drift\t{:.9e}\n", self.surface_mean));
        out.push_str(&format!("classic_mean_drift\t{:.9e}\n", self.classic_mean));
        out.push_str(&format!("mean_difference\t{:.9e}\n", self.mean_difference));
        out.push_str(&format!("t_statistic\t{:.6}\n", self.t_statistic));
        out.push_str(&format!("p_value\t{:.6e}\n", self.p_value));
        out.push_str("# trial\tsurface\tclassic\n");
        for (i, (s, c)) in self
            .per_trial_surface
            .iter()
            .zip(&self.per_trial_classic)
            .enumerate()
        {
            out.push_str(&format!("{i}\t{s:.9e}\t{c:.9e}\n"));
        }
        out
    }
}

fn trial_drift<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    cloud: &PointCloud<T>,
    full: &(Vec<f64>, usize, usize),
    sub_cloud: &PointCloud<T>,
    layer: MapLayer,
) -> Result<f64> {
    let (full_map, probes, n_full) = (&full.0, full.1, full.2);
    let (sub_map, sub_probes, _m) = encoder_probe_distributions(params, cfg, sub_cloud, layer)?;
    debug_assert_eq!(probes, sub_probes);
    let drifts = attention_drift(full_map, n_full, &sub_map, sub_cloud, cloud, probes)?;
    Ok(drifts.iter().sum::<f64>() / probes as f64)
}

/// Paired comparison of attention drift under resampling for a surface
/// and a classic model on the same cloud: every trial draws one subset
/// (deterministic per trial index) and scores both variants on it.
pub fn attention_stability<T: Scalar>(
    surface: (&ModelParams<T>, &ModelConfig),
    classic: (&ModelParams<T>, &ModelConfig),
    cloud: &PointCloud<T>,
    strategy: ResampleStrategy<T>,
    keep: usize,
    trials: usize,
    layer: MapLayer,
    seed: u64,
) -> Result<StabilityReport> {
    if trials < 2 {
        return Err(Error::Config("stability comparison needs at least 2 trials".into()));
    }
    let full_surface = encoder_probe_distributions(surface.0, surface.1, cloud, layer)?;
    let full_classic = encoder_probe_distributions(classic.0, classic.1, cloud, layer)?;

    let outcomes: Vec<Result<(f64, f64)>> = kernels::map_indexed(trials, |t| {
        let (sub, _) = resample(cloud, strategy, keep, seed ^ (t as u64).wrapping_mul(0x9e37))?;
        let s = trial_drift(surface.0, surface.1, cloud, &full_surface, &sub, layer)?;
        let c = trial_drift(classic.0, classic.1, cloud, &full_classic, &sub, layer)?;
        Ok((s, c))
    });

    let mut per_trial_surface = Vec::with_capacity(trials);
    let mut per_trial_classic = Vec::with_capacity(trials);
    for o in outcomes {
        let (s, c) = o?;
        per_trial_surface.push(s);
        per_trial_classic.push(c);
    }
    let surface_mean = per_trial_surface.iter().sum::<f64>() / trials as f64;
    let classic_mean = per_trial_classic.iter().sum::<f64>() / trials as f64;

    let diffs: Vec<f64> = per_trial_classic
        .iter()
        .zip(&per_trial_surface)
        .map(|(c, s)| c - s)
        .collect();
    let mean_difference = diffs.iter().sum::<f64>() / trials as f64;
    let var = diffs
        .iter()
        .map(|d| (d - mean_difference).powi(2))
        .sum::<f64>()
        / (trials as f64 - 1.0);
    let (t_statistic, p_value) = if var > 0.0 {
        let t = mean_difference / (var / trials as f64).sqrt();
        let dist = StudentsT::new(0.0, 1.0, trials as f64 - 1.0)
            .map_err(|e| Error::Config(format!("t-distribution: {e}")))?;
        (t, 1.0 - dist.cdf(t))
    } else if mean_difference > 0.0 {
        (f64::INFINITY, 0.0)
    } else {
        (0.0, 1.0)
    };

    Ok(StabilityReport {
        per_trial_surface,
        per_trial_classic,
        surface_mean,
        classic_mean,
        mean_difference,
        t_statistic,
        p_value,
    })
}
