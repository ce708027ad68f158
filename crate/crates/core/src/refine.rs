//! Test-time refinement: Adam minimization of the Chamfer energy between
//! the target and the decoded source, with respect to the latent vectors
//! only — the network stays frozen. Also the latent interpolation used to
//! blend two encoded shapes, optionally freezing chosen probes.

use crate::autodiff::{AdamConfig, AdamState, Tape, Tensor};
use crate::error::Error;
use crate::geometry::{chamfer_graph, estimate_areas, AreaWeights, PointCloud};
use crate::model::{decode_graph, LatentState, ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineConfig {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            steps: 100,
            learning_rate: 5e-3,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "refinement learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Outcome of a refinement run. `latents`/`registration` follow the
/// best-iterate contract (never worse than the starting point); the raw
/// last iterate is reported alongside, as is the full Chamfer trajectory
/// (steps + 1 values, the first being the unrefined energy).
pub struct RefineResult<T> {
    pub latents: LatentState<T>,
    pub registration: PointCloud<T>,
    pub latents_last: LatentState<T>,
    pub trajectory: Vec<f64>,
    pub best_step: usize,
}

/// Minimize chamfer(target, decode(source, LS)) over LS with Adam,
/// starting from `latents0` (normally `encode(target)`).
pub fn refine<T: Scalar>(
    params: &ModelParams<T>,
    model_cfg: &ModelConfig,
    source: &PointCloud<T>,
    target: &PointCloud<T>,
    latents0: &LatentState<T>,
    cfg: &RefineConfig,
) -> Result<RefineResult<T>> {
    cfg.validate()?;
    model_cfg.validate()?;
    latents0.check_config(model_cfg)?;

    let source_areas: Option<AreaWeights<T>> = model_cfg
        .surface_attention
        .then(|| estimate_areas(source, T::from_f64(model_cfg.density_radius)))
        .transpose()?;

    let mut adam = AdamState::new(AdamConfig::with_lr(T::from_f64(cfg.learning_rate)));
    let mut current = latents0.vectors().clone();
    let mut trajectory = Vec::with_capacity(cfg.steps + 1);
    let mut best: Option<(f64, Tensor<T>, Vec<T>, usize)> = None;

    for it in 0..=cfg.steps {
        let mut tape = Tape::new();
        let vars = params.lift(&mut tape, false);
        let lat = tape.leaf(&current, true);
        let src = tape.leaf_matrix(source.len(), 3, source.points(), false);
        let tgt = tape.leaf_matrix(target.len(), 3, target.points(), false);
        let dec = decode_graph(&mut tape, src, source_areas.as_ref(), lat, &vars, model_cfg)?;
        let energy = chamfer_graph(&mut tape, tgt, dec.output)?;
        let value = tape.value(energy)[0].as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "refinement diverged at step {it}"
            )));
        }
        trajectory.push(value);
        let better = best.as_ref().map_or(true, |(b, _, _, _)| value < *b);
        if better {
            best = Some((value, current.clone(), tape.value(dec.output).to_vec(), it));
        }
        if it == cfg.steps {
            break;
        }
        tape.backward(energy).map_err(|e| {
            Error::NonFinite(format!("refinement backward failed at step {it}: {e}"))
        })?;
        let grad = tape.grad_or_zeros(lat);
        let mut slots = [&mut current];
        adam.step(&mut slots, &[grad]).map_err(|e| {
            Error::NonFinite(format!("refinement update failed at step {it}: {e}"))
        })?;
    }

    let (_, best_lat, best_out, best_step) = best.expect("at least one iterate");
    let registration = PointCloud::new(best_out, source.labels().map(|l| l.to_vec()))?;
    Ok(RefineResult {
        latents: LatentState::new(best_lat, format!("{}+refined", latents0.provenance()))?,
        registration,
        latents_last: LatentState::new(current, format!("{}+last", latents0.provenance()))?,
        trajectory,
        best_step,
    })
}

/// out = (1 - t) * a + t * b elementwise, except rows listed in `frozen`,
/// which are copied from `a`.
pub fn interpolate_latents<T: Scalar>(
    a: &LatentState<T>,
    b: &LatentState<T>,
    t: f64,
    frozen: &[usize],
) -> Result<LatentState<T>> {
    if a.vectors().shape() != b.vectors().shape() {
        return Err(Error::Dimension(format!(
            "latent shapes differ: {:?} vs {:?}",
            a.vectors().shape(),
            b.vectors().shape()
        )));
    }
    if !t.is_finite() {
        return Err(Error::Domain(format!("interpolation parameter {t} not finite")));
    }
    let k = a.num_probes();
    if let Some(&bad) = frozen.iter().find(|&&i| i >= k) {
        return Err(Error::Dimension(format!(
            "frozen probe index {bad} out of {k}"
        )));
    }
    let d = a.dim();
    let ta = T::from_f64(1.0 - t);
    let tb = T::from_f64(t);
    let mut out: Vec<T> = a
        .vectors()
        .data()
        .iter()
        .zip(b.vectors().data())
        .map(|(&x, &y)| ta * x + tb * y)
        .collect();
    for &row in frozen {
        out[row * d..(row + 1) * d].copy_from_slice(&a.vectors().data()[row * d..(row + 1) * d]);
    }
    LatentState::new(
        Tensor::new(vec![k, d], out)?,
        format!("lerp({}, {}, {t})", a.provenance(), b.provenance()),
    )
}
