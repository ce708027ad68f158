//! Dataset pairing, y-axis rotation augmentation, the three loss regimes
//! (full index-wise supervision, sparse supervision plus a Chamfer term,
//! and unsupervised Chamfer), and the training loop.
//!
//! Batch members are evaluated in parallel, each on its own tape, and
//! their gradients are reduced in member order before the single Adam
//! step, so a run is bit-reproducible from its seed regardless of thread
//! scheduling.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdamConfig, AdamState, Tape, Var};
use crate::error::Error;
use crate::geometry::{chamfer_graph, estimate_areas, PointCloud};
use crate::kernels;
use crate::model::{decode_graph, encode_graph, save_checkpoint, ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::Result;

/// Which loss drives training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossRegime {
    /// Mean squared index-wise distance (clouds share canonical ordering).
    Supervised,
    /// Index-wise loss restricted to a random subset of points, plus
    /// lambda times the Chamfer distance over all points.
    Sparse { fraction: f64, lambda: f64 },
    /// Chamfer distance only; no correspondence needed.
    Unsupervised,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub augment: bool,
    pub regime: LossRegime,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 disables periodic
    /// checkpoints; the caller still owns the final save).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 8,
            learning_rate: 1e-4,
            augment: true,
            regime: LossRegime::Supervised,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if let LossRegime::Sparse { fraction, lambda } = self.regime {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::Config(format!(
                    "sparse fraction must be in (0, 1], got {fraction}"
                )));
            }
            if !(lambda >= 0.0) || !lambda.is_finite() {
                return Err(Error::Config(format!(
                    "sparse lambda must be non-negative, got {lambda}"
                )));
            }
        }
        Ok(())
    }
}

/// Uniform sampler over ordered pairs of distinct dataset indices; both
/// (a, b) and (b, a) occur. A single-cloud dataset pairs the cloud with
/// itself.
pub struct PairSampler {
    n: usize,
    rng: ChaCha8Rng,
}

impl PairSampler {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Contract("empty dataset".into()));
        }
        Ok(PairSampler {
            n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn next_pair(&mut self) -> (usize, usize) {
        if self.n == 1 {
            return (0, 0);
        }
        let a = self.rng.gen_range(0..self.n);
        let mut b = self.rng.gen_range(0..self.n - 1);
        if b >= a {
            b += 1;
        }
        (a, b)
    }
}

/// Rotation by a uniform angle in [0, 2pi) about the second coordinate
/// axis. Each call draws its own angle, so a source/target pair gets
/// independent rotations.
pub fn augment<T: Scalar, R: Rng>(pc: &PointCloud<T>, rng: &mut R) -> PointCloud<T> {
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    rotate_y(pc, theta)
}

/// Rotation about the y axis by a fixed angle.
pub fn rotate_y<T: Scalar>(pc: &PointCloud<T>, theta: f64) -> PointCloud<T> {
    let (sin, cos) = theta.sin_cos();
    let mut out = Vec::with_capacity(pc.points().len());
    for p in pc.points().chunks_exact(3) {
        let (x, y, z) = (p[0].as_f64(), p[1].as_f64(), p[2].as_f64());
        out.push(T::from_f64(x * cos + z * sin));
        out.push(T::from_f64(y));
        out.push(T::from_f64(-x * sin + z * cos));
    }
    pc.with_points(out).expect("same size")
}

// ── loss graphs ───────────────────────────────────────────────────────

/// Mean over points of the squared Euclidean distance between the decoder
/// output and the target coordinates (rows correspond index-wise).
pub fn supervised_loss_graph<T: Scalar>(
    tape: &mut Tape<T>,
    output: Var,
    target_pts: Var,
) -> Result<Var> {
    let (n_out, n_tgt) = (tape.shape_of(output)[0], tape.shape_of(target_pts)[0]);
    if n_out != n_tgt {
        return Err(Error::Contract(format!(
            "supervised loss needs index-wise correspondence: {n_out} vs {n_tgt} points"
        )));
    }
    let diff = tape.sub(output, target_pts)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.reduce_sum(sq);
    Ok(tape.scale(total, T::from_f64(1.0 / n_out as f64)))
}

/// Supervised loss restricted to `mask` rows, plus `lambda` times the
/// Chamfer distance between target and output over all points.
pub fn sparse_loss_graph<T: Scalar>(
    tape: &mut Tape<T>,
    output: Var,
    target_pts: Var,
    mask: &[usize],
    lambda: f64,
) -> Result<Var> {
    if mask.is_empty() {
        return Err(Error::Contract("sparse loss mask is empty".into()));
    }
    let out_rows = tape.gather_rows(output, mask)?;
    let tgt_rows = tape.gather_rows(target_pts, mask)?;
    let labeled = supervised_loss_graph(tape, out_rows, tgt_rows)?;
    if lambda == 0.0 {
        return Ok(labeled);
    }
    let cham = chamfer_graph(tape, target_pts, output)?;
    let weighted = tape.scale(cham, T::from_f64(lambda));
    tape.add(labeled, weighted)
}

/// Chamfer distance between the target and the decoder output.
pub fn unsupervised_loss_graph<T: Scalar>(
    tape: &mut Tape<T>,
    output: Var,
    target_pts: Var,
) -> Result<Var> {
    chamfer_graph(tape, target_pts, output)
}

/// Draw `ceil(fraction * n)` distinct indices.
pub fn sample_mask<R: Rng>(n: usize, fraction: f64, rng: &mut R) -> Vec<usize> {
    let count = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool
}

// ── whole-pipeline losses ─────────────────────────────────────────────

fn pipeline_loss_graph<T: Scalar>(
    params: &ModelParams<T>,
    model_cfg: &ModelConfig,
    source: &PointCloud<T>,
    target: &PointCloud<T>,
    regime: LossRegime,
    mask: Option<&[usize]>,
    trainable: bool,
) -> Result<(Tape<T>, Var, crate::model::ModelVars)> {
    if matches!(regime, LossRegime::Supervised | LossRegime::Sparse { .. })
        && source.len() != target.len()
    {
        return Err(Error::Contract(format!(
            "supervised regimes need equally sized clouds, got {} and {}",
            source.len(),
            target.len()
        )));
    }
    let radius = T::from_f64(model_cfg.density_radius);
    let target_areas = model_cfg
        .surface_attention
        .then(|| estimate_areas(target, radius))
        .transpose()?;
    let source_areas = model_cfg
        .surface_attention
        .then(|| estimate_areas(source, radius))
        .transpose()?;

    let mut tape = Tape::new();
    let vars = params.lift(&mut tape, trainable);
    let tgt = tape.leaf_matrix(target.len(), 3, target.points(), false);
    let src = tape.leaf_matrix(source.len(), 3, source.points(), false);
    let enc = encode_graph(&mut tape, tgt, target_areas.as_ref(), &vars, model_cfg)?;
    let dec = decode_graph(&mut tape, src, source_areas.as_ref(), enc.latents, &vars, model_cfg)?;
    let loss = match regime {
        LossRegime::Supervised => supervised_loss_graph(&mut tape, dec.output, tgt)?,
        LossRegime::Sparse { lambda, .. } => {
            let mask = mask.ok_or_else(|| Error::Contract("sparse regime needs a mask".into()))?;
            sparse_loss_graph(&mut tape, dec.output, tgt, mask, lambda)?
        }
        LossRegime::Unsupervised => unsupervised_loss_graph(&mut tape, dec.output, tgt)?,
    };
    Ok((tape, loss, vars))
}

/// Eq.-style reconstruction loss of the full pipeline on one pair.
pub fn supervised_loss<T: Scalar>(
    params: &ModelParams<T>,
    model_cfg: &ModelConfig,
    source: &PointCloud<T>,
    target: &PointCloud<T>,
) -> Result<f64> {
    let (tape, loss, _) = pipeline_loss_graph(
        params,
        model_cfg,
        source,
        target,
        LossRegime::Supervised,
        None,
        false,
    )?;
    Ok(tape.value(loss)[0].as_f64())
}

pub fn sparse_loss<T: Scalar>(
    params: &ModelParams<T>,
    model_cfg: &ModelConfig,
    source: &PointCloud<T>,
    target: &PointCloud<T>,
    mask: &[usize],
    lambda: f64,
) -> Result<f64> {
    let (tape, loss, _) = pipeline_loss_graph(
        params,
        model_cfg,
        source,
        target,
        LossRegime::Sparse {
            fraction: 1.0,
            lambda,
        },
        Some(mask),
        false,
    )?;
    Ok(tape.value(loss)[0].as_f64())
}

pub fn unsupervised_loss<T: Scalar>(
    params: &ModelParams<T>,
    model_cfg: &ModelConfig,
    source: &PointCloud<T>,
    target: &PointCloud<T>,
) -> Result<f64> {
    let (tape, loss, _) = pipeline_loss_graph(
        params,
        model_cfg,
        source,
        target,
        LossRegime::Unsupervised,
        None,
        false,
    )?;
    Ok(tape.value(loss)[0].as_f64())
}

// ── metrics ───────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub wall_time_s: f64,
}

/// Newline-delimited tabular log: one record per optimizer step. The
/// wall-time column is informational and excluded from determinism
/// comparisons; every other column replays exactly from the seed.
#[derive(Clone, Debug, Default)]
pub struct MetricsLog {
    pub records: Vec<MetricsRecord>,
}

impl MetricsLog {
    pub fn to_text(&self) -> String {
        let mut out = String::from("# epoch\tstep\tloss\twall_time_s\n");
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{:.17e}\t{:.3}\n",
                r.epoch, r.step, r.loss, r.wall_time_s
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::Format(format!(
                    "metrics line {}: expected 4 fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let parse_err =
                |what: &str| Error::Format(format!("metrics line {}: bad {what}", lineno + 1));
            records.push(MetricsRecord {
                epoch: fields[0].parse().map_err(|_| parse_err("epoch"))?,
                step: fields[1].parse().map_err(|_| parse_err("step"))?,
                loss: fields[2].parse().map_err(|_| parse_err("loss"))?,
                wall_time_s: fields[3].parse().map_err(|_| parse_err("wall_time"))?,
            });
        }
        Ok(MetricsLog { records })
    }

    /// Equality on the replayable columns (epoch, step, loss).
    pub fn deterministic_eq(&self, other: &Self) -> bool {
        self.records.len() == other.records.len()
            && self
                .records
                .iter()
                .zip(&other.records)
                .all(|(a, b)| a.epoch == b.epoch && a.step == b.step && a.loss == b.loss)
    }
}

// ── training loop ─────────────────────────────────────────────────────

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn member_seed(seed: u64, epoch: usize, step: usize, member: usize) -> u64 {
    splitmix64(
        seed ^ splitmix64(epoch as u64 ^ splitmix64((step as u64) << 20 ^ (member as u64 + 1))),
    )
}

struct MemberOutcome<T> {
    loss: f64,
    grads: Vec<Vec<T>>,
}

/// Per-epoch progress snapshot handed to the training callback.
#[derive(Clone, Copy, Debug)]
pub struct EpochInfo {
    pub epoch: usize,
    pub mean_loss: f64,
    pub elapsed_s: f64,
}

/// Runs `epochs` x `ceil(dataset / batch)` optimizer steps of
/// (sample pair, augment, loss, backward, Adam), returning the trained
/// parameters and the per-step metrics. Deterministic per seed. A
/// non-finite loss aborts with the offending batch's seed state.
pub fn train<T: Scalar>(
    dataset: &[PointCloud<T>],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(ModelParams<T>, MetricsLog)> {
    train_with_progress(dataset, model_cfg, train_cfg, checkpoint_dir, &mut |_| {})
}

/// As [`train`], invoking `on_epoch` after every epoch.
pub fn train_with_progress<T: Scalar>(
    dataset: &[PointCloud<T>],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(EpochInfo),
) -> Result<(ModelParams<T>, MetricsLog)> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Contract("training dataset is empty".into()));
    }
    if matches!(
        train_cfg.regime,
        LossRegime::Supervised | LossRegime::Sparse { .. }
    ) {
        let n0 = dataset[0].len();
        if dataset.iter().any(|pc| pc.len() != n0) {
            return Err(Error::Contract(
                "supervised regimes need equally sized clouds across the dataset".into(),
            ));
        }
    }

    let mut params = ModelParams::<T>::init(model_cfg, train_cfg.seed)?;
    let mut log = MetricsLog::default();
    if train_cfg.epochs == 0 {
        return Ok((params, log));
    }

    let mut adam = AdamState::new(AdamConfig::with_lr(T::from_f64(train_cfg.learning_rate)));
    let mut sampler = PairSampler::new(dataset.len(), splitmix64(train_cfg.seed))?;
    let steps_per_epoch = dataset.len().div_ceil(train_cfg.batch_size);
    let start = Instant::now();
    let mut global_step = 0usize;

    for epoch in 0..train_cfg.epochs {
        for _ in 0..steps_per_epoch {
            let pairs: Vec<(usize, usize)> =
                (0..train_cfg.batch_size).map(|_| sampler.next_pair()).collect();

            let outcomes: Vec<Result<MemberOutcome<T>>> =
                kernels::map_indexed(pairs.len(), |member| {
                    let (src_idx, tgt_idx) = pairs[member];
                    let mseed = member_seed(train_cfg.seed, epoch, global_step, member);
                    let mut rng = ChaCha8Rng::seed_from_u64(mseed);
                    let (source, target) = if train_cfg.augment {
                        (
                            augment(&dataset[src_idx], &mut rng),
                            augment(&dataset[tgt_idx], &mut rng),
                        )
                    } else {
                        (dataset[src_idx].clone(), dataset[tgt_idx].clone())
                    };
                    let mask = match train_cfg.regime {
                        LossRegime::Sparse { fraction, .. } => {
                            Some(sample_mask(target.len(), fraction, &mut rng))
                        }
                        _ => None,
                    };
                    let (mut tape, loss, vars) = pipeline_loss_graph(
                        &params,
                        model_cfg,
                        &source,
                        &target,
                        train_cfg.regime,
                        mask.as_deref(),
                        true,
                    )?;
                    let loss_value = tape.value(loss)[0].as_f64();
                    tape.backward(loss)?;
                    let grads = vars
                        .ordered_vars()
                        .iter()
                        .map(|&v| tape.grad_or_zeros(v))
                        .collect();
                    Ok(MemberOutcome {
                        loss: loss_value,
                        grads,
                    })
                });

            let mut batch_loss = 0.0f64;
            let mut summed: Option<Vec<Vec<T>>> = None;
            for (member, outcome) in outcomes.into_iter().enumerate() {
                let outcome = outcome.map_err(|e| {
                    let mseed = member_seed(train_cfg.seed, epoch, global_step, member);
                    Error::NonFinite(format!(
                        "training aborted at epoch {epoch} step {global_step} member {member} \
                         (pair {:?}, member seed {mseed:#x}): {e}",
                        pairs[member]
                    ))
                })?;
                if !outcome.loss.is_finite() {
                    let mseed = member_seed(train_cfg.seed, epoch, global_step, member);
                    return Err(Error::NonFinite(format!(
                        "loss diverged at epoch {epoch} step {global_step} member {member} \
                         (pair {:?}, member seed {mseed:#x})",
                        pairs[member]
                    )));
                }
                batch_loss += outcome.loss;
                match &mut summed {
                    None => summed = Some(outcome.grads),
                    Some(acc) => {
                        for (dst, src) in acc.iter_mut().zip(&outcome.grads) {
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d = *d + s;
                            }
                        }
                    }
                }
            }
            batch_loss /= pairs.len() as f64;

            let mut grads = summed.expect("at least one member");
            let inv = T::from_f64(1.0 / pairs.len() as f64);
            for g in grads.iter_mut() {
                for v in g.iter_mut() {
                    *v = *v * inv;
                }
            }

            adam.begin_step(&grads)?;
            let mut slot = 0usize;
            // traversal order matches ordered_vars, so slots line up
            params.for_each_mut(&mut |_, t| {
                adam.update_slot(slot, t.data_mut(), &grads[slot]);
                slot += 1;
            });

            log.records.push(MetricsRecord {
                epoch,
                step: global_step,
                loss: batch_loss,
                wall_time_s: start.elapsed().as_secs_f64(),
            });
            global_step += 1;
        }

        if train_cfg.checkpoint_every > 0
            && (epoch + 1) % train_cfg.checkpoint_every == 0
        {
            if let Some(dir) = checkpoint_dir {
                let path = dir.join(format!("epoch_{:04}.ckpt", epoch + 1));
                save_checkpoint(&params, model_cfg, path)?;
            }
        }

        let recent = &log.records[log.records.len() - steps_per_epoch..];
        let mean_loss = recent.iter().map(|r| r.loss).sum::<f64>() / recent.len() as f64;
        on_epoch(EpochInfo {
            epoch,
            mean_loss,
            elapsed_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok((params, log))
}
