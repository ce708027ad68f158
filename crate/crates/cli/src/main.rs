//! Command-line surface for the registration pipeline: training, single
//! registrations, bidirectional matching, evaluation, test-time
//! refinement, latent interpolation, attention stability reports,
//! synthetic data generation, and attention-field export.
//!
//! Each command validates its inputs, prints one summary line on success,
//! and exits non-zero with a single-line `error: <class>: <message>` on
//! failure (2 usage, 3 data, 4 numeric, 5 version/precision mismatch).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use morphreg::evaluate::{evaluate, EVAL_KNN};
use morphreg::geometry::{chamfer_value, PointCloud, ResampleStrategy};
use morphreg::io::{
    self, generate_family, load_cloud, load_correspondence, save_cloud, save_correspondence,
    CloudFormat, RunConfig,
};
use morphreg::matching::{match_clouds, MatchDirection};
use morphreg::model::{
    decode, decode_with_maps, encode, load_checkpoint, register, save_checkpoint,
};
use morphreg::refine::{interpolate_latents, refine, RefineConfig};
use morphreg::stability::{attention_stability, probes_by_region, MapLayer};
use morphreg::training::train_with_progress;
use morphreg::{Error, Real};

#[derive(Parser)]
#[command(
    name = "morphreg",
    about = "Non-rigid point-cloud registration with density-aware surface attention",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// key=value assignments applied on top of the file.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Register a source cloud onto a target cloud.
    Register {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Refine the latents before decoding (100 steps, lr 5e-3).
        #[arg(long)]
        refine: bool,
    },
    /// Dense correspondence between two clouds, direction chosen by
    /// Chamfer distance.
    Match {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        refine: bool,
    },
    /// Score a predicted correspondence against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Standalone latent refinement with a trajectory dump.
    Refine {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 5e-3)]
        lr: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a sweep of latent interpolations between two targets.
    Interpolate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        t1: PathBuf,
        #[arg(long)]
        t2: PathBuf,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        /// File of source point indices; probes attending to this region
        /// keep the first target's latents.
        #[arg(long = "freeze-region")]
        freeze_region: Option<PathBuf>,
        /// How many top-ranked probes to freeze for the region.
        #[arg(long = "freeze-top", default_value_t = 8)]
        freeze_top: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired attention-drift comparison of surface vs classic variants.
    AttnStability {
        #[arg(long = "ckpt-surface")]
        ckpt_surface: PathBuf,
        #[arg(long = "ckpt-classic")]
        ckpt_classic: PathBuf,
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Fraction of points kept by each density-biased resampling.
        #[arg(long = "keep-fraction", default_value_t = 0.5)]
        keep_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic deformable family with exact correspondence.
    GenData {
        #[arg(long = "family-config")]
        family_config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export per-probe decoder attention fields over a cloud.
    AttnExport {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, value_parser = parse_layer)]
        layer: MapLayer,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_layer(s: &str) -> Result<MapLayer, String> {
    match s {
        "first" => Ok(MapLayer::First),
        "last" => Ok(MapLayer::Last),
        other => Err(format!("expected 'first' or 'last', got {other:?}")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            let class = match &err {
                Error::NonFinite(_) => "numeric",
                Error::VersionMismatch { .. } | Error::PrecisionMismatch { .. } => "version",
                _ => "data",
            };
            let msg = err.to_string().replace('\n', " ");
            eprintln!("error: {class}: {msg}");
            ExitCode::from(match class {
                "numeric" => 4,
                "version" => 5,
                _ => 3,
            })
        }
    }
}

fn load_normalized(path: &Path) -> Result<PointCloud<Real>, Error> {
    load_cloud::<Real>(path)?.normalize()
}

fn run(command: Command) -> Result<String, Error> {
    match command {
        Command::Train { config, overrides } => cmd_train(&config, &overrides),
        Command::Register {
            ckpt,
            source,
            target,
            out,
            refine,
        } => cmd_register(&ckpt, &source, &target, &out, refine),
        Command::Match {
            ckpt,
            a,
            b,
            out,
            refine,
        } => cmd_match(&ckpt, &a, &b, &out, refine),
        Command::Eval {
            pred,
            gt,
            target,
            out,
        } => cmd_eval(&pred, &gt, &target, &out),
        Command::Refine {
            ckpt,
            source,
            target,
            steps,
            lr,
            out,
        } => cmd_refine(&ckpt, &source, &target, steps, lr, &out),
        Command::Interpolate {
            ckpt,
            source,
            t1,
            t2,
            steps,
            freeze_region,
            freeze_top,
            out,
        } => cmd_interpolate(
            &ckpt,
            &source,
            &t1,
            &t2,
            steps,
            freeze_region.as_deref(),
            freeze_top,
            &out,
        ),
        Command::AttnStability {
            ckpt_surface,
            ckpt_classic,
            cloud,
            trials,
            keep_fraction,
            seed,
            out,
        } => cmd_stability(
            &ckpt_surface,
            &ckpt_classic,
            &cloud,
            trials,
            keep_fraction,
            seed,
            out.as_deref(),
        ),
        Command::GenData { family_config, out } => cmd_gen_data(&family_config, &out),
        Command::AttnExport {
            ckpt,
            target,
            layer,
            out,
        } => cmd_attn_export(&ckpt, &target, layer, &out),
    }
}

fn cmd_train(config_path: &Path, overrides: &[String]) -> Result<String, Error> {
    let text = fs::read_to_string(config_path)?;
    let mut cfg = RunConfig::parse(&text)?;
    for assignment in overrides {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        cfg.set(key.trim(), value)?;
    }
    cfg.validate()?;

    let dataset: Vec<PointCloud<Real>> = match &cfg.data_dir {
        Some(dir) => io::load_cloud_dir::<Real>(dir)?
            .into_iter()
            .map(|pc| pc.normalize())
            .collect::<Result<_, _>>()?,
        None => generate_family(&cfg.family)?,
    };

    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.txt"), cfg.dump())?;

    let (params, log) = train_with_progress(
        &dataset,
        &cfg.model,
        &cfg.train,
        Some(&cfg.out_dir),
        &mut |info| {
            eprintln!(
                "epoch {:>4}  loss {:.6e}  elapsed {:.1}s",
                info.epoch, info.mean_loss, info.elapsed_s
            );
        },
    )?;
    let ckpt_path = cfg.out_dir.join("model.ckpt");
    save_checkpoint(&params, &cfg.model, &ckpt_path)?;
    fs::write(cfg.out_dir.join("metrics.txt"), log.to_text())?;

    let final_loss = log.records.last().map(|r| r.loss).unwrap_or(f64::NAN);
    Ok(format!(
        "train: {} clouds, {} epochs, {} steps, final_loss={:.6e} -> {}",
        dataset.len(),
        cfg.train.epochs,
        log.records.len(),
        final_loss,
        cfg.out_dir.display()
    ))
}

/// Registered outputs live on the normalized target geometry; write them
/// back in the target's original frame.
fn denormalize_into_frame(
    out: &PointCloud<Real>,
    target: &PointCloud<Real>,
) -> Result<PointCloud<Real>, Error> {
    match target.norm_meta() {
        Some(meta) => {
            let scale = meta.scale;
            let c = meta.centroid;
            let pts: Vec<Real> = out
                .points()
                .chunks_exact(3)
                .flat_map(|p| [p[0] * scale + c[0], p[1] * scale + c[1], p[2] * scale + c[2]])
                .collect();
            out.with_points(pts)
        }
        None => Ok(out.clone()),
    }
}

fn cmd_register(
    ckpt: &Path,
    source: &Path,
    target: &Path,
    out: &Path,
    do_refine: bool,
) -> Result<String, Error> {
    let (params, cfg) = load_checkpoint::<Real>(ckpt)?;
    let src = load_normalized(source)?;
    let tgt = load_normalized(target)?;
    let registered = if do_refine {
        let latents = encode(&params, &cfg, &tgt)?;
        refine(&params, &cfg, &src, &tgt, &latents, &RefineConfig::default())?.registration
    } else {
        register(&params, &cfg, &src, &tgt)?
    };
    let chamfer = chamfer_value(registered.points(), tgt.points())?;
    let framed = denormalize_into_frame(&registered, &tgt)?;
    save_cloud(&framed, out, CloudFormat::from_extension(out)?)?;
    Ok(format!(
        "register: {} -> {} points, chamfer={:.6e}{} -> {}",
        src.len(),
        tgt.len(),
        chamfer,
        if do_refine { " (refined)" } else { "" },
        out.display()
    ))
}

fn cmd_match(
    ckpt: &Path,
    a: &Path,
    b: &Path,
    out: &Path,
    do_refine: bool,
) -> Result<String, Error> {
    let (params, cfg) = load_checkpoint::<Real>(ckpt)?;
    let ca = load_normalized(a)?;
    let cb = load_normalized(b)?;
    let refine_cfg = do_refine.then(RefineConfig::default);
    let outcome = match_clouds(&params, &cfg, &ca, &cb, refine_cfg.as_ref())?;
    save_correspondence(&outcome.correspondence, out)?;
    let direction = match outcome.direction {
        MatchDirection::AToB => "a->b",
        MatchDirection::BToA => "b->a",
    };
    Ok(format!(
        "match: {} points, direction={direction}, chamfer(a->b)={:.6e}, chamfer(b->a)={:.6e} -> {}",
        outcome.correspondence.len(),
        outcome.chamfer_a_to_b,
        outcome.chamfer_b_to_a,
        out.display()
    ))
}

fn cmd_eval(pred: &Path, gt: &Path, target: &Path, out: &Path) -> Result<String, Error> {
    let tgt = load_normalized(target)?;
    let pred_map = load_correspondence(pred, tgt.len())?;
    let gt_map = load_correspondence(gt, tgt.len())?;
    let report = evaluate::<Real>(&pred_map, None, &gt_map, &tgt, EVAL_KNN)?;
    fs::write(out, report.to_text())?;
    Ok(format!(
        "eval: mean_geodesic={:.6e} chamfer={:.6e} max_eu={:.6e} mean_eu={:.6e}{} -> {}",
        report.mean_geodesic,
        report.chamfer,
        report.max_euclidean,
        report.mean_euclidean,
        if report.geodesic_fallback {
            " (geodesic fallback: disconnected graph)"
        } else {
            ""
        },
        out.display()
    ))
}

fn cmd_refine(
    ckpt: &Path,
    source: &Path,
    target: &Path,
    steps: usize,
    lr: f64,
    out: &Path,
) -> Result<String, Error> {
    let (params, cfg) = load_checkpoint::<Real>(ckpt)?;
    let src = load_normalized(source)?;
    let tgt = load_normalized(target)?;
    let latents = encode(&params, &cfg, &tgt)?;
    let result = refine(
        &params,
        &cfg,
        &src,
        &tgt,
        &latents,
        &RefineConfig {
            steps,
            learning_rate: lr,
        },
    )?;
    fs::create_dir_all(out)?;
    let mut traj = String::from("# step\tchamfer\n");
    for (i, v) in result.trajectory.iter().enumerate() {
        traj.push_str(&format!("{i}\t{v:.9e}\n"));
    }
    fs::write(out.join("trajectory.txt"), traj)?;
    let framed = denormalize_into_frame(&result.registration, &tgt)?;
    save_cloud(&framed, &out.join("refined.xyz"), CloudFormat::Xyz)?;
    Ok(format!(
        "refine: steps={steps} lr={lr} chamfer {:.6e} -> {:.6e} (best at step {}) -> {}",
        result.trajectory.first().unwrap(),
        result.trajectory[result.best_step],
        result.best_step,
        out.display()
    ))
}

#[allow(clippy::too_many_arguments)]
fn cmd_interpolate(
    ckpt: &Path,
    source: &Path,
    t1: &Path,
    t2: &Path,
    steps: usize,
    freeze_region: Option<&Path>,
    freeze_top: usize,
    out: &Path,
) -> Result<String, Error> {
    if steps == 0 {
        return Err(Error::Config("interpolation needs at least 1 step".into()));
    }
    let (params, cfg) = load_checkpoint::<Real>(ckpt)?;
    let src = load_normalized(source)?;
    let c1 = load_normalized(t1)?;
    let c2 = load_normalized(t2)?;
    let ls1 = encode(&params, &cfg, &c1)?;
    let ls2 = encode(&params, &cfg, &c2)?;

    let frozen: Vec<usize> = match freeze_region {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            let mut region = Vec::new();
            for (idx, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                region.push(line.parse().map_err(|_| {
                    Error::Format(format!("{}:{}: bad point index", path.display(), idx + 1))
                })?);
            }
            let ranked = probes_by_region(&params, &cfg, &src, &ls1, &region, MapLayer::Last)?;
            ranked.into_iter().take(freeze_top).collect()
        }
        None => Vec::new(),
    };

    fs::create_dir_all(out)?;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let blended = interpolate_latents(&ls1, &ls2, t, &frozen)?;
        let decoded = decode(&params, &cfg, &src, &blended)?;
        save_cloud(
            &decoded,
            &out.join(format!("interp_{i:03}.xyz")),
            CloudFormat::Xyz,
        )?;
    }
    Ok(format!(
        "interpolate: {} frames, {} frozen probes -> {}",
        steps + 1,
        frozen.len(),
        out.display()
    ))
}

#[allow(clippy::too_many_arguments)]
fn cmd_stability(
    ckpt_surface: &Path,
    ckpt_classic: &Path,
    cloud: &Path,
    trials: usize,
    keep_fraction: f64,
    seed: u64,
    out: Option<&Path>,
) -> Result<String, Error> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "keep-fraction must be in (0, 1], got {keep_fraction}"
        )));
    }
    let (surface_params, surface_cfg) = load_checkpoint::<Real>(ckpt_surface)?;
    let (classic_params, classic_cfg) = load_checkpoint::<Real>(ckpt_classic)?;
    if !surface_cfg.surface_attention {
        return Err(Error::Config(
            "--ckpt-surface model was not trained with surface attention".into(),
        ));
    }
    if classic_cfg.surface_attention {
        return Err(Error::Config(
            "--ckpt-classic model was trained with surface attention".into(),
        ));
    }
    let pc = load_normalized(cloud)?;
    let keep = ((pc.len() as f64 * keep_fraction).round() as usize).clamp(1, pc.len());
    let report = attention_stability(
        (&surface_params, &surface_cfg),
        (&classic_params, &classic_cfg),
        &pc,
        ResampleStrategy::DensityBiased {
            radius: surface_cfg.density_radius as Real,
        },
        keep,
        trials,
        MapLayer::Last,
        seed,
    )?;
    if let Some(path) = out {
        fs::write(path, report.to_text())?;
    }
    Ok(format!(
        "attn-stability: trials={trials} keep={keep} surface_drift={:.6} classic_drift={:.6} diff={:.6} p={:.4e}",
        report.surface_mean, report.classic_mean, report.mean_difference, report.p_value
    ))
}

fn cmd_gen_data(family_config: &Path, out: &Path) -> Result<String, Error> {
    let text = fs::read_to_string(family_config)?;
    let cfg = RunConfig::parse(&text)?;
    let family = generate_family::<Real>(&cfg.family)?;
    fs::create_dir_all(out)?;
    for (i, pc) in family.iter().enumerate() {
        save_cloud(pc, &out.join(format!("member_{i:04}.xyz")), CloudFormat::Xyz)?;
    }
    Ok(format!(
        "gen-data: {} members x {} points ({}) -> {}",
        family.len(),
        cfg.family.points,
        cfg.family.base.name(),
        out.display()
    ))
}

fn cmd_attn_export(
    ckpt: &Path,
    target: &Path,
    layer: MapLayer,
    out: &Path,
) -> Result<String, Error> {
    let (params, cfg) = load_checkpoint::<Real>(ckpt)?;
    let tgt = load_normalized(target)?;
    let latents = encode(&params, &cfg, &tgt)?;
    let (_, maps) = decode_with_maps(&params, &cfg, &tgt, &latents)?;
    let heads = match layer {
        MapLayer::First => &maps[0],
        MapLayer::Last => maps.last().expect("at least one layer"),
    };
    // head-averaged field per probe over the cloud's points
    let probes = heads[0].shape()[1];
    let n = tgt.len();
    let mut field = vec![0.0f64; n * probes];
    for h in heads {
        for (acc, v) in field.iter_mut().zip(h.data()) {
            *acc += (*v) as f64;
        }
    }
    let inv = 1.0 / heads.len() as f64;
    fs::create_dir_all(out)?;
    for p in 0..probes {
        let mut text = String::from("# x y z attention\n");
        for i in 0..n {
            let pt = tgt.point(i);
            text.push_str(&format!(
                "{:.8e} {:.8e} {:.8e} {:.8e}\n",
                pt[0] as f64,
                pt[1] as f64,
                pt[2] as f64,
                field[i * probes + p] * inv
            ));
        }
        fs::write(out.join(format!("probe_{p:02}.txt")), text)?;
    }
    Ok(format!(
        "attn-export: {} probes x {} points -> {}",
        probes,
        n,
        out.display()
    ))
}
