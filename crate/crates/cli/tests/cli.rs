//! End-to-end exercises of the command-line surface: artifact formats,
//! determinism under fixed seeds, and exit-code classes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use morphreg::geometry::PointCloud;
use morphreg::io::{save_cloud, CloudFormat};
use morphreg::model::{save_checkpoint, ModelConfig, ModelParams};
use morphreg::Real;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_morphreg"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn morphreg")
}

fn assert_success(out: &Output) -> String {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tiny_model_overrides() -> Vec<String> {
    [
        "model.num_probes=4",
        "model.latent_dim=16",
        "model.encoder_layers=2",
        "model.decoder_layers=2",
        "model.heads=2",
        "model.embedder_widths=8,16",
        "model.ff_hidden=32",
        "model.final_mlp_widths=8,3",
        "model.density_radius=0.3",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_probes: 4,
        latent_dim: 16,
        encoder_layers: 2,
        decoder_layers: 2,
        heads: 2,
        embedder_widths: vec![8, 16],
        ff_hidden: 32,
        final_mlp_widths: vec![8, 3],
        density_radius: 0.3,
        ..ModelConfig::default()
    }
}

fn write_ring(path: &Path, n: usize, wobble: f64) {
    let rows: Vec<[Real; 3]> = (0..n)
        .map(|i| {
            let t = i as f64 / n as f64 * std::f64::consts::TAU;
            [
                (t.cos() * (1.0 + wobble * (3.0 * t).sin())) as Real,
                (t.sin() * (1.0 + wobble * (2.0 * t).cos())) as Real,
                (wobble * (5.0 * t).sin()) as Real,
            ]
        })
        .collect();
    let pc = PointCloud::from_rows(&rows).unwrap();
    save_cloud(&pc, path, CloudFormat::Xyz).unwrap();
}

fn write_tiny_checkpoint(path: &Path, surface: bool, seed: u64) {
    let mut cfg = tiny_config();
    cfg.surface_attention = surface;
    let params = ModelParams::<Real>::init(&cfg, seed).unwrap();
    save_checkpoint(&params, &cfg, path).unwrap();
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        Fixture {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn str(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }
}

#[test]
fn gen_data_is_deterministic_and_loadable() {
    let fx = Fixture::new();
    fs::write(
        fx.path("family.cfg"),
        "family.base = sphere\nfamily.points = 40\nfamily.members = 3\nfamily.amplitude = 0.2\nfamily.seed = 5\n",
    )
    .unwrap();
    let out1 = run(&[
        "gen-data",
        "--family-config",
        &fx.str("family.cfg"),
        "--out",
        &fx.str("d1"),
    ]);
    let summary = assert_success(&out1);
    assert!(summary.contains("3 members"), "summary: {summary}");
    let out2 = run(&[
        "gen-data",
        "--family-config",
        &fx.str("family.cfg"),
        "--out",
        &fx.str("d2"),
    ]);
    assert_success(&out2);
    for i in 0..3 {
        let a = fs::read(fx.path(&format!("d1/member_{i:04}.xyz"))).unwrap();
        let b = fs::read(fx.path(&format!("d2/member_{i:04}.xyz"))).unwrap();
        assert_eq!(a, b, "member {i} differs between identical runs");
    }
}

#[test]
fn train_writes_artifacts_and_is_seed_deterministic() {
    let fx = Fixture::new();
    fs::write(
        fx.path("run.cfg"),
        format!(
            "train.epochs = 2\ntrain.batch_size = 2\ntrain.learning_rate = 1e-3\n\
             train.seed = 3\nfamily.points = 24\nfamily.members = 4\n\
             family.amplitude = 0.2\nout.dir = {}\n",
            fx.str("run_a")
        ),
    )
    .unwrap();
    let mut args = vec![
        "train".to_string(),
        "--config".into(),
        fx.str("run.cfg"),
    ];
    for o in tiny_model_overrides() {
        args.push("--override".into());
        args.push(o);
    }
    let strs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    assert_success(&run(&strs));
    assert!(fx.path("run_a/model.ckpt").exists());
    assert!(fx.path("run_a/metrics.txt").exists());
    assert!(fx.path("run_a/config.txt").exists());

    // second run into another directory: identical metrics modulo wall time
    let mut args2 = args.clone();
    args2.push("--override".into());
    args2.push(format!("out.dir={}", fx.str("run_b")));
    let strs2: Vec<&str> = args2.iter().map(|s| s.as_str()).collect();
    assert_success(&run(&strs2));

    let strip = |text: &str| -> Vec<String> {
        text.lines()
            .filter(|l| !l.starts_with('#'))
            .map(|l| {
                let mut cols: Vec<&str> = l.split('\t').collect();
                cols.pop(); // wall time is informational
                cols.join("\t")
            })
            .collect()
    };
    let a = strip(&fs::read_to_string(fx.path("run_a/metrics.txt")).unwrap());
    let b = strip(&fs::read_to_string(fx.path("run_b/metrics.txt")).unwrap());
    assert_eq!(a, b, "same-seed training logs differ");
}

#[test]
fn register_is_deterministic_and_respects_formats() {
    let fx = Fixture::new();
    write_tiny_checkpoint(&fx.path("model.ckpt"), true, 9);
    write_ring(&fx.path("source.xyz"), 24, 0.0);
    write_ring(&fx.path("target.xyz"), 24, 0.2);

    for out_name in ["out1.xyz", "out2.xyz"] {
        let out = run(&[
            "register",
            "--ckpt",
            &fx.str("model.ckpt"),
            "--source",
            &fx.str("source.xyz"),
            "--target",
            &fx.str("target.xyz"),
            "--out",
            &fx.str(out_name),
        ]);
        let summary = assert_success(&out);
        assert!(summary.starts_with("register:"), "summary: {summary}");
    }
    let a = fs::read(fx.path("out1.xyz")).unwrap();
    let b = fs::read(fx.path("out2.xyz")).unwrap();
    assert_eq!(a, b, "register is not deterministic");

    // ply output works too
    assert_success(&run(&[
        "register",
        "--ckpt",
        &fx.str("model.ckpt"),
        "--source",
        &fx.str("source.xyz"),
        "--target",
        &fx.str("target.xyz"),
        "--out",
        &fx.str("out.ply"),
    ]));
    assert!(fx.path("out.ply").exists());
}

#[test]
fn match_writes_two_column_pairs() {
    let fx = Fixture::new();
    write_tiny_checkpoint(&fx.path("model.ckpt"), true, 9);
    write_ring(&fx.path("a.xyz"), 20, 0.1);
    write_ring(&fx.path("b.xyz"), 20, 0.25);
    let out = run(&[
        "match",
        "--ckpt",
        &fx.str("model.ckpt"),
        "--a",
        &fx.str("a.xyz"),
        "--b",
        &fx.str("b.xyz"),
        "--out",
        &fx.str("pairs.txt"),
    ]);
    let summary = assert_success(&out);
    assert!(summary.contains("direction="), "summary: {summary}");
    let text = fs::read_to_string(fx.path("pairs.txt")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 20);
    for (i, line) in lines.iter().enumerate() {
        let cols: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(cols.len(), 2);
        assert_eq!(cols[0].parse::<usize>().unwrap(), i);
        assert!(cols[1].parse::<usize>().unwrap() < 20);
    }
}

#[test]
fn eval_on_identical_maps_prints_zero_metrics() {
    let fx = Fixture::new();
    write_ring(&fx.path("target.xyz"), 16, 0.1);
    let pairs: String = (0..16).map(|i| format!("{i} {i}\n")).collect();
    fs::write(fx.path("pred.txt"), &pairs).unwrap();
    fs::write(fx.path("gt.txt"), &pairs).unwrap();
    let out = run(&[
        "eval",
        "--pred",
        &fx.str("pred.txt"),
        "--gt",
        &fx.str("gt.txt"),
        "--target",
        &fx.str("target.xyz"),
        "--out",
        &fx.str("report.txt"),
    ]);
    let summary = assert_success(&out);
    assert!(
        summary.contains("mean_geodesic=0.000000e0"),
        "summary: {summary}"
    );
    assert!(summary.contains("mean_eu=0.000000e0"), "summary: {summary}");
    let report = fs::read_to_string(fx.path("report.txt")).unwrap();
    assert!(report.contains("mean_geodesic\t0.000000000e0"));
}

#[test]
fn refine_dumps_trajectory() {
    let fx = Fixture::new();
    write_tiny_checkpoint(&fx.path("model.ckpt"), true, 9);
    write_ring(&fx.path("source.xyz"), 18, 0.0);
    write_ring(&fx.path("target.xyz"), 18, 0.2);
    let out = run(&[
        "refine",
        "--ckpt",
        &fx.str("model.ckpt"),
        "--source",
        &fx.str("source.xyz"),
        "--target",
        &fx.str("target.xyz"),
        "--steps",
        "5",
        "--lr",
        "5e-3",
        "--out",
        &fx.str("refined"),
    ]);
    assert_success(&out);
    let traj = fs::read_to_string(fx.path("refined/trajectory.txt")).unwrap();
    assert_eq!(traj.lines().filter(|l| !l.starts_with('#')).count(), 6);
    assert!(fx.path("refined/refined.xyz").exists());
}

#[test]
fn interpolate_writes_frame_sequence() {
    let fx = Fixture::new();
    write_tiny_checkpoint(&fx.path("model.ckpt"), true, 9);
    write_ring(&fx.path("source.xyz"), 16, 0.0);
    write_ring(&fx.path("t1.xyz"), 16, 0.15);
    write_ring(&fx.path("t2.xyz"), 16, 0.3);
    let region: String = (0..8).map(|i| format!("{i}\n")).collect();
    fs::write(fx.path("region.txt"), region).unwrap();
    let out = run(&[
        "interpolate",
        "--ckpt",
        &fx.str("model.ckpt"),
        "--source",
        &fx.str("source.xyz"),
        "--t1",
        &fx.str("t1.xyz"),
        "--t2",
        &fx.str("t2.xyz"),
        "--steps",
        "4",
        "--freeze-region",
        &fx.str("region.txt"),
        "--freeze-top",
        "2",
        "--out",
        &fx.str("frames"),
    ]);
    let summary = assert_success(&out);
    assert!(summary.contains("5 frames"), "summary: {summary}");
    assert!(summary.contains("2 frozen"), "summary: {summary}");
    for i in 0..5 {
        assert!(fx.path(&format!("frames/interp_{i:03}.xyz")).exists());
    }
}

#[test]
fn attn_export_writes_per_probe_fields() {
    let fx = Fixture::new();
    write_tiny_checkpoint(&fx.path("model.ckpt"), true, 9);
    write_ring(&fx.path("target.xyz"), 14, 0.1);
    let out = run(&[
        "attn-export",
        "--ckpt",
        &fx.str("model.ckpt"),
        "--target",
        &fx.str("target.xyz"),
        "--layer",
        "last",
        "--out",
        &fx.str("fields"),
    ]);
    assert_success(&out);
    for p in 0..4 {
        let text = fs::read_to_string(fx.path(&format!("fields/probe_{p:02}.txt"))).unwrap();
        let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(rows.len(), 14);
        assert_eq!(rows[0].split_whitespace().count(), 4);
    }
}

#[test]
fn attn_stability_compares_variants() {
    let fx = Fixture::new();
    write_tiny_checkpoint(&fx.path("surface.ckpt"), true, 9);
    write_tiny_checkpoint(&fx.path("classic.ckpt"), false, 9);
    write_ring(&fx.path("cloud.xyz"), 30, 0.2);
    let out = run(&[
        "attn-stability",
        "--ckpt-surface",
        &fx.str("surface.ckpt"),
        "--ckpt-classic",
        &fx.str("classic.ckpt"),
        "--cloud",
        &fx.str("cloud.xyz"),
        "--trials",
        "3",
        "--seed",
        "1",
        "--out",
        &fx.str("report.txt"),
    ]);
    let summary = assert_success(&out);
    assert!(summary.contains("surface_drift="), "summary: {summary}");
    assert!(fx.path("report.txt").exists());

    // swapped checkpoints are rejected as a configuration error
    let swapped = run(&[
        "attn-stability",
        "--ckpt-surface",
        &fx.str("classic.ckpt"),
        "--ckpt-classic",
        &fx.str("surface.ckpt"),
        "--cloud",
        &fx.str("cloud.xyz"),
        "--trials",
        "3",
    ]);
    assert_eq!(swapped.status.code(), Some(3));
}

#[test]
fn error_paths_use_the_documented_exit_codes() {
    let fx = Fixture::new();

    // usage error: unknown flag
    let usage = run(&["register", "--no-such-flag"]);
    assert_eq!(usage.status.code(), Some(2));

    // data error: missing input file
    write_tiny_checkpoint(&fx.path("model.ckpt"), true, 1);
    let missing = run(&[
        "register",
        "--ckpt",
        &fx.str("model.ckpt"),
        "--source",
        &fx.str("nope.xyz"),
        "--target",
        &fx.str("nope.xyz"),
        "--out",
        &fx.str("out.xyz"),
    ]);
    assert_eq!(missing.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&missing.stderr);
    assert_eq!(stderr.lines().count(), 1, "stderr: {stderr}");
    assert!(stderr.starts_with("error: data:"), "stderr: {stderr}");

    // data error: empty cloud file
    fs::write(fx.path("empty.xyz"), "").unwrap();
    write_ring(&fx.path("ok.xyz"), 10, 0.1);
    let empty = run(&[
        "register",
        "--ckpt",
        &fx.str("model.ckpt"),
        "--source",
        &fx.str("empty.xyz"),
        "--target",
        &fx.str("ok.xyz"),
        "--out",
        &fx.str("out.xyz"),
    ]);
    assert_eq!(empty.status.code(), Some(3));

    // version error: checkpoint from a future version
    let mut bytes = fs::read(fx.path("model.ckpt")).unwrap();
    bytes[7] = b'9';
    fs::write(fx.path("future.ckpt"), &bytes).unwrap();
    let future = run(&[
        "register",
        "--ckpt",
        &fx.str("future.ckpt"),
        "--source",
        &fx.str("ok.xyz"),
        "--target",
        &fx.str("ok.xyz"),
        "--out",
        &fx.str("out.xyz"),
    ]);
    assert_eq!(future.status.code(), Some(5));
    let stderr = String::from_utf8_lossy(&future.stderr);
    assert!(stderr.starts_with("error: version:"), "stderr: {stderr}");
}
