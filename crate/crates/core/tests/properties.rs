//! Property tests for the algebraic invariants: softmax normalization and
//! weight-rescaling, Chamfer symmetry, normalization round-trips, file
//! format round-trips, and augmentation rigidity.

use morphreg::autodiff::Tape;
use morphreg::geometry::{chamfer_value, PointCloud};
use morphreg::io::{load_cloud, save_cloud, CloudFormat};
use morphreg::training::rotate_y;
use proptest::prelude::*;

fn cloud_strategy(max_points: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(
        (
            -10.0f64..10.0,
            -10.0f64..10.0,
            -10.0f64..10.0,
        )
            .prop_map(|(x, y, z)| [x, y, z]),
        2..max_points,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weighted_softmax_rows_are_stochastic_and_scale_free(
        logits in prop::collection::vec(-30.0f64..30.0, 12),
        weights in prop::collection::vec(0.01f64..1.0, 4),
        scale in 0.001f64..1000.0,
    ) {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf_matrix(3, 4, &logits, false);
        let s1 = tape.weighted_softmax(x, &weights).unwrap();
        for row in tape.value(s1).chunks_exact(4) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6, "row sum {}", sum);
        }
        let scaled: Vec<f64> = weights.iter().map(|w| w * scale).collect();
        let s2 = tape.weighted_softmax(x, &scaled).unwrap();
        for (a, b) in tape.value(s1).iter().zip(tape.value(s2)) {
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
    }

    #[test]
    fn uniform_weights_reduce_to_plain_softmax(
        logits in prop::collection::vec(-20.0f64..20.0, 10),
        w in 0.05f64..1.0,
    ) {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf_matrix(2, 5, &logits, false);
        let plain = tape.softmax_rows(x).unwrap();
        let weighted = tape.weighted_softmax(x, &vec![w; 5]).unwrap();
        for (a, b) in tape.value(plain).iter().zip(tape.value(weighted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn chamfer_is_symmetric_and_zero_on_permutations(
        rows_a in cloud_strategy(24),
        rows_b in cloud_strategy(24),
    ) {
        let a: Vec<f64> = rows_a.iter().flatten().copied().collect();
        let b: Vec<f64> = rows_b.iter().flatten().copied().collect();
        let ab = chamfer_value(&a, &b).unwrap();
        let ba = chamfer_value(&b, &a).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!(ab >= 0.0);

        // reversal is a set-preserving permutation
        let mut rev = rows_a.clone();
        rev.reverse();
        let revf: Vec<f64> = rev.iter().flatten().copied().collect();
        prop_assert_eq!(chamfer_value(&a, &revf).unwrap(), 0.0);
    }

    #[test]
    fn normalize_round_trip(rows in cloud_strategy(32)) {
        let pc = PointCloud::from_rows(&rows).unwrap();
        match pc.normalize() {
            Ok(norm) => {
                let back = norm.denormalize().unwrap();
                for (x, y) in back.points().iter().zip(pc.points()) {
                    prop_assert!((x - y).abs() < 1e-6 * (1.0 + y.abs()), "{} vs {}", x, y);
                }
            }
            // coincident clouds are allowed to be rejected
            Err(_) => {
                let first = rows[0];
                let coincident = rows
                    .iter()
                    .all(|r| (0..3).all(|c| (r[c] - first[c]).abs() < 1e-9));
                prop_assert!(coincident);
            }
        }
    }

    #[test]
    fn augmentation_preserves_pairwise_distances(
        rows in cloud_strategy(16),
        theta in 0.0f64..std::f64::consts::TAU,
    ) {
        let pc = PointCloud::from_rows(&rows).unwrap();
        let rot = rotate_y(&pc, theta);
        for i in 0..pc.len() {
            for j in (i + 1)..pc.len() {
                let d0 = dist(pc.points(), i, j);
                let d1 = dist(rot.points(), i, j);
                prop_assert!((d0 - d1).abs() < 1e-6 * (1.0 + d0));
            }
        }
    }

    #[test]
    fn every_writer_output_parses_back(
        rows in cloud_strategy(20),
        format_pick in 0usize..3,
    ) {
        let format = [CloudFormat::Xyz, CloudFormat::Off, CloudFormat::AsciiPly][format_pick];
        let ext = ["xyz", "off", "ply"][format_pick];
        let pc = PointCloud::from_rows(&rows).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(format!("cloud.{ext}"));
        save_cloud(&pc, &path, format).unwrap();
        let loaded = load_cloud::<f64>(&path).unwrap();
        prop_assert_eq!(loaded.len(), pc.len());
        for (a, b) in loaded.points().iter().zip(pc.points()) {
            // printed at 9 significant digits
            prop_assert!((a - b).abs() <= 1e-7 * (1.0 + b.abs()), "{} vs {}", a, b);
        }
    }
}

fn dist(pts: &[f64], i: usize, j: usize) -> f64 {
    let mut d = 0.0;
    for c in 0..3 {
        let v = pts[i * 3 + c] - pts[j * 3 + c];
        d += v * v;
    }
    d.sqrt()
}
