use hcae::metrics::{accuracy_f1, auc_roc, mse, psnr, roc_curve, ssim, ssim_default, EvalReport, ScoreSource, ScoredSet};
use hcae::{build_autoencoder, build_classifier, evaluate_triplet, generate_synthetic_dataset, ClassifierSpec, CompressionConfig, Geometry, ImagePatch};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn set(scores: &[f64], labels: &[u8]) -> ScoredSet {
    ScoredSet::new(scores.to_vec(), labels.to_vec(), ScoreSource::Original).unwrap()
}

/// Exhaustive pair count: positive above negative scores 1, ties score 1/2.
fn pair_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn noise_patch(side: usize, seed: u64) -> ImagePatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImagePatch::new(side, side, 1, (0..side * side).map(|_| rng.gen()).collect()).unwrap()
}

/// Scores on a coarse grid so that ties are common and monotone maps stay injective.
fn scored_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..=200, 1u32..40).prop_flat_map(|(n, levels)| {
        (
            prop::collection::vec((0..=levels).prop_map(move |k| f64::from(k) / f64::from(levels)), n),
            prop::collection::vec(0u8..=1, n),
        )
    })
}

#[test]
fn metric_examples() {
    let g = Geometry::new(12, 12, 3);
    let zeros = ImagePatch::filled(g, 0.0).unwrap();
    let ones = ImagePatch::filled(g, 1.0).unwrap();
    assert_eq!(mse(&ones, &ones).unwrap(), 0.0);
    assert_eq!(mse(&zeros, &ones).unwrap(), 1.0);
    assert_eq!(psnr(&ones, &ones, 1.0).unwrap(), f64::INFINITY);
    let a = ImagePatch::filled(g, 0.5).unwrap();
    let b = ImagePatch::filled(g, 0.6).unwrap();
    assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
    let c = ImagePatch::filled(g, 1.0).unwrap();
    assert!((psnr(&a, &c, 1.0).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-9);
    let n = noise_patch(16, 1);
    assert!((ssim_default(&n, &n).unwrap() - 1.0).abs() < 1e-12);
    assert!(mse(&n, &a).is_err());
}

#[test]
fn ssim_of_independent_noise_is_near_zero() {
    let a = noise_patch(64, 10);
    let b = noise_patch(64, 11);
    let s = ssim(&a, &b, 11, 0.01, 0.03).unwrap();
    assert!(s.abs() < 0.05, "ssim {s}");
}

#[test]
fn auc_examples() {
    assert_eq!(auc_roc(&set(&[0.9, 0.1], &[1, 0])).unwrap(), 1.0);
    assert_eq!(auc_roc(&set(&[0.1, 0.9], &[1, 0])).unwrap(), 0.0);
    assert_eq!(auc_roc(&set(&[0.4; 5], &[1, 0, 0, 1, 0])).unwrap(), 0.5);
    assert!(auc_roc(&set(&[0.4, 0.6], &[0, 0])).is_err());
    let curve = roc_curve(&set(&[0.9, 0.8, 0.8, 0.1], &[1, 0, 1, 0])).unwrap();
    assert_eq!(curve, vec![(0.0, 0.0), (0.0, 0.5), (0.5, 1.0), (1.0, 1.0)]);
}

#[test]
fn accuracy_f1_examples() {
    assert_eq!(accuracy_f1(&set(&[0.9, 0.1, 0.7], &[1, 0, 1]), 0.5).unwrap(), (1.0, 1.0));
    let (acc, f1) = accuracy_f1(&set(&[0.1, 0.2, 0.3], &[1, 0, 1]), 0.5).unwrap();
    assert_eq!(f1, 0.0);
    assert!((acc - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(accuracy_f1(&set(&[0.9, 0.6, 0.4, 0.2], &[1, 0, 1, 0]), 0.5).unwrap(), (0.5, 0.5));
    assert!(accuracy_f1(&set(&[0.9], &[1]), 1.0).is_err());
}

#[test]
fn scored_set_validation() {
    assert!(ScoredSet::new(vec![0.1], vec![1, 0], ScoreSource::Original).is_err());
    assert!(ScoredSet::new(vec![0.1], vec![2], ScoreSource::Original).is_err());
    assert!(ScoredSet::new(vec![f64::NAN], vec![1], ScoreSource::Original).is_err());
}

#[test]
fn triplet_with_identical_autoencoders_gives_identical_rows() {
    let g = Geometry::new(16, 16, 3);
    let val = generate_synthetic_dataset(12, 3, 0.5, g).unwrap();
    let clf = build_classifier(ClassifierSpec::scratch(g), 0).unwrap();
    let ae = build_autoencoder(CompressionConfig::new("t", g, vec![4]).unwrap(), 0).unwrap();
    let report = evaluate_triplet(&clf, &ae, &ae, &val).unwrap();
    assert_eq!(report.rows.len(), 3);
    let (u, s) = (report.row(ScoreSource::UnsupRecon).unwrap(), report.row(ScoreSource::SupRecon).unwrap());
    assert_eq!((u.auc_roc, u.accuracy, u.f1, u.mean_mse, u.mean_psnr, u.mean_ssim), (s.auc_roc, s.accuracy, s.f1, s.mean_mse, s.mean_psnr, s.mean_ssim));
    let o = report.row(ScoreSource::Original).unwrap();
    assert_eq!(o.mean_mse, 0.0);
    assert_eq!(o.mean_psnr, f64::INFINITY);
    assert!((o.mean_ssim - 1.0).abs() < 1e-12);

    let json = report.to_json().unwrap();
    assert!(json.contains("\"mean_psnr\": \"inf\""));
    let parsed: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(parsed, report);
    assert!(report.to_table().contains("unsup_recon"));

    let dir = tempfile::tempdir().unwrap();
    let chart = dir.path().join("auc.png");
    report.render_bar_chart(&chart).unwrap();
    let img = image::open(&chart).unwrap();
    assert_eq!((img.width(), img.height()), (360, 240));
}

#[test]
fn triplet_rejects_mismatched_geometry() {
    let g = Geometry::new(16, 16, 3);
    let val = generate_synthetic_dataset(6, 3, 0.5, g).unwrap();
    let clf = build_classifier(ClassifierSpec::scratch(Geometry::new(24, 24, 3)), 0).unwrap();
    let ae = build_autoencoder(CompressionConfig::new("t", g, vec![4]).unwrap(), 0).unwrap();
    assert!(evaluate_triplet(&clf, &ae, &ae, &val).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn trapezoid_matches_pair_counting((scores, labels) in scored_strategy()) {
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let auc = auc_roc(&set(&scores, &labels)).unwrap();
        prop_assert!((auc - pair_auc(&scores, &labels)).abs() < 1e-9);
    }

    #[test]
    fn auc_invariant_under_increasing_maps((scores, labels) in scored_strategy()) {
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let base = auc_roc(&set(&scores, &labels)).unwrap();
        for f in [|s: f64| s.exp(), |s: f64| s * s * s + 2.0, |s: f64| 1.0 / (1.0 + (-10.0 * s).exp())] {
            let mapped: Vec<f64> = scores.iter().map(|&s| f(s)).collect();
            prop_assert!((auc_roc(&set(&mapped, &labels)).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn flipping_labels_complements_auc((scores, labels) in scored_strategy()) {
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        let a = auc_roc(&set(&scores, &labels)).unwrap();
        let b = auc_roc(&set(&scores, &flipped)).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distortion_metrics_are_symmetric(s1 in 0u64..1000, s2 in 0u64..1000) {
        let (a, b) = (noise_patch(12, s1), noise_patch(12, s2));
        prop_assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
        prop_assert!((ssim_default(&a, &b).unwrap() - ssim_default(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(mse(&a, &b).unwrap() >= 0.0);
    }
}
