mod common;

use hcae::autoencoder::reconstruct;
use hcae::classifier::binary_cross_entropy;
use hcae::ensemble::{linear_sae_objective, Matrix};
use hcae::metrics::mse;
use hcae::nn::Mode;
use hcae::{
    build_autoencoder, build_classifier, build_ensemble, decode, encode, ensemble_loss, generate_synthetic_dataset, predict,
    split, train_ensemble, ClassifierSpec, CompressionConfig, Ensemble, EnsembleTrainOptions, Error, Geometry,
    LabeledSample, LossWeights, ModelParameters,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const G: Geometry = Geometry::new(8, 8, 3);

fn mini_parts(seed: u64) -> (ModelParameters, ModelParameters) {
    let ae = build_autoencoder(CompressionConfig::new("mini", G, vec![2]).unwrap(), seed).unwrap();
    let mut spec = ClassifierSpec::scratch(G);
    spec.backbone_widths = vec![2];
    (ae, build_classifier(spec, seed + 1).unwrap())
}

fn mini(weights: LossWeights) -> Ensemble {
    let (ae, clf) = mini_parts(3);
    build_ensemble(ae, clf, weights).unwrap()
}

fn batch(n: usize, seed: u64) -> Vec<LabeledSample> {
    generate_synthetic_dataset(n, seed, 0.5, G).unwrap().samples
}

#[test]
fn build_freezes_classifier_and_unfreezes_autoencoder() {
    let ens = mini(LossWeights::default());
    assert_eq!(ens.classifier().trainable_ids().len(), 0);
    assert!(ens.ae.groups.iter().all(|g| g.trainable));
    assert_eq!(LossWeights::default(), LossWeights::new(1.0, 0.0).unwrap());
}

#[test]
fn geometry_mismatch_rejected() {
    let (ae, _) = mini_parts(0);
    let clf = build_classifier(ClassifierSpec::scratch(Geometry::new(16, 16, 3)), 0).unwrap();
    assert!(matches!(build_ensemble(ae.clone(), clf, LossWeights::default()), Err(Error::ShapeMismatch { .. })));
    assert!(build_ensemble(ae.clone(), ae, LossWeights::default()).is_err());
}

#[test]
fn forward_is_the_composition() {
    let (ae, clf) = mini_parts(7);
    let ens = build_ensemble(ae.clone(), clf.clone(), LossWeights::default()).unwrap();
    let samples = batch(6, 1);
    let patches: Vec<_> = samples.iter().map(|s| &s.patch).collect();
    let fused = ens.forward(&patches).unwrap();
    for (p, x) in fused.iter().zip(&patches) {
        let direct = predict(&clf, &decode(&ae, &encode(&ae, x).unwrap()).unwrap()).unwrap();
        assert_eq!(p.to_bits(), direct.to_bits());
    }
}

#[test]
fn single_term_weights_reduce_to_that_term() {
    let samples = batch(6, 2);
    let patches: Vec<_> = samples.iter().map(|s| &s.patch).collect();

    let ens = mini(LossWeights::new(1.0, 0.0).unwrap());
    let probs = ens.forward(&patches).unwrap();
    let bce: f64 = probs.iter().zip(&samples).map(|(&p, s)| binary_cross_entropy(p, f64::from(s.label))).sum::<f64>() / 6.0;
    assert!((ensemble_loss(&ens, &samples).unwrap() - bce).abs() < 1e-12);

    let ens = mini(LossWeights::new(0.0, 1.0).unwrap());
    let recon = reconstruct(&ens.ae, &patches).unwrap();
    let m: f64 = recon.iter().zip(&patches).map(|(r, x)| mse(r, x).unwrap()).sum::<f64>() / 6.0;
    assert!((ensemble_loss(&ens, &samples).unwrap() - m).abs() < 1e-12);
}

#[test]
fn two_sample_loss_matches_hand_arithmetic() {
    let samples = batch(2, 8);
    let patches: Vec<_> = samples.iter().map(|s| &s.patch).collect();
    let (ws, wr) = (0.7, 2.0);
    let ens = mini(LossWeights::new(ws, wr).unwrap());
    let probs = ens.forward(&patches).unwrap();
    let recon = reconstruct(&ens.ae, &patches).unwrap();
    let mut expected = 0.0;
    for i in 0..2 {
        let (p, y) = (probs[i], f64::from(samples[i].label));
        let bce = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        let err: f64 = recon[i].pixels().iter().zip(patches[i].pixels()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 192.0;
        expected += ws * bce + wr * err;
    }
    expected /= 2.0;
    assert!((ensemble_loss(&ens, &samples).unwrap() - expected).abs() < 1e-9);
}

#[test]
fn empty_batch_rejected() {
    assert!(ensemble_loss(&mini(LossWeights::default()), &[]).is_err());
}

#[test]
fn gradients_match_finite_differences() {
    let samples = batch(4, 5);
    let refs: Vec<&LabeledSample> = samples.iter().collect();
    for mode in [Mode::Train, Mode::Eval] {
        let mut ens = mini(LossWeights::new(1.0, 0.5).unwrap());
        let (_, grads, _) = ens.loss_and_grads(&refs, mode).unwrap();
        assert_eq!(grads.groups.len(), ens.ae.groups.len());
        let report = common::finite_difference_report(
            &mut ens,
            |e| &mut e.ae.groups,
            |e| e.loss_and_grads(&refs, mode).unwrap().0,
            &grads,
        );
        assert_eq!(report.len(), 10);
        for (id, err, _) in &report {
            assert!(*err < 1e-4, "{mode:?} {id}: relative error {err}");
        }
        let nonzero = report.iter().filter(|(_, _, n)| *n > 1e-8).count();
        assert!(nonzero >= 6, "{report:?}");
    }
}

#[test]
fn training_leaves_classifier_bit_identical() {
    let ds = generate_synthetic_dataset(40, 4, 0.5, G).unwrap();
    let (train, val) = split(&ds, 0.25, 4).unwrap();
    let (ae, clf) = mini_parts(11);
    let clf_before = clf.clone();
    let ae_before = ae.content_hash();
    let mut ens = build_ensemble(ae, clf, LossWeights::default()).unwrap();
    let opts = EnsembleTrainOptions {
        epochs: 5,
        batch_size: 8,
        lr: 1e-3,
        seed: 0,
    };
    let (sup, history) = train_ensemble(&mut ens, &train, &val, &opts).unwrap();
    assert_eq!(history.records.len(), 5);
    assert!(history.records.iter().all(|r| r.val_accuracy.is_some()));
    assert_ne!(sup.content_hash(), ae_before);
    assert_eq!(sup.provenance["source_autoencoder"], ae_before);
    assert_eq!(sup.provenance["supervising_classifier"], clf_before.content_hash());
    assert_eq!(sup.provenance["loss_weights"], "supervised=1,reconstruction=0");
    let (_, clf_after) = ens.into_parts();
    assert_eq!(clf_after.content_hash(), clf_before.content_hash());
    for (a, b) in clf_after.groups.iter().zip(&clf_before.groups) {
        assert_eq!(a.data, b.data, "{}", a.id);
    }
}

#[test]
fn training_is_deterministic() {
    let ds = generate_synthetic_dataset(24, 6, 0.5, G).unwrap();
    let (train, val) = split(&ds, 0.25, 6).unwrap();
    let run = || {
        let mut ens = mini(LossWeights::new(1.0, 0.2).unwrap());
        let opts = EnsembleTrainOptions {
            epochs: 2,
            batch_size: 6,
            lr: 1e-3,
            seed: 9,
        };
        train_ensemble(&mut ens, &train, &val, &opts).unwrap()
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(a.content_hash(), b.content_hash());
    assert_eq!(ha.numeric_trace(), hb.numeric_trace());
}

/// Direct summation in the row-vector convention: `h = x F`, `pred = h W_p`, `recon = h W_r`.
fn sae_oracle(f: &[Vec<f64>], wp: &[Vec<f64>], wr: &[Vec<f64>], xs: &[Vec<f64>], ys: &[Vec<f64>]) -> f64 {
    let (d, k, m) = (f.len(), f[0].len(), wp[0].len());
    let mut total = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let mut h = vec![0.0; k];
        for j in 0..k {
            for i in 0..d {
                h[j] += x[i] * f[i][j];
            }
        }
        for o in 0..m {
            let mut p = 0.0;
            for j in 0..k {
                p += h[j] * wp[j][o];
            }
            total += (p - y[o]).powi(2);
        }
        for o in 0..d {
            let mut r = 0.0;
            for j in 0..k {
                r += h[j] * wr[j][o];
            }
            total += (r - x[o]).powi(2);
        }
    }
    total / (2.0 * xs.len() as f64)
}

fn random_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn matrix(rows: &[Vec<f64>]) -> Matrix {
    Matrix::new(rows.len(), rows[0].len(), rows.concat()).unwrap()
}

#[test]
fn linear_sae_matches_elementwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..20 {
        let (d, k, m, t) = (3, 2, 1, 4);
        let f = random_rows(&mut rng, d, k);
        let wp = random_rows(&mut rng, k, m);
        let wr = random_rows(&mut rng, k, d);
        let xs = random_rows(&mut rng, t, d);
        let ys = random_rows(&mut rng, t, m);
        let got = linear_sae_objective(&matrix(&f), &matrix(&wp), &matrix(&wr), &xs, &ys).unwrap();
        assert!((got - sae_oracle(&f, &wp, &wr, &xs, &ys)).abs() < 1e-12);
    }
}

#[test]
fn linear_sae_exact_fit_is_zero() {
    let id = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let sum = Matrix::new(2, 1, vec![1.0, 1.0]).unwrap();
    let xs = vec![vec![0.5, -2.0], vec![3.0, 1.0]];
    let ys = vec![vec![-1.5], vec![4.0]];
    assert_eq!(linear_sae_objective(&id, &sum, &id, &xs, &ys).unwrap(), 0.0);
    assert!(linear_sae_objective(&id, &sum, &id, &[vec![1.0]], &ys[..1]).is_err());
    assert!(Matrix::new(2, 2, vec![1.0]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn loss_is_linear_in_the_weights(ws in 0.0f64..5.0, wr in 0.0f64..5.0, seed in 0u64..500) {
        prop_assume!(ws + wr > 0.0);
        let samples = batch(5, seed);
        let (ae, clf) = mini_parts(seed);
        let at = |a: f64, b: f64| {
            let ens = build_ensemble(ae.clone(), clf.clone(), LossWeights::new(a, b).unwrap()).unwrap();
            ensemble_loss(&ens, &samples).unwrap()
        };
        let combined = at(ws, wr);
        let parts = ws * at(1.0, 0.0) + wr * at(0.0, 1.0);
        prop_assert!((combined - parts).abs() < 1e-9, "{} vs {}", combined, parts);
    }
}
