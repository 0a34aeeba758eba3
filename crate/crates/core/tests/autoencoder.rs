mod common;

use hcae::autoencoder::{decode_batch, loss_and_grads, reconstruct, reconstruction_loss};
use hcae::codec::{read_latent, write_latent, QuantMode};
use hcae::nn::{Mode, BN_EPSILON};
use hcae::params::{GroupKind, ModelParameters};
use hcae::{
    build_autoencoder, decode, encode, generate_synthetic_dataset, split, train_autoencoder, AeTrainOptions,
    CompressionConfig, Error, Geometry, ImagePatch, LatentCode,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_patch(g: Geometry, seed: u64) -> ImagePatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImagePatch::new(g.height, g.width, g.channels, (0..g.len()).map(|_| rng.gen()).collect()).unwrap()
}

fn mini() -> ModelParameters {
    build_autoencoder(CompressionConfig::new("mini", Geometry::new(8, 8, 1), vec![2]).unwrap(), 17).unwrap()
}

#[test]
fn preset_shapes_and_ratios() {
    let cases = [("33", (6, 6, 256), 1.0 / 3.0), ("66", (12, 12, 128), 2.0 / 3.0), ("83", (12, 12, 160), 5.0 / 6.0)];
    for (name, shape, ratio) in cases {
        let c = CompressionConfig::preset(name).unwrap();
        assert_eq!(c.latent_shape(), shape, "{name}");
        assert!((c.dimensionality_ratio() - ratio).abs() < 1e-4, "{name}");
    }
    assert_eq!(CompressionConfig::preset("66").unwrap().latent_len(), 18432);
    assert_eq!(CompressionConfig::preset("83").unwrap().latent_len(), 23040);
    assert_eq!(CompressionConfig::preset("33").unwrap().blocks(), 4);
    assert!(CompressionConfig::preset("50").is_err());
}

#[test]
fn spatial_divisibility_is_required() {
    let g = Geometry::new(96, 96, 3);
    assert!(CompressionConfig::new("x", g, vec![4; 5]).is_ok());
    assert!(CompressionConfig::new("x", g, vec![4; 6]).is_err());
    assert!(CompressionConfig::new("x", Geometry::new(30, 30, 3), vec![4, 4]).is_err());
    assert!(CompressionConfig::new("x", g, vec![]).is_err());
    assert!(CompressionConfig::new("x", g, vec![4, 0]).is_err());
}

#[test]
fn encode_shape_for_preset_66() {
    let ae = build_autoencoder(CompressionConfig::preset("66").unwrap(), 0).unwrap();
    let x = random_patch(Geometry::default(), 1);
    let code = encode(&ae, &x).unwrap();
    assert_eq!(code.shape, (12, 12, 128));
    assert_eq!(code.activations.len(), 18432);
    let y = decode(&ae, &code).unwrap();
    assert_eq!(y.shape(), (96, 96, 3));
}

#[test]
fn geometry_mismatch_rejected() {
    let ae = mini();
    assert!(matches!(encode(&ae, &random_patch(Geometry::new(8, 8, 3), 0)), Err(Error::ShapeMismatch { .. })));
    let wrong = LatentCode::new((2, 2, 2), vec![0.0; 8], "mini").unwrap();
    assert!(matches!(decode(&ae, &wrong), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn build_is_deterministic_in_seed() {
    let c = CompressionConfig::new("t", Geometry::new(16, 16, 3), vec![4, 8]).unwrap();
    let a = build_autoencoder(c.clone(), 3).unwrap();
    let b = build_autoencoder(c.clone(), 3).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.content_hash(), build_autoencoder(c, 4).unwrap().content_hash());
    let x = random_patch(Geometry::new(16, 16, 3), 9);
    assert_eq!(encode(&a, &x).unwrap(), encode(&a, &x).unwrap());
}

#[test]
fn zero_weights_leave_only_biases_and_normalization() {
    let c = CompressionConfig::new("z", Geometry::new(8, 8, 1), vec![3, 2]).unwrap();
    let mut ae = build_autoencoder(c, 5).unwrap();
    for g in ae.groups.iter_mut().filter(|g| g.kind == GroupKind::ConvWeight) {
        g.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let bias = [0.7, -0.4];
    let (gamma, beta, mean, var) = ([1.5, 2.0], [0.1, 0.2], [0.05, -0.3], [0.5, 2.0]);
    ae.group_mut("enc.block1.conv.bias").unwrap().data = bias.to_vec();
    ae.group_mut("enc.block1.bn.gamma").unwrap().data = gamma.to_vec();
    ae.group_mut("enc.block1.bn.beta").unwrap().data = beta.to_vec();
    ae.group_mut("enc.block1.bn.running_mean").unwrap().data = mean.to_vec();
    ae.group_mut("enc.block1.bn.running_var").unwrap().data = var.to_vec();
    let zero = ImagePatch::filled(Geometry::new(8, 8, 1), 0.0).unwrap();
    let code = encode(&ae, &zero).unwrap();
    assert_eq!(code.shape, (2, 2, 2));
    for ch in 0..2 {
        let expected = (gamma[ch] * (bias[ch] - mean[ch]) / (var[ch] + BN_EPSILON).sqrt() + beta[ch]).max(0.0);
        for y in 0..2 {
            for x in 0..2 {
                assert!((f64::from(code.get(y, x, ch)) - expected).abs() < 1e-6);
            }
        }
    }
    assert_eq!(encode(&ae, &random_patch(Geometry::new(8, 8, 1), 2)).unwrap(), code);
}

#[test]
fn reloaded_float_latent_decodes_identically() {
    let ae = mini();
    let code = encode(&ae, &random_patch(Geometry::new(8, 8, 1), 4)).unwrap();
    let bytes = write_latent(&code, QuantMode::Float32).unwrap();
    let back = read_latent(&bytes, "mini").unwrap();
    assert_eq!(decode(&ae, &back).unwrap(), decode(&ae, &code).unwrap());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut ae = mini();
    ae.provenance.insert("note".into(), "x".into());
    ae.groups[0].trainable = false;
    ae.save(dir.path()).unwrap();
    let back = ModelParameters::load(dir.path()).unwrap();
    assert_eq!(back, ae);
    assert_eq!(back.content_hash(), ae.content_hash());

    let bin = dir.path().join("groups").join(format!("{}.bin", ae.groups[0].id));
    let mut bytes = std::fs::read(&bin).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&bin, bytes).unwrap();
    assert!(matches!(ModelParameters::load(dir.path()), Err(Error::Checkpoint(_))));
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let g = Geometry::new(8, 8, 1);
    let patches: Vec<ImagePatch> = (0..3).map(|i| random_patch(g, 100 + i)).collect();
    let refs: Vec<&ImagePatch> = patches.iter().collect();
    let mut ae = mini();
    // Move running statistics off their defaults so the inference path is not trivial.
    for g in ae.groups.iter_mut() {
        match g.kind {
            GroupKind::BnRunningMean => g.data.iter_mut().for_each(|v| *v = 0.1),
            GroupKind::BnRunningVar => g.data.iter_mut().for_each(|v| *v = 0.6),
            _ => {}
        }
    }
    for mode in [Mode::Train, Mode::Eval] {
        let (_, grads, _) = loss_and_grads(&ae, &refs, mode).unwrap();
        let report = common::finite_difference_report(
            &mut ae,
            |p| &mut p.groups,
            |p| loss_and_grads(p, &refs, mode).unwrap().0,
            &grads,
        );
        assert_eq!(report.len(), 10, "{mode:?}: {report:?}");
        for (id, err, _) in &report {
            assert!(*err < 1e-4, "{mode:?} {id}: relative error {err}");
        }
    }
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let g = Geometry::new(16, 16, 3);
    let ds = generate_synthetic_dataset(80, 1, 0.5, g).unwrap();
    let (train, val) = split(&ds, 0.25, 1).unwrap();
    let c = CompressionConfig::new("t", g, vec![8, 8]).unwrap();
    let opts = AeTrainOptions {
        epochs: 4,
        batch_size: 16,
        lr: 3e-3,
        seed: 2,
    };
    let (a, ha) = train_autoencoder(build_autoencoder(c.clone(), 0).unwrap(), &train, &val, &opts).unwrap();
    let (b, hb) = train_autoencoder(build_autoencoder(c, 0).unwrap(), &train, &val, &opts).unwrap();
    assert_eq!(ha.records.len(), 4);
    assert!(ha.records.windows(2).all(|w| w[1].epoch == w[0].epoch + 1));
    assert!(ha.last_train_loss().unwrap() < ha.first_train_loss().unwrap());
    assert_eq!(ha.numeric_trace(), hb.numeric_trace());
    assert_eq!(a.content_hash(), b.content_hash());

    let best = ha.best_epoch.unwrap();
    let best_val = ha.records[best - 1].val_loss;
    assert!(ha.records.iter().all(|r| r.val_loss >= best_val));
    assert_eq!(reconstruction_loss(&a, &val).unwrap(), best_val);
}

#[test]
fn zero_epochs_rejected() {
    let ds = generate_synthetic_dataset(8, 0, 0.5, Geometry::new(8, 8, 3)).unwrap();
    let ae = build_autoencoder(CompressionConfig::new("t", Geometry::new(8, 8, 3), vec![2]).unwrap(), 0).unwrap();
    let opts = AeTrainOptions {
        epochs: 0,
        ..AeTrainOptions::default()
    };
    assert!(matches!(train_autoencoder(ae, &ds, &ds, &opts), Err(Error::InvalidConfig(_))));
}

#[test]
fn non_finite_parameters_halt_training_with_epoch() {
    let g = Geometry::new(8, 8, 3);
    let ds = generate_synthetic_dataset(8, 0, 0.5, g).unwrap();
    let mut ae = build_autoencoder(CompressionConfig::new("t", g, vec![2]).unwrap(), 0).unwrap();
    ae.group_mut("dec.out.conv.bias").unwrap().data[0] = f64::NAN;
    match train_autoencoder(ae, &ds, &ds, &AeTrainOptions::default()) {
        Err(Error::NonFinite { stage, epoch }) => {
            assert_eq!(stage, "autoencoder");
            assert_eq!(epoch, 1);
        }
        other => panic!("expected non-finite error, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn reconstructions_stay_in_unit_range(seed in 0u64..1000, scale in 0.1f64..1e4) {
        let ae = build_autoencoder(CompressionConfig::new("t", Geometry::new(8, 8, 3), vec![4, 2]).unwrap(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let acts: Vec<f32> = (0..2 * 2 * 2).map(|_| (rng.gen_range(-1.0..1.0) * scale) as f32).collect();
        let code = LatentCode::new((2, 2, 2), acts, "t").unwrap();
        let out = decode_batch(&ae, &[&code]).unwrap().remove(0);
        prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        let x = random_patch(Geometry::new(8, 8, 3), seed);
        let r = reconstruct(&ae, &[&x]).unwrap().remove(0);
        prop_assert_eq!(r.shape(), x.shape());
    }
}
