use hcae_web::{center_window, render_patch, roc_explorer, CodecDemo};

#[test]
fn rendered_patches_are_opaque_rgba() {
    let px = render_patch(3, 24, true).unwrap();
    assert_eq!(px.len(), 24 * 24 * 4);
    assert!(px.chunks(4).all(|p| p[3] == 255));
    assert_eq!(render_patch(3, 24, true).unwrap(), px);
    assert_ne!(render_patch(3, 24, false).unwrap(), px);
    assert!(render_patch(3, 4, true).is_err());
    assert_eq!(center_window(96), vec![32, 64, 32, 64]);
}

#[test]
fn codec_round_trip_reports_sizes_and_quality() {
    let demo = CodecDemo::new(1, 32, 3, 4).unwrap();
    assert!((demo.dimensionality_ratio() - 64.0 * 4.0 / 3072.0).abs() < 1e-12);
    assert!(demo.final_train_loss().is_finite());
    let f = demo.round_trip(9, true, false).unwrap();
    let q = demo.round_trip(9, true, true).unwrap();
    assert_eq!(f.label(), 1);
    assert_eq!(f.original(), q.original());
    assert_eq!(f.bytes, 13 + 4 * 256 + 4);
    assert_eq!(q.bytes, 13 + 8 * 4 + 256 + 4);
    assert!(q.byte_ratio < f.byte_ratio);
    for r in [&f, &q] {
        assert_eq!(r.reconstruction().len(), 32 * 32 * 4);
        assert!(r.psnr.is_finite() && r.ssim <= 1.0 && r.mse > 0.0);
    }
}

#[test]
fn roc_explorer_json() {
    let json = roc_explorer(vec![0.9, 0.6, 0.4, 0.2], vec![1, 0, 1, 0], 0.5).unwrap();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["auc"], 0.75);
    assert_eq!(v["accuracy"], 0.5);
    assert_eq!(v["f1"], 0.5);
    assert_eq!(v["roc"].as_array().unwrap().len(), 5);
    assert!(roc_explorer(vec![0.1, 0.2], vec![1, 1], 0.5).unwrap_err().contains("class"));
}
