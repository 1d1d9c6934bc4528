use sidetune_demo::{morph, shift, Demo, SIZE};

#[test]
fn slice_overlay_has_one_rgba_pixel_per_voxel() {
    let d = Demo::create(3, 5).unwrap();
    assert_eq!((d.width(), d.height(), d.depth()), (SIZE, SIZE, 6));
    let plain = d.slice_impl(2, 0.0).unwrap();
    let tinted = d.slice_impl(2, 1.0).unwrap();
    assert_eq!(plain.len(), SIZE * SIZE * 4);
    assert_ne!(plain, tinted);
    assert!(d.slice_impl(6, 0.5).is_err());
    assert!(Demo::create(1, 12).is_err());
}

#[test]
fn fusion_endpoints_show_one_branch() {
    let mut d = Demo::create(3, 4).unwrap();
    let g = d.grid();
    let side = d.fusion_impl(1, 0.0).unwrap();
    let back = d.fusion_impl(1, 1.0).unwrap();
    let mid = d.fusion_impl(1, 0.5).unwrap();
    assert_eq!(side.len(), g * g * 4);
    assert_ne!(side, back);
    // Halfway lies between the two branches, channel by channel.
    for ((a, b), m) in side.iter().zip(&back).zip(&mid) {
        assert!(*m >= (*a).min(*b).saturating_sub(1) && *m <= (*a).max(*b).saturating_add(1));
    }
}

#[test]
fn unperturbed_mask_scores_perfectly() {
    let d = Demo::create(7, 4).unwrap();
    let v: serde_json::Value = serde_json::from_str(&d.metrics_impl(3, 0, 0, 0).unwrap()).unwrap();
    assert_eq!(v["mean_dsc"].as_f64(), Some(1.0));
    assert_eq!(v["mean_hd95"].as_f64(), Some(0.0));
    let moved: serde_json::Value = serde_json::from_str(&d.metrics_impl(3, 4, 0, 0).unwrap()).unwrap();
    assert!(moved["mean_dsc"].as_f64().unwrap() < 1.0);
    assert!(moved["mean_hd95"].as_f64().unwrap() > 0.0);
    assert_eq!(d.perturbed_impl(3, 0, 0, 1).unwrap().len(), SIZE * SIZE * 4);
}

#[test]
fn shift_and_morph_by_hand() {
    // 5x5 with one pixel at (2, 2).
    let mut m = vec![false; 25];
    m[12] = true;
    let s = shift(&m, 5, 5, 1, -1);
    assert!(s[5 + 3]);
    assert_eq!(s.iter().filter(|&&v| v).count(), 1);
    let g = morph(&m, 5, 5, 1);
    assert_eq!(g.iter().filter(|&&v| v).count(), 9);
    assert_eq!(morph(&g, 5, 5, -1), m);
}
