use uae3d_demo::{gbf_features, schedule_curve, toy_molecule};

#[test]
fn schedule_curves_fall_from_one() {
    for kind in ["cosine", "linear"] {
        let c = schedule_curve(kind, 100);
        assert_eq!(c.len(), 101);
        assert_eq!(c[0], 1.0);
        assert!(c[100] <= 1e-4);
        assert!(c.windows(2).all(|w| w[1] < w[0]));
    }
    assert!(schedule_curve("quadratic", 100).is_empty());
    assert!(schedule_curve("cosine", 1).is_empty());
}

#[test]
fn gbf_peaks_at_the_nearest_centre() {
    let f = gbf_features(2.0);
    assert_eq!(f.len(), 32);
    let best = f.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    let centre = |k: usize| 8.0 * k as f64 / 31.0;
    assert!((0..32).all(|k| (centre(best) - 2.0).abs() <= (centre(k) - 2.0).abs()));
    assert!(gbf_features(f64::NAN).is_empty());
}

#[test]
fn rigid_motion_keeps_bond_lengths() {
    let a: serde_json::Value = serde_json::from_str(&toy_molecule(3, 12, 1)).unwrap();
    let b: serde_json::Value = serde_json::from_str(&toy_molecule(3, 12, 2)).unwrap();
    assert_eq!(a["atom_stability"], 1.0);
    assert_eq!(a["molecule"]["bonds"], b["molecule"]["bonds"]);
    let dist = |v: &serde_json::Value, i: usize, j: usize| {
        let p = |k: usize| v["molecule"]["coords"][k].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect::<Vec<_>>();
        let (x, y) = (p(i), p(j));
        (0..3).map(|c| (x[c] - y[c]).powi(2)).sum::<f64>().sqrt()
    };
    for bond in a["molecule"]["bonds"].as_array().unwrap() {
        let (i, j) = (bond[0].as_u64().unwrap() as usize, bond[1].as_u64().unwrap() as usize);
        assert!((dist(&a, i, j) - dist(&b, i, j)).abs() < 1e-9);
    }
    assert_ne!(a["molecule"]["coords"], b["molecule"]["coords"]);
}
