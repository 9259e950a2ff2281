use std::collections::BTreeMap;

use pad_core::datamodel::{AttackClass, DatasetManifest, MaskSubtype};
use pad_core::imaging::load_gray_images;
use pad_core::synthdata::{generate, generate_unseen_masks, SynthSpec};

fn class_means(m: &DatasetManifest) -> BTreeMap<AttackClass, Vec<f64>> {
    let mut sums: BTreeMap<AttackClass, (Vec<f64>, usize)> = BTreeMap::new();
    for (r, img) in load_gray_images(m).unwrap() {
        let e = sums
            .entry(r.attack_class)
            .or_insert_with(|| (vec![0.0; img.data.len()], 0));
        e.0.iter_mut().zip(&img.data).for_each(|(a, b)| *a += b);
        e.1 += 1;
    }
    sums.into_iter()
        .map(|(k, (s, n))| (k, s.into_iter().map(|v| v / n as f64).collect()))
        .collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Per-class mean image nearest-centroid accuracy on a regeneration with a
/// different seed.
fn centroid_accuracy(strength: f64) -> f64 {
    let train_dir = tempfile::tempdir().unwrap();
    let test_dir = tempfile::tempdir().unwrap();
    let train = generate(&SynthSpec::new(11, 64, 20, 2).with_strength(strength), train_dir.path()).unwrap();
    let test = generate(&SynthSpec::new(12, 64, 10, 2).with_strength(strength), test_dir.path()).unwrap();
    let means = class_means(&train);
    let imgs = load_gray_images(&test).unwrap();
    let correct = imgs
        .iter()
        .filter(|(r, img)| {
            let best = means
                .iter()
                .min_by(|a, b| dist2(a.1, &img.data).total_cmp(&dist2(b.1, &img.data)))
                .unwrap();
            *best.0 == r.attack_class
        })
        .count();
    correct as f64 / imgs.len() as f64
}

#[test]
fn nearest_centroid_oracle_separates_classes() {
    let accs: Vec<f64> = [0.25, 0.5, 1.0].iter().map(|&s| centroid_accuracy(s)).collect();
    println!("nearest-centroid accuracy at strengths 0.25/0.5/1.0: {accs:?}");
    assert!(accs[2] >= 0.95, "{accs:?}");
    assert!(accs[0] <= accs[1] && accs[1] <= accs[2], "{accs:?}");
}

#[test]
fn transparent_masks_closest_to_genuine() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_unseen_masks(&SynthSpec::new(5, 64, 4, 2), dir.path()).unwrap();
    let means = class_means(&m);
    let genuine = &means[&AttackClass::Genuine];
    let d: BTreeMap<&str, f64> = [
        MaskSubtype::Paper,
        MaskSubtype::Half,
        MaskSubtype::Transparent,
        MaskSubtype::Mannequin,
    ]
    .into_iter()
    .map(|s| (s.as_str(), dist2(&means[&AttackClass::Mask(Some(s))], genuine).sqrt()))
    .collect();
    println!("mean-image distance to genuine: {d:?}");
    let closest = d.iter().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    assert_eq!(*closest, "transparent");
}
