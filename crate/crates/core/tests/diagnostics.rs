use pad_core::datamodel::{AttackClass, AttackKind, AttackType, SampleRecord, ScoreQuadruple};
use pad_core::diagnostics::{
    cam, cam_from_features, read_scatter_csv, roc_plot, score_scatter_export, score_scatter_export_2d, CamClass,
    RocSeries,
};
use pad_core::evalmetrics::{RocPoint, ScoreRecord};
use pad_core::mixnet::{Alphas, MixNetConfig, MixNetModel};
use pad_core::nn::{BackboneSpec, Tensor};
use proptest::prelude::*;

fn record(i: usize, class: AttackClass, s: [Option<f64>; 3]) -> ScoreRecord {
    let r = SampleRecord {
        sample_id: format!("s{i}"),
        media_path: String::new(),
        frame_index: None,
        attack_class: class,
        source_dataset: "unit".into(),
        subject_id: None,
        fold: None,
    };
    ScoreRecord::new(
        &r,
        &ScoreQuadruple {
            print_score: s[0],
            replay_score: s[1],
            mask_score: s[2],
            final_score: 0.5,
        },
    )
}

fn classes() -> [AttackClass; 4] {
    [AttackClass::Genuine, AttackClass::Print, AttackClass::Replay, AttackClass::Mask(None)]
}

#[test]
fn scatter_export_round_trips_and_keeps_one_row_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let recs: Vec<ScoreRecord> = (0..23)
        .map(|i| {
            let v = i as f64 / 23.0;
            record(i, classes()[i % 4], [Some(v), Some(1.0 / 3.0 * v), Some(1.0 - v)])
        })
        .collect();
    let (rows, files) = score_scatter_export(&recs, &dir.path().join("scatter")).unwrap();
    assert_eq!(rows.len(), 23);
    let back = read_scatter_csv(files.table.as_ref().unwrap()).unwrap();
    assert_eq!(back, rows);
    let text = std::fs::read_to_string(files.table.unwrap()).unwrap();
    assert_eq!(text.lines().next().unwrap(), "sample_id,print_score,replay_score,mask_score,class");
    assert!(back.iter().all(|r| matches!(
        r.class,
        AttackKind::Genuine | AttackKind::Print | AttackKind::Replay | AttackKind::Mask
    )));
    assert!(files.png.is_file() && files.svg.is_file());
}

#[test]
fn two_branch_scores_are_redirected_to_the_2d_variant() {
    let dir = tempfile::tempdir().unwrap();
    let recs = vec![
        record(0, AttackClass::Genuine, [Some(0.1), Some(0.2), None]),
        record(1, AttackClass::Print, [Some(0.9), Some(0.3), None]),
    ];
    let err = score_scatter_export(&recs, &dir.path().join("s")).unwrap_err();
    assert!(err.to_string().contains("2D"), "{err}");
    let files = score_scatter_export_2d(&recs, &dir.path().join("s2")).unwrap();
    let text = std::fs::read_to_string(files.table.unwrap()).unwrap();
    assert_eq!(text.lines().next().unwrap(), "sample_id,print_score,replay_score,class");
    assert_eq!(text.lines().count(), 3);
}

fn series(label: &str, pts: &[(f64, f64)]) -> RocSeries {
    RocSeries {
        label: label.into(),
        points: pts.iter().map(|&(fpr, tpr)| RocPoint { fpr, tpr }).collect(),
    }
}

#[test]
fn roc_plot_is_byte_stable_and_draws_each_series() {
    let dir = tempfile::tempdir().unwrap();
    let s = vec![
        series("mixnet", &[(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]),
        series("vanilla", &[(0.0, 0.0), (0.3, 0.7), (1.0, 1.0)]),
    ];
    let (p1, v1) = (dir.path().join("a.png"), dir.path().join("a.svg"));
    let (p2, v2) = (dir.path().join("b.png"), dir.path().join("b.svg"));
    assert_eq!(roc_plot(&s, &p1, &v1).unwrap(), 2);
    roc_plot(&s, &p2, &v2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(std::fs::read(&v1).unwrap(), std::fs::read(&v2).unwrap());
    let svg = std::fs::read_to_string(&v1).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    // The perfect classifier passes through the top-left corner of the axes.
    assert!(svg.contains("60.00,40.00"), "{svg}");
    let img = image::open(&p1).unwrap().to_rgb8();
    assert_eq!(img.get_pixel(60, 40).0, [31, 119, 180]);

    assert!(roc_plot(&[], &p1, &v1).is_err());
}

fn model() -> MixNetModel {
    MixNetModel::build(MixNetConfig::three_branch(BackboneSpec::small_cnn(32, 32), Alphas::resnet50()).unwrap(), 5).unwrap()
}

fn input(seed: u64) -> Tensor {
    let mut s = seed;
    let data = (0..3 * 32 * 32)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) * 2.0 - 1.0
        })
        .collect();
    Tensor::from_vec(3, 32, 32, data).unwrap()
}

#[test]
fn cam_has_input_size_and_unit_range() {
    let m = model();
    let x = input(1);
    for a in AttackType::ALL {
        let map = cam(&m, &x, a, CamClass::Attack, "s").unwrap();
        assert_eq!((map.width, map.height), (32, 32));
        let lo = map.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = map.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(hi == 0.0 || (lo == 0.0 && (hi - 1.0).abs() < 1e-12), "{lo} {hi}");
    }
}

#[test]
fn cam_on_unknown_branch_is_an_error() {
    let cfg = MixNetConfig::new(&[AttackType::Print, AttackType::Replay], BackboneSpec::small_cnn(32, 32), Alphas::new(vec![1.0, 1.0], 1.0)).unwrap();
    let m = MixNetModel::build(cfg, 1).unwrap();
    assert!(cam(&m, &input(2), AttackType::Mask, CamClass::Attack, "s").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cam_invariant_to_positive_feature_scaling(
        data in proptest::collection::vec(-2.0f64..2.0, 3 * 4 * 4),
        weights in proptest::collection::vec(-1.0f64..1.0, 3),
        k in 0.01f64..100.0,
    ) {
        let f = Tensor::from_vec(3, 4, 4, data.clone()).unwrap();
        let mut g = f.clone();
        g.scale(k);
        let a = cam_from_features(&f, &weights, 16, 16).unwrap();
        let b = cam_from_features(&g, &weights, 16, 16).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}
