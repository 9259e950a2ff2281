use std::collections::BTreeSet;

use pad_core::datamodel::{assign_folds, AttackClass, DatasetManifest};
use pad_core::features::{Descriptor, SvmConfig};
use pad_core::imaging::load_images;
use pad_core::mixnet::Alphas;
use pad_core::nn::BackboneSpec;
use pad_core::protocols::{
    default_scenario_tags, load_trained_folds, run_cross_unseen, run_intra, run_predefined, ModelFactory,
    PredefinedMetric, RunOptions,
};
use pad_core::synthdata::{generate, generate_classes, generate_cross_unseen, SynthSpec};
use pad_core::trainer::TrainConfig;

fn intra_manifest(dir: &std::path::Path) -> DatasetManifest {
    let m = generate(&SynthSpec::new(3, 32, 6, 2), dir).unwrap();
    assign_folds(&m, 3, 3).unwrap()
}

fn factory() -> ModelFactory {
    ModelFactory::mixnet(BackboneSpec::small_cnn(32, 32), Alphas::densenet121())
}

#[test]
fn intra_run_writes_one_checkpoint_per_fold_and_keeps_test_out_of_training() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let m = intra_manifest(data.path());
    let res = run_intra(&m, &factory(), &TrainConfig::mixnet(1, 9), &RunOptions::in_dir(out.path())).unwrap();

    assert_eq!(res.folds.len(), 3);
    assert_eq!(res.report.folds.len(), 3);
    for k in 0..3 {
        assert!(out.path().join(k.to_string()).join("checkpoint").is_file());
        assert!(out.path().join(k.to_string()).join("scores.jsonl").is_file());
    }
    assert!(out.path().join("metrics.json").is_file());
    assert_eq!(res.hygiene_violations(), 0);
    assert_eq!(res.report.provenance_violations(), 0);

    // Each model is paired with exactly one test fold, and the test folds
    // partition the data.
    let folds: BTreeSet<u32> = res.folds.iter().map(|f| f.trained.fold).collect();
    assert_eq!(folds, (0..3).collect());
    let mut tested: Vec<&str> = res
        .folds
        .iter()
        .flat_map(|f| f.test_records.iter().map(|r| r.sample_id.as_str()))
        .collect();
    tested.sort_unstable();
    let mut all: Vec<&str> = m.records.iter().map(|r| r.sample_id.as_str()).collect();
    all.sort_unstable();
    assert_eq!(tested, all);
    for f in &res.folds {
        assert!(f.test_records.iter().all(|r| r.fold == Some(f.trained.fold)));
        assert_eq!(f.composition.classes.len(), 4);
    }
}

#[test]
fn cross_unseen_reuses_fold_models_and_ignores_record_order() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let m = intra_manifest(data.path());
    let intra = run_intra(&m, &factory(), &TrainConfig::mixnet(1, 4), &RunOptions::in_dir(out.path())).unwrap();

    let udir = tempfile::tempdir().unwrap();
    let unseen = generate_cross_unseen(&SynthSpec::new(8, 32, 2, 1), udir.path()).unwrap();
    let imgs = load_images(&unseen, 3).unwrap();
    let tags = default_scenario_tags();
    let a = run_cross_unseen(&intra.trained_folds(), &imgs, &tags, 1, &RunOptions::default()).unwrap();
    let keys: BTreeSet<&str> = a.report.attack_wise_apcer.keys().map(String::as_str).collect();
    assert_eq!(
        keys,
        ["silicone", "paper", "half", "transparent", "mannequin"].into_iter().collect()
    );
    assert_eq!(a.report.folds.len(), 3);

    let mut reversed = imgs.clone();
    reversed.reverse();
    let b = run_cross_unseen(&intra.trained_folds(), &reversed, &tags, 1, &RunOptions::default()).unwrap();
    assert_eq!(a.report, b.report);

    // Reloaded fold models give the same report.
    let reloaded = load_trained_folds(out.path(), &m).unwrap();
    let c = run_cross_unseen(&reloaded, &imgs, &tags, 1, &RunOptions::default()).unwrap();
    assert_eq!(a.report, c.report);
}

#[test]
fn predefined_two_attack_split_uses_dev_threshold() {
    let classes = [AttackClass::Genuine, AttackClass::Print, AttackClass::Replay];
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let train = generate_classes(&SynthSpec::new(20, 32, 5, 2), d1.path(), &classes).unwrap();
    let test = generate_classes(&SynthSpec::new(21, 32, 3, 2), d2.path(), &classes).unwrap();
    let (tr, te) = (load_images(&train, 3).unwrap(), load_images(&test, 3).unwrap());

    let f = factory();
    assert_eq!(f.mixnet_config(&pad_core::protocols::attacks_in(&tr)).unwrap().branches.len(), 2);
    let res = run_predefined(&tr, &te, &f, &TrainConfig::mixnet(1, 2), PredefinedMetric::Hter, &RunOptions::default())
        .unwrap();
    assert!(res.report.hter.is_some());
    assert!(!res.dev_sample_ids.is_empty());
    let dev: BTreeSet<&str> = res.dev_sample_ids.iter().map(String::as_str).collect();
    assert_eq!(res.report.provenance[0].fit_sample_count, dev.len());

    let err = run_predefined(&tr, &tr, &f, &TrainConfig::mixnet(1, 2), PredefinedMetric::Eer, &RunOptions::default())
        .unwrap_err();
    assert_eq!(err.kind(), "invariant");
}

#[test]
fn handcrafted_baseline_runs_under_the_intra_protocol() {
    let data = tempfile::tempdir().unwrap();
    let m = generate(&SynthSpec::new(6, 64, 4, 2), data.path()).unwrap();
    let m = assign_folds(&m, 2, 1).unwrap();
    let f = ModelFactory::Handcrafted {
        descriptor: Descriptor::LbpHog,
        svm: SvmConfig {
            gamma_scales: vec![1.0],
            costs: vec![10.0],
            ..SvmConfig::default()
        },
    };
    let res = run_intra(&m, &f, &TrainConfig::mixnet(1, 0), &RunOptions::default()).unwrap();
    assert_eq!(res.report.folds.len(), 2);
    assert_eq!(res.hygiene_violations(), 0);
    assert!(res.report.acer.mean.is_finite());
}
