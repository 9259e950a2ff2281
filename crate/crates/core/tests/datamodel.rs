use std::collections::{BTreeMap, BTreeSet};

use pad_core::datamodel::{
    assign_folds, label_for, AttackClass, AttackKind, DatasetManifest, Granularity, MaskSubtype, SampleRecord,
};
use proptest::prelude::*;

fn class_of(i: u8) -> AttackClass {
    match i % 5 {
        0 => AttackClass::Genuine,
        1 => AttackClass::Print,
        2 => AttackClass::Replay,
        3 => AttackClass::Mask(None),
        _ => AttackClass::Mask(Some(MaskSubtype::ALL[usize::from(i) % MaskSubtype::ALL.len()])),
    }
}

/// `videos[c]` videos of class `c`, each with `frames` frames.
fn manifest(videos: &[usize], frames: u64, subject: bool) -> DatasetManifest {
    let mut records = Vec::new();
    for (c, &n) in videos.iter().enumerate() {
        let class = class_of(c as u8);
        for v in 0..n {
            for f in 0..frames {
                let video = format!("{}_{c}v{v:03}", class.kind());
                records.push(SampleRecord {
                    sample_id: format!("{video}_{f}"),
                    media_path: format!("{video}_{f}.png"),
                    frame_index: Some(f),
                    attack_class: class,
                    source_dataset: "prop".into(),
                    subject_id: subject.then(|| format!("s{}", v % 3)),
                    fold: None,
                });
            }
        }
    }
    DatasetManifest::new("prop", 3, Granularity::Frame, records).unwrap()
}

#[test]
fn final_label_is_set_exactly_for_attacks() {
    let mut classes = vec![AttackClass::Genuine, AttackClass::Print, AttackClass::Replay, AttackClass::Mask(None)];
    classes.extend(MaskSubtype::ALL.map(|s| AttackClass::Mask(Some(s))));
    for c in classes {
        let l = label_for(c);
        assert_eq!(l.final_label, c != AttackClass::Genuine, "{c}");
        if c.kind() == AttackKind::Mask {
            assert_eq!(l.as_bits(), [0, 0, 1, 1]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn folds_partition_every_class_evenly(
        videos in proptest::collection::vec(3usize..12, 1..5),
        frames in 1u64..4,
        seed in any::<u64>(),
    ) {
        let m = manifest(&videos, frames, false);
        let k = 3;
        let a = assign_folds(&m, k, seed).unwrap();
        prop_assert_eq!(&a, &assign_folds(&m, k, seed).unwrap());
        prop_assert_eq!(a.records.len(), m.records.len());

        let mut video_fold: BTreeMap<String, u32> = BTreeMap::new();
        let mut per_class: BTreeMap<AttackClass, Vec<usize>> = BTreeMap::new();
        for r in &a.records {
            let f = r.fold.unwrap();
            prop_assert!(f < k);
            if let Some(prev) = video_fold.insert(r.video_id().to_string(), f) {
                prop_assert_eq!(prev, f, "frames of one video split across folds");
            } else {
                per_class.entry(r.attack_class).or_insert_with(|| vec![0; k as usize])[f as usize] += 1;
            }
        }
        for counts in per_class.values() {
            prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
        // Folds cover all ids exactly once.
        let ids: BTreeSet<&str> = a.records.iter().map(|r| r.sample_id.as_str()).collect();
        prop_assert_eq!(ids.len(), m.records.len());
    }

    #[test]
    fn save_load_save_is_byte_identical(
        videos in proptest::collection::vec(1usize..4, 1..6),
        frames in 1u64..3,
        subject in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(&videos, frames, subject);
        let m = if videos.iter().all(|&v| v >= 2) { assign_folds(&m, 2, seed).unwrap() } else { m };
        let (p1, p2) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        m.save(&p1).unwrap();
        let back = DatasetManifest::load(&p1).unwrap();
        prop_assert_eq!(&back.records, &m.records);
        back.save(&p2).unwrap();
        prop_assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
