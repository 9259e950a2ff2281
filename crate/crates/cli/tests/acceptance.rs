//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails at the end if any criterion failed.
//!
//! `cargo test -p pad-cli --test acceptance -- --nocapture`

#[path = "../../core/tests/common/oracles.rs"]
mod oracles;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use pad_core::datamodel::{assign_folds, label_for, AttackClass, AttackType, LabelQuadruple};
use pad_core::diagnostics::{cam, CamClass};
use pad_core::evalmetrics::{
    acer, apcer, bpcer, evaluate_protocol, roc_and_eer, FoldScores, ScoredSample, ThresholdSource,
};
use pad_core::features::{hog_features, lbp_histogram, multiscale_lbp, HOG_LEN, LBP_BINS, MSLBP_LEN};
use pad_core::imaging::{load_images, GrayImage, LabeledImage};
use pad_core::mixnet::{cross_entropy, gradient_routing_check, total_loss, Alphas, LossBreakdown, MixNetConfig, MixNetModel, MixNetOutput};
use pad_core::nn::{BackboneSpec, Tensor};
use pad_core::protocols::{
    ablation_from, default_scenario_tags, run_cross_unseen, run_intra_on, FittedModel, IntraOutcome, ModelFactory,
    RunOptions,
};
use pad_core::synthdata::{generate, generate_unseen_masks, signature_region, SynthSpec};
use pad_core::trainer::{Detector, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIZE: usize = 64;
const EPOCHS: usize = 15;
const SEED: u64 = 2024;

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        ok,
        detail: detail.into(),
    }
}

#[derive(Default)]
struct Tally {
    failed: Vec<u8>,
}

impl Tally {
    fn report(&mut self, n: u8, name: &str, o: Outcome) {
        println!("criterion {n:>2} {}  {name}: {}", if o.ok { "PASS" } else { "FAIL" }, o.detail);
        if !o.ok {
            self.failed.push(n);
        }
    }
}

fn labeling() -> Outcome {
    let table = [
        (AttackClass::Genuine, [0, 0, 0, 0]),
        (AttackClass::Print, [1, 0, 0, 1]),
        (AttackClass::Replay, [0, 1, 0, 1]),
        (AttackClass::Mask(None), [0, 0, 1, 1]),
    ];
    let wrong: Vec<String> = table
        .iter()
        .filter(|(c, bits)| label_for(*c).as_bits() != *bits)
        .map(|(c, _)| c.to_string())
        .collect();
    outcome(wrong.is_empty(), format!("4 rows checked, mismatches {wrong:?}"))
}

fn ce(p: f64, y: bool) -> f64 {
    -(if y { p } else { 1.0 - p }).max(1e-7).ln()
}

fn loss_arithmetic() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let classes = [AttackClass::Genuine, AttackClass::Print, AttackClass::Replay, AttackClass::Mask(None)];
    let mut draws: Vec<Alphas> = (0..100)
        .map(|_| Alphas::new((0..3).map(|_| rng.random_range(0.0..2.0)).collect(), rng.random_range(0.0..10.0)))
        .collect();
    draws.push(Alphas::resnet50());
    draws.push(Alphas::densenet121());
    let mut worst = 0.0f64;
    for a in &draws {
        // Direct combination of given losses.
        let l: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..10.0)).collect();
        let got = LossBreakdown::combine(&AttackType::ALL, &l[..3], l[3], a).total_loss;
        let want = a.branch[0] * l[0] + a.branch[1] * l[1] + a.branch[2] * l[2] + a.final_weight * l[3];
        worst = worst.max((got - want).abs() / want.abs().max(1e-12));

        // Losses computed from network-style outputs.
        let n = rng.random_range(1..9);
        let mut outs = Vec::new();
        let mut labels: Vec<LabelQuadruple> = Vec::new();
        for i in 0..n {
            let p: Vec<f64> = (0..4).map(|_| rng.random_range(0.001..0.999)).collect();
            outs.push(MixNetOutput {
                branch_probs: p[..3].iter().map(|&q| [1.0 - q, q]).collect(),
                final_probs: [1.0 - p[3], p[3]],
            });
            labels.push(label_for(classes[i % 4]));
        }
        let got = total_loss(&AttackType::ALL, &outs, &labels, a).unwrap().total_loss;
        let mut want = 0.0;
        for (o, l) in outs.iter().zip(&labels) {
            let bits = [l.print_label, l.replay_label, l.mask_label];
            for b in 0..3 {
                want += a.branch[b] * ce(o.branch_probs[b][1], bits[b]);
            }
            want += a.final_weight * ce(o.final_probs[1], l.final_label);
        }
        want /= n as f64;
        worst = worst.max((got - want).abs() / want.abs().max(1e-12));
    }
    let fixed = (LossBreakdown::combine(&AttackType::ALL, &[1.0; 3], 1.0, &Alphas::resnet50()).total_loss - 6.8).abs()
        < 1e-12
        && (LossBreakdown::combine(&AttackType::ALL, &[1.0; 3], 0.0, &Alphas::densenet121()).total_loss - 0.99).abs()
            < 1e-12;
    let sane = cross_entropy(&[0.0, 1.0], &[0.5, 0.5]).unwrap() > 0.0;
    outcome(
        worst < 1e-6 && fixed && sane,
        format!("{} draws incl. both fixed sets, max rel err {worst:.2e}", 2 * draws.len()),
    )
}

fn gradient_routing() -> Outcome {
    let cfg = MixNetConfig::three_branch(BackboneSpec::small_cnn(32, 32), Alphas::resnet50()).unwrap();
    let model = MixNetModel::build(cfg, SEED).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 1);
    let classes = [AttackClass::Genuine, AttackClass::Print, AttackClass::Replay, AttackClass::Mask(None)];
    let batch: Vec<Tensor> = (0..4)
        .map(|_| Tensor::from_vec(3, 32, 32, (0..3 * 32 * 32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        .collect();
    let labels: Vec<LabelQuadruple> = classes.iter().map(|&c| label_for(c)).collect();
    let r = gradient_routing_check(&model, &batch, &labels, 6, 1e-4, SEED).unwrap();
    let ok = r.routing_holds()
        && r.own_loss_nonzero.iter().all(|&b| b)
        && r.probes.len() >= 15
        && r.max_rel_err() < 1e-3;
    outcome(
        ok,
        format!(
            "{} params checked, {} leaks, {} probes, max rel err {:.2e}",
            r.checked_params,
            r.violations.len(),
            r.probes.len(),
            r.max_rel_err()
        ),
    )
}

fn scored(genuine: &[f64], attack: &[f64], prefix: &str) -> Vec<ScoredSample> {
    let g = genuine
        .iter()
        .enumerate()
        .map(|(i, &s)| ScoredSample::new(format!("{prefix}g{i}"), s, AttackClass::Genuine));
    let a = attack
        .iter()
        .enumerate()
        .map(|(i, &s)| ScoredSample::new(format!("{prefix}a{i}"), s, AttackClass::Replay));
    g.chain(a).collect()
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 2);
    let draw = |rng: &mut ChaCha8Rng| -> f64 {
        if rng.random_bool(0.5) {
            f64::from(rng.random_range(0..=20)) / 20.0
        } else {
            rng.random_range(0.0..1.0)
        }
    };
    let mut mismatches = 0;
    let mut folds = Vec::new();
    for k in 0..100 {
        let ng = rng.random_range(1..=50);
        let na = rng.random_range(1..=50);
        let g: Vec<f64> = (0..ng).map(|_| draw(&mut rng)).collect();
        let a: Vec<f64> = (0..na).map(|_| draw(&mut rng)).collect();
        let s = scored(&g, &a, "");
        let fast = roc_and_eer(&s).unwrap();
        let slow = oracles::roc(&s);
        let mut same = fast.thresholds == slow.thresholds
            && fast.apcer == slow.apcer
            && fast.bpcer == slow.bpcer
            && fast.eer == slow.eer
            && fast.eer_threshold == slow.eer_threshold;
        for &t in &slow.thresholds {
            let (oa, ob) = oracles::rates(&s, t);
            same &= apcer(&s, t).unwrap() == oa && bpcer(&s, t).unwrap() == ob;
            same &= acer(oa, ob) == (oa + ob) / 2.0;
        }
        if !same {
            mismatches += 1;
        }
        if k < 10 {
            folds.push(FoldScores {
                fold: k,
                fit: s,
                test: scored(&a, &g, &format!("t{k}")),
            });
        }
    }
    let report = evaluate_protocol(&folds, ThresholdSource::TrainFoldEer).unwrap();
    let from_fit = folds
        .iter()
        .zip(&report.folds)
        .all(|(f, r)| r.threshold == roc_and_eer(&f.fit).unwrap().eer_threshold);
    let violations = report.provenance_violations();
    outcome(
        mismatches == 0 && violations == 0 && from_fit,
        format!("100 score sets, {mismatches} oracle mismatches, {violations} provenance violations"),
    )
}

fn random_gray(w: usize, h: usize, rng: &mut ChaCha8Rng) -> GrayImage {
    GrayImage {
        width: w,
        height: h,
        data: (0..w * h).map(|_| f64::from(rng.random_range(0u8..=255))).collect(),
    }
}

fn features() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 3);
    let mut problems = Vec::new();
    for _ in 0..20 {
        let (w, h) = (rng.random_range(3..80), rng.random_range(3..80));
        if lbp_histogram(&random_gray(w, h, &mut rng)).unwrap().len() != LBP_BINS {
            problems.push(format!("lbp length at {w}x{h}"));
        }
        let img = random_gray(SIZE, SIZE, &mut rng);
        let k = f64::from(rng.random_range(-100..100));
        let shifted = GrayImage {
            data: img.data.iter().map(|v| v + k).collect(),
            ..img.clone()
        };
        let hog = hog_features(&img).unwrap();
        let ms = multiscale_lbp(&img).unwrap();
        if hog.len() != HOG_LEN || ms.values.len() != MSLBP_LEN {
            problems.push("hog or multi-scale length".into());
        }
        if lbp_histogram(&img).unwrap() != lbp_histogram(&shifted).unwrap() || ms != multiscale_lbp(&shifted).unwrap() {
            problems.push(format!("offset {k} changed an LBP histogram"));
        }
    }
    let constant = GrayImage::from_fn(SIZE, SIZE, |_, _| 77.0);
    if hog_features(&constant).unwrap().iter().any(|v| *v != 0.0) {
        problems.push("constant image has nonzero HOG".into());
    }
    let mut oracle_misses = 0;
    for _ in 0..20 {
        let img = random_gray(16, 16, &mut rng);
        if lbp_histogram(&img).unwrap() != oracles::lbp_histogram(&img) {
            oracle_misses += 1;
        }
    }
    if oracle_misses > 0 {
        problems.push(format!("{oracle_misses}/20 LBP histograms differ from the oracle"));
    }
    outcome(
        problems.is_empty() && (LBP_BINS, HOG_LEN, MSLBP_LEN) == (59, 324, 833),
        format!("dims {LBP_BINS}/{HOG_LEN}/{MSLBP_LEN}, problems {problems:?}"),
    )
}

fn toy_data(dir: &Path) -> Vec<LabeledImage> {
    let m = generate(&SynthSpec::new(SEED, SIZE, 30, 8).with_strength(1.0), dir).unwrap();
    let m = assign_folds(&m, 3, SEED).unwrap();
    load_images(&m, 3).unwrap()
}

fn intra(data: &[LabeledImage]) -> (IntraOutcome, Duration) {
    let factory = ModelFactory::mixnet(BackboneSpec::small_cnn(SIZE, SIZE), Alphas::densenet121());
    let start = Instant::now();
    let res = run_intra_on(data, 3, &factory, &TrainConfig::mixnet(EPOCHS, SEED), &RunOptions::default()).unwrap();
    (res, start.elapsed())
}

fn intra_outcome(res: &IntraOutcome, took: Duration) -> Outcome {
    let acer = res.report.acer.mean;
    let per_fold: Vec<String> = res.report.folds.iter().map(|f| format!("{:.4}", f.acer)).collect();
    outcome(
        acer < 0.05 && took < Duration::from_secs(600) && res.hygiene_violations() == 0,
        format!(
            "mean ACER {:.2}% (folds {per_fold:?}), {:.0} s, {} hygiene violations",
            100.0 * acer,
            took.as_secs_f64(),
            res.hygiene_violations()
        ),
    )
}

fn ablation(res: &IntraOutcome, data: &[LabeledImage]) -> Outcome {
    let cfg = TrainConfig::mixnet(EPOCHS, SEED + 4);
    let r = ablation_from(res, data, BackboneSpec::small_cnn(SIZE, SIZE), &cfg, &RunOptions::default()).unwrap();
    for line in r.render().lines() {
        println!("    {line}");
    }
    let n = r.mixnet_not_worse.len();
    // Losing on a single attack only flags the run.
    outcome(
        n > 0,
        format!("mixnet not worse on {n}/{}{}", r.attacks.len(), if r.flagged() { " [FLAGGED]" } else { "" }),
    )
}

fn unseen(res: &IntraOutcome, dir: &Path) -> Outcome {
    let m = generate_unseen_masks(&SynthSpec::new(SEED + 5, SIZE, 10, 4), dir).unwrap();
    let imgs = load_images(&m, 3).unwrap();
    let r = run_cross_unseen(&res.trained_folds(), &imgs, &default_scenario_tags(), 1, &RunOptions::default()).unwrap();
    let apcer = &r.report.attack_wise_apcer;
    let rows: BTreeMap<&str, f64> = ["paper", "half", "transparent", "mannequin"]
        .into_iter()
        .filter_map(|k| apcer.get(k).map(|v| (k, *v)))
        .collect();
    let transparent = rows.get("transparent").copied().unwrap_or(f64::NAN);
    let worst = rows.values().copied().fold(f64::NEG_INFINITY, f64::max);
    outcome(
        rows.len() == 4 && transparent >= worst,
        format!("attack-wise APCER {rows:?}"),
    )
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mixnet")).args(args).output().expect("binary runs")
}

fn determinism(dir: &Path) -> Outcome {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = dir.join("d");
    let out = cli(&["--seed", "11", "synth", "--out", &s(&data), "--videos", "3", "--frames", "2", "--size", "32"]);
    if !out.status.success() {
        return outcome(false, String::from_utf8_lossy(&out.stderr));
    }
    let manifest = s(&data.join("manifest.jsonl"));
    let mut checked = Vec::new();
    for (name, args) in [
        ("train", vec!["--seed", "3", "train", "--manifest", &manifest, "--epochs", "2"]),
        ("evaluate", vec!["--seed", "3", "evaluate", "--protocol", "intra", "--manifest", &manifest, "--epochs", "1"]),
    ] {
        let run_dir = dir.join(name);
        let mut full = args.clone();
        let rd = s(&run_dir);
        full.extend(["--out", &rd]);
        let mut files = Vec::new();
        for _ in 0..2 {
            let o = cli(&full);
            if !o.status.success() {
                return outcome(false, format!("{name}: {}", String::from_utf8_lossy(&o.stderr)));
            }
            files.push((
                std::fs::read(run_dir.join("run.json")).unwrap(),
                std::fs::read(run_dir.join("scores.jsonl")).unwrap(),
            ));
        }
        checked.push((name, files[0] == files[1]));
    }
    outcome(
        checked.iter().all(|(_, same)| *same),
        format!("byte-identical run.json and scores.jsonl: {checked:?}"),
    )
}

fn localization(res: &IntraOutcome, data: &[LabeledImage]) -> Outcome {
    let by_id: BTreeMap<&str, &LabeledImage> = data.iter().map(|d| (d.record.sample_id.as_str(), d)).collect();
    let (mut hits, mut total) = (0, 0);
    let mut ratios = Vec::new();
    for f in &res.folds {
        let FittedModel::Neural(Detector::MixNet(model)) = &f.trained.model else {
            return outcome(false, "fold model is not a MixNet");
        };
        for r in f.test_records.iter().filter(|r| r.attack_class == AttackClass::Print) {
            let img = by_id[r.sample_id.as_str()];
            let map = cam(model, &img.tensor, AttackType::Print, CamClass::Attack, &r.sample_id).unwrap();
            let ratio = map.region_mass_ratio(signature_region(map.height, map.width));
            ratios.push(ratio);
            total += 1;
            if ratio >= 2.0 {
                hits += 1;
            }
        }
    }
    ratios.sort_by(f64::total_cmp);
    let median = ratios.get(ratios.len() / 2).copied().unwrap_or(f64::NAN);
    let share = hits as f64 / total.max(1) as f64;
    outcome(
        total > 0 && share >= 0.8,
        format!("{hits}/{total} print frames at >= 2x uniform mass ({:.1}%), median ratio {median:.2}", 100.0 * share),
    )
}

#[test]
fn acceptance_criteria() {
    let mut t = Tally::default();
    t.report(1, "labeling", labeling());
    t.report(2, "loss arithmetic", loss_arithmetic());
    t.report(3, "gradient routing", gradient_routing());
    t.report(4, "metric oracle", metric_oracle());
    t.report(5, "feature dimensions and invariances", features());

    let tmp = tempfile::tempdir().unwrap();
    let data = toy_data(&tmp.path().join("synth"));
    let (res, took) = intra(&data);
    t.report(6, "toy intra-database", intra_outcome(&res, took));
    t.report(7, "toy ablation", ablation(&res, &data));
    t.report(8, "unseen mask subtypes", unseen(&res, &tmp.path().join("unseen")));
    t.report(9, "CLI determinism", determinism(&tmp.path().join("cli")));
    t.report(10, "CAM localization", localization(&res, &data));

    assert!(t.failed.is_empty(), "failed criteria: {:?}", t.failed);
}
