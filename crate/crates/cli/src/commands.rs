use std::path::{Path, PathBuf};

use pad_core::datamodel::{assign_folds, AttackClass, AttackType, DatasetManifest, SampleRecord};
use pad_core::diagnostics::{cam, roc_plot, score_scatter_export, score_scatter_export_2d, CamClass, RocSeries};
use pad_core::evalmetrics::{read_scores, render_table, roc_and_eer, write_scores, ScoreRecord};
use pad_core::features::{read_feature_dump, write_feature_dump, Descriptor, SvmConfig};
use pad_core::imaging::{load_gray, load_images};
use pad_core::mixnet::{Alphas, Combine, FusionKind, MixNetModel, TrainingMeta};
use pad_core::nn::{BackboneFamily, BackboneSpec, PretrainedSource};
use pad_core::protocols::{
    default_scenario_tags, extract_features, load_trained_folds, run_ablation, run_cross_unseen, run_intra_on,
    run_predefined, Aggregation, ModelFactory, PredefinedMetric, ProtocolName, ProtocolSpec, RunOptions,
};
use pad_core::synthdata::{generate, generate_classes, generate_cross_unseen, generate_unseen_masks, signature_region, SynthSpec};
use pad_core::trainer::{write_epoch_log, TrainConfig};
use pad_core::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{
    AblateArgs, BackboneArg, BranchArg, CamArgs, CamClassArg, Cli, CombineArg, Command, EvaluateArgs, FeaturesArgs,
    FoldsArgs, MetricArg, ModelArgs, ProtocolArg, RocArgs, ScatterArgs, SynthArgs, SynthVariant, TrainArgs,
};

pub fn dispatch(cli: &Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::InvalidInput("--threads must be at least 1".into()));
    }
    for p in input_paths(&cli.command) {
        if !p.exists() {
            return Err(Error::Io {
                path: p.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
            });
        }
    }
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::Folds(a) => folds(cli, a),
        Command::Features(a) => features(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Evaluate(a) => evaluate(cli, a),
        Command::Ablate(a) => ablate(cli, a),
        Command::Cam(a) => cam_cmd(cli, a),
        Command::Scatter(a) => scatter(cli, a),
        Command::Roc(a) => roc(cli, a),
    }
}

fn input_paths(c: &Command) -> Vec<&Path> {
    let mut v: Vec<&Path> = Vec::new();
    match c {
        Command::Synth(_) => {}
        Command::Folds(a) => v.push(&a.manifest),
        Command::Features(a) => v.push(&a.manifest),
        Command::Train(a) => {
            v.push(&a.manifest);
            v.extend(a.model.weights.as_deref());
        }
        Command::Evaluate(a) => {
            v.extend(a.manifest.iter().map(PathBuf::as_path));
            v.extend(a.protocol_file.as_deref());
            v.extend(a.models.as_deref());
            v.extend(a.model.weights.as_deref());
        }
        Command::Ablate(a) => v.push(&a.manifest),
        Command::Cam(a) => {
            v.push(&a.weights);
            v.push(&a.manifest);
        }
        Command::Scatter(a) => v.push(&a.scores),
        Command::Roc(a) => v.extend(a.scores.iter().map(PathBuf::as_path)),
    }
    v
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Records the full resolved configuration next to the outputs.
fn write_run_json(out: &Path, cli: &Cli, resolved: serde_json::Value) -> Result<()> {
    create_out(out)?;
    let run = serde_json::json!({
        "tool": "mixnet",
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cli.seed,
        "threads": cli.threads,
        "args": cli.command,
        "resolved": resolved,
    });
    write_file(&out.join("run.json"), serde_json::to_string_pretty(&run)? + "\n")
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let m = DatasetManifest::load(path)?;
    if m.is_empty() {
        return Err(Error::InvalidInput(format!("manifest {} has no records", path.display())));
    }
    Ok(m)
}

/// Copy of the manifest whose media paths no longer depend on its location.
fn absolutized(m: &DatasetManifest) -> Result<DatasetManifest> {
    let records = m
        .records
        .iter()
        .map(|r| {
            let p = std::path::absolute(m.resolve(r)).map_err(|e| Error::Io {
                path: m.resolve(r),
                source: e,
            })?;
            Ok(SampleRecord {
                media_path: p.to_string_lossy().into_owned(),
                ..r.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetManifest {
        records,
        ..m.clone()
    })
}

fn with_folds(m: DatasetManifest, k: u32, seed: u64) -> Result<DatasetManifest> {
    if m.records.iter().all(|r| r.fold.is_some()) {
        Ok(m)
    } else {
        assign_folds(&m, k, seed)
    }
}

/// `(height, width)` of the manifest's first image.
fn input_size(m: &DatasetManifest) -> Result<(usize, usize)> {
    let img = load_gray(&m.resolve(&m.records[0]))?;
    Ok((img.height, img.width))
}

fn backbone_spec(arg: BackboneArg, pretrained: bool, (h, w): (usize, usize)) -> BackboneSpec {
    let family = match arg {
        BackboneArg::SmallCnn => return BackboneSpec::small_cnn(h, w),
        BackboneArg::Resnet50 => BackboneFamily::Resnet50,
        BackboneArg::Densenet121 => BackboneFamily::Densenet121,
    };
    BackboneSpec {
        family,
        pretrained_source: if pretrained {
            PretrainedSource::Imagenet
        } else {
            PretrainedSource::None
        },
        input_size: (h, w, 3),
    }
}

fn parse_alphas(arg: Option<&str>, backbone: BackboneArg) -> Result<Alphas> {
    match arg {
        Some(s) => s.parse(),
        None if backbone == BackboneArg::Resnet50 => Ok(Alphas::resnet50()),
        None => Ok(Alphas::densenet121()),
    }
}

fn model_setup(cli: &Cli, m: &ModelArgs, size: (usize, usize)) -> Result<(ModelFactory, TrainConfig)> {
    let backbone = backbone_spec(m.backbone, m.weights.is_some(), size);
    let (factory, default_batch) = if let Some(id) = &m.descriptor {
        (
            ModelFactory::Handcrafted {
                descriptor: Descriptor::from_id(id)?,
                svm: SvmConfig::default(),
            },
            1,
        )
    } else if m.vanilla {
        (
            ModelFactory::Vanilla {
                backbone,
                weights: m.weights.clone(),
            },
            56,
        )
    } else {
        match m.combine {
            CombineArg::Joint => (
                ModelFactory::MixNet {
                    backbone,
                    alphas: parse_alphas(m.alphas.as_deref(), m.backbone)?,
                    fusion: FusionKind::Trainable,
                    weights: m.weights.clone(),
                },
                16,
            ),
            CombineArg::Max | CombineArg::Average => (
                ModelFactory::Independent {
                    backbone,
                    combine: if m.combine == CombineArg::Max {
                        Combine::Max
                    } else {
                        Combine::Average
                    },
                    weights: m.weights.clone(),
                },
                56,
            ),
        }
    };
    let cfg = TrainConfig {
        learning_rate: m.learning_rate,
        batch_size: m.batch_size.unwrap_or(default_batch),
        epochs: m.epochs,
        seed: cli.seed,
        threads: cli.threads,
        checkpoint: None,
    };
    cfg.validate()?;
    Ok((factory, cfg))
}

fn resolved(factory: &ModelFactory, cfg: &TrainConfig) -> serde_json::Value {
    serde_json::json!({ "model": factory, "train": cfg })
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec::new(cli.seed, a.size, a.videos, a.frames).with_strength(a.strength);
    spec.validate()?;
    write_run_json(&a.out, cli, serde_json::json!({ "spec": spec }))?;
    let m = match a.variant {
        SynthVariant::Intra => generate(&spec, &a.out)?,
        SynthVariant::Unseen => generate_unseen_masks(&spec, &a.out)?,
        SynthVariant::CrossUnseen => generate_cross_unseen(&spec, &a.out)?,
        SynthVariant::TwoAttack => generate_classes(
            &spec,
            &a.out,
            &[AttackClass::Genuine, AttackClass::Print, AttackClass::Replay],
        )?,
    };
    let m = match a.folds {
        Some(k) => {
            let m = assign_folds(&m, k, cli.seed)?;
            m.save(a.out.join("manifest.jsonl"))?;
            m
        }
        None => m,
    };
    println!("wrote {} samples to {}", m.len(), a.out.join("manifest.jsonl").display());
    for (class, n) in m.class_counts() {
        println!("  {class}: {n}");
    }
    Ok(())
}

fn folds(cli: &Cli, a: &FoldsArgs) -> Result<()> {
    write_run_json(&a.out, cli, serde_json::json!({ "folds": a.folds }))?;
    let m = assign_folds(&absolutized(&load_manifest(&a.manifest)?)?, a.folds, cli.seed)?;
    let path = a.out.join("manifest.jsonl");
    m.save(&path)?;
    println!("wrote {} with {} folds", path.display(), a.folds);
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn features(cli: &Cli, a: &FeaturesArgs) -> Result<()> {
    let descriptor = Descriptor::from_id(&a.descriptor)?;
    write_run_json(&a.out, cli, serde_json::json!({ "descriptor": descriptor }))?;
    let m = load_manifest(&a.manifest)?;
    let out = a.out.join("features.f32");

    let cache = std::env::var_os("MIXNET_CACHE").map(PathBuf::from);
    let key = match &cache {
        Some(_) => {
            let mut h = Sha256::new();
            h.update(descriptor.id().as_bytes());
            for r in &m.records {
                let p = m.resolve(r);
                h.update(r.sample_id.as_bytes());
                h.update([0]);
                h.update(std::fs::read(&p).map_err(|e| Error::Io { path: p, source: e })?);
            }
            Some(hex(&h.finalize()))
        }
        None => None,
    };
    if let (Some(dir), Some(key)) = (&cache, &key) {
        let hit = dir.join(format!("{key}.f32"));
        if hit.is_file() {
            let (header, feats) = read_feature_dump(&hit)?;
            write_feature_dump(&out, &header.sample_ids, &feats)?;
            println!("cache hit {}: {} x {} features", key, header.count, header.length);
            return Ok(());
        }
    }

    let data = load_images(&m, 1)?;
    let feats = extract_features(descriptor, &data, cli.threads)?;
    let ids: Vec<String> = m.records.iter().map(|r| r.sample_id.clone()).collect();
    write_feature_dump(&out, &ids, &feats)?;
    if let (Some(dir), Some(key)) = (&cache, &key) {
        create_out(dir)?;
        write_feature_dump(&dir.join(format!("{key}.f32")), &ids, &feats)?;
    }
    println!("wrote {} x {} features to {}", feats.len(), descriptor.len(), out.display());
    Ok(())
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let m = load_manifest(&a.manifest)?;
    let (factory, cfg) = model_setup(cli, &a.model, input_size(&m)?)?;
    write_run_json(&a.out, cli, resolved(&factory, &cfg))?;
    let data = load_images(&m, factory.input_channels())?;
    let fitted = factory.fit(&data, &cfg)?;
    fitted.model.save(
        &a.out.join("checkpoint"),
        &TrainingMeta {
            epoch: cfg.epochs,
            seed: cfg.seed,
            alphas: None,
        },
    )?;
    write_epoch_log(&a.out.join("train_log.jsonl"), &fitted.epochs)?;
    let scores = fitted.model.score(&data, cli.threads)?;
    let records: Vec<ScoreRecord> = data.iter().zip(&scores).map(|(d, s)| ScoreRecord::new(&d.record, s)).collect();
    write_scores(&a.out.join("scores.jsonl"), &records)?;
    if let Some(last) = fitted.epochs.last() {
        println!("epoch {} total loss {:.6}", last.epoch + 1, last.loss.total_loss);
    }
    println!("checkpoint: {}", a.out.join("checkpoint").display());
    Ok(())
}

fn aggregation(a: &EvaluateArgs) -> Aggregation {
    if a.video_mean {
        Aggregation::VideoMean
    } else {
        Aggregation::Frame
    }
}

fn evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let spec = match (&a.protocol_file, a.protocol) {
        (Some(p), _) => ProtocolSpec::load(p)?,
        (None, Some(ProtocolArg::Intra)) => {
            ProtocolSpec::intra(a.manifest.first().cloned().unwrap_or_default(), a.folds)
        }
        (None, Some(ProtocolArg::CrossUnseen)) => {
            let models = a.models.as_ref().ok_or_else(|| {
                Error::InvalidInput("cross-unseen needs --models <intra run directory>".into())
            })?;
            ProtocolSpec::cross_unseen(
                models.join("manifest.jsonl"),
                a.manifest.first().cloned().unwrap_or_default(),
                a.folds,
            )
        }
        (None, Some(ProtocolArg::Predefined)) => {
            if a.manifest.len() != 2 {
                return Err(Error::InvalidInput(
                    "predefined needs --manifest <train> --manifest <test>".into(),
                ));
            }
            let metric = predefined_metric(a.metric)?;
            ProtocolSpec::predefined(&a.manifest[0], &a.manifest[1], metric)
        }
        (None, None) => return Err(Error::InvalidInput("give --protocol or --protocol-file".into())),
    };
    spec.validate()?;
    for p in spec.train_manifests.iter().chain(&spec.test_manifests) {
        if !p.exists() {
            return Err(Error::Io {
                path: p.clone(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
            });
        }
    }
    match spec.name {
        ProtocolName::IntraDatabase => evaluate_intra(cli, a, &spec),
        ProtocolName::CrossUnseen => evaluate_cross_unseen(cli, a, &spec),
        ProtocolName::PredefinedSplit => evaluate_predefined(cli, a, &spec),
    }
}

fn predefined_metric(m: Option<MetricArg>) -> Result<PredefinedMetric> {
    match m {
        None | Some(MetricArg::Hter) => Ok(PredefinedMetric::Hter),
        Some(MetricArg::Eer) => Ok(PredefinedMetric::Eer),
        Some(MetricArg::Acer) => Err(Error::InvalidInput(
            "the predefined protocol reports --metric hter or eer".into(),
        )),
    }
}

fn evaluate_intra(cli: &Cli, a: &EvaluateArgs, spec: &ProtocolSpec) -> Result<()> {
    if matches!(a.metric, Some(MetricArg::Hter)) {
        return Err(Error::InvalidInput("the intra protocol reports --metric acer or eer".into()));
    }
    let m = with_folds(absolutized(&load_manifest(&spec.train_manifests[0])?)?, spec.fold_count, cli.seed)?;
    let (factory, cfg) = model_setup(cli, &a.model, input_size(&m)?)?;
    write_run_json(&a.out, cli, serde_json::json!({ "protocol": spec, "model": factory, "train": cfg }))?;
    m.save(a.out.join("manifest.jsonl"))?;
    let data = load_images(&m, factory.input_channels())?;
    let opts = RunOptions {
        out_dir: Some(a.out.clone()),
        aggregation: aggregation(a),
    };
    let res = run_intra_on(&data, m.fold_count, &factory, &cfg, &opts)?;
    for f in &res.folds {
        let comp: Vec<String> = f
            .composition
            .classes
            .iter()
            .map(|(k, c)| format!("{k} {}/{}", c.train_videos, c.test_videos))
            .collect();
        println!("fold {} videos train/test: {}", f.trained.fold, comp.join(", "));
    }
    print!("{}", render_table(&[(factory.label().as_str(), &res.report)]));
    match a.metric {
        Some(MetricArg::Eer) => println!("EER: {:.4}", res.report.test_eer.mean),
        _ => println!("ACER: {:.4} +- {:.4}", res.report.acer.mean, res.report.acer.std),
    }
    println!(
        "data hygiene violations: {}, threshold provenance violations: {}",
        res.hygiene_violations(),
        res.report.provenance_violations()
    );
    Ok(())
}

fn evaluate_cross_unseen(cli: &Cli, a: &EvaluateArgs, spec: &ProtocolSpec) -> Result<()> {
    let intra_manifest = DatasetManifest::load(&spec.train_manifests[0])?;
    let run_dir = spec.train_manifests[0]
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    write_run_json(&a.out, cli, serde_json::json!({ "protocol": spec, "models": run_dir }))?;
    let trained = load_trained_folds(&run_dir, &intra_manifest)?;
    let unseen = load_manifest(&spec.test_manifests[0])?;
    let data = load_images(&unseen, trained[0].model.input_channels())?;
    let tags = if spec.scenario_tags.is_empty() {
        default_scenario_tags()
    } else {
        spec.scenario_tags.clone()
    };
    let opts = RunOptions {
        out_dir: Some(a.out.clone()),
        aggregation: aggregation(a),
    };
    let res = run_cross_unseen(&trained, &data, &tags, cli.threads, &opts)?;
    println!("{:<12}  {:<8}  {:>9}", "attack", "scenario", "APCER (%)");
    for (k, sc, v) in res.tagged_apcer() {
        println!("{k:<12}  {:<8}  {:>9.2}", format!("{sc:?}").to_lowercase(), 100.0 * v);
    }
    println!("BPCER (%): {:.2}", 100.0 * res.report.bpcer.mean);
    Ok(())
}

fn evaluate_predefined(cli: &Cli, a: &EvaluateArgs, spec: &ProtocolSpec) -> Result<()> {
    let metric = match spec.threshold_source {
        pad_core::evalmetrics::ThresholdSource::DevSplitEer => PredefinedMetric::Hter,
        pad_core::evalmetrics::ThresholdSource::TrainFoldEer => PredefinedMetric::Eer,
    };
    let train_m = absolutized(&load_manifest(&spec.train_manifests[0])?)?;
    let test_m = absolutized(&load_manifest(&spec.test_manifests[0])?)?;
    let (factory, cfg) = model_setup(cli, &a.model, input_size(&train_m)?)?;
    write_run_json(&a.out, cli, serde_json::json!({ "protocol": spec, "model": factory, "train": cfg }))?;
    let c = factory.input_channels();
    let (tr, te) = (load_images(&train_m, c)?, load_images(&test_m, c)?);
    let opts = RunOptions {
        out_dir: Some(a.out.clone()),
        aggregation: aggregation(a),
    };
    let res = run_predefined(&tr, &te, &factory, &cfg, metric, &opts)?;
    print!("{}", render_table(&[(factory.label().as_str(), &res.report)]));
    match metric {
        PredefinedMetric::Hter => println!("HTER: {:.4}", res.headline()),
        PredefinedMetric::Eer => println!("EER: {:.4}", res.headline()),
    }
    Ok(())
}

fn ablate(cli: &Cli, a: &AblateArgs) -> Result<()> {
    let m = with_folds(absolutized(&load_manifest(&a.manifest)?)?, a.folds, cli.seed)?;
    let backbone = backbone_spec(a.backbone, false, input_size(&m)?);
    let alphas = parse_alphas(a.alphas.as_deref(), a.backbone)?;
    let cfg = TrainConfig {
        batch_size: a.batch_size,
        threads: cli.threads,
        ..TrainConfig::mixnet(a.epochs, cli.seed)
    };
    let spec_cfg = TrainConfig {
        batch_size: a.specialist_batch_size,
        ..cfg.clone()
    };
    cfg.validate()?;
    spec_cfg.validate()?;
    write_run_json(
        &a.out,
        cli,
        serde_json::json!({ "backbone": backbone, "alphas": alphas, "train": cfg, "specialist_train": spec_cfg }),
    )?;
    m.save(a.out.join("manifest.jsonl"))?;
    let data = load_images(&m, 3)?;
    let (_, report) = run_ablation(
        &data,
        m.fold_count,
        backbone,
        alphas,
        &cfg,
        &spec_cfg,
        &RunOptions::in_dir(&a.out),
    )?;
    let rows: Vec<(&str, &pad_core::evalmetrics::MetricsReport)> =
        report.rows.iter().map(|r| (r.method.as_str(), &r.report)).collect();
    print!("{}", render_table(&rows));
    print!("{}", report.render());
    Ok(())
}

fn cam_cmd(cli: &Cli, a: &CamArgs) -> Result<()> {
    let branch = match a.branch {
        BranchArg::Print => AttackType::Print,
        BranchArg::Replay => AttackType::Replay,
        BranchArg::Mask => AttackType::Mask,
    };
    let class = match a.class {
        CamClassArg::Attack => CamClass::Attack,
        CamClassArg::Genuine => CamClass::Genuine,
    };
    write_run_json(&a.out, cli, serde_json::json!({ "branch": branch, "class": class }))?;
    let (model, _) = MixNetModel::load(&a.weights)?;
    let mut m = load_manifest(&a.manifest)?;
    if let Some(n) = a.limit {
        m.records.truncate(n);
    }
    let data = load_images(&m, model.config().input_size().2)?;
    let maps_dir = a.out.join("maps");
    create_out(&maps_dir)?;
    #[derive(Serialize)]
    struct Row<'a> {
        sample_id: &'a str,
        class: String,
        branch: AttackType,
        signature_region_ratio: f64,
    }
    let mut lines = String::new();
    let (mut hits, mut own) = (0usize, 0usize);
    for d in &data {
        let map = cam(&model, &d.tensor, branch, class, d.record.sample_id.clone())?;
        map.save_png(&maps_dir.join(format!("{}.png", d.record.sample_id)))?;
        let ratio = map.region_mass_ratio(signature_region(map.height, map.width));
        if d.record.attack_class.attack_type() == Some(branch) {
            own += 1;
            hits += usize::from(ratio >= 2.0);
        }
        lines.push_str(&serde_json::to_string(&Row {
            sample_id: &d.record.sample_id,
            class: d.record.attack_class.to_string(),
            branch,
            signature_region_ratio: ratio,
        })?);
        lines.push('\n');
    }
    write_file(&a.out.join("cams.jsonl"), lines)?;
    println!("wrote {} maps to {}", data.len(), maps_dir.display());
    if own > 0 {
        println!("{branch} frames with >= 2x signature-region mass: {hits}/{own}");
    }
    Ok(())
}

fn scatter(cli: &Cli, a: &ScatterArgs) -> Result<()> {
    write_run_json(&a.out, cli, serde_json::json!({}))?;
    let records = read_scores(&a.scores)?;
    let stem = a.out.join("scatter");
    if a.two_d {
        let files = score_scatter_export_2d(&records, &stem)?;
        println!("wrote {}", files.png.display());
    } else {
        let (rows, files) = score_scatter_export(&records, &stem)?;
        println!("wrote {} rows to {}", rows.len(), files.table.expect("3D export writes a table").display());
    }
    Ok(())
}

fn roc(cli: &Cli, a: &RocArgs) -> Result<()> {
    if !a.label.is_empty() && a.label.len() != a.scores.len() {
        return Err(Error::InvalidInput(format!(
            "{} labels for {} score files",
            a.label.len(),
            a.scores.len()
        )));
    }
    write_run_json(&a.out, cli, serde_json::json!({}))?;
    let mut series = Vec::new();
    for (i, path) in a.scores.iter().enumerate() {
        let scored = read_scores(path)?
            .iter()
            .map(ScoreRecord::scored)
            .collect::<Result<Vec<_>>>()?;
        let r = roc_and_eer(&scored)?;
        let label = a.label.get(i).cloned().unwrap_or_else(|| default_label(path, i));
        println!("{label}: EER {:.4}, AUC {:.4}", r.eer, r.auc);
        series.push(RocSeries {
            label,
            points: r.points(),
        });
    }
    roc_plot(&series, &a.out.join("roc.png"), &a.out.join("roc.svg"))?;
    Ok(())
}

/// File stem, or the parent directory name for generic `scores.jsonl` files.
fn default_label(path: &Path, i: usize) -> String {
    let name = |p: Option<&std::ffi::OsStr>| p.map(|s| s.to_string_lossy().into_owned());
    match name(path.file_stem()) {
        Some(stem) if stem != "scores" => stem,
        _ => path
            .parent()
            .and_then(|p| name(p.file_name()))
            .unwrap_or_else(|| format!("series{i}")),
    }
}
