//! Experimental protocols: k-fold intra-database, cross/unseen evaluation of
//! the intra-trained fold models, predefined train/test splits, and the
//! joint-versus-independent ablation.
//!
//! Run directory layout (`<out>` is the protocol's output directory):
//!
//! ```text
//! <out>/metrics.json
//! <out>/scores.jsonl          test scores of every fold, fold order
//! <out>/composition.json      per-fold class inventory
//! <out>/<fold>/checkpoint
//! <out>/<fold>/scores.jsonl   test scores of this fold's model
//! <out>/<fold>/fit_scores.jsonl
//! <out>/<fold>/train_log.jsonl
//! <out>/<fold>/batches.jsonl
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datamodel::{AttackClass, AttackType, DatasetManifest, MaskSubtype, SampleRecord};
use crate::error::{Error, Result};
use crate::evalmetrics::{
    evaluate_protocol, read_scores, render_attack_wise, write_scores, FoldScores, MetricsReport, ScoreRecord,
    ScoredSample, ThresholdSource,
};
use crate::features::{train_svm, Descriptor, FeatureVector, SvmConfig, SvmModel};
use crate::imaging::{load_images, tensor_to_gray, LabeledImage};
use crate::mix_seed;
use crate::mixnet::{build_vanilla, Alphas, Combine, FusionKind, MixNetConfig, MixNetModel, TrainingMeta};
use crate::nn::BackboneSpec;
use crate::trainer::{
    ordered_map, split_videos, train_independent_on, train_mixnet_on, train_vanilla_on, write_epoch_log, BatchLog,
    Detector, EpochLog, TrainConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolName {
    IntraDatabase,
    CrossUnseen,
    PredefinedSplit,
}

impl ProtocolName {
    /// Command-line spelling.
    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolName::IntraDatabase => "intra",
            ProtocolName::CrossUnseen => "cross-unseen",
            ProtocolName::PredefinedSplit => "predefined",
        }
    }
}

impl fmt::Display for ProtocolName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProtocolName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intra" | "intra_database" => Ok(ProtocolName::IntraDatabase),
            "cross-unseen" | "cross_unseen" => Ok(ProtocolName::CrossUnseen),
            "predefined" | "predefined_split" => Ok(ProtocolName::PredefinedSplit),
            _ => Err(Error::InvalidInput(format!("unknown protocol `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Seen,
    Cross,
    Unseen,
}

/// Genuine is seen, silicone masks are cross-database, every other mask
/// subtype is unseen.
pub fn default_scenario_tags() -> BTreeMap<String, Scenario> {
    let mut tags = BTreeMap::new();
    tags.insert("genuine".to_string(), Scenario::Seen);
    for s in MaskSubtype::ALL {
        let sc = if s == MaskSubtype::Silicone {
            Scenario::Cross
        } else {
            Scenario::Unseen
        };
        tags.insert(s.as_str().to_string(), sc);
    }
    tags
}

/// Protocol definition file contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub name: ProtocolName,
    pub train_manifests: Vec<PathBuf>,
    pub test_manifests: Vec<PathBuf>,
    pub fold_count: u32,
    pub threshold_source: ThresholdSource,
    #[serde(default)]
    pub scenario_tags: BTreeMap<String, Scenario>,
}

impl ProtocolSpec {
    pub fn intra(manifest: impl Into<PathBuf>, fold_count: u32) -> Self {
        ProtocolSpec {
            name: ProtocolName::IntraDatabase,
            train_manifests: vec![manifest.into()],
            test_manifests: Vec::new(),
            fold_count,
            threshold_source: ThresholdSource::TrainFoldEer,
            scenario_tags: BTreeMap::new(),
        }
    }

    /// Evaluation of intra-trained models on `unseen`; `train` is the intra
    /// manifest the models came from.
    pub fn cross_unseen(train: impl Into<PathBuf>, unseen: impl Into<PathBuf>, fold_count: u32) -> Self {
        ProtocolSpec {
            name: ProtocolName::CrossUnseen,
            train_manifests: vec![train.into()],
            test_manifests: vec![unseen.into()],
            fold_count,
            threshold_source: ThresholdSource::TrainFoldEer,
            scenario_tags: default_scenario_tags(),
        }
    }

    pub fn predefined(train: impl Into<PathBuf>, test: impl Into<PathBuf>, metric: PredefinedMetric) -> Self {
        ProtocolSpec {
            name: ProtocolName::PredefinedSplit,
            train_manifests: vec![train.into()],
            test_manifests: vec![test.into()],
            fold_count: 1,
            threshold_source: metric.threshold_source(),
            scenario_tags: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("protocol `{}`: {m}", self.name)));
        if self.train_manifests.is_empty() {
            return bad("no training manifest");
        }
        match self.name {
            ProtocolName::IntraDatabase if self.fold_count < 2 => bad("needs at least 2 folds"),
            ProtocolName::CrossUnseen | ProtocolName::PredefinedSplit if self.test_manifests.is_empty() => {
                bad("no test manifest")
            }
            ProtocolName::CrossUnseen if self.scenario_tags.is_empty() => bad("no scenario tags"),
            _ => Ok(()),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: ProtocolSpec = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// One row of a published video inventory. Paths are left to the user.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct InventoryRow {
    pub class: &'static str,
    pub source: &'static str,
    pub videos: usize,
    pub scenario: Option<Scenario>,
}

/// Video counts of the merged SMAD + SiW-M intra-database protocol.
pub fn intra_reference_inventory() -> Vec<InventoryRow> {
    let row = |class, source, videos| InventoryRow {
        class,
        source,
        videos,
        scenario: None,
    };
    vec![
        row("genuine", "SMAD", 65),
        row("genuine", "SiW-M (train split)", 217),
        row("print", "SiW-M", 104),
        row("replay", "SiW-M", 99),
        row("mask", "SMAD", 65),
    ]
}

/// Video counts of the cross and unseen attack protocol.
pub fn cross_unseen_reference_inventory() -> Vec<InventoryRow> {
    let row = |class, videos, scenario| InventoryRow {
        class,
        source: "SiW-M",
        videos,
        scenario: Some(scenario),
    };
    vec![
        row("genuine", 131, Scenario::Seen),
        row("silicone", 27, Scenario::Cross),
        row("paper", 17, Scenario::Unseen),
        row("half", 72, Scenario::Unseen),
        row("transparent", 88, Scenario::Unseen),
        row("mannequin", 40, Scenario::Unseen),
    ]
}

/// Videos and frames of one class on each side of a fold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCount {
    pub train_videos: usize,
    pub train_frames: usize,
    pub test_videos: usize,
    pub test_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldComposition {
    pub fold: u32,
    pub classes: BTreeMap<String, ClassCount>,
}

fn composition(fold: u32, train: &[&LabeledImage], test: &[&LabeledImage]) -> FoldComposition {
    let mut classes: BTreeMap<String, ClassCount> = BTreeMap::new();
    let mut videos: BTreeSet<(bool, &str)> = BTreeSet::new();
    for (is_test, set) in [(false, train), (true, test)] {
        for d in set {
            let c = classes
                .entry(d.record.attack_class.detail_name().to_string())
                .or_default();
            let new_video = videos.insert((is_test, d.record.video_id()));
            if is_test {
                c.test_frames += 1;
                c.test_videos += usize::from(new_video);
            } else {
                c.train_frames += 1;
                c.train_videos += usize::from(new_video);
            }
        }
    }
    FoldComposition { fold, classes }
}

/// Builds and trains one detector per training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelFactory {
    MixNet {
        backbone: BackboneSpec,
        /// Three branch weights plus the final weight; narrowed to the
        /// attacks present when the data has fewer than three.
        alphas: Alphas,
        fusion: FusionKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<PathBuf>,
    },
    Vanilla {
        backbone: BackboneSpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<PathBuf>,
    },
    Independent {
        backbone: BackboneSpec,
        combine: Combine,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<PathBuf>,
    },
    Handcrafted {
        descriptor: Descriptor,
        svm: SvmConfig,
    },
}

impl ModelFactory {
    pub fn mixnet(backbone: BackboneSpec, alphas: Alphas) -> Self {
        ModelFactory::MixNet {
            backbone,
            alphas,
            fusion: FusionKind::Trainable,
            weights: None,
        }
    }

    pub fn label(&self) -> String {
        match self {
            ModelFactory::MixNet { backbone, .. } => format!("mixnet-{}", backbone.family),
            ModelFactory::Vanilla { backbone, .. } => backbone.family.to_string(),
            ModelFactory::Independent { backbone, combine, .. } => {
                format!("independent-{combine}-{}", backbone.family)
            }
            ModelFactory::Handcrafted { descriptor, .. } => descriptor.id().to_string(),
        }
    }

    /// Channels of the decoded input tensors this factory trains on.
    pub fn input_channels(&self) -> usize {
        match self {
            ModelFactory::MixNet { backbone, .. }
            | ModelFactory::Vanilla { backbone, .. }
            | ModelFactory::Independent { backbone, .. } => backbone.input_size.2,
            ModelFactory::Handcrafted { .. } => 1,
        }
    }

    /// MixNet configuration for the attacks present in the training data.
    pub fn mixnet_config(&self, attacks: &[AttackType]) -> Result<MixNetConfig> {
        let ModelFactory::MixNet {
            backbone, alphas, fusion, ..
        } = self
        else {
            return Err(Error::InvalidInput(format!("`{}` is not a MixNet factory", self.label())));
        };
        let alphas = select_alphas(alphas, attacks)?;
        let mut cfg = MixNetConfig::new(attacks, *backbone, alphas)?;
        cfg.fusion = *fusion;
        Ok(cfg)
    }

    /// Trains a fresh model on `data`.
    pub fn fit(&self, data: &[LabeledImage], config: &TrainConfig) -> Result<Fitted> {
        let attacks = attacks_in(data);
        if attacks.is_empty() || !data.iter().any(|d| !d.record.attack_class.is_attack()) {
            return Err(Error::InvalidInput(
                "training data needs genuine samples and at least one attack".into(),
            ));
        }
        match self {
            ModelFactory::MixNet { weights, .. } => {
                let mut model = MixNetModel::build(self.mixnet_config(&attacks)?, config.seed)?;
                if let Some(w) = weights {
                    model.load_weights(w)?;
                }
                let out = train_mixnet_on(model, data, config)?;
                Ok(Fitted::neural(Detector::MixNet(out.model), out.epochs, out.batches))
            }
            ModelFactory::Vanilla { backbone, weights } => {
                let mut model = build_vanilla(*backbone, config.seed)?;
                if let Some(w) = weights {
                    model.load_weights(w)?;
                }
                let out = train_vanilla_on(model, data, config, "vanilla")?;
                Ok(Fitted::neural(Detector::Vanilla(out.model), out.epochs, out.batches))
            }
            ModelFactory::Independent {
                backbone,
                combine,
                weights,
            } => {
                let mut out = train_independent_on(*backbone, &attacks, data, config, *combine)?;
                if let Some(w) = weights {
                    // Specialists start from the external weights, so retrain.
                    let mut specialists = Vec::new();
                    out.epochs.clear();
                    out.batches.clear();
                    for (k, &attack) in attacks.iter().enumerate() {
                        let subset = specialist_subset(data, attack);
                        let mut m = build_vanilla(*backbone, mix_seed(config.seed, 0x51 + k as u64))?;
                        m.load_weights(w)?;
                        let cfg = TrainConfig {
                            seed: mix_seed(config.seed, 0x61 + k as u64),
                            checkpoint: None,
                            ..config.clone()
                        };
                        let o = train_vanilla_on(m, &subset, &cfg, attack.as_str())?;
                        specialists.push((attack, o.model));
                        out.epochs.extend(o.epochs);
                        out.batches.extend(o.batches);
                    }
                    out.model.specialists = specialists;
                }
                Ok(Fitted::neural(Detector::Independent(out.model), out.epochs, out.batches))
            }
            ModelFactory::Handcrafted { descriptor, svm } => {
                let feats = extract_features(*descriptor, data, config.threads)?;
                let labels: Vec<bool> = data.iter().map(|d| d.record.attack_class.is_attack()).collect();
                let svm_cfg = SvmConfig {
                    seed: config.seed,
                    ..svm.clone()
                };
                let model = train_svm(&feats, &labels, &svm_cfg)?;
                let batches = vec![BatchLog {
                    stage: "svm".into(),
                    epoch: 0,
                    batch: 0,
                    sample_ids: data.iter().map(|d| d.record.sample_id.clone()).collect(),
                }];
                Ok(Fitted {
                    model: FittedModel::Handcrafted(model),
                    epochs: Vec::new(),
                    batches,
                })
            }
        }
    }
}

fn specialist_subset(data: &[LabeledImage], attack: AttackType) -> Vec<LabeledImage> {
    data.iter()
        .filter(|d| {
            let c = d.record.attack_class;
            c == AttackClass::Genuine || c.attack_type() == Some(attack)
        })
        .cloned()
        .collect()
}

/// Narrows a three-branch weight set to `attacks`; weight sets that already
/// match the attack count pass through.
pub fn select_alphas(alphas: &Alphas, attacks: &[AttackType]) -> Result<Alphas> {
    if alphas.branch.len() == attacks.len() {
        return Ok(alphas.clone());
    }
    if alphas.branch.len() == AttackType::ALL.len() {
        let branch = attacks
            .iter()
            .map(|a| alphas.branch[AttackType::ALL.iter().position(|x| x == a).expect("known attack")])
            .collect();
        return Ok(Alphas::new(branch, alphas.final_weight));
    }
    Err(Error::InvalidInput(format!(
        "{} branch loss weights for {} attacks",
        alphas.branch.len(),
        attacks.len()
    )))
}

/// Attack types present, in branch order.
pub fn attacks_in(data: &[LabeledImage]) -> Vec<AttackType> {
    let present: BTreeSet<AttackType> = data.iter().filter_map(|d| d.record.attack_class.attack_type()).collect();
    present.into_iter().collect()
}

pub fn extract_features(descriptor: Descriptor, data: &[LabeledImage], threads: usize) -> Result<Vec<FeatureVector>> {
    ordered_map(threads, data, |d| descriptor.extract(&tensor_to_gray(&d.tensor)))
}

/// A trained model with its training logs.
#[derive(Clone, Debug)]
pub struct Fitted {
    pub model: FittedModel,
    pub epochs: Vec<EpochLog>,
    pub batches: Vec<BatchLog>,
}

impl Fitted {
    fn neural(d: Detector, epochs: Vec<EpochLog>, batches: Vec<BatchLog>) -> Self {
        Fitted {
            model: FittedModel::Neural(d),
            epochs,
            batches,
        }
    }
}

#[derive(Clone, Debug)]
pub enum FittedModel {
    Neural(Detector),
    Handcrafted(SvmModel),
}

impl FittedModel {
    pub fn score(&self, data: &[LabeledImage], threads: usize) -> Result<Vec<crate::datamodel::ScoreQuadruple>> {
        match self {
            FittedModel::Neural(d) => d.score(data, threads),
            FittedModel::Handcrafted(svm) => {
                let descriptor = Descriptor::from_id(&svm.descriptor_id)?;
                ordered_map(threads, data, |d| {
                    let f = descriptor.extract(&tensor_to_gray(&d.tensor))?;
                    Ok(crate::datamodel::ScoreQuadruple {
                        print_score: None,
                        replay_score: None,
                        mask_score: None,
                        final_score: svm.predict_score(&f)?,
                    })
                })
            }
        }
    }

    pub fn input_channels(&self) -> usize {
        match self {
            FittedModel::Neural(d) => d.input_channels(),
            FittedModel::Handcrafted(_) => 1,
        }
    }

    pub fn save(&self, path: &Path, meta: &TrainingMeta) -> Result<()> {
        match self {
            FittedModel::Neural(d) => d.save(path, meta),
            FittedModel::Handcrafted(svm) => svm.save(path),
        }
    }

    /// Loads a neural archive or an SVM JSON file.
    pub fn load(path: &Path) -> Result<Self> {
        let mut head = [0u8; 1];
        {
            use std::io::Read;
            let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
            f.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
        }
        if head[0] == b'{' {
            Ok(FittedModel::Handcrafted(SvmModel::load(path)?))
        } else {
            Ok(FittedModel::Neural(Detector::load(path)?))
        }
    }
}

/// How frame scores are turned into evaluation samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Frame,
    /// One sample per video carrying its mean frame score.
    VideoMean,
}

impl Aggregation {
    pub fn apply(self, records: &[&SampleRecord], scores: &[ScoreRecord]) -> Result<Vec<ScoredSample>> {
        let frames: Vec<ScoredSample> = scores.iter().map(ScoreRecord::scored).collect::<Result<_>>()?;
        match self {
            Aggregation::Frame => Ok(frames),
            Aggregation::VideoMean => Ok(video_mean(records, &frames)),
        }
    }
}

/// Mean score per video, in order of first appearance.
pub fn video_mean(records: &[&SampleRecord], frames: &[ScoredSample]) -> Vec<ScoredSample> {
    let mut order: Vec<&str> = Vec::new();
    let mut acc: BTreeMap<&str, (f64, usize, AttackClass)> = BTreeMap::new();
    for (r, s) in records.iter().zip(frames) {
        let v = r.video_id();
        let e = acc.entry(v).or_insert_with(|| {
            order.push(v);
            (0.0, 0, r.attack_class)
        });
        e.0 += s.final_score;
        e.1 += 1;
    }
    order
        .into_iter()
        .map(|v| {
            let (sum, n, class) = acc[v];
            ScoredSample::new(v, sum / n as f64, class)
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Where checkpoints, logs and score files go; nothing is written when
    /// absent.
    pub out_dir: Option<PathBuf>,
    pub aggregation: Aggregation,
}

impl RunOptions {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        RunOptions {
            out_dir: Some(dir.into()),
            ..Default::default()
        }
    }
}

/// A fold model together with the training-split scores its threshold is fit
/// on.
#[derive(Clone, Debug)]
pub struct TrainedFold {
    pub fold: u32,
    pub model: FittedModel,
    pub fit_records: Vec<SampleRecord>,
    pub fit_scores: Vec<ScoreRecord>,
}

#[derive(Clone, Debug)]
pub struct FoldRun {
    pub trained: TrainedFold,
    pub test_records: Vec<SampleRecord>,
    pub test_scores: Vec<ScoreRecord>,
    pub epochs: Vec<EpochLog>,
    pub batches: Vec<BatchLog>,
    pub composition: FoldComposition,
    /// Test samples that appear in the fold model's batch log.
    pub hygiene_violations: usize,
}

#[derive(Clone, Debug)]
pub struct IntraOutcome {
    pub folds: Vec<FoldRun>,
    pub report: MetricsReport,
    pub aggregation: Aggregation,
}

impl IntraOutcome {
    pub fn hygiene_violations(&self) -> usize {
        self.folds.iter().map(|f| f.hygiene_violations).sum()
    }

    pub fn trained_folds(&self) -> Vec<TrainedFold> {
        self.folds.iter().map(|f| f.trained.clone()).collect()
    }

    /// Test scores of every fold, fold order.
    pub fn test_scores(&self) -> Vec<ScoreRecord> {
        self.folds.iter().flat_map(|f| f.test_scores.iter().cloned()).collect()
    }
}

fn fold_dir(out: &Path, fold: u32) -> PathBuf {
    out.join(fold.to_string())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn score_records(data: &[&LabeledImage], model: &FittedModel, threads: usize) -> Result<Vec<ScoreRecord>> {
    let owned: Vec<LabeledImage> = data.iter().map(|d| (*d).clone()).collect();
    let scores = model.score(&owned, threads)?;
    Ok(owned.iter().zip(&scores).map(|(d, s)| ScoreRecord::new(&d.record, s)).collect())
}

/// k-fold cross-validation over the manifest's fold assignment.
pub fn run_intra(
    manifest: &DatasetManifest,
    factory: &ModelFactory,
    config: &TrainConfig,
    options: &RunOptions,
) -> Result<IntraOutcome> {
    let data = load_images(manifest, factory.input_channels())?;
    run_intra_on(&data, manifest.fold_count, factory, config, options)
}

/// [`run_intra`] on already decoded images. Every record needs a fold.
pub fn run_intra_on(
    data: &[LabeledImage],
    fold_count: u32,
    factory: &ModelFactory,
    config: &TrainConfig,
    options: &RunOptions,
) -> Result<IntraOutcome> {
    config.validate()?;
    if fold_count < 2 {
        return Err(Error::InvalidInput(format!("intra protocol needs >= 2 folds, got {fold_count}")));
    }
    if let Some(r) = data.iter().find(|d| d.record.fold.is_none()) {
        return Err(Error::InvalidInput(format!(
            "sample `{}` has no fold assignment",
            r.record.sample_id
        )));
    }
    if let Some(out) = &options.out_dir {
        create_dir(out)?;
    }

    let mut folds = Vec::with_capacity(fold_count as usize);
    for k in 0..fold_count {
        let (train, test): (Vec<&LabeledImage>, Vec<&LabeledImage>) =
            data.iter().partition(|d| d.record.fold != Some(k));
        if train.is_empty() || test.is_empty() {
            return Err(Error::InvalidInput(format!("fold {k} has an empty train or test split")));
        }
        let comp = composition(k, &train, &test);
        let dir = options.out_dir.as_deref().map(|o| fold_dir(o, k));
        if let Some(d) = &dir {
            create_dir(d)?;
        }
        let cfg = TrainConfig {
            seed: mix_seed(config.seed, 0xF0 + u64::from(k)),
            checkpoint: None,
            ..config.clone()
        };
        let train_owned: Vec<LabeledImage> = train.iter().map(|d| (*d).clone()).collect();
        let fitted = factory.fit(&train_owned, &cfg)?;
        drop(train_owned);

        let fit_scores = score_records(&train, &fitted.model, config.threads)?;
        let test_scores = score_records(&test, &fitted.model, config.threads)?;
        let test_ids: BTreeSet<&str> = test.iter().map(|d| d.record.sample_id.as_str()).collect();
        let hygiene_violations = fitted
            .batches
            .iter()
            .flat_map(|b| &b.sample_ids)
            .filter(|id| test_ids.contains(id.as_str()))
            .count();

        if let Some(d) = &dir {
            let meta = TrainingMeta {
                epoch: config.epochs,
                seed: cfg.seed,
                alphas: match factory {
                    ModelFactory::MixNet { .. } => Some(factory.mixnet_config(&attacks_in_refs(&train))?.alphas),
                    _ => None,
                },
            };
            fitted.model.save(&d.join("checkpoint"), &meta)?;
            write_scores(&d.join("scores.jsonl"), &test_scores)?;
            write_scores(&d.join("fit_scores.jsonl"), &fit_scores)?;
            write_epoch_log(&d.join("train_log.jsonl"), &fitted.epochs)?;
            write_jsonl(&d.join("batches.jsonl"), &fitted.batches)?;
        }

        folds.push(FoldRun {
            trained: TrainedFold {
                fold: k,
                model: fitted.model,
                fit_records: train.iter().map(|d| d.record.clone()).collect(),
                fit_scores,
            },
            test_records: test.iter().map(|d| d.record.clone()).collect(),
            test_scores,
            epochs: fitted.epochs,
            batches: fitted.batches,
            composition: comp,
            hygiene_violations,
        });
    }

    let fold_scores = folds
        .iter()
        .map(|f| {
            Ok(FoldScores {
                fold: f.trained.fold,
                fit: options
                    .aggregation
                    .apply(&f.trained.fit_records.iter().collect::<Vec<_>>(), &f.trained.fit_scores)?,
                test: options
                    .aggregation
                    .apply(&f.test_records.iter().collect::<Vec<_>>(), &f.test_scores)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate_protocol(&fold_scores, ThresholdSource::TrainFoldEer)?;
    let outcome = IntraOutcome {
        folds,
        report,
        aggregation: options.aggregation,
    };
    if let Some(out) = &options.out_dir {
        write_outputs(out, &outcome.report, &outcome.test_scores())?;
        let comps: Vec<&FoldComposition> = outcome.folds.iter().map(|f| &f.composition).collect();
        write_json(&out.join("composition.json"), &comps)?;
    }
    Ok(outcome)
}

fn attacks_in_refs(data: &[&LabeledImage]) -> Vec<AttackType> {
    let present: BTreeSet<AttackType> = data.iter().filter_map(|d| d.record.attack_class.attack_type()).collect();
    present.into_iter().collect()
}

fn write_outputs(out: &Path, report: &MetricsReport, scores: &[ScoreRecord]) -> Result<()> {
    std::fs::write(out.join("metrics.json"), report.to_json() + "\n").map_err(|e| Error::io(out, e))?;
    write_scores(&out.join("scores.jsonl"), scores)
}

/// Reloads the fold models and training-split scores of an intra run
/// directory.
pub fn load_trained_folds(run_dir: &Path, manifest: &DatasetManifest) -> Result<Vec<TrainedFold>> {
    let by_id: BTreeMap<&str, &SampleRecord> = manifest.records.iter().map(|r| (r.sample_id.as_str(), r)).collect();
    let mut folds = Vec::new();
    for k in 0..manifest.fold_count {
        let dir = fold_dir(run_dir, k);
        let checkpoint = dir.join("checkpoint");
        if !checkpoint.exists() {
            return Err(Error::InvalidInput(format!(
                "{} does not exist; run the intra protocol first",
                checkpoint.display()
            )));
        }
        let model = FittedModel::load(&checkpoint)?;
        let fit_scores = read_scores(&dir.join("fit_scores.jsonl"))?;
        let fit_records = fit_scores
            .iter()
            .map(|s| {
                by_id.get(s.sample_id.as_str()).map(|r| (*r).clone()).ok_or_else(|| {
                    Error::InvalidInput(format!("fit sample `{}` is not in manifest `{}`", s.sample_id, manifest.name))
                })
            })
            .collect::<Result<_>>()?;
        folds.push(TrainedFold {
            fold: k,
            model,
            fit_records,
            fit_scores,
        });
    }
    Ok(folds)
}

#[derive(Clone, Debug)]
pub struct CrossUnseenOutcome {
    pub report: MetricsReport,
    /// Scenario of every attack subtype present, plus genuine.
    pub scenarios: BTreeMap<String, Scenario>,
    /// Per fold model, the unseen scores sorted by sample id.
    pub scores: Vec<(u32, Vec<ScoreRecord>)>,
}

impl CrossUnseenOutcome {
    /// Attack-wise APCER rows with their scenario tags.
    pub fn tagged_apcer(&self) -> Vec<(String, Scenario, f64)> {
        self.report
            .attack_wise_apcer
            .iter()
            .map(|(k, v)| (k.clone(), self.scenarios[k], *v))
            .collect()
    }
}

/// Scores `unseen` with every intra fold model, each thresholded on its own
/// training-split scores. No training happens here.
pub fn run_cross_unseen(
    trained: &[TrainedFold],
    unseen: &[LabeledImage],
    tags: &BTreeMap<String, Scenario>,
    threads: usize,
    options: &RunOptions,
) -> Result<CrossUnseenOutcome> {
    if trained.is_empty() {
        return Err(Error::InvalidInput("no trained fold models".into()));
    }
    let mut scenarios = BTreeMap::new();
    for d in unseen {
        let name = d.record.attack_class.detail_name();
        let tag = tags
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("no scenario tag for `{name}`")))?;
        scenarios.insert(name.to_string(), *tag);
    }
    let mut sorted: Vec<&LabeledImage> = unseen.iter().collect();
    sorted.sort_by(|a, b| a.record.sample_id.cmp(&b.record.sample_id));
    let records: Vec<&SampleRecord> = sorted.iter().map(|d| &d.record).collect();

    if let Some(out) = &options.out_dir {
        create_dir(out)?;
    }
    let mut fold_scores = Vec::with_capacity(trained.len());
    let mut scores = Vec::with_capacity(trained.len());
    for t in trained {
        let s = score_records(&sorted, &t.model, threads)?;
        fold_scores.push(FoldScores {
            fold: t.fold,
            fit: options
                .aggregation
                .apply(&t.fit_records.iter().collect::<Vec<_>>(), &t.fit_scores)?,
            test: options.aggregation.apply(&records, &s)?,
        });
        if let Some(out) = &options.out_dir {
            let d = fold_dir(out, t.fold);
            create_dir(&d)?;
            write_scores(&d.join("scores.jsonl"), &s)?;
        }
        scores.push((t.fold, s));
    }
    let report = evaluate_protocol(&fold_scores, ThresholdSource::TrainFoldEer)?;
    if let Some(out) = &options.out_dir {
        let all: Vec<ScoreRecord> = scores.iter().flat_map(|(_, s)| s.iter().cloned()).collect();
        write_outputs(out, &report, &all)?;
        write_json(&out.join("scenarios.json"), &scenarios)?;
    }
    Ok(CrossUnseenOutcome {
        report,
        scenarios,
        scores,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredefinedMetric {
    /// Threshold from a development split of the training data.
    Hter,
    /// Threshold from the training scores; the test EER is the headline.
    Eer,
}

impl PredefinedMetric {
    pub fn threshold_source(self) -> ThresholdSource {
        match self {
            PredefinedMetric::Hter => ThresholdSource::DevSplitEer,
            PredefinedMetric::Eer => ThresholdSource::TrainFoldEer,
        }
    }
}

impl FromStr for PredefinedMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hter" => Ok(PredefinedMetric::Hter),
            "eer" => Ok(PredefinedMetric::Eer),
            _ => Err(Error::InvalidInput(format!("unknown metric `{s}` for the predefined protocol"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PredefinedOutcome {
    pub model: FittedModel,
    pub report: MetricsReport,
    pub metric: PredefinedMetric,
    pub test_scores: Vec<ScoreRecord>,
    pub dev_sample_ids: Vec<String>,
}

impl PredefinedOutcome {
    /// HTER or test EER, depending on the metric.
    pub fn headline(&self) -> f64 {
        match self.metric {
            PredefinedMetric::Hter => self.report.hter.map(|h| h.mean).unwrap_or(f64::NAN),
            PredefinedMetric::Eer => self.report.test_eer.mean,
        }
    }
}

/// Fails when a subject occurs on both sides.
pub fn check_subject_disjoint(train: &[LabeledImage], test: &[LabeledImage]) -> Result<()> {
    let a: BTreeSet<&str> = train.iter().map(|d| d.record.subject_key()).collect();
    let shared: Vec<&str> = test
        .iter()
        .map(|d| d.record.subject_key())
        .filter(|s| a.contains(s))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::Invariant(format!(
            "{} subjects occur in both train and test (first: `{}`)",
            shared.len(),
            shared[0]
        )))
    }
}

/// One train/test run on a published split.
pub fn run_predefined(
    train: &[LabeledImage],
    test: &[LabeledImage],
    factory: &ModelFactory,
    config: &TrainConfig,
    metric: PredefinedMetric,
    options: &RunOptions,
) -> Result<PredefinedOutcome> {
    config.validate()?;
    check_subject_disjoint(train, test)?;
    let (fit_idx, dev_idx) = match metric {
        PredefinedMetric::Hter => split_videos(train, 0.2, config.seed),
        PredefinedMetric::Eer => ((0..train.len()).collect(), Vec::new()),
    };
    if metric == PredefinedMetric::Hter && dev_idx.is_empty() {
        return Err(Error::InvalidInput("too few training videos for a development split".into()));
    }
    let fit_set: Vec<LabeledImage> = fit_idx.iter().map(|&i| train[i].clone()).collect();
    let threshold_set: Vec<&LabeledImage> = match metric {
        PredefinedMetric::Hter => dev_idx.iter().map(|&i| &train[i]).collect(),
        PredefinedMetric::Eer => train.iter().collect(),
    };
    let fitted = factory.fit(&fit_set, config)?;
    let fit_scores = score_records(&threshold_set, &fitted.model, config.threads)?;
    let test_refs: Vec<&LabeledImage> = test.iter().collect();
    let test_scores = score_records(&test_refs, &fitted.model, config.threads)?;
    let fit_records: Vec<&SampleRecord> = threshold_set.iter().map(|d| &d.record).collect();
    let test_records: Vec<&SampleRecord> = test.iter().map(|d| &d.record).collect();
    let folds = [FoldScores {
        fold: 0,
        fit: options.aggregation.apply(&fit_records, &fit_scores)?,
        test: options.aggregation.apply(&test_records, &test_scores)?,
    }];
    let mut report = evaluate_protocol(&folds, metric.threshold_source())?;
    if metric == PredefinedMetric::Eer {
        report.hter = None;
    }
    if let Some(out) = &options.out_dir {
        let d = fold_dir(out, 0);
        create_dir(&d)?;
        fitted.model.save(
            &d.join("checkpoint"),
            &TrainingMeta {
                epoch: config.epochs,
                seed: config.seed,
                alphas: None,
            },
        )?;
        write_epoch_log(&d.join("train_log.jsonl"), &fitted.epochs)?;
        write_jsonl(&d.join("batches.jsonl"), &fitted.batches)?;
        write_scores(&d.join("scores.jsonl"), &test_scores)?;
        write_scores(&d.join("fit_scores.jsonl"), &fit_scores)?;
        write_outputs(out, &report, &test_scores)?;
    }
    Ok(PredefinedOutcome {
        model: fitted.model,
        report,
        metric,
        test_scores,
        dev_sample_ids: dev_idx.iter().map(|&i| train[i].record.sample_id.clone()).collect(),
    })
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub method: String,
    pub report: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub attacks: Vec<String>,
    /// Attacks where the joint model's APCER is at most the independent-max
    /// APCER.
    pub mixnet_not_worse: Vec<String>,
}

impl AblationReport {
    /// Set when the joint model loses on more than one attack.
    pub fn flagged(&self) -> bool {
        self.mixnet_not_worse.len() < 2.min(self.attacks.len())
    }

    pub fn row(&self, method: &str) -> Option<&MetricsReport> {
        self.rows.iter().find(|r| r.method == method).map(|r| &r.report)
    }

    pub fn render(&self) -> String {
        let rows: Vec<(&str, &BTreeMap<String, f64>)> = self
            .rows
            .iter()
            .map(|r| (r.method.as_str(), &r.report.attack_wise_apcer))
            .collect();
        let mut out = render_attack_wise(&rows);
        out.push_str(&format!(
            "mixnet APCER <= independent-max on {}/{} attacks{}\n",
            self.mixnet_not_worse.len(),
            self.attacks.len(),
            if self.flagged() { " [FLAGGED]" } else { "" }
        ));
        out
    }
}

/// Trains independent specialists on the same folds as a finished joint
/// run and compares the three pipelines. Each specialist set is trained once
/// and scored under both combination rules.
pub fn ablation_from(
    joint: &IntraOutcome,
    data: &[LabeledImage],
    backbone: BackboneSpec,
    specialist_config: &TrainConfig,
    options: &RunOptions,
) -> Result<AblationReport> {
    let mut max_folds = Vec::new();
    let mut avg_folds = Vec::new();
    for f in &joint.folds {
        let k = f.trained.fold;
        let train_ids: BTreeSet<&str> = f.trained.fit_records.iter().map(|r| r.sample_id.as_str()).collect();
        let test_ids: BTreeSet<&str> = f.test_records.iter().map(|r| r.sample_id.as_str()).collect();
        let train: Vec<LabeledImage> = data
            .iter()
            .filter(|d| train_ids.contains(d.record.sample_id.as_str()))
            .cloned()
            .collect();
        let test: Vec<&LabeledImage> = data
            .iter()
            .filter(|d| test_ids.contains(d.record.sample_id.as_str()))
            .collect();
        let cfg = TrainConfig {
            seed: mix_seed(specialist_config.seed, 0xF0 + u64::from(k)),
            checkpoint: None,
            ..specialist_config.clone()
        };
        let out = train_independent_on(backbone, &attacks_in(&train), &train, &cfg, Combine::Max)?;
        let train_refs: Vec<&LabeledImage> = train.iter().collect();
        for (combine, sink) in [(Combine::Max, &mut max_folds), (Combine::Average, &mut avg_folds)] {
            let model = FittedModel::Neural(Detector::Independent(out.model.with_combine(combine)));
            let fit = score_records(&train_refs, &model, cfg.threads)?;
            let tst = score_records(&test, &model, cfg.threads)?;
            let fit_r: Vec<&SampleRecord> = train.iter().map(|d| &d.record).collect();
            let test_r: Vec<&SampleRecord> = test.iter().map(|d| &d.record).collect();
            if let Some(o) = &options.out_dir {
                let d = o.join(format!("independent-{combine}")).join(k.to_string());
                create_dir(&d)?;
                write_scores(&d.join("scores.jsonl"), &tst)?;
            }
            sink.push(FoldScores {
                fold: k,
                fit: joint.aggregation.apply(&fit_r, &fit)?,
                test: joint.aggregation.apply(&test_r, &tst)?,
            });
        }
    }
    let rows = vec![
        AblationRow {
            method: "mixnet".into(),
            report: joint.report.clone(),
        },
        AblationRow {
            method: "independent-max".into(),
            report: evaluate_protocol(&max_folds, ThresholdSource::TrainFoldEer)?,
        },
        AblationRow {
            method: "independent-average".into(),
            report: evaluate_protocol(&avg_folds, ThresholdSource::TrainFoldEer)?,
        },
    ];
    let attacks: Vec<String> = rows[0].report.attack_wise_apcer.keys().cloned().collect();
    let mixnet_not_worse = attacks
        .iter()
        .filter(|a| {
            let j = rows[0].report.attack_wise_apcer[*a];
            let m = rows[1].report.attack_wise_apcer.get(*a).copied().unwrap_or(f64::INFINITY);
            j <= m
        })
        .cloned()
        .collect();
    let report = AblationReport {
        rows,
        attacks,
        mixnet_not_worse,
    };
    if let Some(o) = &options.out_dir {
        create_dir(o)?;
        let path = o.join("ablation.txt");
        std::fs::write(&path, report.render()).map_err(|e| Error::io(&path, e))?;
        let reports: BTreeMap<&str, &MetricsReport> =
            report.rows.iter().map(|r| (r.method.as_str(), &r.report)).collect();
        write_json(&o.join("ablation.json"), &reports)?;
    }
    Ok(report)
}

/// Joint MixNet intra run followed by [`ablation_from`].
pub fn run_ablation(
    data: &[LabeledImage],
    fold_count: u32,
    backbone: BackboneSpec,
    alphas: Alphas,
    config: &TrainConfig,
    specialist_config: &TrainConfig,
    options: &RunOptions,
) -> Result<(IntraOutcome, AblationReport)> {
    if attacks_in(data).len() < 2 {
        return Err(Error::InvalidInput("the ablation needs at least two attack classes".into()));
    }
    let joint_opts = RunOptions {
        out_dir: options.out_dir.as_ref().map(|o| o.join("mixnet")),
        ..options.clone()
    };
    let joint = run_intra_on(data, fold_count, &ModelFactory::mixnet(backbone, alphas), config, &joint_opts)?;
    let report = ablation_from(&joint, data, backbone, specialist_config, options)?;
    Ok((joint, report))
}
