//! SGD training loops for MixNet, vanilla backbones and independent
//! specialists, plus the loss-weight grid search.
//!
//! Batches are drawn from a seeded shuffle each epoch. Per-sample gradients
//! are computed into separate buffers and summed in batch order, so results
//! do not depend on the worker count.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{label_for, AttackClass, AttackType, DatasetManifest, ScoreQuadruple};
use crate::error::{Error, Result};
use crate::evalmetrics::{acer, apcer, bpcer, roc_and_eer, ScoredSample};
use crate::imaging::{load_images, LabeledImage};
use crate::mix_seed;
use crate::mixnet::{
    build_vanilla, Alphas, Combine, IndependentModel, LossBreakdown, MixNetConfig, MixNetGrads,
    MixNetModel, TrainingMeta, VanillaModel,
};
use crate::nn::BackboneSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Worker threads for per-sample gradients and scoring.
    pub threads: usize,
    /// Overwritten with the latest parameters after every epoch.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub checkpoint: Option<PathBuf>,
}

impl TrainConfig {
    /// SGD at 0.01 with batches of 16.
    pub fn mixnet(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 16,
            epochs,
            seed,
            threads: 1,
            checkpoint: None,
        }
    }

    /// SGD at 0.01 with batches of 56.
    pub fn vanilla(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            batch_size: 56,
            ..TrainConfig::mixnet(epochs, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "learning rate must be finite and nonnegative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.threads == 0 {
            return Err(Error::InvalidInput(
                "batch size, epochs and threads must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Which model was being trained (`mixnet`, `vanilla`, or a specialist's
    /// attack name).
    pub stage: String,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// The samples of one SGD step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    pub stage: String,
    pub epoch: usize,
    pub batch: usize,
    pub sample_ids: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub epochs: Vec<EpochLog>,
    pub batches: Vec<BatchLog>,
}

pub fn write_epoch_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut out = String::new();
    for l in logs {
        out.push_str(&serde_json::to_string(l)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Runs `f` on a pool with `threads` workers (inline for one thread).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidInput(format!("cannot start {threads} worker threads: {e}")))?;
    Ok(pool.install(f))
}

/// Maps `f` over `items`, in parallel when `threads > 1`, keeping order.
pub(crate) fn ordered_map<T: Sync, U: Send>(
    threads: usize,
    items: &[T],
    f: impl Fn(&T) -> Result<U> + Sync + Send,
) -> Result<Vec<U>> {
    if threads <= 1 {
        items.iter().map(f).collect()
    } else {
        with_threads(threads, || items.par_iter().map(f).collect())?
    }
}

fn batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xE0 + epoch as u64)));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn non_finite(epoch: usize, batch: usize, detail: impl Into<String>) -> Error {
    Error::NonFinite {
        epoch,
        batch,
        detail: detail.into(),
    }
}

fn load_train_images(manifest: &DatasetManifest, channels: usize) -> Result<Vec<LabeledImage>> {
    if manifest.is_empty() {
        return Err(Error::InvalidInput(format!(
            "training manifest `{}` is empty",
            manifest.name
        )));
    }
    load_images(manifest, channels)
}

/// Joint training under the model's own loss weights.
pub fn train_mixnet(model: MixNetModel, manifest: &DatasetManifest, config: &TrainConfig) -> Result<TrainOutcome<MixNetModel>> {
    let channels = model.config().input_size().2;
    let data = load_train_images(manifest, channels)?;
    train_mixnet_on(model, &data, config)
}

pub fn train_mixnet_on(
    mut model: MixNetModel,
    data: &[LabeledImage],
    config: &TrainConfig,
) -> Result<TrainOutcome<MixNetModel>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("no training samples".into()));
    }
    let attacks = model.attacks();
    let alphas = model.config().alphas.clone();
    let labels: Vec<_> = data.iter().map(|d| label_for(d.record.attack_class)).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut batch_logs = Vec::new();
    for epoch in 0..config.epochs {
        let mut branch_sum = vec![0.0; attacks.len()];
        let mut final_sum = 0.0;
        for (b, idx) in batches(data.len(), config.batch_size, config.seed, epoch).into_iter().enumerate() {
            let weights = alphas.scaled(1.0 / idx.len() as f64);
            let per_sample = ordered_map(config.threads, &idx, |&i| {
                let mut g = model.zero_grads();
                let losses = model.accumulate_gradients(&data[i].tensor, &labels[i], &weights, &mut g)?;
                Ok((g, losses))
            })?;
            let mut grads: Option<MixNetGrads> = None;
            for (g, (bl, fl)) in per_sample {
                branch_sum.iter_mut().zip(&bl).for_each(|(a, v)| *a += v);
                final_sum += fl;
                match grads.as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => grads = Some(g),
                }
            }
            let grads = grads.expect("nonempty batch");
            let running = alphas.final_weight * final_sum
                + branch_sum.iter().zip(&alphas.branch).map(|(l, a)| l * a).sum::<f64>();
            if !running.is_finite() {
                return Err(non_finite(epoch, b, format!("loss became {running}")));
            }
            if !grads.is_finite() {
                return Err(non_finite(epoch, b, "gradient has non-finite entries"));
            }
            model.sgd_step(&grads, config.learning_rate);
            batch_logs.push(BatchLog {
                stage: "mixnet".into(),
                epoch,
                batch: b,
                sample_ids: idx.iter().map(|&i| data[i].record.sample_id.clone()).collect(),
            });
        }
        let n = data.len() as f64;
        let branch: Vec<f64> = branch_sum.iter().map(|v| v / n).collect();
        epochs.push(EpochLog {
            epoch,
            learning_rate: config.learning_rate,
            stage: "mixnet".into(),
            loss: LossBreakdown::combine(&attacks, &branch, final_sum / n, &alphas),
        });
        if let Some(path) = &config.checkpoint {
            model.save(
                path,
                &TrainingMeta {
                    epoch: epoch + 1,
                    seed: config.seed,
                    alphas: Some(alphas.clone()),
                },
            )?;
        }
    }
    Ok(TrainOutcome {
        model,
        epochs,
        batches: batch_logs,
    })
}

pub fn train_vanilla(model: VanillaModel, manifest: &DatasetManifest, config: &TrainConfig) -> Result<TrainOutcome<VanillaModel>> {
    let channels = model.net.spec().input_size.2;
    let data = load_train_images(manifest, channels)?;
    train_vanilla_on(model, &data, config, "vanilla")
}

/// Trains on the attack bit of every sample. `stage` labels the logs.
pub fn train_vanilla_on(
    mut model: VanillaModel,
    data: &[LabeledImage],
    config: &TrainConfig,
    stage: &str,
) -> Result<TrainOutcome<VanillaModel>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("no training samples".into()));
    }
    let targets: Vec<bool> = data.iter().map(|d| d.record.attack_class.is_attack()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut batch_logs = Vec::new();
    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        for (b, idx) in batches(data.len(), config.batch_size, config.seed, epoch).into_iter().enumerate() {
            let w = 1.0 / idx.len() as f64;
            let per_sample = ordered_map(config.threads, &idx, |&i| {
                let mut g = vec![0.0; model.net.params.len()];
                let l = model.accumulate_gradients(&data[i].tensor, targets[i], w, &mut g)?;
                Ok((g, l))
            })?;
            let mut grads = vec![0.0; model.net.params.len()];
            for (g, l) in per_sample {
                loss_sum += l;
                grads.iter_mut().zip(&g).for_each(|(a, v)| *a += v);
            }
            if !loss_sum.is_finite() {
                return Err(non_finite(epoch, b, format!("loss became {loss_sum}")));
            }
            if grads.iter().any(|v| !v.is_finite()) {
                return Err(non_finite(epoch, b, "gradient has non-finite entries"));
            }
            model.sgd_step(&grads, config.learning_rate);
            batch_logs.push(BatchLog {
                stage: stage.into(),
                epoch,
                batch: b,
                sample_ids: idx.iter().map(|&i| data[i].record.sample_id.clone()).collect(),
            });
        }
        let l = loss_sum / data.len() as f64;
        epochs.push(EpochLog {
            epoch,
            learning_rate: config.learning_rate,
            stage: stage.into(),
            loss: LossBreakdown {
                print_loss: None,
                replay_loss: None,
                mask_loss: None,
                final_loss: l,
                total_loss: l,
            },
        });
        if let Some(path) = &config.checkpoint {
            model.save(
                path,
                &TrainingMeta {
                    epoch: epoch + 1,
                    seed: config.seed,
                    alphas: None,
                },
            )?;
        }
    }
    Ok(TrainOutcome {
        model,
        epochs,
        batches: batch_logs,
    })
}

/// One specialist per attack, each trained on genuine samples plus that
/// attack's samples only.
pub fn train_independent(
    backbone: BackboneSpec,
    attacks: &[AttackType],
    manifest: &DatasetManifest,
    config: &TrainConfig,
    combine: Combine,
) -> Result<TrainOutcome<IndependentModel>> {
    let data = load_train_images(manifest, backbone.input_size.2)?;
    train_independent_on(backbone, attacks, &data, config, combine)
}

pub fn train_independent_on(
    backbone: BackboneSpec,
    attacks: &[AttackType],
    data: &[LabeledImage],
    config: &TrainConfig,
    combine: Combine,
) -> Result<TrainOutcome<IndependentModel>> {
    if attacks.is_empty() {
        return Err(Error::InvalidInput("no attacks to train specialists for".into()));
    }
    let mut specialists = Vec::with_capacity(attacks.len());
    let mut epochs = Vec::new();
    let mut batch_logs = Vec::new();
    for (k, &attack) in attacks.iter().enumerate() {
        let subset: Vec<LabeledImage> = data
            .iter()
            .filter(|d| {
                let c = d.record.attack_class;
                c == AttackClass::Genuine || c.attack_type() == Some(attack)
            })
            .cloned()
            .collect();
        if !subset.iter().any(|d| d.record.attack_class.is_attack()) {
            return Err(Error::InvalidInput(format!(
                "no `{attack}` samples to train its specialist"
            )));
        }
        let model = build_vanilla(backbone, mix_seed(config.seed, 0x51 + k as u64))?;
        let cfg = TrainConfig {
            seed: mix_seed(config.seed, 0x61 + k as u64),
            checkpoint: None,
            ..config.clone()
        };
        let out = train_vanilla_on(model, &subset, &cfg, attack.as_str())?;
        specialists.push((attack, out.model));
        epochs.extend(out.epochs);
        batch_logs.extend(out.batches);
    }
    let model = IndependentModel {
        specialists,
        combine,
    };
    if let Some(path) = &config.checkpoint {
        model.save(
            path,
            &TrainingMeta {
                epoch: config.epochs,
                seed: config.seed,
                alphas: None,
            },
        )?;
    }
    Ok(TrainOutcome {
        model,
        epochs,
        batches: batch_logs,
    })
}

/// Any trained neural detector.
#[derive(Clone, Debug)]
pub enum Detector {
    MixNet(MixNetModel),
    Vanilla(VanillaModel),
    Independent(IndependentModel),
}

impl Detector {
    pub fn input_channels(&self) -> usize {
        match self {
            Detector::MixNet(m) => m.config().input_size().2,
            Detector::Vanilla(m) => m.net.spec().input_size.2,
            Detector::Independent(m) => m.specialists[0].1.net.spec().input_size.2,
        }
    }

    /// Scores every image, in order.
    pub fn score(&self, data: &[LabeledImage], threads: usize) -> Result<Vec<ScoreQuadruple>> {
        let one = |d: &LabeledImage| -> Result<ScoreQuadruple> {
            let x = std::slice::from_ref(&d.tensor);
            Ok(match self {
                Detector::MixNet(m) => m.forward(x)?.remove(0),
                Detector::Vanilla(m) => ScoreQuadruple {
                    print_score: None,
                    replay_score: None,
                    mask_score: None,
                    final_score: m.forward(x)?[0],
                },
                Detector::Independent(m) => m.forward(x)?.remove(0),
            })
        };
        ordered_map(threads, data, one)
    }

    pub fn save(&self, path: &Path, meta: &TrainingMeta) -> Result<()> {
        match self {
            Detector::MixNet(m) => m.save(path, meta),
            Detector::Vanilla(m) => m.save(path, meta),
            Detector::Independent(m) => m.save(path, meta),
        }
    }

    /// Loads any checkpoint kind.
    pub fn load(path: &Path) -> Result<Self> {
        let (meta, _) = crate::nn::read_archive(path)?;
        match meta["kind"].as_str() {
            Some("mixnet") => Ok(Detector::MixNet(MixNetModel::load(path)?.0)),
            Some("vanilla") => Ok(Detector::Vanilla(VanillaModel::load(path)?.0)),
            Some("independent") => Ok(Detector::Independent(IndependentModel::load(path)?.0)),
            other => Err(Error::Checkpoint(format!(
                "{}: unknown checkpoint kind {other:?}",
                path.display()
            ))),
        }
    }
}

pub fn scored_samples(data: &[LabeledImage], scores: &[ScoreQuadruple]) -> Vec<ScoredSample> {
    data.iter()
        .zip(scores)
        .map(|(d, s)| ScoredSample::new(d.record.sample_id.clone(), s.final_score, d.record.attack_class))
        .collect()
}

/// Stratified video-level holdout: about `fraction` of each class's videos
/// (at least one, and never all) go to the second split.
pub fn split_videos(data: &[LabeledImage], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use std::collections::BTreeMap;
    let mut by_class: BTreeMap<AttackClass, Vec<&str>> = BTreeMap::new();
    for d in data {
        let v = by_class.entry(d.record.attack_class).or_default();
        let id = d.record.video_id();
        if !v.contains(&id) {
            v.push(id);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5A));
    let mut held = std::collections::BTreeSet::new();
    for (_, mut vids) in by_class {
        vids.sort_unstable();
        vids.shuffle(&mut rng);
        if vids.len() < 2 {
            continue;
        }
        let k = ((vids.len() as f64 * fraction).round() as usize).clamp(1, vids.len() - 1);
        held.extend(vids.into_iter().take(k));
    }
    (0..data.len()).partition(|&i| !held.contains(data[i].record.video_id()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSearchSpec {
    pub branch_alpha_grid: Vec<f64>,
    pub final_alpha_grid: Vec<f64>,
}

impl GridSearchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.branch_alpha_grid.is_empty() || self.final_alpha_grid.is_empty() {
            return Err(Error::InvalidInput("grid search needs nonempty grids".into()));
        }
        if self.branch_alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidInput("branch loss weights must lie in [0, 1]".into()));
        }
        if self.final_alpha_grid.iter().any(|a| !(0.0..=10.0).contains(a)) {
            return Err(Error::InvalidInput("final loss weights must lie in [0, 10]".into()));
        }
        Ok(())
    }

    /// Every combination, branch weights varying slowest.
    pub fn points(&self, n_branches: usize) -> Vec<Alphas> {
        let mut branch_sets: Vec<Vec<f64>> = vec![Vec::new()];
        for _ in 0..n_branches {
            branch_sets = branch_sets
                .into_iter()
                .flat_map(|p| {
                    self.branch_alpha_grid.iter().map(move |&a| {
                        let mut q = p.clone();
                        q.push(a);
                        q
                    })
                })
                .collect();
        }
        branch_sets
            .into_iter()
            .flat_map(|b| self.final_alpha_grid.iter().map(move |&f| Alphas::new(b.clone(), f)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub alphas: Alphas,
    pub validation_acer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best: Alphas,
    pub table: Vec<GridRow>,
    pub validation_sample_ids: Vec<String>,
}

/// Trains one model per grid point on 80% of the training videos and keeps
/// the point with the lowest ACER on the remaining 20% (threshold at the
/// inner-training EER). Ties go to the smallest branch-weight sum, then the
/// smallest final weight.
pub fn grid_search(
    spec: &GridSearchSpec,
    base: &MixNetConfig,
    data: &[LabeledImage],
    config: &TrainConfig,
) -> Result<GridSearchResult> {
    spec.validate()?;
    let (tr, va) = split_videos(data, 0.2, config.seed);
    let inner: Vec<LabeledImage> = tr.iter().map(|&i| data[i].clone()).collect();
    let val: Vec<LabeledImage> = va.iter().map(|&i| data[i].clone()).collect();
    if val.is_empty() {
        return Err(Error::InvalidInput("too few videos for a validation split".into()));
    }
    let mut table = Vec::new();
    for alphas in spec.points(base.branches.len()) {
        let cfg = MixNetConfig {
            alphas: alphas.clone(),
            ..base.clone()
        };
        let model = MixNetModel::build(cfg, config.seed)?;
        let train_cfg = TrainConfig {
            checkpoint: None,
            ..config.clone()
        };
        let trained = train_mixnet_on(model, &inner, &train_cfg)?.model;
        let det = Detector::MixNet(trained);
        let fit = scored_samples(&inner, &det.score(&inner, config.threads)?);
        let t = roc_and_eer(&fit)?.eer_threshold;
        let v = scored_samples(&val, &det.score(&val, config.threads)?);
        table.push(GridRow {
            alphas,
            validation_acer: acer(apcer(&v, t)?, bpcer(&v, t)?),
        });
    }
    let key = |r: &GridRow| (r.validation_acer, r.alphas.branch.iter().sum::<f64>(), r.alphas.final_weight);
    let best = table
        .iter()
        .min_by(|a, b| {
            let (ka, kb) = (key(a), key(b));
            ka.0.total_cmp(&kb.0)
                .then(ka.1.total_cmp(&kb.1))
                .then(ka.2.total_cmp(&kb.2))
        })
        .expect("nonempty grid")
        .alphas
        .clone();
    Ok(GridSearchResult {
        best,
        table,
        validation_sample_ids: val.iter().map(|d| d.record.sample_id.clone()).collect(),
    })
}
