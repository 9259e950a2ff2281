//! The multi-specialist network.
//!
//! Each attack type gets its own backbone + 2-node softmax head. The attack
//! probabilities of the branches are concatenated and fed to a fusion layer
//! (a trainable dense 2-node softmax, or a fixed max) that yields the final
//! genuine/attack score. Training minimises
//!
//! ```text
//! total = sum_b alpha_b * CE(branch_b) + alpha_final * CE(final)
//! ```
//!
//! Branches share no parameters, so a branch loss only produces gradients in
//! its own branch, while the final loss reaches every branch through the
//! fusion layer. [`gradient_routing_check`] verifies this numerically.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{AttackType, LabelQuadruple, ScoreQuadruple};
use crate::error::{Error, Result};
use crate::nn::{
    read_archive, write_archive, BackboneSpec, BinaryNet, BinaryNetCache, ParamSet, ParamSlot,
    Tensor,
};
use crate::mix_seed;

/// Lower clamp applied to probabilities before the logarithm.
pub const LOG_CLAMP: f64 = 1e-7;

/// Categorical cross-entropy `-sum y_i ln p_i` with `p` clamped to `[1e-7, 1]`.
pub fn cross_entropy(target: &[f64], probs: &[f64]) -> Result<f64> {
    if target.len() != probs.len() {
        return Err(Error::Shape(format!(
            "target has {} entries, probabilities {}",
            target.len(),
            probs.len()
        )));
    }
    Ok(-target
        .iter()
        .zip(probs)
        .map(|(y, p)| y * p.clamp(LOG_CLAMP, 1.0).ln())
        .sum::<f64>())
}

fn one_hot(bit: bool) -> [f64; 2] {
    if bit {
        [0.0, 1.0]
    } else {
        [1.0, 0.0]
    }
}

/// `dL/dp` of the clamped cross-entropy.
fn ce_grad(target: [f64; 2], probs: [f64; 2]) -> [f64; 2] {
    let g = |y: f64, p: f64| if p > LOG_CLAMP { -y / p } else { 0.0 };
    [g(target[0], probs[0]), g(target[1], probs[1])]
}

/// Pulls `dL/dp` back through a 2-way softmax.
fn softmax_backward(probs: [f64; 2], dp: [f64; 2]) -> [f64; 2] {
    let dot = dp[0] * probs[0] + dp[1] * probs[1];
    [probs[0] * (dp[0] - dot), probs[1] * (dp[1] - dot)]
}

/// Loss weights: one per branch (in configuration order) plus the final one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alphas {
    pub branch: Vec<f64>,
    pub final_weight: f64,
}

impl Alphas {
    pub fn new(branch: Vec<f64>, final_weight: f64) -> Self {
        Alphas {
            branch,
            final_weight,
        }
    }

    /// Coefficients reported for the ResNet50 variant.
    pub fn resnet50() -> Self {
        Alphas::new(vec![0.3, 0.5, 1.0], 5.0)
    }

    /// Coefficients reported for the DenseNet121 and ResNet50-VGGFace2 variants.
    pub fn densenet121() -> Self {
        Alphas::new(vec![0.33, 0.33, 0.33], 5.0)
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.branch.iter().chain(std::iter::once(&self.final_weight));
        for a in all {
            if !a.is_finite() || *a < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "loss weights must be finite and nonnegative, got {a}"
                )));
            }
        }
        Ok(())
    }

    /// Only the `index`-th term set to `weight` (`index == branch.len()` is
    /// the final loss).
    pub fn single(n_branches: usize, index: usize, weight: f64) -> Self {
        let mut a = Alphas::new(vec![0.0; n_branches], 0.0);
        if index < n_branches {
            a.branch[index] = weight;
        } else {
            a.final_weight = weight;
        }
        a
    }

    pub fn scaled(&self, k: f64) -> Self {
        Alphas::new(self.branch.iter().map(|a| a * k).collect(), self.final_weight * k)
    }
}

impl fmt::Display for Alphas {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for a in &self.branch {
            write!(f, "{a},")?;
        }
        write!(f, "{}", self.final_weight)
    }
}

impl FromStr for Alphas {
    type Err = Error;

    /// `a1,a2[,a3],a4`: branch weights followed by the final-loss weight.
    fn from_str(s: &str) -> Result<Self> {
        let vals: Vec<f64> = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidInput(format!("bad loss weight `{t}` in `{s}`")))
            })
            .collect::<Result<_>>()?;
        if !(3..=4).contains(&vals.len()) {
            return Err(Error::InvalidInput(format!(
                "expected 3 or 4 comma-separated loss weights, got {}",
                vals.len()
            )));
        }
        let (last, rest) = vals.split_last().expect("nonempty");
        let a = Alphas::new(rest.to_vec(), *last);
        a.validate()?;
        Ok(a)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Dense layer over the branch attack probabilities, then a 2-way softmax.
    Trainable,
    /// Final attack score is the largest branch attack probability.
    FixedMax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub attack: AttackType,
    pub backbone: BackboneSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixNetConfig {
    pub branches: Vec<BranchSpec>,
    pub alphas: Alphas,
    pub fusion: FusionKind,
}

impl MixNetConfig {
    /// One branch per attack, all on the same backbone, trainable fusion.
    pub fn new(attacks: &[AttackType], backbone: BackboneSpec, alphas: Alphas) -> Result<Self> {
        let cfg = MixNetConfig {
            branches: attacks
                .iter()
                .map(|&attack| BranchSpec { attack, backbone })
                .collect(),
            alphas,
            fusion: FusionKind::Trainable,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn three_branch(backbone: BackboneSpec, alphas: Alphas) -> Result<Self> {
        Self::new(&AttackType::ALL, backbone, alphas)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.branches.len();
        if !(2..=3).contains(&n) {
            return Err(Error::InvalidInput(format!("MixNet needs 2 or 3 branches, got {n}")));
        }
        for (i, b) in self.branches.iter().enumerate() {
            if self.branches[..i].iter().any(|o| o.attack == b.attack) {
                return Err(Error::InvalidInput(format!("duplicate branch `{}`", b.attack)));
            }
            b.backbone.validate()?;
            if b.backbone.input_size != self.branches[0].backbone.input_size {
                return Err(Error::InvalidInput("branches disagree on input size".into()));
            }
        }
        if self.alphas.branch.len() != n {
            return Err(Error::InvalidInput(format!(
                "{} branch loss weights for {n} branches",
                self.alphas.branch.len()
            )));
        }
        self.alphas.validate()
    }

    pub fn attacks(&self) -> Vec<AttackType> {
        self.branches.iter().map(|b| b.attack).collect()
    }

    pub fn input_size(&self) -> (usize, usize, usize) {
        self.branches[0].backbone.input_size
    }
}

/// Per-term loss values for one batch (branch losses absent for branches the
/// model does not have).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub print_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub replay_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mask_loss: Option<f64>,
    pub final_loss: f64,
    pub total_loss: f64,
}

impl LossBreakdown {
    /// Weighted combination of per-term losses.
    pub fn combine(attacks: &[AttackType], branch: &[f64], final_loss: f64, alphas: &Alphas) -> Self {
        let mut b = LossBreakdown {
            print_loss: None,
            replay_loss: None,
            mask_loss: None,
            final_loss,
            total_loss: 0.0,
        };
        let mut total = alphas.final_weight * final_loss;
        for ((&attack, &l), &a) in attacks.iter().zip(branch).zip(&alphas.branch) {
            total += a * l;
            match attack {
                AttackType::Print => b.print_loss = Some(l),
                AttackType::Replay => b.replay_loss = Some(l),
                AttackType::Mask => b.mask_loss = Some(l),
            }
        }
        b.total_loss = total;
        b
    }

    pub fn branch_loss(&self, attack: AttackType) -> Option<f64> {
        match attack {
            AttackType::Print => self.print_loss,
            AttackType::Replay => self.replay_loss,
            AttackType::Mask => self.mask_loss,
        }
    }
}

/// Probabilities emitted by the network for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MixNetOutput {
    /// `(genuine, attack)` per branch, configuration order.
    pub branch_probs: Vec<[f64; 2]>,
    pub final_probs: [f64; 2],
}

/// Batch-mean losses of network outputs against their labels.
pub fn total_loss(
    attacks: &[AttackType],
    outputs: &[MixNetOutput],
    labels: &[LabelQuadruple],
    alphas: &Alphas,
) -> Result<LossBreakdown> {
    if outputs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} outputs for {} labels",
            outputs.len(),
            labels.len()
        )));
    }
    if outputs.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let n = outputs.len() as f64;
    let mut branch = vec![0.0; attacks.len()];
    let mut fin = 0.0;
    for (o, l) in outputs.iter().zip(labels) {
        if o.branch_probs.len() != attacks.len() {
            return Err(Error::Shape("output branch count differs from attacks".into()));
        }
        for (i, &attack) in attacks.iter().enumerate() {
            branch[i] += cross_entropy(&one_hot(l.branch_label(attack)), &o.branch_probs[i])?;
        }
        fin += cross_entropy(&one_hot(l.final_label), &o.final_probs)?;
    }
    branch.iter_mut().for_each(|v| *v /= n);
    Ok(LossBreakdown::combine(attacks, &branch, fin / n, alphas))
}

/// Gradient buffers laid out like a [`MixNetModel`]'s parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MixNetGrads {
    pub branches: Vec<Vec<f64>>,
    pub fusion: Vec<f64>,
}

impl MixNetGrads {
    pub fn add_assign(&mut self, other: &MixNetGrads) {
        for (a, b) in self.branches.iter_mut().zip(&other.branches) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.fusion.iter_mut().zip(&other.fusion).for_each(|(x, y)| *x += y);
    }

    pub fn is_finite(&self) -> bool {
        self.branches.iter().flatten().chain(&self.fusion).all(|v| v.is_finite())
    }
}

pub struct MixNetCache {
    branch: Vec<BinaryNetCache>,
    branch_scores: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct MixNetModel {
    config: MixNetConfig,
    branches: Vec<BinaryNet>,
    /// Trainable fusion: weight `[2, n_branches]` then bias `[2]`. Empty for
    /// fixed-max fusion.
    fusion: ParamSet,
}

impl MixNetModel {
    pub fn build(config: MixNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let branches = config
            .branches
            .iter()
            .enumerate()
            .map(|(i, b)| BinaryNet::build(b.backbone, mix_seed(seed, i as u64 + 1)))
            .collect::<Result<Vec<_>>>()?;
        let nb = branches.len();
        let fusion = match config.fusion {
            FusionKind::Trainable => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xF0));
                let dist = Normal::new(0.0, (2.0 / (nb + 2) as f64).sqrt()).expect("finite std");
                // Random magnitudes, oriented so a higher branch attack
                // probability starts out raising the fused attack score.
                // Otherwise the final loss can drive a branch against its
                // own label from the first step.
                let mut values: Vec<f64> = (0..2 * nb)
                    .map(|i| {
                        let m = dist.sample(&mut rng).abs();
                        if i < nb { -m } else { m }
                    })
                    .collect();
                values.extend([0.0, 0.0]);
                ParamSet {
                    slots: vec![
                        ParamSlot {
                            name: "fusion.weight".into(),
                            shape: vec![2, nb],
                            offset: 0,
                            trainable: true,
                        },
                        ParamSlot {
                            name: "fusion.bias".into(),
                            shape: vec![2],
                            offset: 2 * nb,
                            trainable: true,
                        },
                    ],
                    values,
                }
            }
            FusionKind::FixedMax => ParamSet {
                slots: Vec::new(),
                values: Vec::new(),
            },
        };
        Ok(MixNetModel {
            config,
            branches,
            fusion,
        })
    }

    pub fn config(&self) -> &MixNetConfig {
        &self.config
    }

    pub fn attacks(&self) -> Vec<AttackType> {
        self.config.attacks()
    }

    pub fn branch(&self, attack: AttackType) -> Option<&BinaryNet> {
        self.config
            .branches
            .iter()
            .position(|b| b.attack == attack)
            .map(|i| &self.branches[i])
    }

    pub fn branch_nets(&self) -> &[BinaryNet] {
        &self.branches
    }

    pub fn fusion_params(&self) -> &ParamSet {
        &self.fusion
    }

    pub fn zero_grads(&self) -> MixNetGrads {
        MixNetGrads {
            branches: self.branches.iter().map(|b| vec![0.0; b.params.len()]).collect(),
            fusion: vec![0.0; self.fusion.len()],
        }
    }

    /// Mutable view of one branch's parameters (`None` = fusion layer).
    pub fn params_mut(&mut self, branch: Option<usize>) -> &mut [f64] {
        match branch {
            Some(i) => &mut self.branches[i].params.values,
            None => &mut self.fusion.values,
        }
    }

    /// Fused attack probability for injected branch scores.
    pub fn fuse(&self, scores: &[f64]) -> [f64; 2] {
        match self.config.fusion {
            FusionKind::Trainable => {
                let nb = scores.len();
                let w = &self.fusion.values;
                let mut z = [w[2 * nb], w[2 * nb + 1]];
                for (k, zk) in z.iter_mut().enumerate() {
                    *zk += (0..nb).map(|b| w[k * nb + b] * scores[b]).sum::<f64>();
                }
                crate::nn::softmax2(z)
            }
            FusionKind::FixedMax => {
                let m = scores.iter().copied().fold(0.0, f64::max);
                [1.0 - m, m]
            }
        }
    }

    /// Sign of `d final_score / d branch_score` for the current fusion
    /// weights: the fused score is monotone in each branch score.
    pub fn fusion_direction(&self, branch: usize) -> f64 {
        match self.config.fusion {
            FusionKind::Trainable => {
                let nb = self.branches.len();
                let w = &self.fusion.values;
                (w[nb + branch] - w[branch]).signum()
            }
            FusionKind::FixedMax => 1.0,
        }
    }

    pub fn forward_one(&self, x: &Tensor) -> Result<(MixNetOutput, MixNetCache)> {
        let mut branch_probs = Vec::with_capacity(self.branches.len());
        let mut caches = Vec::with_capacity(self.branches.len());
        for net in &self.branches {
            let (out, cache) = net.forward(x)?;
            branch_probs.push(out.probs);
            caches.push(cache);
        }
        let branch_scores: Vec<f64> = branch_probs.iter().map(|p| p[1]).collect();
        let final_probs = self.fuse(&branch_scores);
        Ok((
            MixNetOutput {
                branch_probs,
                final_probs,
            },
            MixNetCache {
                branch: caches,
                branch_scores,
            },
        ))
    }

    pub fn scores_of(&self, out: &MixNetOutput) -> ScoreQuadruple {
        let mut q = ScoreQuadruple {
            print_score: None,
            replay_score: None,
            mask_score: None,
            final_score: out.final_probs[1],
        };
        for (b, p) in self.config.branches.iter().zip(&out.branch_probs) {
            q.set_branch(b.attack, p[1]);
        }
        q
    }

    /// Inference over a batch. Deterministic; one quadruple per image.
    pub fn forward(&self, batch: &[Tensor]) -> Result<Vec<ScoreQuadruple>> {
        batch
            .iter()
            .map(|x| Ok(self.scores_of(&self.forward_one(x)?.0)))
            .collect()
    }

    /// Forward and backward for one sample. Each loss term is weighted by the
    /// matching entry of `weights`; gradients accumulate into `grads`.
    /// Returns the unweighted per-term losses `(branch, final)`.
    pub fn accumulate_gradients(
        &self,
        x: &Tensor,
        label: &LabelQuadruple,
        weights: &Alphas,
        grads: &mut MixNetGrads,
    ) -> Result<(Vec<f64>, f64)> {
        let (out, cache) = self.forward_one(x)?;
        let nb = self.branches.len();
        let y_final = one_hot(label.final_label);
        let final_loss = cross_entropy(&y_final, &out.final_probs)?;

        // Final loss back to the branch scores.
        let dq = ce_grad(y_final, out.final_probs).map(|g| g * weights.final_weight);
        let mut dscores = vec![0.0; nb];
        match self.config.fusion {
            FusionKind::Trainable => {
                let dz = softmax_backward(out.final_probs, dq);
                let w = &self.fusion.values;
                for k in 0..2 {
                    for b in 0..nb {
                        grads.fusion[k * nb + b] += dz[k] * cache.branch_scores[b];
                        dscores[b] += w[k * nb + b] * dz[k];
                    }
                    grads.fusion[2 * nb + k] += dz[k];
                }
            }
            FusionKind::FixedMax => {
                let (arg, _) = cache
                    .branch_scores
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc });
                dscores[arg] += dq[1] - dq[0];
            }
        }

        let mut branch_losses = Vec::with_capacity(nb);
        for (i, (spec, net)) in self.config.branches.iter().zip(&self.branches).enumerate() {
            let probs = out.branch_probs[i];
            let y = one_hot(label.branch_label(spec.attack));
            branch_losses.push(cross_entropy(&y, &probs)?);
            let own = ce_grad(y, probs);
            let dp = [
                weights.branch[i] * own[0],
                weights.branch[i] * own[1] + dscores[i],
            ];
            let dlogits = softmax_backward(probs, dp);
            net.backward(&cache.branch[i], dlogits, &mut grads.branches[i]);
        }
        Ok((branch_losses, final_loss))
    }

    /// Batch-mean gradients and loss breakdown under `weights`.
    pub fn batch_gradients(
        &self,
        batch: &[Tensor],
        labels: &[LabelQuadruple],
        weights: &Alphas,
    ) -> Result<(MixNetGrads, LossBreakdown)> {
        if batch.len() != labels.len() || batch.is_empty() {
            return Err(Error::Shape(format!(
                "{} images for {} labels",
                batch.len(),
                labels.len()
            )));
        }
        let n = batch.len() as f64;
        let scaled = weights.scaled(1.0 / n);
        let mut grads = self.zero_grads();
        let mut branch = vec![0.0; self.branches.len()];
        let mut fin = 0.0;
        for (x, l) in batch.iter().zip(labels) {
            let (bl, fl) = self.accumulate_gradients(x, l, &scaled, &mut grads)?;
            branch.iter_mut().zip(&bl).for_each(|(a, b)| *a += b / n);
            fin += fl / n;
        }
        let attacks = self.attacks();
        Ok((grads, LossBreakdown::combine(&attacks, &branch, fin, weights)))
    }

    /// Plain SGD step on every parameter group.
    pub fn sgd_step(&mut self, grads: &MixNetGrads, lr: f64) {
        for (net, g) in self.branches.iter_mut().zip(&grads.branches) {
            sgd(&mut net.params, g, lr);
        }
        sgd(&mut self.fusion, &grads.fusion, lr);
    }

    pub fn save(&self, path: &Path, training: &TrainingMeta) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "mixnet",
            "config": self.config,
            "training": training,
        });
        let names: Vec<String> = self
            .config
            .branches
            .iter()
            .map(|b| format!("branch.{}", b.attack))
            .collect();
        let mut groups: Vec<(&str, &ParamSet)> = names
            .iter()
            .zip(&self.branches)
            .map(|(n, b)| (n.as_str(), &b.params))
            .collect();
        groups.push(("fusion", &self.fusion));
        write_archive(path, &meta, &groups)
    }

    pub fn load(path: &Path) -> Result<(Self, TrainingMeta)> {
        let (meta, groups) = read_archive(path)?;
        expect_kind(&meta, "mixnet")?;
        let config: MixNetConfig = serde_json::from_value(meta["config"].clone())?;
        let training: TrainingMeta = serde_json::from_value(meta["training"].clone())?;
        let mut model = MixNetModel::build(config, 0)?;
        for (i, b) in model.config.branches.clone().iter().enumerate() {
            let g = find_group(&groups, &format!("branch.{}", b.attack))?;
            restore_exact(&mut model.branches[i].params, g)?;
        }
        restore_exact(&mut model.fusion, find_group(&groups, "fusion")?)?;
        Ok((model, training))
    }
}

fn sgd(params: &mut ParamSet, grads: &[f64], lr: f64) {
    for (p, g) in params.values.iter_mut().zip(grads) {
        *p -= lr * g;
    }
}

fn expect_kind(meta: &serde_json::Value, kind: &str) -> Result<()> {
    match meta["kind"].as_str() {
        Some(k) if k == kind => Ok(()),
        other => Err(Error::Checkpoint(format!(
            "expected a `{kind}` checkpoint, found {other:?}"
        ))),
    }
}

fn find_group<'a>(groups: &'a [crate::nn::ArchiveGroup], name: &str) -> Result<&'a ParamSet> {
    groups
        .iter()
        .find(|g| g.name == name)
        .map(|g| &g.params)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter group `{name}`")))
}

fn restore_exact(dst: &mut ParamSet, src: &ParamSet) -> Result<()> {
    if dst.slots != src.slots {
        return Err(Error::Checkpoint("parameter layout differs from configuration".into()));
    }
    dst.values.copy_from_slice(&src.values);
    Ok(())
}

/// Training metadata stored alongside checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alphas: Option<Alphas>,
}

/// A single backbone with a 2-node head, fine-tuned on genuine vs attack.
#[derive(Clone, Debug)]
pub struct VanillaModel {
    pub net: BinaryNet,
}

pub fn build_vanilla(backbone: BackboneSpec, seed: u64) -> Result<VanillaModel> {
    Ok(VanillaModel {
        net: BinaryNet::build(backbone, mix_seed(seed, 0x7A))?,
    })
}

impl VanillaModel {
    /// Attack probability per image.
    pub fn forward(&self, batch: &[Tensor]) -> Result<Vec<f64>> {
        batch
            .iter()
            .map(|x| Ok(self.net.forward(x)?.0.attack_prob()))
            .collect()
    }

    /// Forward and backward for one sample, with the loss scaled by `weight`.
    /// Returns the unweighted cross-entropy.
    pub fn accumulate_gradients(&self, x: &Tensor, target: bool, weight: f64, grads: &mut [f64]) -> Result<f64> {
        let (out, cache) = self.net.forward(x)?;
        let y = one_hot(target);
        let loss = cross_entropy(&y, &out.probs)?;
        let dp = ce_grad(y, out.probs).map(|g| g * weight);
        self.net.backward(&cache, softmax_backward(out.probs, dp), grads);
        Ok(loss)
    }

    /// Batch-mean cross-entropy gradient against the attack bit.
    pub fn batch_gradients(&self, batch: &[Tensor], targets: &[bool]) -> Result<(Vec<f64>, f64)> {
        if batch.len() != targets.len() || batch.is_empty() {
            return Err(Error::Shape(format!(
                "{} images for {} targets",
                batch.len(),
                targets.len()
            )));
        }
        let n = batch.len() as f64;
        let mut grads = vec![0.0; self.net.params.len()];
        let mut loss = 0.0;
        for (x, &t) in batch.iter().zip(targets) {
            loss += self.accumulate_gradients(x, t, 1.0 / n, &mut grads)? / n;
        }
        Ok((grads, loss))
    }

    pub fn sgd_step(&mut self, grads: &[f64], lr: f64) {
        sgd(&mut self.net.params, grads, lr);
    }

    /// Overwrites backbone parameters from an external weights archive,
    /// matching by name; returns the number of tensors loaded.
    pub fn load_weights(&mut self, path: &Path) -> Result<usize> {
        load_external_weights(&mut self.net, path)
    }

    pub fn save(&self, path: &Path, training: &TrainingMeta) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "vanilla",
            "backbone": self.net.spec(),
            "training": training,
        });
        write_archive(path, &meta, &[("net", &self.net.params)])
    }

    pub fn load(path: &Path) -> Result<(Self, TrainingMeta)> {
        let (meta, groups) = read_archive(path)?;
        expect_kind(&meta, "vanilla")?;
        let spec: BackboneSpec = serde_json::from_value(meta["backbone"].clone())?;
        let training: TrainingMeta = serde_json::from_value(meta["training"].clone())?;
        let mut model = build_vanilla(spec, 0)?;
        restore_exact(&mut model.net.params, find_group(&groups, "net")?)?;
        Ok((model, training))
    }
}

/// Loads every tensor of every group in `path` whose name matches a
/// parameter of `net` (head excluded, since the class count differs).
pub fn load_external_weights(net: &mut BinaryNet, path: &Path) -> Result<usize> {
    let (_, groups) = read_archive(path)?;
    let mut n = 0;
    for g in &groups {
        let slots: Vec<ParamSlot> = g
            .params
            .slots
            .iter()
            .filter(|s| !s.name.starts_with("head.") && !s.name.starts_with("fc."))
            .cloned()
            .collect();
        n += net.params.load_matching(&slots, &g.params.values)?;
    }
    if n == 0 {
        return Err(Error::Checkpoint(format!(
            "{} holds no tensors matching the {} backbone",
            path.display(),
            net.spec().family.as_str()
        )));
    }
    Ok(n)
}

impl MixNetModel {
    /// Applies external backbone weights to every branch.
    pub fn load_weights(&mut self, path: &Path) -> Result<usize> {
        let mut n = 0;
        for net in &mut self.branches {
            n = load_external_weights(net, path)?;
        }
        Ok(n)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    Max,
    Average,
}

impl FromStr for Combine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Combine::Max),
            "average" | "avg" | "mean" => Ok(Combine::Average),
            _ => Err(Error::InvalidInput(format!("unknown combination rule `{s}`"))),
        }
    }
}

impl fmt::Display for Combine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Combine::Max => "max",
            Combine::Average => "average",
        })
    }
}

pub fn combine_scores(scores: &[f64], rule: Combine) -> f64 {
    match rule {
        Combine::Max => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Combine::Average => scores.iter().sum::<f64>() / scores.len() as f64,
    }
}

/// Separately trained per-attack specialists whose scores are combined by a
/// fixed rule.
#[derive(Clone, Debug)]
pub struct IndependentModel {
    pub specialists: Vec<(AttackType, VanillaModel)>,
    pub combine: Combine,
}

impl IndependentModel {
    pub fn with_combine(&self, combine: Combine) -> Self {
        IndependentModel {
            specialists: self.specialists.clone(),
            combine,
        }
    }

    pub fn forward(&self, batch: &[Tensor]) -> Result<Vec<ScoreQuadruple>> {
        let per: Vec<Vec<f64>> = self
            .specialists
            .iter()
            .map(|(_, m)| m.forward(batch))
            .collect::<Result<_>>()?;
        Ok((0..batch.len())
            .map(|i| {
                let scores: Vec<f64> = per.iter().map(|s| s[i]).collect();
                let mut q = ScoreQuadruple {
                    print_score: None,
                    replay_score: None,
                    mask_score: None,
                    final_score: combine_scores(&scores, self.combine),
                };
                for ((attack, _), s) in self.specialists.iter().zip(&scores) {
                    q.set_branch(*attack, *s);
                }
                q
            })
            .collect())
    }

    pub fn save(&self, path: &Path, training: &TrainingMeta) -> Result<()> {
        let specs: Vec<_> = self
            .specialists
            .iter()
            .map(|(a, m)| serde_json::json!({"attack": a, "backbone": m.net.spec()}))
            .collect();
        let meta = serde_json::json!({
            "kind": "independent",
            "combine": self.combine,
            "specialists": specs,
            "training": training,
        });
        let names: Vec<String> = self.specialists.iter().map(|(a, _)| format!("specialist.{a}")).collect();
        let groups: Vec<(&str, &ParamSet)> = names
            .iter()
            .zip(&self.specialists)
            .map(|(n, (_, m))| (n.as_str(), &m.net.params))
            .collect();
        write_archive(path, &meta, &groups)
    }

    pub fn load(path: &Path) -> Result<(Self, TrainingMeta)> {
        let (meta, groups) = read_archive(path)?;
        expect_kind(&meta, "independent")?;
        let combine: Combine = serde_json::from_value(meta["combine"].clone())?;
        let training: TrainingMeta = serde_json::from_value(meta["training"].clone())?;
        #[derive(Deserialize)]
        struct Spec {
            attack: AttackType,
            backbone: BackboneSpec,
        }
        let specs: Vec<Spec> = serde_json::from_value(meta["specialists"].clone())?;
        let mut specialists = Vec::with_capacity(specs.len());
        for s in specs {
            let mut m = build_vanilla(s.backbone, 0)?;
            restore_exact(&mut m.net.params, find_group(&groups, &format!("specialist.{}", s.attack))?)?;
            specialists.push((s.attack, m));
        }
        Ok((IndependentModel { specialists, combine }, training))
    }
}

/// One central-difference probe of the total-loss gradient.
#[derive(Clone, Debug, Serialize)]
pub struct FiniteDifferenceProbe {
    pub branch: AttackType,
    pub param_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RoutingReport {
    /// Cross-branch gradient leaks; empty when routing holds.
    pub violations: Vec<String>,
    /// Number of parameters inspected for leaks.
    pub checked_params: usize,
    /// Per branch: does its own loss move at least one of its parameters?
    pub own_loss_nonzero: Vec<bool>,
    /// Per branch: does the final loss move at least one of its parameters?
    pub final_loss_nonzero: Vec<bool>,
    /// Largest `|grad(total) - (sum_b a_b grad(l_b) + a_f grad(L_final))|`.
    pub linearity_max_abs_err: f64,
    pub probes: Vec<FiniteDifferenceProbe>,
}

impl RoutingReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn routing_holds(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Verifies gradient routing on a batch.
///
/// For every branch loss `l_c` and every other branch `b`, all gradient
/// entries of `l_c` with respect to `b`'s parameters (and the fusion layer)
/// must be exactly zero. The total-loss gradient must equal the weighted sum
/// of per-term gradients, and matches central differences with `step` at
/// `probes_per_branch` random parameters of every branch.
pub fn gradient_routing_check(
    model: &MixNetModel,
    batch: &[Tensor],
    labels: &[LabelQuadruple],
    probes_per_branch: usize,
    step: f64,
    seed: u64,
) -> Result<RoutingReport> {
    let nb = model.branches.len();
    let attacks = model.attacks();
    let alphas = model.config.alphas.clone();
    let mut per_term = Vec::with_capacity(nb + 1);
    for t in 0..=nb {
        per_term.push(model.batch_gradients(batch, labels, &Alphas::single(nb, t, 1.0))?.0);
    }

    let mut violations = Vec::new();
    let mut checked = 0;
    for c in 0..nb {
        for b in (0..nb).filter(|&b| b != c) {
            checked += per_term[c].branches[b].len();
            let leaks = per_term[c].branches[b].iter().filter(|g| **g != 0.0).count();
            if leaks > 0 {
                violations.push(format!(
                    "{} loss moves {leaks} parameters of the {} branch",
                    attacks[c], attacks[b]
                ));
            }
        }
        checked += per_term[c].fusion.len();
        if per_term[c].fusion.iter().any(|g| *g != 0.0) {
            violations.push(format!("{} loss moves fusion parameters", attacks[c]));
        }
    }
    let nonzero = |v: &[f64]| v.iter().any(|g| *g != 0.0);
    let own_loss_nonzero = (0..nb).map(|c| nonzero(&per_term[c].branches[c])).collect();
    let final_loss_nonzero = (0..nb).map(|b| nonzero(&per_term[nb].branches[b])).collect();

    let (total, _) = model.batch_gradients(batch, labels, &alphas)?;
    let mut lin_err: f64 = 0.0;
    for b in 0..nb {
        for (i, g) in total.branches[b].iter().enumerate() {
            let mut expect = alphas.final_weight * per_term[nb].branches[b][i];
            for c in 0..nb {
                expect += alphas.branch[c] * per_term[c].branches[b][i];
            }
            lin_err = lin_err.max((g - expect).abs());
        }
    }

    let loss_at = |m: &MixNetModel| -> Result<f64> {
        let outs = batch
            .iter()
            .map(|x| Ok(m.forward_one(x)?.0))
            .collect::<Result<Vec<_>>>()?;
        Ok(total_loss(&attacks, &outs, labels, &alphas)?.total_loss)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe_model = model.clone();
    let mut probes = Vec::new();
    for b in 0..nb {
        let mask = model.branches[b].params.trainable_mask();
        let candidates: Vec<usize> = (0..mask.len())
            .filter(|&i| mask[i] && total.branches[b][i].abs() > 1e-7)
            .collect();
        let take = probes_per_branch.min(candidates.len());
        for k in sample(&mut rng, candidates.len(), take) {
            let i = candidates[k];
            let orig = model.branches[b].params.values[i];
            probe_model.params_mut(Some(b))[i] = orig + step;
            let up = loss_at(&probe_model)?;
            probe_model.params_mut(Some(b))[i] = orig - step;
            let down = loss_at(&probe_model)?;
            probe_model.params_mut(Some(b))[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = total.branches[b][i];
            let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
            probes.push(FiniteDifferenceProbe {
                branch: attacks[b],
                param_index: i,
                analytic,
                numeric,
                rel_err,
            });
        }
    }
    Ok(RoutingReport {
        violations,
        checked_params: checked,
        own_loss_nonzero,
        final_loss_nonzero,
        linearity_max_abs_err: lin_err,
        probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{label_for, AttackClass};
    use rand::Rng;

    fn tiny_batch(n: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let data = (0..3 * 32 * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
                Tensor::from_vec(3, 32, 32, data).unwrap()
            })
            .collect()
    }

    fn config3() -> MixNetConfig {
        MixNetConfig::three_branch(BackboneSpec::small_cnn(32, 32), Alphas::densenet121()).unwrap()
    }

    #[test]
    fn cross_entropy_values() {
        assert!((cross_entropy(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&[1.0, 0.0], &[1.0, 0.0]).unwrap().abs() < 1e-12);
        assert!((cross_entropy(&[0.0, 1.0], &[0.2, 0.8]).unwrap() - 0.223_143_551_314_209_7).abs() < 1e-12);
        assert!((cross_entropy(&[0.0, 1.0], &[1.0, 0.0]).unwrap() + LOG_CLAMP.ln()).abs() < 1e-9);
        assert!(cross_entropy(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn loss_combination_cases() {
        let attacks = AttackType::ALL;
        let b = LossBreakdown::combine(&attacks, &[1.0, 1.0, 1.0], 1.0, &Alphas::resnet50());
        assert!((b.total_loss - 6.8).abs() < 1e-12);
        let b = LossBreakdown::combine(&attacks, &[0.0; 3], 0.0, &Alphas::resnet50());
        assert_eq!(b.total_loss, 0.0);
        let b = LossBreakdown::combine(&attacks, &[1.0, 1.0, 1.0], 0.0, &Alphas::densenet121());
        assert!((b.total_loss - 0.99).abs() < 1e-12);
    }

    #[test]
    fn alphas_parse() {
        let a: Alphas = "0.3,0.5,1.0,5.0".parse().unwrap();
        assert_eq!(a, Alphas::resnet50());
        let two: Alphas = "0.5,0.5,2".parse().unwrap();
        assert_eq!(two.branch.len(), 2);
        assert!("1,2".parse::<Alphas>().is_err());
        assert!("1,-2,3,4".parse::<Alphas>().is_err());
    }

    #[test]
    fn build_and_forward_ranges() {
        let model = MixNetModel::build(config3(), 1).unwrap();
        let batch = tiny_batch(3, 2);
        let q = model.forward(&batch).unwrap();
        assert_eq!(q.len(), 3);
        assert!(q.iter().all(|s| s.in_unit_range() && s.mask_score.is_some()));

        let two = MixNetConfig::new(
            &[AttackType::Print, AttackType::Replay],
            BackboneSpec::small_cnn(32, 32),
            Alphas::new(vec![0.5, 0.5], 5.0),
        )
        .unwrap();
        let q = MixNetModel::build(two, 1).unwrap().forward(&batch).unwrap();
        assert!(q.iter().all(|s| s.mask_score.is_none() && s.print_score.is_some()));
        assert!(model.forward(&[Tensor::zeros(3, 64, 64)]).is_err());
    }

    #[test]
    fn duplicate_inputs_give_identical_scores() {
        let model = MixNetModel::build(config3(), 4).unwrap();
        let mut batch = tiny_batch(2, 5);
        batch.push(batch[0].clone());
        let q = model.forward(&batch).unwrap();
        assert_eq!(q[0], q[2]);
    }

    #[test]
    fn config_validation() {
        let spec = BackboneSpec::small_cnn(32, 32);
        assert!(MixNetConfig::new(&[AttackType::Print], spec, Alphas::new(vec![1.0], 1.0)).is_err());
        assert!(MixNetConfig::new(&AttackType::ALL, spec, Alphas::new(vec![1.0, 1.0], 1.0)).is_err());
        assert!(MixNetConfig::new(
            &[AttackType::Print, AttackType::Print],
            spec,
            Alphas::new(vec![1.0, 1.0], 1.0)
        )
        .is_err());
    }

    #[test]
    fn routing_holds_on_small_model() {
        let model = MixNetModel::build(config3(), 7).unwrap();
        let batch = tiny_batch(4, 8);
        let labels: Vec<_> = [
            AttackClass::Genuine,
            AttackClass::Print,
            AttackClass::Replay,
            AttackClass::Mask(None),
        ]
        .into_iter()
        .map(label_for)
        .collect();
        let r = gradient_routing_check(&model, &batch, &labels, 3, 1e-4, 1).unwrap();
        assert!(r.routing_holds(), "{:?}", r.violations);
        assert!(r.own_loss_nonzero.iter().all(|b| *b));
        assert!(r.final_loss_nonzero.iter().all(|b| *b));
        assert!(r.linearity_max_abs_err < 1e-12);
        assert!(r.max_rel_err() < 1e-3, "{:?}", r.probes);
    }

    #[test]
    fn fusion_is_monotone_in_each_branch() {
        let model = MixNetModel::build(config3(), 11).unwrap();
        for b in 0..3 {
            let dir = model.fusion_direction(b);
            let mut prev = None;
            for k in 0..=10 {
                let mut s = vec![0.4, 0.5, 0.6];
                s[b] = k as f64 / 10.0;
                let f = model.fuse(&s)[1];
                if let Some(p) = prev {
                    assert!((f - p) * dir >= 0.0);
                }
                prev = Some(f);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = MixNetModel::build(config3(), 3).unwrap();
        let p = dir.path().join("m.ckpt");
        let meta = TrainingMeta {
            epoch: 2,
            seed: 3,
            alphas: Some(Alphas::densenet121()),
        };
        model.save(&p, &meta).unwrap();
        let (back, m) = MixNetModel::load(&p).unwrap();
        assert_eq!(m, meta);
        let batch = tiny_batch(2, 1);
        assert_eq!(back.forward(&batch).unwrap(), model.forward(&batch).unwrap());
        assert!(VanillaModel::load(&p).is_err());
    }

    #[test]
    fn combination_rules() {
        assert_eq!(combine_scores(&[0.9, 0.1, 0.2], Combine::Max), 0.9);
        assert!((combine_scores(&[0.9, 0.1, 0.2], Combine::Average) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn vanilla_accepts_large_batch() {
        let v = build_vanilla(BackboneSpec::small_cnn(32, 32), 0).unwrap();
        let batch = tiny_batch(56, 3);
        let s = v.forward(&batch).unwrap();
        assert_eq!(s.len(), 56);
        assert!(s.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}
