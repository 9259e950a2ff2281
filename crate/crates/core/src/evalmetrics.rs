//! ISO/IEC 30107-3 error rates, ROC/EER, and cross-fold aggregation.
//!
//! Convention throughout: a score at or above the threshold is classified as
//! an attack.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{AttackClass, AttackKind, MaskSubtype, SampleRecord, ScoreQuadruple};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSample {
    pub sample_id: String,
    pub final_score: f64,
    /// `true` for attacks.
    pub truth: bool,
    pub attack_class: AttackClass,
}

impl ScoredSample {
    pub fn new(sample_id: impl Into<String>, final_score: f64, attack_class: AttackClass) -> Self {
        ScoredSample {
            sample_id: sample_id.into(),
            final_score,
            truth: attack_class.is_attack(),
            attack_class,
        }
    }
}

fn error_rate<'a>(scores: impl Iterator<Item = &'a ScoredSample>, wrong: impl Fn(f64) -> bool) -> Option<f64> {
    let (mut n, mut bad) = (0usize, 0usize);
    for s in scores {
        n += 1;
        if wrong(s.final_score) {
            bad += 1;
        }
    }
    (n > 0).then(|| bad as f64 / n as f64)
}

/// Fraction of attacks scored below `threshold` (accepted as genuine).
pub fn apcer(samples: &[ScoredSample], threshold: f64) -> Result<f64> {
    error_rate(samples.iter().filter(|s| s.truth), |v| v < threshold)
        .ok_or_else(|| Error::InvalidInput("APCER needs at least one attack sample".into()))
}

/// Fraction of genuine samples scored at or above `threshold` (rejected).
pub fn bpcer(samples: &[ScoredSample], threshold: f64) -> Result<f64> {
    error_rate(samples.iter().filter(|s| !s.truth), |v| v >= threshold)
        .ok_or_else(|| Error::InvalidInput("BPCER needs at least one genuine sample".into()))
}

pub fn acer(apcer: f64, bpcer: f64) -> f64 {
    (apcer + bpcer) / 2.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve over every distinct score (plus `-inf`/`+inf`), ascending in
/// threshold, with the equal-error operating point.
#[derive(Clone, Debug, PartialEq)]
pub struct RocAnalysis {
    pub thresholds: Vec<f64>,
    /// APCER at each threshold.
    pub apcer: Vec<f64>,
    /// BPCER at each threshold.
    pub bpcer: Vec<f64>,
    pub eer: f64,
    pub eer_threshold: f64,
    pub auc: f64,
}

impl RocAnalysis {
    /// `(FPR, TPR)` with attack as the positive class: `FPR = BPCER`,
    /// `TPR = 1 - APCER`.
    pub fn points(&self) -> Vec<RocPoint> {
        self.apcer
            .iter()
            .zip(&self.bpcer)
            .map(|(a, b)| RocPoint { fpr: *b, tpr: 1.0 - a })
            .collect()
    }
}

/// Sweeps all thresholds and locates the EER.
///
/// `d(t) = APCER(t) - BPCER(t)` is nondecreasing, `-1` at `-inf` and `+1` at
/// `+inf`. When `d` hits zero on thresholds `t_i..=t_j` the EER is the common
/// rate there and every threshold in `(t_{i-1}, t_j]` realises it; otherwise
/// the rates are interpolated linearly across the sign change between
/// `t_{i-1}` and `t_i`. Either way the threshold is the midpoint of that
/// interval, with infinite ends replaced by `min - 1` / `max + 1`.
pub fn roc_and_eer(samples: &[ScoredSample]) -> Result<RocAnalysis> {
    let n_att = samples.iter().filter(|s| s.truth).count();
    let n_gen = samples.len() - n_att;
    if n_att == 0 || n_gen == 0 {
        return Err(Error::InvalidInput(
            "ROC/EER needs both genuine and attack samples".into(),
        ));
    }
    if let Some(s) = samples.iter().find(|s| !s.final_score.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite score for `{}`", s.sample_id)));
    }
    let mut sorted: Vec<(f64, bool)> = samples.iter().map(|s| (s.final_score, s.truth)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut thresholds = vec![f64::NEG_INFINITY];
    let mut apcer_v = vec![0.0];
    let mut bpcer_v = vec![1.0];
    // Samples strictly below the current threshold.
    let (mut att_below, mut gen_below) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        thresholds.push(t);
        apcer_v.push(att_below as f64 / n_att as f64);
        bpcer_v.push((n_gen - gen_below) as f64 / n_gen as f64);
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                att_below += 1;
            } else {
                gen_below += 1;
            }
            i += 1;
        }
    }
    thresholds.push(f64::INFINITY);
    apcer_v.push(1.0);
    bpcer_v.push(0.0);

    let lo = sorted[0].0 - 1.0;
    let hi = sorted[sorted.len() - 1].0 + 1.0;
    let finite = |t: f64| {
        if t == f64::NEG_INFINITY {
            lo
        } else if t == f64::INFINITY {
            hi
        } else {
            t
        }
    };
    let d = |k: usize| apcer_v[k] - bpcer_v[k];
    let first = (0..thresholds.len())
        .find(|&k| d(k) >= 0.0)
        .expect("d(+inf) = 1");
    let (eer, eer_threshold) = if d(first) == 0.0 {
        let mut last = first;
        while last + 1 < thresholds.len() && d(last + 1) == 0.0 {
            last += 1;
        }
        (
            apcer_v[first],
            (finite(thresholds[first - 1]) + finite(thresholds[last])) / 2.0,
        )
    } else {
        let (d0, d1) = (d(first - 1), d(first));
        let s = -d0 / (d1 - d0);
        let eer = apcer_v[first - 1] + s * (apcer_v[first] - apcer_v[first - 1]);
        (
            eer,
            (finite(thresholds[first - 1]) + finite(thresholds[first])) / 2.0,
        )
    };

    // Trapezoid rule over (FPR, TPR), FPR decreasing along the sweep.
    let mut auc = 0.0;
    for k in 1..thresholds.len() {
        let (x0, x1) = (bpcer_v[k - 1], bpcer_v[k]);
        let (y0, y1) = (1.0 - apcer_v[k - 1], 1.0 - apcer_v[k]);
        auc += (x0 - x1) * (y0 + y1) / 2.0;
    }

    Ok(RocAnalysis {
        thresholds,
        apcer: apcer_v,
        bpcer: bpcer_v,
        eer,
        eer_threshold,
        auc,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSource {
    /// EER threshold of the model's own training-fold scores.
    TrainFoldEer,
    /// EER threshold of a held-out development split of the training data.
    DevSplitEer,
}

/// Scores of one fold's model: the split its threshold is fit on, and the
/// test split.
#[derive(Clone, Debug)]
pub struct FoldScores {
    pub fold: u32,
    pub fit: Vec<ScoredSample>,
    pub test: Vec<ScoredSample>,
}

/// Where a threshold came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdProvenance {
    pub fold: u32,
    pub source: ThresholdSource,
    pub threshold: f64,
    pub fit_eer: f64,
    pub fit_sample_count: usize,
    /// Number of fit samples that also occur in the fold's test set.
    pub test_overlap: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (`n - 1`; zero for one value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanStd::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: u32,
    pub threshold: f64,
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub test_eer: f64,
    /// `(FAR + FRR) / 2` on the test set at the threshold.
    pub hter: f64,
    pub attack_wise_apcer: BTreeMap<String, f64>,
    pub test_genuine: usize,
    pub test_attack: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold_source: ThresholdSource,
    pub apcer: MeanStd,
    pub bpcer: MeanStd,
    /// Average of the per-fold ACERs.
    pub acer: MeanStd,
    /// Mean of the per-fold thresholds.
    pub eer_threshold: f64,
    pub test_eer: MeanStd,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hter: Option<MeanStd>,
    /// Mean APCER per attack class / mask subtype over the folds that
    /// contain it.
    pub attack_wise_apcer: BTreeMap<String, f64>,
    /// ROC of the pooled test scores.
    pub roc: Vec<RocPoint>,
    pub auc: f64,
    pub folds: Vec<FoldMetrics>,
    pub provenance: Vec<ThresholdProvenance>,
}

impl MetricsReport {
    /// Thresholds that were fit on a set overlapping the test data.
    pub fn provenance_violations(&self) -> usize {
        self.provenance.iter().filter(|p| p.test_overlap > 0).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// APCER per attack class name (mask subtypes separately).
pub fn attack_wise_apcer(samples: &[ScoredSample], threshold: f64) -> BTreeMap<String, f64> {
    let mut groups: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for s in samples.iter().filter(|s| s.truth) {
        let e = groups.entry(s.attack_class.detail_name().to_string()).or_default();
        e.0 += 1;
        if s.final_score < threshold {
            e.1 += 1;
        }
    }
    groups
        .into_iter()
        .map(|(k, (n, bad))| (k, bad as f64 / n as f64))
        .collect()
}

/// Fits one threshold per fold on its fit scores, applies it to the fold's
/// test scores and aggregates across folds.
pub fn evaluate_protocol(folds: &[FoldScores], source: ThresholdSource) -> Result<MetricsReport> {
    if folds.is_empty() {
        return Err(Error::InvalidInput("no folds to evaluate".into()));
    }
    let mut seen = BTreeSet::new();
    for f in folds {
        if !seen.insert(f.fold) {
            return Err(Error::InvalidInput(format!("fold {} listed twice", f.fold)));
        }
        if f.test.is_empty() {
            return Err(Error::InvalidInput(format!("fold {} has no test scores", f.fold)));
        }
    }

    let mut rows = Vec::with_capacity(folds.len());
    let mut provenance = Vec::with_capacity(folds.len());
    for f in folds {
        let fit = roc_and_eer(&f.fit)
            .map_err(|e| Error::InvalidInput(format!("fold {} threshold fit: {e}", f.fold)))?;
        let test_ids: BTreeSet<&str> = f.test.iter().map(|s| s.sample_id.as_str()).collect();
        let overlap = f.fit.iter().filter(|s| test_ids.contains(s.sample_id.as_str())).count();
        if overlap > 0 {
            return Err(Error::Invariant(format!(
                "fold {}: {overlap} threshold-fit samples are also test samples",
                f.fold
            )));
        }
        provenance.push(ThresholdProvenance {
            fold: f.fold,
            source,
            threshold: fit.eer_threshold,
            fit_eer: fit.eer,
            fit_sample_count: f.fit.len(),
            test_overlap: overlap,
        });
        let t = fit.eer_threshold;
        let a = apcer(&f.test, t)?;
        let b = bpcer(&f.test, t)?;
        rows.push(FoldMetrics {
            fold: f.fold,
            threshold: t,
            apcer: a,
            bpcer: b,
            acer: acer(a, b),
            test_eer: roc_and_eer(&f.test)?.eer,
            hter: (a + b) / 2.0,
            attack_wise_apcer: attack_wise_apcer(&f.test, t),
            test_genuine: f.test.iter().filter(|s| !s.truth).count(),
            test_attack: f.test.iter().filter(|s| s.truth).count(),
        });
    }

    let col = |g: fn(&FoldMetrics) -> f64| rows.iter().map(g).collect::<Vec<_>>();
    let mut aw: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &rows {
        for (k, v) in &r.attack_wise_apcer {
            aw.entry(k.clone()).or_default().push(*v);
        }
    }
    let pooled: Vec<ScoredSample> = folds.iter().flat_map(|f| f.test.iter().cloned()).collect();
    let roc = roc_and_eer(&pooled)?;
    Ok(MetricsReport {
        threshold_source: source,
        apcer: MeanStd::of(&col(|r| r.apcer)),
        bpcer: MeanStd::of(&col(|r| r.bpcer)),
        acer: MeanStd::of(&col(|r| r.acer)),
        eer_threshold: MeanStd::of(&col(|r| r.threshold)).mean,
        test_eer: MeanStd::of(&col(|r| r.test_eer)),
        hter: (source == ThresholdSource::DevSplitEer).then(|| MeanStd::of(&col(|r| r.hter))),
        attack_wise_apcer: aw
            .into_iter()
            .map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64))
            .collect(),
        roc: roc.points(),
        auc: roc.auc,
        folds: rows,
        provenance,
    })
}

/// One line of a score file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub print_score: Option<f64>,
    pub replay_score: Option<f64>,
    pub mask_score: Option<f64>,
    pub final_score: f64,
    pub truth: u8,
    pub attack_class: AttackKind,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mask_subtype: Option<MaskSubtype>,
}

impl ScoreRecord {
    pub fn new(record: &SampleRecord, scores: &ScoreQuadruple) -> Self {
        ScoreRecord {
            sample_id: record.sample_id.clone(),
            print_score: scores.print_score,
            replay_score: scores.replay_score,
            mask_score: scores.mask_score,
            final_score: scores.final_score,
            truth: u8::from(record.attack_class.is_attack()),
            attack_class: record.attack_class.kind(),
            mask_subtype: record.attack_class.mask_subtype(),
        }
    }

    pub fn class(&self) -> Result<AttackClass> {
        AttackClass::from_parts(self.attack_class, self.mask_subtype)
    }

    pub fn quadruple(&self) -> ScoreQuadruple {
        ScoreQuadruple {
            print_score: self.print_score,
            replay_score: self.replay_score,
            mask_score: self.mask_score,
            final_score: self.final_score,
        }
    }

    pub fn scored(&self) -> Result<ScoredSample> {
        Ok(ScoredSample::new(self.sample_id.clone(), self.final_score, self.class()?))
    }
}

pub fn write_scores(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn pct_ms(m: &MeanStd) -> String {
    format!("{} ± {}", pct(m.mean), pct(m.std))
}

/// Plain-text summary: one row per method with APCER/BPCER/ACER (%, mean ±
/// std over folds), followed by the attack-wise APCER columns.
pub fn render_table(rows: &[(&str, &MetricsReport)]) -> String {
    let mut out = String::new();
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
    let _ = writeln!(
        out,
        "{:<name_w$}  {:>16}  {:>16}  {:>16}  {:>8}",
        "Method", "APCER (%)", "BPCER (%)", "ACER (%)", "EER (%)"
    );
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{:<name_w$}  {:>16}  {:>16}  {:>16}  {:>8}",
            name,
            pct_ms(&r.apcer),
            pct_ms(&r.bpcer),
            pct_ms(&r.acer),
            pct(r.test_eer.mean)
        );
    }
    let aw: Vec<(&str, &BTreeMap<String, f64>)> =
        rows.iter().map(|(n, r)| (*n, &r.attack_wise_apcer)).collect();
    out.push('\n');
    out.push_str(&render_attack_wise(&aw));
    out
}

/// Attack-wise APCER (%) with one row per method and one column per attack.
pub fn render_attack_wise(rows: &[(&str, &BTreeMap<String, f64>)]) -> String {
    let keys: BTreeSet<&str> = rows
        .iter()
        .flat_map(|(_, m)| m.keys().map(String::as_str))
        .collect();
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = write!(out, "{:<name_w$}", "APCER (%)");
    for k in &keys {
        let _ = write!(out, "  {:>11}", k);
    }
    out.push('\n');
    for (name, m) in rows {
        let _ = write!(out, "{:<name_w$}", name);
        for k in &keys {
            let cell = m.get(*k).map(|v| pct(*v)).unwrap_or_else(|| "-".into());
            let _ = write!(out, "  {:>11}", cell);
        }
        out.push('\n');
    }
    out
}
