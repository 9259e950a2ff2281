//! Sample, label and manifest types shared by every other module.
//!
//! Manifests are JSON Lines files with one [`SampleRecord`] per line. The
//! canonical serialization writes keys in alphabetical order and omits
//! absent optionals, so `save -> load -> save` is byte-identical.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Genuine,
    Print,
    Replay,
    Mask,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [
        AttackKind::Genuine,
        AttackKind::Print,
        AttackKind::Replay,
        AttackKind::Mask,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Genuine => "genuine",
            AttackKind::Print => "print",
            AttackKind::Replay => "replay",
            AttackKind::Mask => "mask",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown attack class `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSubtype {
    Silicone,
    Paper,
    Half,
    Transparent,
    Mannequin,
}

impl MaskSubtype {
    pub const ALL: [MaskSubtype; 5] = [
        MaskSubtype::Silicone,
        MaskSubtype::Paper,
        MaskSubtype::Half,
        MaskSubtype::Transparent,
        MaskSubtype::Mannequin,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MaskSubtype::Silicone => "silicone",
            MaskSubtype::Paper => "paper",
            MaskSubtype::Half => "half",
            MaskSubtype::Transparent => "transparent",
            MaskSubtype::Mannequin => "mannequin",
        }
    }
}

impl fmt::Display for MaskSubtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskSubtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskSubtype::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown mask subtype `{s}`")))
    }
}

/// Ground-truth class of a sample. Only mask attacks carry a subtype.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttackClass {
    Genuine,
    Print,
    Replay,
    Mask(Option<MaskSubtype>),
}

impl AttackClass {
    pub fn from_parts(kind: AttackKind, subtype: Option<MaskSubtype>) -> Result<Self> {
        match (kind, subtype) {
            (AttackKind::Mask, s) => Ok(AttackClass::Mask(s)),
            (k, None) => Ok(match k {
                AttackKind::Genuine => AttackClass::Genuine,
                AttackKind::Print => AttackClass::Print,
                AttackKind::Replay => AttackClass::Replay,
                AttackKind::Mask => unreachable!(),
            }),
            (k, Some(s)) => Err(Error::Invariant(format!(
                "mask_subtype `{s}` given for non-mask class `{k}`"
            ))),
        }
    }

    pub fn kind(self) -> AttackKind {
        match self {
            AttackClass::Genuine => AttackKind::Genuine,
            AttackClass::Print => AttackKind::Print,
            AttackClass::Replay => AttackKind::Replay,
            AttackClass::Mask(_) => AttackKind::Mask,
        }
    }

    pub fn mask_subtype(self) -> Option<MaskSubtype> {
        match self {
            AttackClass::Mask(s) => s,
            _ => None,
        }
    }

    pub fn is_attack(self) -> bool {
        self != AttackClass::Genuine
    }

    /// The specialist branch responsible for this class, if any.
    pub fn attack_type(self) -> Option<AttackType> {
        match self {
            AttackClass::Genuine => None,
            AttackClass::Print => Some(AttackType::Print),
            AttackClass::Replay => Some(AttackType::Replay),
            AttackClass::Mask(_) => Some(AttackType::Mask),
        }
    }

    /// Finest-grained name: the mask subtype when known, else the class name.
    pub fn detail_name(self) -> &'static str {
        match self {
            AttackClass::Mask(Some(s)) => s.as_str(),
            other => other.kind().as_str(),
        }
    }
}

impl fmt::Display for AttackClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackClass::Mask(Some(s)) => write!(f, "mask({s})"),
            other => f.write_str(other.kind().as_str()),
        }
    }
}

/// The attacks handled by specialist branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackType {
    Print,
    Replay,
    Mask,
}

impl AttackType {
    pub const ALL: [AttackType; 3] = [AttackType::Print, AttackType::Replay, AttackType::Mask];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackType::Print => "print",
            AttackType::Replay => "replay",
            AttackType::Mask => "mask",
        }
    }

    pub fn kind(self) -> AttackKind {
        match self {
            AttackType::Print => AttackKind::Print,
            AttackType::Replay => AttackKind::Replay,
            AttackType::Mask => AttackKind::Mask,
        }
    }
}

impl fmt::Display for AttackType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackType::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown attack `{s}`")))
    }
}

/// Training targets of one sample: the three specialist bits plus the final
/// genuine/attack bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LabelQuadruple {
    pub print_label: bool,
    pub replay_label: bool,
    pub mask_label: bool,
    pub final_label: bool,
}

impl LabelQuadruple {
    pub fn as_bits(&self) -> [u8; 4] {
        [
            self.print_label as u8,
            self.replay_label as u8,
            self.mask_label as u8,
            self.final_label as u8,
        ]
    }

    pub fn branch_label(&self, attack: AttackType) -> bool {
        match attack {
            AttackType::Print => self.print_label,
            AttackType::Replay => self.replay_label,
            AttackType::Mask => self.mask_label,
        }
    }
}

/// Labeling rule for joint training. Mask subtypes all share the mask row.
pub fn label_for(class: AttackClass) -> LabelQuadruple {
    let (print_label, replay_label, mask_label) = match class {
        AttackClass::Genuine => (false, false, false),
        AttackClass::Print => (true, false, false),
        AttackClass::Replay => (false, true, false),
        AttackClass::Mask(_) => (false, false, true),
    };
    LabelQuadruple {
        print_label,
        replay_label,
        mask_label,
        final_label: print_label || replay_label || mask_label,
    }
}

/// Branch confidences and the fused attack score for one frame. Branches
/// absent from the model are `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreQuadruple {
    pub print_score: Option<f64>,
    pub replay_score: Option<f64>,
    pub mask_score: Option<f64>,
    pub final_score: f64,
}

impl ScoreQuadruple {
    pub fn branch(&self, attack: AttackType) -> Option<f64> {
        match attack {
            AttackType::Print => self.print_score,
            AttackType::Replay => self.replay_score,
            AttackType::Mask => self.mask_score,
        }
    }

    pub fn set_branch(&mut self, attack: AttackType, score: f64) {
        match attack {
            AttackType::Print => self.print_score = Some(score),
            AttackType::Replay => self.replay_score = Some(score),
            AttackType::Mask => self.mask_score = Some(score),
        }
    }

    pub fn in_unit_range(&self) -> bool {
        let ok = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
        [self.print_score, self.replay_score, self.mask_score]
            .into_iter()
            .flatten()
            .all(ok)
            && ok(self.final_score)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Video,
    Frame,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub sample_id: String,
    pub media_path: String,
    pub frame_index: Option<u64>,
    pub attack_class: AttackClass,
    pub source_dataset: String,
    pub subject_id: Option<String>,
    pub fold: Option<u32>,
}

impl SampleRecord {
    /// Identity of the video this record belongs to. Frame records follow the
    /// `<video>_<frame_index>` naming convention for `sample_id`.
    pub fn video_id(&self) -> &str {
        if let Some(idx) = self.frame_index {
            let suffix = format!("_{idx}");
            if let Some(stem) = self.sample_id.strip_suffix(&suffix) {
                if !stem.is_empty() {
                    return stem;
                }
            }
        }
        &self.sample_id
    }

    /// Subject identity used for train/test disjointness; falls back to the
    /// video when no subject is recorded.
    pub fn subject_key(&self) -> &str {
        self.subject_id.as_deref().unwrap_or_else(|| self.video_id())
    }
}

/// On-disk shape of a record. Field order is alphabetical so serde_json
/// writes canonical key order.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    attack_class: AttackKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fold: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frame_index: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask_subtype: Option<MaskSubtype>,
    media_path: String,
    sample_id: String,
    source_dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subject_id: Option<String>,
}

impl From<&SampleRecord> for RecordLine {
    fn from(r: &SampleRecord) -> Self {
        RecordLine {
            attack_class: r.attack_class.kind(),
            fold: r.fold,
            frame_index: r.frame_index,
            mask_subtype: r.attack_class.mask_subtype(),
            media_path: r.media_path.clone(),
            sample_id: r.sample_id.clone(),
            source_dataset: r.source_dataset.clone(),
            subject_id: r.subject_id.clone(),
        }
    }
}

impl TryFrom<RecordLine> for SampleRecord {
    type Error = Error;

    fn try_from(l: RecordLine) -> Result<Self> {
        Ok(SampleRecord {
            attack_class: AttackClass::from_parts(l.attack_class, l.mask_subtype)?,
            sample_id: l.sample_id,
            media_path: l.media_path,
            frame_index: l.frame_index,
            source_dataset: l.source_dataset,
            subject_id: l.subject_id,
            fold: l.fold,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub fold_count: u32,
    pub granularity: Granularity,
    pub records: Vec<SampleRecord>,
    /// Directory that relative `media_path`s resolve against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(
        name: impl Into<String>,
        fold_count: u32,
        granularity: Granularity,
        records: Vec<SampleRecord>,
    ) -> Result<Self> {
        let m = DatasetManifest {
            name: name.into(),
            fold_count,
            granularity,
            records,
            base_dir: PathBuf::from("."),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.fold_count == 0 {
            return Err(Error::Invariant("fold_count must be positive".into()));
        }
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if !seen.insert(r.sample_id.as_str()) {
                return Err(Error::Invariant(format!(
                    "duplicate sample_id `{}`",
                    r.sample_id
                )));
            }
            if let Some(f) = r.fold {
                if f >= self.fold_count {
                    return Err(Error::Invariant(format!(
                        "sample `{}` has fold {f} but fold_count is {}",
                        r.sample_id, self.fold_count
                    )));
                }
            }
            if self.granularity == Granularity::Frame && r.frame_index.is_none() {
                return Err(Error::Invariant(format!(
                    "frame manifest record `{}` lacks frame_index",
                    r.sample_id
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, record: &SampleRecord) -> PathBuf {
        let p = Path::new(&record.media_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Loads a manifest; fold count is inferred from the largest fold present.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_inner(path.as_ref(), None)
    }

    /// Loads a manifest and validates its folds against an explicit `k`.
    pub fn load_with_fold_count(path: impl AsRef<Path>, fold_count: u32) -> Result<Self> {
        Self::load_inner(path.as_ref(), Some(fold_count))
    }

    fn load_inner(path: &Path, fold_count: Option<u32>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: RecordLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            let record = SampleRecord::try_from(parsed).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(record);
        }
        let with_frames = records.iter().filter(|r| r.frame_index.is_some()).count();
        let granularity = if !records.is_empty() && with_frames == records.len() {
            Granularity::Frame
        } else if with_frames == 0 {
            Granularity::Video
        } else {
            return Err(Error::Invariant(format!(
                "{}: {with_frames} of {} records carry frame_index; granularity is mixed",
                path.display(),
                records.len()
            )));
        };
        let inferred = records
            .iter()
            .filter_map(|r| r.fold)
            .max()
            .map_or(1, |f| f + 1);
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let m = DatasetManifest {
            name,
            fold_count: fold_count.unwrap_or(inferred),
            granularity,
            records,
            base_dir,
        };
        m.validate()?;
        Ok(m)
    }

    /// Canonical JSON Lines text: one record per line, sorted keys.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            // RecordLine only holds strings, ints and enums; this cannot fail.
            out.push_str(&serde_json::to_string(&RecordLine::from(r)).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    /// Distinct video ids in first-appearance order.
    pub fn video_ids(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .map(SampleRecord::video_id)
            .filter(|v| seen.insert(*v))
            .collect()
    }

    pub fn class_counts(&self) -> BTreeMap<AttackClass, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.attack_class).or_insert(0) += 1;
        }
        counts
    }

    /// Attack kinds present, genuine excluded.
    pub fn attack_types(&self) -> BTreeSet<AttackType> {
        self.records
            .iter()
            .filter_map(|r| r.attack_class.attack_type())
            .collect()
    }

    /// New manifest keeping only the records matching `keep`.
    pub fn filtered(&self, name: &str, mut keep: impl FnMut(&SampleRecord) -> bool) -> Self {
        DatasetManifest {
            name: name.to_string(),
            fold_count: self.fold_count,
            granularity: self.granularity,
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            base_dir: self.base_dir.clone(),
        }
    }

    pub fn subject_keys(&self) -> BTreeSet<&str> {
        self.records.iter().map(SampleRecord::subject_key).collect()
    }
}

/// Stratified, seeded fold assignment by video.
///
/// Within each attack class the videos are shuffled and dealt round-robin,
/// starting at a per-class rotating fold so totals stay balanced. Every frame
/// inherits its video's fold.
pub fn assign_folds(manifest: &DatasetManifest, k: u32, seed: u64) -> Result<DatasetManifest> {
    if k < 2 {
        return Err(Error::InvalidInput(format!("fold count must be >= 2, got {k}")));
    }
    let mut per_class: BTreeMap<AttackClass, Vec<&str>> = BTreeMap::new();
    let mut seen = HashSet::new();
    for r in &manifest.records {
        let vid = r.video_id();
        if seen.insert(vid) {
            per_class.entry(r.attack_class).or_default().push(vid);
        }
    }
    if let Some((class, vids)) = per_class.iter().min_by_key(|(_, v)| v.len()) {
        if (vids.len() as u32) < k {
            return Err(Error::InvalidInput(format!(
                "fold count {k} exceeds the {} videos of class {class}",
                vids.len()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of: BTreeMap<&str, u32> = BTreeMap::new();
    let mut start = 0u32;
    for vids in per_class.values_mut() {
        vids.sort_unstable();
        vids.shuffle(&mut rng);
        for (i, v) in vids.iter().enumerate() {
            fold_of.insert(v, (start + i as u32) % k);
        }
        start = (start + vids.len() as u32) % k;
    }

    let records = manifest
        .records
        .iter()
        .map(|r| SampleRecord {
            fold: Some(fold_of[r.video_id()]),
            ..r.clone()
        })
        .collect();
    Ok(DatasetManifest {
        name: manifest.name.clone(),
        fold_count: k,
        granularity: manifest.granularity,
        records,
        base_dir: manifest.base_dir.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, class: AttackClass) -> SampleRecord {
        SampleRecord {
            sample_id: id.to_string(),
            media_path: format!("{id}.png"),
            frame_index: None,
            attack_class: class,
            source_dataset: "unit".into(),
            subject_id: None,
            fold: None,
        }
    }

    fn videos(class: AttackClass, n: usize) -> Vec<SampleRecord> {
        (0..n)
            .map(|i| rec(&format!("{}_{i}", class.detail_name()), class))
            .collect()
    }

    #[test]
    fn table_rows() {
        assert_eq!(label_for(AttackClass::Genuine).as_bits(), [0, 0, 0, 0]);
        assert_eq!(label_for(AttackClass::Print).as_bits(), [1, 0, 0, 1]);
        assert_eq!(label_for(AttackClass::Replay).as_bits(), [0, 1, 0, 1]);
        assert_eq!(
            label_for(AttackClass::Mask(Some(MaskSubtype::Silicone))).as_bits(),
            [0, 0, 1, 1]
        );
        for s in MaskSubtype::ALL {
            assert_eq!(label_for(AttackClass::Mask(Some(s))).as_bits(), [0, 0, 1, 1]);
        }
    }

    #[test]
    fn final_bit_is_or_of_attack_bits() {
        let mut classes = vec![
            AttackClass::Genuine,
            AttackClass::Print,
            AttackClass::Replay,
            AttackClass::Mask(None),
        ];
        classes.extend(MaskSubtype::ALL.map(|s| AttackClass::Mask(Some(s))));
        for c in classes {
            let l = label_for(c);
            let bits = [l.print_label, l.replay_label, l.mask_label];
            assert_eq!(l.final_label, bits.iter().any(|b| *b));
            assert!(bits.iter().filter(|b| **b).count() <= 1);
            assert_eq!(l.final_label, c != AttackClass::Genuine);
        }
    }

    #[test]
    fn subtype_only_on_mask() {
        assert!(AttackClass::from_parts(AttackKind::Print, Some(MaskSubtype::Paper)).is_err());
        assert_eq!(
            AttackClass::from_parts(AttackKind::Mask, Some(MaskSubtype::Half)).unwrap(),
            AttackClass::Mask(Some(MaskSubtype::Half))
        );
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut records = vec![
            rec("g", AttackClass::Genuine),
            rec("p", AttackClass::Print),
            rec("r", AttackClass::Replay),
            rec("m", AttackClass::Mask(Some(MaskSubtype::Silicone))),
        ];
        records[0].subject_id = Some("s1".into());
        let m = DatasetManifest::new("four", 1, Granularity::Video, records).unwrap();
        let path = dir.path().join("four.jsonl");
        m.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(!text.contains("null"));
        assert!(text.lines().next().unwrap().starts_with("{\"attack_class\":\"genuine\""));

        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back.records, m.records);
        assert_eq!(back.to_jsonl(), text);

        let dup = dir.path().join("dup.jsonl");
        fs::write(&dup, format!("{}{}", text.lines().next().unwrap(), "\n").repeat(2)).unwrap();
        let err = DatasetManifest::load(&dup).unwrap_err().to_string();
        assert!(err.contains("duplicate sample_id `g`"), "{err}");

        let empty = dir.path().join("empty.jsonl");
        fs::write(&empty, "").unwrap();
        assert!(DatasetManifest::load(&empty).unwrap().is_empty());

        let bad = dir.path().join("bad.jsonl");
        fs::write(&bad, format!("{}not json\n", text.lines().next().unwrap().to_owned() + "\n"))
            .unwrap();
        match DatasetManifest::load(&bad).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn fold_out_of_range_rejected() {
        let mut r = rec("a", AttackClass::Genuine);
        r.fold = Some(3);
        assert!(DatasetManifest::new("x", 3, Granularity::Video, vec![r]).is_err());
    }

    #[test]
    fn fold_sizes_exact_and_pigeonhole() {
        let m = DatasetManifest::new("v", 1, Granularity::Video, videos(AttackClass::Print, 9))
            .unwrap();
        let f = assign_folds(&m, 3, 1).unwrap();
        let mut sizes = [0; 3];
        for r in &f.records {
            sizes[r.fold.unwrap() as usize] += 1;
        }
        assert_eq!(sizes, [3, 3, 3]);

        let m = DatasetManifest::new("v", 1, Granularity::Video, videos(AttackClass::Print, 10))
            .unwrap();
        let f = assign_folds(&m, 3, 1).unwrap();
        let mut sizes = [0; 3];
        for r in &f.records {
            sizes[r.fold.unwrap() as usize] += 1;
        }
        sizes.sort_unstable();
        assert_eq!(sizes, [3, 3, 4]);
    }

    #[test]
    fn folds_deterministic_and_guarded() {
        let mut rs = videos(AttackClass::Genuine, 7);
        rs.extend(videos(AttackClass::Mask(None), 5));
        let m = DatasetManifest::new("v", 1, Granularity::Video, rs).unwrap();
        assert_eq!(assign_folds(&m, 3, 42).unwrap(), assign_folds(&m, 3, 42).unwrap());
        assert!(assign_folds(&m, 6, 42).is_err());
        assert!(assign_folds(&m, 1, 42).is_err());
    }

    #[test]
    fn frames_inherit_video_fold() {
        let mut rs = Vec::new();
        for v in 0..6 {
            for f in 0..4u64 {
                let mut r = rec(&format!("print_{v}_{f}"), AttackClass::Print);
                r.frame_index = Some(f);
                rs.push(r);
            }
        }
        let m = DatasetManifest::new("f", 1, Granularity::Frame, rs).unwrap();
        let out = assign_folds(&m, 3, 9).unwrap();
        let mut by_video: BTreeMap<&str, BTreeSet<u32>> = BTreeMap::new();
        for r in &out.records {
            by_video.entry(r.video_id()).or_default().insert(r.fold.unwrap());
        }
        assert_eq!(by_video.len(), 6);
        assert!(by_video.values().all(|f| f.len() == 1));
    }
}
