//! Utterance-level hash splitting, balance truncation and assembly of labelled
//! feature sets from the on-disk caches.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio_io::{Attack, BlockRecord, Condition, Part};
use crate::cache::{self, CacheError};
use crate::filterbanks::{FeatureKind, FeatureMatrix};

/// Bucket thresholds out of 100: train below 70, validation below 80, test otherwise.
pub const TRAIN_BUCKETS: u64 = 70;
pub const VALIDATION_BUCKETS: u64 = 80;

/// Name of the per-condition descriptor written next to the caches.
pub const CONDITION_FILE: &str = "condition.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("duplicate source id `{0}`")]
    DuplicateId(String),
    #[error("empty id list")]
    Empty,
    #[error("missing {kind} cache for condition `{condition}` ({split})")]
    MissingCache {
        condition: String,
        split: Split,
        kind: FeatureKind,
    },
    #[error("blocks of `{0}` appear in more than one split")]
    Leakage(String),
    #[error("bad condition descriptor {path}: {msg}")]
    BadCondition { path: PathBuf, msg: String },
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "validation" | "val" | "valid" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// Bucket in `0..100` from the first eight bytes of SHA-256, read big-endian.
pub fn hash_bucket(id: &str) -> u64 {
    let digest = Sha256::digest(id.as_bytes());
    let prefix = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"));
    prefix % 100
}

pub fn split_of(id: &str) -> Split {
    match hash_bucket(id) {
        b if b < TRAIN_BUCKETS => Split::Train,
        b if b < VALIDATION_BUCKETS => Split::Validation,
        _ => Split::Test,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetPartition {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetPartition {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Assigns each id to a split by hashing; membership depends only on the id.
pub fn hash_split<S: AsRef<str>>(source_ids: &[S]) -> Result<DatasetPartition, DatasetError> {
    if source_ids.is_empty() {
        return Err(DatasetError::Empty);
    }
    let mut seen = BTreeSet::new();
    let mut part = DatasetPartition::default();
    for id in source_ids {
        let id = id.as_ref();
        if !seen.insert(id) {
            return Err(DatasetError::DuplicateId(id.to_string()));
        }
        let target = match split_of(id) {
            Split::Train => &mut part.train,
            Split::Validation => &mut part.validation,
            Split::Test => &mut part.test,
        };
        target.push(id.to_string());
    }
    Ok(part)
}

/// One labelled example.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledItem {
    pub features: FeatureMatrix,
    /// 0 benign, 1 adversarial.
    pub label: u8,
    pub record: BlockRecord,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledFeatureSet {
    pub items: Vec<LabeledItem>,
}

impl LabeledFeatureSet {
    pub fn new(items: Vec<LabeledItem>) -> Self {
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = u8> + '_ {
        self.items.iter().map(|i| i.label)
    }

    pub fn extend(&mut self, other: LabeledFeatureSet) {
        self.items.extend(other.items);
    }

    pub fn source_ids(&self) -> BTreeSet<&str> {
        self.items.iter().map(|i| i.record.source_id.as_str()).collect()
    }

    /// Keeps the items at the given sorted indices.
    fn select(self, keep: &[usize]) -> Self {
        let mut keep_iter = keep.iter().peekable();
        let items = self
            .items
            .into_iter()
            .enumerate()
            .filter_map(|(i, item)| {
                if keep_iter.peek() == Some(&&i) {
                    keep_iter.next();
                    Some(item)
                } else {
                    None
                }
            })
            .collect();
        Self { items }
    }

    /// Uniform sample of `k` items without replacement, original order kept.
    pub fn subsample<R: Rng + ?Sized>(self, k: usize, rng: &mut R) -> Self {
        if k >= self.len() {
            return self;
        }
        let mut idx = rand::seq::index::sample(rng, self.len(), k).into_vec();
        idx.sort_unstable();
        self.select(&idx)
    }
}

/// Down-samples both sets to the size of the smaller one.
pub fn truncate_balance<R: Rng + ?Sized>(
    a: LabeledFeatureSet,
    b: LabeledFeatureSet,
    rng: &mut R,
) -> (LabeledFeatureSet, LabeledFeatureSet) {
    let k = a.len().min(b.len());
    let a = a.subsample(k, rng);
    let b = b.subsample(k, rng);
    (a, b)
}

/// Errors if any source id occurs in more than one of the given sets.
pub fn verify_no_overlap(sets: &[&LabeledFeatureSet]) -> Result<(), DatasetError> {
    let mut owner: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, set) in sets.iter().enumerate() {
        for id in set.source_ids() {
            if let Some(&prev) = owner.get(id) {
                if prev != i {
                    return Err(DatasetError::Leakage(id.to_string()));
                }
            }
            owner.insert(id, i);
        }
    }
    Ok(())
}

/// Selects conditions by tag; `None` matches anything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<Vec<Attack>>,
    /// Noise names; `"clean"` selects noise-free conditions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<Vec<i32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub part: Option<Vec<Part>>,
}

impl ConditionFilter {
    pub fn any() -> Self {
        Self::default()
    }

    pub fn attack(mut self, a: Attack) -> Self {
        self.attack = Some(vec![a]);
        self
    }

    pub fn clean(mut self) -> Self {
        self.noise = Some(vec!["clean".into()]);
        self
    }

    pub fn noises<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.noise = Some(names.into_iter().map(Into::into).collect());
        self
    }

    pub fn snr(mut self, snr: i32) -> Self {
        self.snr_db = Some(vec![snr]);
        self
    }

    pub fn part(mut self, p: Part) -> Self {
        self.part = Some(vec![p]);
        self
    }

    pub fn matches(&self, c: &Condition) -> bool {
        let noise_name = c.noise.as_deref().unwrap_or("clean");
        self.attack.as_ref().is_none_or(|v| v.contains(&c.attack))
            && self.noise.as_ref().is_none_or(|v| v.iter().any(|n| n == noise_name))
            && self
                .snr_db
                .as_ref()
                .is_none_or(|v| c.snr_db.is_some_and(|s| v.contains(&s)))
            && self.part.as_ref().is_none_or(|v| v.contains(&c.part))
    }
}

/// Index over `<root>/<condition>/<split>/<FEATURE>.fbc` caches.
#[derive(Debug, Clone, Default)]
pub struct FeatureStore {
    root: PathBuf,
    conditions: BTreeMap<String, Condition>,
}

impl FeatureStore {
    /// Scans a cache directory. A missing directory yields an empty store.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let root = root.as_ref().to_path_buf();
        let mut conditions = BTreeMap::new();
        if root.is_dir() {
            for entry in fs::read_dir(&root)? {
                let path = entry?.path();
                let desc = path.join(CONDITION_FILE);
                if !desc.is_file() {
                    continue;
                }
                let text = fs::read_to_string(&desc)?;
                let cond: Condition =
                    serde_json::from_str(&text).map_err(|e| DatasetError::BadCondition {
                        path: desc.clone(),
                        msg: e.to_string(),
                    })?;
                conditions.insert(cond.key(), cond);
            }
        }
        Ok(Self { root, conditions })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn conditions(&self) -> impl Iterator<Item = &Condition> {
        self.conditions.values()
    }

    pub fn condition_dir(root: &Path, cond: &Condition) -> PathBuf {
        root.join(cond.key())
    }

    pub fn cache_path(root: &Path, cond: &Condition, split: Split, kind: FeatureKind) -> PathBuf {
        Self::condition_dir(root, cond)
            .join(split.name())
            .join(format!("{}.fbc", kind.name()))
    }

    /// Writes the condition descriptor so the store can discover the directory.
    pub fn register_condition(root: &Path, cond: &Condition) -> Result<(), DatasetError> {
        let dir = Self::condition_dir(root, cond);
        fs::create_dir_all(&dir)?;
        let json = serde_json::to_string_pretty(cond).expect("condition serializes");
        let path = dir.join(CONDITION_FILE);
        if fs::read_to_string(&path).ok().as_deref() != Some(json.as_str()) {
            fs::write(path, json)?;
        }
        Ok(())
    }
}

/// Gathers every cached block of `kind` in `split` whose condition passes the filter,
/// ordered by (source id, block index, condition).
pub fn assemble_condition(
    store: &FeatureStore,
    kind: FeatureKind,
    filter: &ConditionFilter,
    split: Split,
) -> Result<LabeledFeatureSet, DatasetError> {
    let mut items: Vec<(String, LabeledItem)> = Vec::new();
    for (key, cond) in &store.conditions {
        if !filter.matches(cond) {
            continue;
        }
        let split_dir = FeatureStore::condition_dir(&store.root, cond).join(split.name());
        if !split_dir.is_dir() {
            continue;
        }
        let path = FeatureStore::cache_path(&store.root, cond, split, kind);
        if !path.is_file() {
            return Err(DatasetError::MissingCache {
                condition: key.clone(),
                split,
                kind,
            });
        }
        let cache = cache::read_cache(&path)?;
        for (features, record) in cache.matrices.into_iter().zip(cache.records) {
            let label = record.label.as_target();
            items.push((
                key.clone(),
                LabeledItem {
                    features,
                    label,
                    record,
                },
            ));
        }
    }
    items.sort_by(|(ka, a), (kb, b)| {
        (&a.record.source_id, a.record.block_index, ka).cmp(&(&b.record.source_id, b.record.block_index, kb))
    });
    Ok(LabeledFeatureSet::new(items.into_iter().map(|(_, i)| i).collect()))
}
