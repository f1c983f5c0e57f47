//! Batch drivers for each pipeline step. Every step reads and writes plain
//! files under the directories named in a [`RunConfig`].
//!
//! Layout under `work_dir`: `vad/` speech masks, `noisy/` mixed audio with
//! `noisy/manifest.csv`, `failures/<step>.csv`. Caches live under
//! `cache_dir`, checkpoints, job results and tables under `results_dir`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::{self, Attack, AudioError, AudioSignal, Block, Condition, Label, Part};
use crate::cache::{self, CacheError, FeatureCache, InputDigest};
use crate::dataset::{split_of, DatasetError, FeatureStore, Split};
use crate::eval::experiment::{self, Stage, BUILTIN_DESIGNS};
use crate::eval::{report, EvalError, EvalReport, ExperimentDescriptor, RunOptions};
use crate::filterbanks::{FeatureExtractor, FeatureKind};
use crate::model::{ModelError, TrainConfig, INPUT_SHAPE};
use crate::noise::{self, NoiseError, NoiseSource, NoiseType, MixRecord, NOISE_SPLIT_RATIOS, SNR_LEVELS_DB};
use crate::synth::{self, LabelEntry};
use crate::vad::{self, SpeechMask, VadError};

pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_MD: &str = "results.md";
pub const MIX_MANIFEST: &str = "manifest.csv";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("internal: {0}")]
    Internal(String),
}

impl PipelineError {
    /// Process exit code: 1 config, 2 data, 3 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Data(_) => 2,
            PipelineError::Internal(_) => 3,
        }
    }
}

impl From<AudioError> for PipelineError {
    fn from(e: AudioError) -> Self {
        match e {
            AudioError::Io(e) => e.into(),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Internal(e.to_string())
    }
}

impl From<VadError> for PipelineError {
    fn from(e: VadError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<NoiseError> for PipelineError {
    fn from(e: NoiseError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<CacheError> for PipelineError {
    fn from(e: CacheError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<DatasetError> for PipelineError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io(e) => e.into(),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<ModelError> for PipelineError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::BadConfig(_) => PipelineError::Config(e.to_string()),
            ModelError::EmptySet(_) => PipelineError::Data(e.to_string()),
            other => PipelineError::Internal(other.to_string()),
        }
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        let msg = e.to_string();
        let mut inner = &e;
        while let EvalError::Cell { source, .. } = inner {
            inner = source;
        }
        match inner {
            EvalError::Descriptor(_) => PipelineError::Config(msg),
            EvalError::Model(ModelError::BadConfig(_)) => PipelineError::Config(msg),
            EvalError::Model(ModelError::EmptySet(_)) => PipelineError::Data(msg),
            EvalError::Model(_) | EvalError::Io(_) => PipelineError::Internal(msg),
            _ => PipelineError::Data(msg),
        }
    }
}

/// Everything a run needs. Relative paths in a config file resolve against
/// the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// WAV tree root.
    pub data_dir: PathBuf,
    /// Labels manifest; defaults to `<data_dir>/labels.csv`.
    pub labels: Option<PathBuf>,
    /// One `<noise>.wav` per noise type.
    pub noise_dir: Option<PathBuf>,
    /// Optional precomputed masks, `<relative wav path>.csv`.
    pub vad_dir: Option<PathBuf>,
    pub work_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub results_dir: PathBuf,
    pub features: Vec<FeatureKind>,
    pub seeds: Vec<u64>,
    /// Built-in design names or descriptor JSON paths.
    pub experiments: Vec<String>,
    /// Restrict training and evaluation to these cell ids. Empty means all.
    pub cells: Vec<String>,
    pub jobs: usize,
    pub deterministic: bool,
    /// Seed for noise segment offsets.
    pub mix_seed: u64,
    /// Attack sets that get noisy copies.
    pub noise_attacks: Vec<Attack>,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            labels: None,
            noise_dir: None,
            vad_dir: None,
            work_dir: "work".into(),
            cache_dir: "work/cache".into(),
            results_dir: "results".into(),
            features: FeatureKind::ALL.to_vec(),
            seeds: (0..5).collect(),
            experiments: BUILTIN_DESIGNS.iter().map(|s| s.to_string()).collect(),
            cells: Vec::new(),
            jobs: 1,
            deterministic: false,
            mix_seed: 0,
            noise_attacks: vec![Attack::White],
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a JSON config and anchors its relative paths at the file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data_dir);
        fix(&mut self.work_dir);
        fix(&mut self.cache_dir);
        fix(&mut self.results_dir);
        for p in [&mut self.labels, &mut self.noise_dir, &mut self.vad_dir].into_iter().flatten() {
            fix(p);
        }
        for e in &mut self.experiments {
            if ExperimentDescriptor::builtin(e).is_none() && Path::new(e).is_relative() {
                *e = base.join(&*e).to_string_lossy().into_owned();
            }
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.seeds.is_empty() {
            return bad("seed list is empty".into());
        }
        if self.features.is_empty() {
            return bad("feature list is empty".into());
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        if !self.data_dir.is_dir() {
            return bad(format!("data directory {} does not exist", self.data_dir.display()));
        }
        for (what, p) in [("noise", &self.noise_dir), ("vad", &self.vad_dir)] {
            if let Some(p) = p.as_ref().filter(|p| !p.is_dir()) {
                return bad(format!("{what} directory {} does not exist", p.display()));
            }
        }
        if let Some(l) = self.labels.as_ref().filter(|l| !l.is_file()) {
            return bad(format!("labels manifest {} does not exist", l.display()));
        }
        for e in &self.experiments {
            if ExperimentDescriptor::builtin(e).is_none() && !Path::new(e).is_file() {
                return bad(format!("experiment `{e}` is neither a built-in design nor a file"));
            }
        }
        self.train.validate()?;
        Ok(())
    }

    /// Worker threads actually used. Deterministic mode runs everything serially.
    pub fn threads(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.jobs.max(1)
        }
    }

    pub fn labels_path(&self) -> PathBuf {
        self.labels.clone().unwrap_or_else(|| self.data_dir.join("labels.csv"))
    }

    pub fn noisy_dir(&self) -> PathBuf {
        self.work_dir.join("noisy")
    }

    pub fn results_csv(&self) -> PathBuf {
        self.results_dir.join(RESULTS_CSV)
    }

    fn pool(&self) -> Result<rayon::ThreadPool, PipelineError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads())
            .build()
            .map_err(|e| PipelineError::Internal(e.to_string()))
    }
}

/// A file that could not be processed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub path: String,
    pub error: String,
}

fn failure_path(cfg: &RunConfig, step: &str) -> PathBuf {
    cfg.work_dir.join("failures").join(format!("{step}.csv"))
}

/// Writes the failure manifest for a step (empty when all went well) and
/// turns any failures into a data error.
fn settle_failures(cfg: &RunConfig, step: &str, failures: &[Failure]) -> Result<(), PipelineError> {
    let path = failure_path(cfg, step);
    fs::create_dir_all(path.parent().expect("has parent"))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&path).map_err(csv_err)?;
    w.write_record(["path", "error"]).map_err(csv_err)?;
    for f in failures {
        w.serialize(f).map_err(csv_err)?;
    }
    w.flush()?;
    if failures.is_empty() {
        Ok(())
    } else {
        for f in failures {
            log::error!("{}: {}", f.path, f.error);
        }
        Err(PipelineError::Data(format!(
            "{} file(s) failed in {step}; see {}",
            failures.len(),
            path.display()
        )))
    }
}

pub fn read_failures(path: &Path) -> Result<Vec<Failure>, PipelineError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|x| x.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> PipelineError {
    PipelineError::Data(e.to_string())
}

/// Labels from the manifest, or, without one, from a `<attack>/<label>/...`
/// directory layout. Sorted by path.
pub fn load_entries(cfg: &RunConfig) -> Result<Vec<LabelEntry>, PipelineError> {
    let path = cfg.labels_path();
    let mut entries = if path.is_file() {
        synth::read_labels(&path).map_err(|e| PipelineError::Config(e.to_string()))?
    } else {
        discover(&cfg.data_dir)?
    };
    entries.sort();
    for w in entries.windows(2) {
        if w[0].path == w[1].path {
            return Err(PipelineError::Config(format!("`{}` is listed twice", w[0].path)));
        }
    }
    Ok(entries)
}

fn discover(root: &Path) -> Result<Vec<LabelEntry>, PipelineError> {
    let mut wavs = Vec::new();
    collect_wavs(root, root, &mut wavs)?;
    wavs.into_iter()
        .map(|rel| {
            let mut parts = rel.split('/');
            let attack = parts.next().and_then(|a| a.parse::<Attack>().ok());
            let label = parts.next().and_then(|l| l.parse::<Label>().ok());
            match (attack, label) {
                (Some(attack), Some(label)) => Ok(LabelEntry { path: rel, label, attack }),
                _ => Err(PipelineError::Config(format!(
                    "no labels manifest and `{rel}` is not under <attack>/<label>/"
                ))),
            }
        })
        .collect()
}

fn collect_wavs(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<(), PipelineError> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_wavs(root, &p, out)?;
        } else if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            let rel = p.strip_prefix(root).expect("under root");
            let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            out.push(parts.join("/"));
        }
    }
    Ok(())
}

/// The split key of an entry is its file stem, so benign and adversarial
/// copies of one utterance always share a split.
pub fn split_key(path: &str) -> &str {
    let name = path.rsplit('/').next().unwrap_or(path);
    name.rsplit_once('.').map_or(name, |(stem, _)| stem)
}

pub fn entry_split(e: &LabelEntry) -> Split {
    split_of(split_key(&e.path))
}

fn mask_path(root: &Path, rel: &str) -> PathBuf {
    root.join(format!("{rel}.csv"))
}

fn speech_mask(cfg: &RunConfig, rel: &str, signal: &AudioSignal) -> Result<SpeechMask, PipelineError> {
    if let Some(p) = cfg.vad_dir.as_ref().map(|d| mask_path(d, rel)).filter(|p| p.is_file()) {
        return Ok(vad::load_external_mask(p)?);
    }
    Ok(vad::detect_speech(signal)?)
}

/// One row per labelled file with its split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRow {
    pub path: String,
    pub key: String,
    pub label: Label,
    pub attack: Attack,
    pub split: Split,
}

/// Assigns every labelled file to a split and writes `<work_dir>/splits.csv`.
pub fn cmd_split(cfg: &RunConfig) -> Result<Vec<SplitRow>, PipelineError> {
    let rows: Vec<SplitRow> = load_entries(cfg)?
        .into_iter()
        .map(|e| SplitRow {
            key: split_key(&e.path).to_string(),
            split: entry_split(&e),
            path: e.path,
            label: e.label,
            attack: e.attack,
        })
        .collect();
    fs::create_dir_all(&cfg.work_dir)?;
    let mut w = csv::Writer::from_path(cfg.work_dir.join("splits.csv")).map_err(csv_err)?;
    for r in &rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(rows)
}

/// Writes a speech mask per file under `<work_dir>/vad/`.
pub fn cmd_vad(cfg: &RunConfig) -> Result<usize, PipelineError> {
    let entries = load_entries(cfg)?;
    let out = cfg.work_dir.join("vad");
    let results: Vec<Result<(), Failure>> = cfg.pool()?.install(|| {
        entries
            .par_iter()
            .map(|e| {
                let run = || -> Result<(), PipelineError> {
                    let signal = audio_io::read_wav(cfg.data_dir.join(&e.path))?;
                    let mask = speech_mask(cfg, &e.path, &signal)?;
                    let p = mask_path(&out, &e.path);
                    fs::create_dir_all(p.parent().expect("has parent"))?;
                    mask.save(p)?;
                    Ok(())
                };
                run().map_err(|err| Failure {
                    path: e.path.clone(),
                    error: err.to_string(),
                })
            })
            .collect()
    });
    let failures: Vec<Failure> = results.into_iter().filter_map(Result::err).collect();
    settle_failures(cfg, "vad", &failures)?;
    Ok(entries.len())
}

fn load_noises(cfg: &RunConfig) -> Result<Vec<NoiseSource>, PipelineError> {
    let dir = cfg
        .noise_dir
        .as_ref()
        .ok_or_else(|| PipelineError::Config("noise_dir is not set".into()))?;
    NoiseType::ALL
        .into_iter()
        .map(|n| {
            let p = dir.join(format!("{}.wav", n.name()));
            let signal = audio_io::read_wav(&p).map_err(|e| PipelineError::Data(format!("{}: {e}", p.display())))?;
            Ok(noise::split_noise(n, signal, NOISE_SPLIT_RATIOS)?)
        })
        .collect()
}

fn mix_one(
    cfg: &RunConfig,
    noises: &[NoiseSource],
    e: &LabelEntry,
) -> Result<Vec<MixRecord>, PipelineError> {
    let signal = audio_io::read_wav(cfg.data_dir.join(&e.path))?;
    let mask = speech_mask(cfg, &e.path, &signal)?;
    let split = entry_split(e);
    let mut out = Vec::new();
    for src in noises {
        for snr in SNR_LEVELS_DB {
            let seed = noise::utterance_seed(cfg.mix_seed, &format!("{}|{}|{snr}", e.path, src.name));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (slice, offset) = noise::sample_noise_segment(src, split, signal.len(), &mut rng)?;
            let mixed = noise::mix_at_snr(&signal, &mask, &slice, f64::from(snr))?;
            let (exported, rescale) = noise::export_rescale(&mixed.signal)?;
            let rel = format!("{}/{snr}db/{}", src.name, e.path);
            let p = cfg.noisy_dir().join(&rel);
            fs::create_dir_all(p.parent().expect("has parent"))?;
            audio_io::write_wav(&exported, &p)?;
            out.push(MixRecord {
                source_id: e.path.clone(),
                noise_name: src.name,
                split,
                offset,
                snr_db: snr,
                alpha: mixed.alpha,
                rescale,
                path: rel,
            });
        }
    }
    Ok(out)
}

/// Mixes every noise at every SNR into each file of the configured attack
/// sets. Writes the noisy tree and its manifest; returns the manifest rows.
pub fn cmd_mix_noise(cfg: &RunConfig) -> Result<Vec<MixRecord>, PipelineError> {
    let noises = load_noises(cfg)?;
    let entries: Vec<LabelEntry> = load_entries(cfg)?
        .into_iter()
        .filter(|e| cfg.noise_attacks.contains(&e.attack))
        .collect();
    let results: Vec<Result<Vec<MixRecord>, Failure>> = cfg.pool()?.install(|| {
        entries
            .par_iter()
            .map(|e| {
                mix_one(cfg, &noises, e).map_err(|err| Failure {
                    path: e.path.clone(),
                    error: err.to_string(),
                })
            })
            .collect()
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(rs) => records.extend(rs),
            Err(f) => failures.push(f),
        }
    }
    let manifest = cfg.noisy_dir().join(MIX_MANIFEST);
    fs::create_dir_all(cfg.noisy_dir())?;
    let mut w = csv::Writer::from_path(&manifest).map_err(csv_err)?;
    for r in &records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    settle_failures(cfg, "mix-noise", &failures)?;
    Ok(records)
}

pub fn read_mix_manifest(path: &Path) -> Result<Vec<MixRecord>, PipelineError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|x| x.map_err(csv_err)).collect()
}

/// Counts from one extraction pass.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ExtractSummary {
    pub files: usize,
    pub failed: usize,
    pub blocks: usize,
    pub written: usize,
    pub up_to_date: usize,
}

type Groups = BTreeMap<(Condition, Split), Vec<Block>>;
type Loaded = (Split, Result<Vec<Block>, PipelineError>);

fn clean_blocks(cfg: &RunConfig, e: &LabelEntry) -> Result<Vec<Block>, PipelineError> {
    let signal = audio_io::read_wav(cfg.data_dir.join(&e.path))?;
    let mask = speech_mask(cfg, &e.path, &signal)?;
    let (speech, rest) = vad::split_speech_nonspeech(&signal, &mask)?;
    let mut out = Vec::new();
    for (sig, part) in [(&signal, Part::Full), (&speech, Part::Speech), (&rest, Part::Nonspeech)] {
        out.extend(audio_io::chop_blocks(sig, e.label, &e.path, &Condition::clean(e.attack, part)));
    }
    Ok(out)
}

fn noisy_blocks(cfg: &RunConfig, e: &LabelEntry, r: &MixRecord) -> Result<Vec<Block>, PipelineError> {
    let signal = audio_io::read_wav(cfg.noisy_dir().join(&r.path))?;
    let cond = Condition::noisy(e.attack, r.noise_name.name(), r.snr_db);
    Ok(audio_io::chop_blocks(&signal, e.label, &e.path, &cond))
}

/// Writes one cache per (condition, split, feature), skipping caches whose
/// stored input digest already matches.
fn write_groups(cfg: &RunConfig, groups: &Groups, summary: &mut ExtractSummary) -> Result<(), PipelineError> {
    let pool = cfg.pool()?;
    let mut registered = BTreeSet::new();
    for ((cond, split), blocks) in groups {
        if registered.insert(cond.key()) {
            FeatureStore::register_condition(&cfg.cache_dir, cond)?;
        }
        for &kind in &cfg.features {
            let mut digest = InputDigest::new(kind);
            for b in blocks {
                digest.add_record(&b.record());
                digest.add_samples(b.samples());
            }
            let digest = digest.finish();
            let path = FeatureStore::cache_path(&cfg.cache_dir, cond, *split, kind);
            if cache::stored_digest(&path) == Some(digest) {
                summary.up_to_date += 1;
                continue;
            }
            let ex = FeatureExtractor::new(kind);
            let matrices = pool.install(|| blocks.par_iter().map(|b| ex.extract(b)).collect());
            cache::write_cache(
                &path,
                &FeatureCache {
                    kind,
                    digest,
                    rows: INPUT_SHAPE.rows,
                    cols: INPUT_SHAPE.cols,
                    matrices,
                    records: blocks.iter().map(Block::record).collect(),
                },
            )?;
            summary.written += 1;
        }
    }
    Ok(())
}

/// Chops every clean file (full, speech-only, non-speech-only) and every
/// noisy file in the mixing manifest into blocks and caches their features.
/// Files that fail are listed in `<work_dir>/failures/extract.csv`; the rest
/// are still cached, then the call returns a data error.
pub fn cmd_extract(cfg: &RunConfig) -> Result<ExtractSummary, PipelineError> {
    let entries = load_entries(cfg)?;
    let pool = cfg.pool()?;
    let mut summary = ExtractSummary {
        files: entries.len(),
        ..ExtractSummary::default()
    };
    let mut failures = Vec::new();
    let mut bad: BTreeSet<String> = BTreeSet::new();

    let mut groups = Groups::new();
    let attacks: BTreeSet<Attack> = entries.iter().map(|e| e.attack).collect();
    for &a in &attacks {
        for part in [Part::Full, Part::Speech, Part::Nonspeech] {
            for s in Split::ALL {
                groups.insert((Condition::clean(a, part), s), Vec::new());
            }
        }
    }
    let clean: Vec<Result<Vec<Block>, PipelineError>> =
        pool.install(|| entries.par_iter().map(|e| clean_blocks(cfg, e)).collect());
    for (e, r) in entries.iter().zip(clean) {
        match r {
            Ok(blocks) => {
                let split = entry_split(e);
                for b in blocks {
                    groups.get_mut(&(b.condition.clone(), split)).expect("registered").push(b);
                }
            }
            Err(err) => {
                bad.insert(e.path.clone());
                failures.push(Failure {
                    path: e.path.clone(),
                    error: err.to_string(),
                });
            }
        }
    }
    summary.blocks += groups.values().map(Vec::len).sum::<usize>();
    write_groups(cfg, &groups, &mut summary)?;
    drop(groups);

    let manifest = cfg.noisy_dir().join(MIX_MANIFEST);
    if manifest.is_file() {
        let by_path: BTreeMap<&str, &LabelEntry> = entries.iter().map(|e| (e.path.as_str(), e)).collect();
        let mut records = read_mix_manifest(&manifest)?;
        records.sort_by(|a, b| (a.noise_name.name(), a.snr_db, &a.source_id).cmp(&(b.noise_name.name(), b.snr_db, &b.source_id)));
        // one (noise, SNR) condition at a time keeps memory bounded
        let mut i = 0;
        while i < records.len() {
            let (noise_name, snr) = (records[i].noise_name, records[i].snr_db);
            let mut j = i;
            while j < records.len() && records[j].noise_name == noise_name && records[j].snr_db == snr {
                j += 1;
            }
            let chunk = &records[i..j];
            i = j;
            let mut groups = Groups::new();
            for r in chunk {
                if let Some(e) = by_path.get(r.source_id.as_str()) {
                    for s in Split::ALL {
                        groups
                            .entry((Condition::noisy(e.attack, noise_name.name(), snr), s))
                            .or_default();
                    }
                }
            }
            let loaded: Vec<Option<Loaded>> = pool.install(|| {
                chunk
                    .par_iter()
                    .map(|r| {
                        let e = by_path.get(r.source_id.as_str())?;
                        Some((entry_split(e), noisy_blocks(cfg, e, r)))
                    })
                    .collect()
            });
            for (r, l) in chunk.iter().zip(loaded) {
                match l {
                    Some((split, Ok(blocks))) => {
                        for b in blocks {
                            groups.get_mut(&(b.condition.clone(), split)).expect("registered").push(b);
                        }
                    }
                    Some((_, Err(err))) => {
                        bad.insert(r.path.clone());
                        failures.push(Failure {
                            path: format!("noisy/{}", r.path),
                            error: err.to_string(),
                        });
                    }
                    None => log::warn!("mix manifest row for unknown file `{}` ignored", r.source_id),
                }
            }
            summary.blocks += groups.values().map(Vec::len).sum::<usize>();
            write_groups(cfg, &groups, &mut summary)?;
        }
    }
    summary.failed = bad.len();
    settle_failures(cfg, "extract", &failures)?;
    Ok(summary)
}

/// Descriptors named in the config, narrowed to the configured cells.
pub fn descriptors(cfg: &RunConfig) -> Result<Vec<ExperimentDescriptor>, PipelineError> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for spec in &cfg.experiments {
        let d = ExperimentDescriptor::load(spec)?;
        if cfg.cells.is_empty() {
            out.push(d);
            continue;
        }
        let keep: Vec<String> = cfg.cells.iter().filter(|c| d.cells.iter().any(|x| &x.id == *c)).cloned().collect();
        seen.extend(keep.iter().cloned());
        if !keep.is_empty() {
            out.push(d.select_cells(&keep)?);
        }
    }
    if let Some(c) = cfg.cells.iter().find(|c| !seen.contains(*c)) {
        return Err(PipelineError::Config(format!("cell `{c}` is not in any selected experiment")));
    }
    Ok(out)
}

fn run_options(cfg: &RunConfig) -> RunOptions {
    RunOptions {
        features: cfg.features.clone(),
        seeds: cfg.seeds.clone(),
        train: cfg.train.clone(),
        out_dir: Some(cfg.results_dir.clone()),
        jobs: cfg.threads(),
    }
}

/// Trains (or reuses) one checkpoint per (cell, feature, seed); returns their paths.
pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let store = FeatureStore::open(&cfg.cache_dir)?;
    let opts = run_options(cfg);
    let mut paths = Vec::new();
    for d in descriptors(cfg)? {
        experiment::run_jobs(&d, &store, &opts, Stage::Train)?;
        for &f in &cfg.features {
            for c in &d.cells {
                for &s in &cfg.seeds {
                    paths.push(experiment::checkpoint_path(&cfg.results_dir, &d.name, &c.id, f, s));
                }
            }
        }
    }
    Ok(paths)
}

/// Scores every trained checkpoint on its test set and writes `results.csv`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<Vec<EvalReport>, PipelineError> {
    let store = FeatureStore::open(&cfg.cache_dir)?;
    let opts = run_options(cfg);
    let mut reports = Vec::new();
    for d in descriptors(cfg)? {
        let results = experiment::run_jobs(&d, &store, &opts, Stage::Evaluate)?;
        reports.extend(experiment::build_reports(&d, &results));
    }
    report::write_csv(&reports, &cfg.results_csv())?;
    Ok(reports)
}

/// Renders `results.csv` as Markdown tables in `results.md`.
pub fn cmd_report(cfg: &RunConfig) -> Result<String, PipelineError> {
    let path = cfg.results_csv();
    if !path.is_file() {
        return Err(PipelineError::Data(format!("{} not found; run eval first", path.display())));
    }
    let md = report::to_markdown(&report::read_csv(&path)?);
    fs::write(cfg.results_dir.join(RESULTS_MD), &md)?;
    Ok(md)
}

/// Every step in order. Noise mixing runs only when a noise directory is set.
pub fn cmd_run(cfg: &RunConfig) -> Result<String, PipelineError> {
    cmd_split(cfg)?;
    cmd_vad(cfg)?;
    if cfg.noise_dir.is_some() {
        cmd_mix_noise(cfg)?;
    }
    cmd_extract(cfg)?;
    cmd_train(cfg)?;
    cmd_eval(cfg)?;
    cmd_report(cfg)
}

/// Provenance record written for every invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub status: String,
    pub exit_code: i32,
    pub seeds: Vec<u64>,
    pub threads: usize,
    pub config: RunConfig,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

/// Runs `f` and records a manifest under `<results_dir>/runs/`.
pub fn with_manifest<T>(
    cfg: &RunConfig,
    command: &str,
    f: impl FnOnce(&RunConfig) -> Result<T, PipelineError>,
) -> Result<(T, PathBuf), (PipelineError, Option<PathBuf>)> {
    let started = now_ms();
    let out = f(cfg);
    let (status, code) = match &out {
        Ok(_) => ("ok".to_string(), 0),
        Err(e) => (e.to_string(), e.exit_code()),
    };
    let m = RunManifest {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
        status,
        exit_code: code,
        seeds: cfg.seeds.clone(),
        threads: cfg.threads(),
        config: cfg.clone(),
    };
    let dir = cfg.results_dir.join("runs");
    let path = dir.join(format!("{started}-{}-{command}.json", std::process::id()));
    let written = fs::create_dir_all(&dir)
        .and_then(|_| fs::write(&path, serde_json::to_string_pretty(&m).expect("manifest serializes")))
        .map(|_| path);
    match (out, written) {
        (Ok(v), Ok(p)) => Ok((v, p)),
        (Ok(_), Err(e)) => Err((e.into(), None)),
        (Err(e), w) => Err((e, w.ok())),
    }
}
