//! Experiment descriptors, the built-in table designs, and the job runner.
//!
//! A job is one (cell, feature, seed) triple. Each job trains on the train and
//! validation splits of the cell's training dataset and scores the test split of
//! its test dataset. With an output directory, checkpoints and per-job results are
//! written atomically, and existing ones are reused so interrupted runs resume.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{rocauc, EvalError, EvalReport};
use crate::audio_io::{Attack, Part};
use crate::dataset::{self, assemble_condition, ConditionFilter, FeatureStore, LabeledFeatureSet, Split};
use crate::filterbanks::FeatureKind;
use crate::model::checkpoint::{self, Checkpoint};
use crate::model::{self, TrainConfig};
use crate::noise::{NoiseType, SNR_LEVELS_DB};

pub const DEFAULT_BALANCE_SEED: u64 = 0x5eed;

fn default_balance_seed() -> u64 {
    DEFAULT_BALANCE_SEED
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSpec {
    pub id: String,
    /// Row group in the rendered table, usually the training set.
    pub group: String,
    /// Row label within the group, usually the test set.
    pub label: String,
    /// Dataset supplying the train and validation splits.
    pub train: String,
    /// Dataset supplying the test split.
    pub test: String,
}

/// A pooled row: every seed value of the listed cells, aggregated together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub id: String,
    pub group: String,
    pub label: String,
    pub cells: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentDescriptor {
    pub name: String,
    /// Named condition selections.
    pub datasets: BTreeMap<String, ConditionFilter>,
    /// Groups of datasets truncated, per split, to the size of their smallest member.
    #[serde(default)]
    pub balance: Vec<Vec<String>>,
    #[serde(default = "default_balance_seed")]
    pub balance_seed: u64,
    pub cells: Vec<CellSpec>,
    #[serde(default)]
    pub pools: Vec<PoolSpec>,
}

pub const BUILTIN_DESIGNS: [&str; 4] = ["white_black", "speech_nonspeech", "narrow_noise", "noise_generalisation"];

fn cell(id: &str, group: &str, label: &str, train: &str, test: &str) -> CellSpec {
    CellSpec {
        id: id.into(),
        group: group.into(),
        label: label.into(),
        train: train.into(),
        test: test.into(),
    }
}

fn clean(attacks: &[Attack], parts: &[Part]) -> ConditionFilter {
    ConditionFilter {
        attack: Some(attacks.to_vec()),
        noise: Some(vec!["clean".into()]),
        snr_db: None,
        part: Some(parts.to_vec()),
    }
}

fn noisy(noises: &[NoiseType], snr: Option<i32>) -> ConditionFilter {
    ConditionFilter {
        attack: Some(vec![Attack::White]),
        noise: Some(noises.iter().map(|n| n.name().to_string()).collect()),
        snr_db: snr.map(|s| vec![s]),
        part: None,
    }
}

impl ExperimentDescriptor {
    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "white_black" => Some(Self::white_black()),
            "speech_nonspeech" => Some(Self::speech_nonspeech()),
            "narrow_noise" => Some(Self::narrow_noise()),
            "noise_generalisation" => Some(Self::noise_generalisation()),
            _ => None,
        }
    }

    /// Attack-type crosses. Single-attack rows use sets truncated to equal size.
    pub fn white_black() -> Self {
        let (w, b, f) = (Attack::White, Attack::Black, Part::Full);
        let datasets = BTreeMap::from([
            ("white".to_string(), clean(&[w], &[f])),
            ("black".to_string(), clean(&[b], &[f])),
            ("white_all".to_string(), clean(&[w], &[f])),
            ("black_all".to_string(), clean(&[b], &[f])),
            ("both".to_string(), clean(&[w, b], &[f])),
        ]);
        Self {
            name: "white_black".into(),
            datasets,
            balance: vec![vec!["white".into(), "black".into()]],
            balance_seed: DEFAULT_BALANCE_SEED,
            cells: vec![
                cell("w_w", "white-box", "white-box", "white", "white"),
                cell("w_b", "white-box", "black-box", "white", "black"),
                cell("b_w", "black-box", "white-box", "black", "white"),
                cell("b_b", "black-box", "black-box", "black", "black"),
                cell("wb_wb", "w&b-box", "w&b-box", "both", "both"),
                cell("wb_w", "w&b-box", "white-box", "both", "white_all"),
                cell("wb_b", "w&b-box", "black-box", "both", "black_all"),
            ],
            pools: vec![],
        }
    }

    /// Speech-only and non-speech-only crosses on the white-box set.
    pub fn speech_nonspeech() -> Self {
        let (w, s, n) = (Attack::White, Part::Speech, Part::Nonspeech);
        let datasets = BTreeMap::from([
            ("speech".to_string(), clean(&[w], &[s])),
            ("nonspeech".to_string(), clean(&[w], &[n])),
            ("speech_all".to_string(), clean(&[w], &[s])),
            ("nonspeech_all".to_string(), clean(&[w], &[n])),
            ("both".to_string(), clean(&[w], &[s, n])),
        ]);
        Self {
            name: "speech_nonspeech".into(),
            datasets,
            balance: vec![vec!["speech".into(), "nonspeech".into()]],
            balance_seed: DEFAULT_BALANCE_SEED,
            cells: vec![
                cell("ns_ns", "non-speech", "non-speech", "nonspeech", "nonspeech"),
                cell("ns_s", "non-speech", "speech", "nonspeech", "speech"),
                cell("s_s", "speech", "speech", "speech", "speech"),
                cell("s_ns", "speech", "non-speech", "speech", "nonspeech"),
                cell("sns_sns", "speech & ns", "s&ns", "both", "both"),
                cell("sns_ns", "speech & ns", "non-speech", "both", "nonspeech_all"),
                cell("sns_s", "speech & ns", "speech", "both", "speech_all"),
            ],
            pools: vec![],
        }
    }

    /// Matched noise type and SNR for training and testing.
    pub fn narrow_noise() -> Self {
        let mut datasets = BTreeMap::new();
        let mut cells = Vec::new();
        let mut pools = Vec::new();
        let mut all = Vec::new();
        for n in NoiseType::ALL {
            let mut ids = Vec::new();
            for snr in SNR_LEVELS_DB {
                let name = format!("{}_{snr}db", n.name());
                datasets.insert(name.clone(), noisy(&[n], Some(snr)));
                cells.push(cell(&name, n.name(), &format!("{snr}db"), &name, &name));
                ids.push(name);
            }
            pools.push(PoolSpec {
                id: format!("{}_avg", n.name()),
                group: n.name().into(),
                label: "avg".into(),
                cells: ids.clone(),
            });
            all.extend(ids);
        }
        pools.push(PoolSpec {
            id: "avg_all".into(),
            group: "all".into(),
            label: "avg_all".into(),
            cells: all,
        });
        Self {
            name: "narrow_noise".into(),
            datasets,
            balance: vec![],
            balance_seed: DEFAULT_BALANCE_SEED,
            cells,
            pools,
        }
    }

    /// Held-out babble noise against the remaining noise types, and a clean-trained model.
    pub fn noise_generalisation() -> Self {
        let bbl = [NoiseType::Bbl];
        let rest: Vec<NoiseType> = NoiseType::ALL.into_iter().filter(|n| *n != NoiseType::Bbl).collect();
        let mut datasets = BTreeMap::from([
            ("bbl_all".to_string(), noisy(&bbl, None)),
            ("rest_all".to_string(), noisy(&rest, None)),
            ("noisy_all".to_string(), noisy(&NoiseType::ALL, None)),
            ("clean".to_string(), clean(&[Attack::White], &[Part::Full])),
        ]);
        let mut cells = Vec::new();
        let mut pools = Vec::new();
        for (train, test, group, noises) in [
            ("bbl_all", "rest", "bbl_all_snr", &rest[..]),
            ("rest_all", "bbl", "rest_all_snr", &bbl[..]),
        ] {
            let mut ids = Vec::new();
            for snr in SNR_LEVELS_DB {
                let ds = format!("{test}_{snr}db");
                datasets.insert(ds.clone(), noisy(noises, Some(snr)));
                let id = format!("{train}_{ds}");
                cells.push(cell(&id, group, &format!("{test}, {snr}db"), train, &ds));
                ids.push(id);
            }
            pools.push(PoolSpec {
                id: format!("{train}_avg"),
                group: group.into(),
                label: "avg".into(),
                cells: ids,
            });
        }
        cells.push(cell("clean_all", "clean", "all, all", "clean", "noisy_all"));
        Self {
            name: "noise_generalisation".into(),
            datasets,
            balance: vec![],
            balance_seed: DEFAULT_BALANCE_SEED,
            cells,
            pools,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        let d: Self = serde_json::from_str(text)?;
        d.validate()?;
        Ok(d)
    }

    /// Loads a descriptor file, or a built-in design by name.
    pub fn load(spec: &str) -> Result<Self, EvalError> {
        if let Some(d) = Self::builtin(spec) {
            return Ok(d);
        }
        Self::from_json(&fs::read_to_string(spec)?)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::Descriptor(m));
        if self.cells.is_empty() {
            return bad("no cells".into());
        }
        let mut ids = BTreeSet::new();
        for c in &self.cells {
            if !ids.insert(c.id.as_str()) {
                return bad(format!("duplicate cell id `{}`", c.id));
            }
            for d in [&c.train, &c.test] {
                if !self.datasets.contains_key(d) {
                    return bad(format!("cell `{}` names unknown dataset `{d}`", c.id));
                }
            }
        }
        for p in &self.pools {
            if !ids.insert(p.id.as_str()) {
                return bad(format!("duplicate row id `{}`", p.id));
            }
            if let Some(c) = p.cells.iter().find(|c| !self.cells.iter().any(|x| &x.id == *c)) {
                return bad(format!("pool `{}` names unknown cell `{c}`", p.id));
            }
        }
        let mut balanced = BTreeSet::new();
        for g in &self.balance {
            for d in g {
                if !self.datasets.contains_key(d) {
                    return bad(format!("balance group names unknown dataset `{d}`"));
                }
                if !balanced.insert(d) {
                    return bad(format!("dataset `{d}` is in more than one balance group"));
                }
            }
        }
        Ok(())
    }

    /// Keeps only the named cells, and pools whose cells all survive.
    pub fn select_cells(&self, keep: &[String]) -> Result<Self, EvalError> {
        if keep.is_empty() {
            return Ok(self.clone());
        }
        if let Some(k) = keep.iter().find(|k| !self.cells.iter().any(|c| &c.id == *k)) {
            return Err(EvalError::Descriptor(format!("unknown cell `{k}`")));
        }
        let mut d = self.clone();
        d.cells.retain(|c| keep.contains(&c.id));
        d.pools.retain(|p| p.cells.iter().all(|c| keep.contains(c)));
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub features: Vec<FeatureKind>,
    pub seeds: Vec<u64>,
    /// Hyperparameters; the seed field is replaced per job.
    pub train: TrainConfig,
    /// Where checkpoints and per-job results go. `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Worker threads for independent jobs.
    pub jobs: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            features: FeatureKind::ALL.to_vec(),
            seeds: (0..5).collect(),
            train: TrainConfig::default(),
            out_dir: None,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Train,
    Evaluate,
    Both,
}

/// Outcome of one job, stored as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub experiment: String,
    pub cell: String,
    pub feature: FeatureKind,
    pub seed: u64,
    pub rocauc: f64,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub best_epoch: usize,
}

pub fn checkpoint_path(out: &Path, experiment: &str, cell: &str, feature: FeatureKind, seed: u64) -> PathBuf {
    out.join("checkpoints")
        .join(experiment)
        .join(cell)
        .join(feature.name())
        .join(format!("seed{seed}.ckpt"))
}

pub fn job_path(out: &Path, experiment: &str, cell: &str, feature: FeatureKind, seed: u64) -> PathBuf {
    out.join("jobs")
        .join(experiment)
        .join(format!("{cell}__{}__seed{seed}.json", feature.name()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

type SplitSets = BTreeMap<(String, Split), LabeledFeatureSet>;

/// Assembles every (dataset, split) the cells need and applies the balance groups.
fn prepare(desc: &ExperimentDescriptor, store: &FeatureStore, feature: FeatureKind) -> Result<SplitSets, EvalError> {
    let mut need: BTreeSet<(String, Split)> = BTreeSet::new();
    for c in &desc.cells {
        need.insert((c.train.clone(), Split::Train));
        need.insert((c.train.clone(), Split::Validation));
        need.insert((c.test.clone(), Split::Test));
    }
    // balance partners must be loaded even if no cell uses them in that split
    for g in &desc.balance {
        if g.iter().any(|d| need.iter().any(|(n, _)| n == d)) {
            for d in g {
                for s in Split::ALL {
                    need.insert((d.clone(), s));
                }
            }
        }
    }
    let mut sets = SplitSets::new();
    for (name, split) in need {
        let set = assemble_condition(store, feature, &desc.datasets[&name], split)?;
        sets.insert((name, split), set);
    }
    for (gi, group) in desc.balance.iter().enumerate() {
        for (si, split) in Split::ALL.into_iter().enumerate() {
            let keys: Vec<(String, Split)> = group.iter().map(|d| (d.clone(), split)).collect();
            if !keys.iter().all(|k| sets.contains_key(k)) {
                continue;
            }
            let k = keys.iter().map(|key| sets[key].len()).min().unwrap_or(0);
            let mut rng = ChaCha8Rng::seed_from_u64(desc.balance_seed.wrapping_add((gi * 3 + si) as u64));
            for key in keys {
                let set = sets.remove(&key).expect("present");
                sets.insert(key, set.subsample(k, &mut rng));
            }
        }
    }
    Ok(sets)
}

struct Job<'a> {
    cell: &'a CellSpec,
    feature: FeatureKind,
    seed: u64,
}

fn run_job(
    desc: &ExperimentDescriptor,
    sets: &SplitSets,
    opts: &RunOptions,
    job: &Job,
    stage: Stage,
) -> Result<Option<JobResult>, EvalError> {
    let name = desc.name.as_str();
    let (cell, feature, seed) = (job.cell, job.feature, job.seed);
    let result_path = opts.out_dir.as_ref().map(|o| job_path(o, name, &cell.id, feature, seed));
    if stage != Stage::Train {
        if let Some(p) = result_path.as_ref().filter(|p| p.is_file()) {
            let r: JobResult = serde_json::from_str(&fs::read_to_string(p)?)?;
            if r.cell == cell.id && r.feature == feature && r.seed == seed {
                return Ok(Some(r));
            }
        }
    }
    let train_set = &sets[&(cell.train.clone(), Split::Train)];
    let val_set = &sets[&(cell.train.clone(), Split::Validation)];
    let test_set = &sets[&(cell.test.clone(), Split::Test)];
    dataset::verify_no_overlap(&[train_set, val_set, test_set])?;

    let ck_path = opts.out_dir.as_ref().map(|o| checkpoint_path(o, name, &cell.id, feature, seed));
    let existing = match ck_path.as_ref().filter(|p| p.is_file()) {
        Some(p) => Some((checkpoint::load(p)?, checkpoint::load_history(p).ok())),
        None => None,
    };
    let (ck, best_epoch) = match existing {
        Some((ck, hist)) => (ck, hist.map_or(0, |h| h.best_epoch)),
        None if stage == Stage::Evaluate => {
            return Err(EvalError::Descriptor(format!(
                "no checkpoint for cell `{}` {feature} seed {seed}; run training first",
                cell.id
            )))
        }
        None => {
            let cfg = TrainConfig {
                seed,
                ..opts.train.clone()
            };
            let (m, hist) = model::train(train_set, val_set, &cfg)?;
            let ck = Checkpoint {
                feature,
                seed,
                config: cfg,
                model: m,
            };
            if let Some(p) = &ck_path {
                checkpoint::save(p, &ck, Some(&hist))?;
            }
            (ck, hist.best_epoch)
        }
    };
    if stage == Stage::Train {
        return Ok(None);
    }
    let scored = model::predict_scores(&ck.model, test_set)?;
    let (scores, labels): (Vec<f64>, Vec<u8>) = scored.into_iter().unzip();
    let r = JobResult {
        experiment: name.into(),
        cell: cell.id.clone(),
        feature,
        seed,
        rocauc: rocauc(&scores, &labels)?,
        n_train: train_set.len(),
        n_validation: val_set.len(),
        n_test: test_set.len(),
        best_epoch,
    };
    if let Some(p) = &result_path {
        write_atomic(p, serde_json::to_string_pretty(&r)?.as_bytes())?;
    }
    Ok(Some(r))
}

/// Runs the requested stage for every (cell, feature, seed) job, in descriptor order.
pub fn run_jobs(
    desc: &ExperimentDescriptor,
    store: &FeatureStore,
    opts: &RunOptions,
    stage: Stage,
) -> Result<Vec<JobResult>, EvalError> {
    desc.validate()?;
    if opts.seeds.is_empty() || opts.features.is_empty() {
        return Err(EvalError::Descriptor("empty seed or feature list".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| EvalError::Descriptor(e.to_string()))?;
    let mut out = Vec::new();
    for &feature in &opts.features {
        let sets = prepare(desc, store, feature)?;
        let jobs: Vec<Job> = desc
            .cells
            .iter()
            .flat_map(|cell| opts.seeds.iter().map(move |&seed| Job { cell, feature, seed }))
            .collect();
        let results: Vec<Result<Option<JobResult>, EvalError>> = pool.install(|| {
            jobs.par_iter()
                .map(|j| {
                    run_job(desc, &sets, opts, j, stage).map_err(|e| EvalError::Cell {
                        cell: j.cell.id.clone(),
                        feature,
                        source: Box::new(e),
                    })
                })
                .collect()
        });
        for r in results {
            if let Some(r) = r? {
                out.push(r);
            }
        }
    }
    Ok(out)
}

/// Loads every stored job result for the descriptor's cells.
pub fn load_job_results(
    desc: &ExperimentDescriptor,
    out_dir: &Path,
    features: &[FeatureKind],
    seeds: &[u64],
) -> Result<Vec<JobResult>, EvalError> {
    let mut out = Vec::new();
    for &f in features {
        for c in &desc.cells {
            for &s in seeds {
                let p = job_path(out_dir, &desc.name, &c.id, f, s);
                if p.is_file() {
                    out.push(serde_json::from_str(&fs::read_to_string(p)?)?);
                }
            }
        }
    }
    Ok(out)
}

/// Cell rows then pooled rows, each for every feature, in descriptor and feature order.
pub fn build_reports(desc: &ExperimentDescriptor, results: &[JobResult]) -> Vec<EvalReport> {
    let mut by_key: BTreeMap<(&str, FeatureKind), Vec<(u64, f64)>> = BTreeMap::new();
    for r in results {
        by_key.entry((r.cell.as_str(), r.feature)).or_default().push((r.seed, r.rocauc));
    }
    for v in by_key.values_mut() {
        v.sort_by_key(|(s, _)| *s);
    }
    let features: Vec<FeatureKind> = FeatureKind::ALL
        .into_iter()
        .filter(|f| results.iter().any(|r| r.feature == *f))
        .collect();
    let mut reports = Vec::new();
    for c in &desc.cells {
        for &f in &features {
            if let Some(v) = by_key.get(&(c.id.as_str(), f)) {
                let (seeds, values) = v.iter().copied().unzip();
                reports.push(EvalReport::new(
                    &desc.name, &c.group, &c.label, &c.id, &c.train, &c.test, f, seeds, values,
                ));
            }
        }
    }
    for p in &desc.pools {
        for &f in &features {
            let mut seeds = Vec::new();
            let mut values = Vec::new();
            for id in &p.cells {
                if let Some(v) = by_key.get(&(id.as_str(), f)) {
                    for &(s, x) in v {
                        seeds.push(s);
                        values.push(x);
                    }
                }
            }
            if !values.is_empty() {
                reports.push(EvalReport::new(&desc.name, &p.group, &p.label, &p.id, "", "", f, seeds, values));
            }
        }
    }
    reports
}

/// Trains, scores and aggregates every cell of the descriptor.
pub fn run_experiment(
    desc: &ExperimentDescriptor,
    store: &FeatureStore,
    opts: &RunOptions,
) -> Result<Vec<EvalReport>, EvalError> {
    let results = run_jobs(desc, store, opts, Stage::Both)?;
    Ok(build_reports(desc, &results))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_designs_validate_and_have_table_shapes() {
        for name in BUILTIN_DESIGNS {
            let d = ExperimentDescriptor::builtin(name).unwrap();
            d.validate().unwrap();
            let back = ExperimentDescriptor::from_json(&serde_json::to_string(&d).unwrap()).unwrap();
            assert_eq!(back, d);
        }
        let wb = ExperimentDescriptor::white_black();
        let rows: Vec<(String, String)> = wb.cells.iter().map(|c| (c.group.clone(), c.label.clone())).collect();
        assert_eq!(rows.len(), 7);
        assert_eq!(rows[0], ("white-box".into(), "white-box".into()));
        assert_eq!(rows[6], ("w&b-box".into(), "black-box".into()));

        let nn = ExperimentDescriptor::narrow_noise();
        assert_eq!(nn.cells.len(), 30);
        assert_eq!(nn.pools.len(), 7);
        assert!(nn.pools[..6].iter().all(|p| p.cells.len() == 5));
        assert_eq!(nn.pools[6].cells.len(), 30);
        let groups: Vec<&str> = nn.pools[..6].iter().map(|p| p.group.as_str()).collect();
        assert_eq!(groups, ["bbl", "ssn", "kitchen", "cafeteria", "square", "bus"]);

        let ng = ExperimentDescriptor::noise_generalisation();
        assert_eq!(ng.cells.len(), 11);
        assert_eq!(ExperimentDescriptor::speech_nonspeech().cells.len(), 7);
    }

    #[test]
    fn validation_catches_bad_references() {
        let mut d = ExperimentDescriptor::white_black();
        d.cells[0].train = "nope".into();
        assert!(d.validate().is_err());
        let mut d = ExperimentDescriptor::white_black();
        d.cells[1].id = "w_w".into();
        assert!(d.validate().is_err());
        let mut d = ExperimentDescriptor::narrow_noise();
        d.pools[0].cells.push("x".into());
        assert!(d.validate().is_err());
        assert!(ExperimentDescriptor::from_json(r#"{"name":"x","datasets":{},"cells":[]}"#).is_err());
    }

    #[test]
    fn cell_selection() {
        let d = ExperimentDescriptor::narrow_noise();
        let s = d.select_cells(&["bbl_0db".into()]).unwrap();
        assert_eq!(s.cells.len(), 1);
        assert!(s.pools.is_empty());
        assert!(d.select_cells(&["zzz".into()]).is_err());
        assert_eq!(d.select_cells(&[]).unwrap(), d);
    }

    #[test]
    fn pooled_rows_aggregate_all_values() {
        let d = ExperimentDescriptor::narrow_noise().select_cells(&["bbl_0db".into(), "bbl_5db".into()]).unwrap();
        let mut d = d;
        d.pools.push(PoolSpec {
            id: "p".into(),
            group: "bbl".into(),
            label: "avg".into(),
            cells: vec!["bbl_0db".into(), "bbl_5db".into()],
        });
        let mk = |cell: &str, seed, v| JobResult {
            experiment: d.name.clone(),
            cell: cell.into(),
            feature: FeatureKind::Imfcc,
            seed,
            rocauc: v,
            n_train: 1,
            n_validation: 1,
            n_test: 1,
            best_epoch: 1,
        };
        let results = vec![mk("bbl_5db", 1, 0.8), mk("bbl_0db", 0, 0.5), mk("bbl_0db", 1, 0.7), mk("bbl_5db", 0, 0.6)];
        let reps = build_reports(&d, &results);
        assert_eq!(reps.len(), 3);
        assert_eq!(reps[0].values, vec![0.5, 0.7]);
        assert_eq!(reps[2].values, vec![0.5, 0.7, 0.6, 0.8]);
        assert!((reps[2].mean - 0.65).abs() < 1e-12);
        assert!(reps.iter().all(EvalReport::is_consistent));
    }
}
