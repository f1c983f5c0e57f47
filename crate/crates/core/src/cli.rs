//! Command-line front end. Flags override the JSON config; every flag also
//! reads a `CGUARD_*` environment variable.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::filterbanks::FeatureKind;
use crate::model::TrainConfig;
use crate::pipeline::{self, PipelineError, RunConfig};
use crate::synth;

#[derive(Debug, Parser)]
#[command(name = "cepstral-guard", version, about = "Adversarial speech detection with cepstral features and a small CNN")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true, env = "CGUARD_CONFIG")]
    pub config: Option<PathBuf>,
    /// Training seeds, comma separated.
    #[arg(long = "seed", global = true, env = "CGUARD_SEED", value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Worker threads for independent jobs.
    #[arg(long, global = true, env = "CGUARD_JOBS")]
    pub jobs: Option<usize>,
    /// Run serially so every artifact is bit-reproducible.
    #[arg(long, global = true, env = "CGUARD_DETERMINISTIC")]
    pub deterministic: bool,
    /// Feature kinds, comma separated (LFCC, MFCC, IMFCC, GFCC, IGFCC).
    #[arg(long = "feature", global = true, env = "CGUARD_FEATURE", value_delimiter = ',')]
    pub features: Vec<FeatureKind>,
    /// Restrict training and evaluation to these cell ids.
    #[arg(long = "cell", global = true, env = "CGUARD_CELL", value_delimiter = ',')]
    pub cells: Vec<String>,
    /// Built-in design names or descriptor files.
    #[arg(long = "experiment", global = true, env = "CGUARD_EXPERIMENT", value_delimiter = ',')]
    pub experiments: Vec<String>,
    #[arg(long, global = true, env = "CGUARD_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true, env = "CGUARD_LABELS")]
    pub labels: Option<PathBuf>,
    #[arg(long, global = true, env = "CGUARD_NOISE_DIR")]
    pub noise_dir: Option<PathBuf>,
    #[arg(long, global = true, env = "CGUARD_VAD_DIR")]
    pub vad_dir: Option<PathBuf>,
    #[arg(long, global = true, env = "CGUARD_WORK_DIR")]
    pub work_dir: Option<PathBuf>,
    #[arg(long, global = true, env = "CGUARD_CACHE_DIR")]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, global = true, env = "CGUARD_RESULTS_DIR")]
    pub results_dir: Option<PathBuf>,
    #[arg(long, global = true, env = "CGUARD_MAX_EPOCHS")]
    pub max_epochs: Option<usize>,
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic smoke corpus and a config that runs on it.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        corpus_seed: u64,
    },
    /// Assign files to train/validation/test.
    Split,
    /// Write speech masks.
    Vad,
    /// Mix noise into the clean tree at every SNR.
    MixNoise,
    /// Cache features for every condition and split.
    Extract,
    /// Train one model per cell, feature and seed.
    Train,
    /// Score trained models and write results.csv.
    Eval,
    /// Render results.csv as Markdown tables.
    Report,
    /// All of the above in order.
    Run,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Split => "split",
            Command::Vad => "vad",
            Command::MixNoise => "mix-noise",
            Command::Extract => "extract",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Report => "report",
            Command::Run => "run",
        }
    }
}

/// Settings for runs on the smoke corpus: one seed and two epochs, enough to
/// exercise every step quickly.
pub fn smoke_config() -> RunConfig {
    RunConfig {
        data_dir: "data".into(),
        noise_dir: Some("noise".into()),
        work_dir: "work".into(),
        cache_dir: "work/cache".into(),
        results_dir: "results".into(),
        seeds: vec![0],
        deterministic: true,
        train: TrainConfig {
            max_epochs: 2,
            patience: 1,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    }
}

impl Cli {
    /// The config file (or defaults) with flag overrides applied.
    pub fn resolve(&self) -> Result<RunConfig, PipelineError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if let Some(j) = self.jobs {
            cfg.jobs = j;
        }
        if self.deterministic {
            cfg.deterministic = true;
        }
        if !self.features.is_empty() {
            cfg.features = self.features.clone();
        }
        if !self.cells.is_empty() {
            cfg.cells = self.cells.clone();
        }
        if !self.experiments.is_empty() {
            cfg.experiments = self.experiments.clone();
        }
        let set = |dst: &mut PathBuf, src: &Option<PathBuf>| {
            if let Some(s) = src {
                *dst = s.clone();
            }
        };
        set(&mut cfg.data_dir, &self.data_dir);
        set(&mut cfg.work_dir, &self.work_dir);
        set(&mut cfg.cache_dir, &self.cache_dir);
        set(&mut cfg.results_dir, &self.results_dir);
        for (dst, src) in [
            (&mut cfg.labels, &self.labels),
            (&mut cfg.noise_dir, &self.noise_dir),
            (&mut cfg.vad_dir, &self.vad_dir),
        ] {
            if src.is_some() {
                *dst = src.clone();
            }
        }
        if let Some(e) = self.max_epochs {
            cfg.train.max_epochs = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Prints to stdout, ignoring a closed pipe.
fn say(msg: &str) {
    let _ = writeln!(std::io::stdout(), "{msg}");
}

fn synth_command(out: &Path, seed: u64) -> Result<(), PipelineError> {
    let corpus = synth::write_smoke_corpus(out, seed)?;
    let cfg = serde_json::to_string_pretty(&smoke_config()).expect("config serializes");
    fs::write(out.join("config.json"), cfg)?;
    say(&format!(
        "wrote {} utterances to {} and noises to {}",
        corpus.entries.len(),
        corpus.data_dir.display(),
        corpus.noise_dir.display()
    ));
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), PipelineError> {
    if let Command::Synth { out, corpus_seed } = &cli.command {
        return synth_command(out, *corpus_seed);
    }
    let cfg = cli.resolve()?;
    let name = cli.command.name();
    let outcome = pipeline::with_manifest(&cfg, name, |cfg| -> Result<String, PipelineError> {
        Ok(match &cli.command {
            Command::Split => {
                let rows = pipeline::cmd_split(cfg)?;
                format!("{} files assigned to splits", rows.len())
            }
            Command::Vad => format!("{} masks written", pipeline::cmd_vad(cfg)?),
            Command::MixNoise => format!("{} noisy files written", pipeline::cmd_mix_noise(cfg)?.len()),
            Command::Extract => {
                let s = pipeline::cmd_extract(cfg)?;
                format!(
                    "{} files, {} blocks, {} caches written, {} up to date",
                    s.files, s.blocks, s.written, s.up_to_date
                )
            }
            Command::Train => format!("{} checkpoints ready", pipeline::cmd_train(cfg)?.len()),
            Command::Eval => format!(
                "{} result rows written to {}",
                pipeline::cmd_eval(cfg)?.len(),
                cfg.results_csv().display()
            ),
            Command::Report | Command::Run => {
                if matches!(cli.command, Command::Run) {
                    pipeline::cmd_run(cfg)?
                } else {
                    pipeline::cmd_report(cfg)?
                }
            }
            Command::Synth { .. } => unreachable!("handled above"),
        })
    });
    match outcome {
        Ok((msg, manifest)) => {
            say(&msg);
            log::info!("run manifest: {}", manifest.display());
            Ok(())
        }
        Err((e, manifest)) => {
            if let Some(m) = manifest {
                log::info!("run manifest: {}", m.display());
            }
            Err(e)
        }
    }
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
