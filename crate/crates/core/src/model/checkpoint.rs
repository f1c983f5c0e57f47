//! Binary model checkpoints with a JSON training-history sidecar.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic        "CGCK"
//! version      u32
//! arch hash    32 bytes, SHA-256 of the layer table
//! feature      u32 length + UTF-8 name
//! seed         u64
//! config       u32 length + JSON
//! standardizer u32 count, then count means and count stds as f64
//! params       u64 count, then f64 values
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{CnnDetector, ModelError, Standardizer, TrainConfig, TrainingHistory, ARCHITECTURE, INPUT_SHAPE};
use crate::filterbanks::FeatureKind;

pub const MAGIC: &[u8; 4] = b"CGCK";
pub const VERSION: u32 = 1;

/// Digest of the layer table and input geometry.
pub fn architecture_hash() -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(format!("{INPUT_SHAPE:?}"));
    for l in ARCHITECTURE.iter() {
        h.update(format!("{l:?};"));
    }
    h.finalize().into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub feature: FeatureKind,
    pub seed: u64,
    pub config: TrainConfig,
    pub model: CnnDetector,
}

pub fn history_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("history.json")
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn write_blob(w: &mut impl Write, bytes: &[u8]) -> std::io::Result<()> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)
}

pub fn save(path: &Path, ck: &Checkpoint, history: Option<&TrainingHistory>) -> Result<(), ModelError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&architecture_hash())?;
        write_blob(&mut w, ck.feature.name().as_bytes())?;
        w.write_all(&ck.seed.to_le_bytes())?;
        write_blob(&mut w, serde_json::to_string(&ck.config).expect("config serializes").as_bytes())?;
        let s = ck.model.standardizer();
        w.write_all(&(s.mean.len() as u32).to_le_bytes())?;
        for v in s.mean.iter().chain(&s.std) {
            w.write_all(&v.to_le_bytes())?;
        }
        let params = ck.model.params();
        w.write_all(&(params.len() as u64).to_le_bytes())?;
        for v in params {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
    }
    if let Some(h) = history {
        let json = serde_json::to_string_pretty(h).expect("history serializes");
        fs::write(history_path(path), json)?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N], ModelError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>, ModelError> {
    (0..n).map(|_| Ok(f64::from_le_bytes(read_array(r)?))).collect()
}

fn read_blob(r: &mut impl Read, limit: usize) -> Result<Vec<u8>, ModelError> {
    let n = u32::from_le_bytes(read_array(r)?) as usize;
    if n > limit {
        return Err(bad(format!("field length {n} exceeds {limit}")));
    }
    let mut v = vec![0u8; n];
    r.read_exact(&mut v)?;
    Ok(v)
}

pub fn load(path: &Path) -> Result<Checkpoint, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    if &read_array::<4>(&mut r)? != MAGIC {
        return Err(bad(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    if read_array::<32>(&mut r)? != architecture_hash() {
        return Err(bad("architecture hash differs from this build"));
    }
    let name = String::from_utf8(read_blob(&mut r, 64)?).map_err(|e| bad(e.to_string()))?;
    let feature: FeatureKind = name.parse().map_err(|e: crate::filterbanks::FilterBankError| bad(e.to_string()))?;
    let seed = u64::from_le_bytes(read_array(&mut r)?);
    let config: TrainConfig =
        serde_json::from_slice(&read_blob(&mut r, 1 << 16)?).map_err(|e| bad(e.to_string()))?;
    let cols = u32::from_le_bytes(read_array(&mut r)?) as usize;
    if cols != INPUT_SHAPE.cols {
        return Err(bad(format!("standardizer width {cols}")));
    }
    let mean = read_f64s(&mut r, cols)?;
    let std = read_f64s(&mut r, cols)?;
    let n = u64::from_le_bytes(read_array(&mut r)?) as usize;
    if n != super::NUM_PARAMS {
        return Err(ModelError::ParamCount {
            expected: super::NUM_PARAMS,
            got: n,
        });
    }
    let params = read_f64s(&mut r, n)?;
    Ok(Checkpoint {
        feature,
        seed,
        config,
        model: CnnDetector::from_params(params, Standardizer { mean, std })?,
    })
}

pub fn load_history(checkpoint: &Path) -> Result<TrainingHistory, ModelError> {
    let text = fs::read_to_string(history_path(checkpoint))?;
    serde_json::from_str(&text).map_err(|e| bad(e.to_string()))
}
