//! Binary feature cache files with a CSV sidecar manifest.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic      4 bytes  "CGFC"
//! version    u32
//! name_len   u32, then the feature name in UTF-8
//! digest     32 bytes, SHA-256 of the inputs that produced the cache
//! count      u64      number of matrices
//! rows, cols u32, u32
//! payload    count * rows * cols f64, row-major per matrix
//! ```
//!
//! The sidecar `<stem>.csv` holds one block manifest row per matrix, in order.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio_io::{self, AudioError, BlockRecord};
use crate::filterbanks::{FeatureKind, FeatureMatrix};

pub const MAGIC: &[u8; 4] = b"CGFC";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("{path}: bad magic, not a feature cache")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported cache version {version}")]
    BadVersion { path: PathBuf, version: u32 },
    #[error("{0}")]
    Format(String),
    #[error("manifest has {manifest} rows but cache holds {cache} matrices")]
    CountMismatch { manifest: usize, cache: usize },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Features and their provenance rows, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    pub kind: FeatureKind,
    pub digest: [u8; 32],
    pub rows: usize,
    pub cols: usize,
    pub matrices: Vec<FeatureMatrix>,
    pub records: Vec<BlockRecord>,
}

/// Sidecar manifest path for a cache file.
pub fn sidecar_path(cache_path: &Path) -> PathBuf {
    cache_path.with_extension("csv")
}

/// Incremental digest over everything that determines a cache's content.
#[derive(Clone)]
pub struct InputDigest(Sha256);

impl InputDigest {
    pub fn new(kind: FeatureKind) -> Self {
        let mut h = Sha256::new();
        h.update(MAGIC);
        h.update(VERSION.to_le_bytes());
        h.update(kind.name().as_bytes());
        Self(h)
    }

    pub fn add_record(&mut self, rec: &BlockRecord) {
        let line = format!(
            "{}\u{1f}{}\u{1f}{}\u{1f}{}\u{1f}{}\u{1f}{}\u{1f}{}\n",
            rec.source_id, rec.block_index, rec.label, rec.attack, rec.noise, rec.snr_db, rec.part
        );
        self.0.update(line.as_bytes());
    }

    pub fn add_samples(&mut self, samples: &[f64]) {
        for s in samples {
            self.0.update(s.to_bits().to_le_bytes());
        }
    }

    pub fn finish(self) -> [u8; 32] {
        self.0.finalize().into()
    }
}

pub fn write_cache(path: &Path, cache: &FeatureCache) -> Result<(), CacheError> {
    if cache.records.len() != cache.matrices.len() {
        return Err(CacheError::CountMismatch {
            manifest: cache.records.len(),
            cache: cache.matrices.len(),
        });
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("fbc.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let name = cache.kind.name().as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&cache.digest)?;
        w.write_all(&(cache.matrices.len() as u64).to_le_bytes())?;
        w.write_all(&(cache.rows as u32).to_le_bytes())?;
        w.write_all(&(cache.cols as u32).to_le_bytes())?;
        for m in &cache.matrices {
            if m.shape() != (cache.rows, cache.cols) {
                return Err(CacheError::Format(format!(
                    "matrix shape {:?} differs from cache shape ({}, {})",
                    m.shape(),
                    cache.rows,
                    cache.cols
                )));
            }
            for v in m.supervector() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    audio_io::write_block_manifest(&cache.records, sidecar_path(path))?;
    fs::rename(tmp, path)?;
    Ok(())
}

struct Header {
    kind: FeatureKind,
    digest: [u8; 32],
    count: usize,
    rows: usize,
    cols: usize,
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_header(path: &Path, r: &mut impl Read) -> Result<Header, CacheError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CacheError::BadMagic { path: path.into() });
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(CacheError::BadVersion {
            path: path.into(),
            version,
        });
    }
    let name_len = read_u32(r)? as usize;
    if name_len > 64 {
        return Err(CacheError::Format(format!("feature name length {name_len} too long")));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|e| CacheError::Format(e.to_string()))?;
    let kind = name
        .parse::<FeatureKind>()
        .map_err(|e| CacheError::Format(e.to_string()))?;
    let mut digest = [0u8; 32];
    r.read_exact(&mut digest)?;
    let mut count = [0u8; 8];
    r.read_exact(&mut count)?;
    let count = u64::from_le_bytes(count) as usize;
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    Ok(Header {
        kind,
        digest,
        count,
        rows,
        cols,
    })
}

/// Reads only the stored input digest, or `None` if the file is absent or unreadable.
pub fn stored_digest(path: &Path) -> Option<[u8; 32]> {
    let mut r = BufReader::new(File::open(path).ok()?);
    read_header(path, &mut r).ok().map(|h| h.digest)
}

pub fn read_cache(path: &Path) -> Result<FeatureCache, CacheError> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(path, &mut r)?;
    let mut matrices = Vec::with_capacity(h.count);
    let mut buf = [0u8; 8];
    for _ in 0..h.count {
        let mut values = Vec::with_capacity(h.rows * h.cols);
        for _ in 0..h.rows * h.cols {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        matrices.push(
            FeatureMatrix::new(values, h.rows, h.cols, h.kind)
                .map_err(|e| CacheError::Format(e.to_string()))?,
        );
    }
    let records = audio_io::read_block_manifest(sidecar_path(path))?;
    if records.len() != matrices.len() {
        return Err(CacheError::CountMismatch {
            manifest: records.len(),
            cache: matrices.len(),
        });
    }
    Ok(FeatureCache {
        kind: h.kind,
        digest: h.digest,
        rows: h.rows,
        cols: h.cols,
        matrices,
        records,
    })
}
