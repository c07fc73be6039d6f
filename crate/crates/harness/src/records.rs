//! On-disk result documents.

use std::path::Path;

use prior_forge_core::dip::TaskKind;
use prior_forge_core::genome::ArchGenome;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// First 16 hex digits of the SHA-256 of the genome's canonical JSON.
pub fn genome_hash(genome: &ArchGenome) -> String {
    let digest = Sha256::digest(genome.to_json().as_bytes());
    hex::encode(&digest[..8])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRow {
    pub image_id: String,
    pub task: TaskKind,
    pub genome_hash: String,
    /// Best PSNR along the curve (oracle stopping).
    pub best_psnr: f64,
    pub t_star: usize,
    /// PSNR after the fixed iteration budget, the ground-truth-free protocol.
    pub psnr_at_iters: f64,
    pub iters: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aggregate {
    pub mean_best_psnr: f64,
    pub mean_psnr_at_iters: f64,
    pub mean_t_star: f64,
    pub mean_wall_time_s: f64,
}

impl Aggregate {
    pub fn of(rows: &[ResultRow]) -> Option<Aggregate> {
        if rows.is_empty() {
            return None;
        }
        let mean = |f: &dyn Fn(&ResultRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
        Some(Aggregate {
            mean_best_psnr: mean(&|r| r.best_psnr),
            mean_psnr_at_iters: mean(&|r| r.psnr_at_iters),
            mean_t_star: mean(&|r| r.t_star as f64),
            mean_wall_time_s: mean(&|r| r.wall_time_s),
        })
    }

    fn close_to(&self, other: &Aggregate) -> bool {
        let near = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
        near(self.mean_best_psnr, other.mean_best_psnr)
            && near(self.mean_psnr_at_iters, other.mean_psnr_at_iters)
            && near(self.mean_t_star, other.mean_t_star)
            && near(self.mean_wall_time_s, other.mean_wall_time_s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultsRecord {
    pub engine_version: String,
    pub rows: Vec<ResultRow>,
    pub aggregate: Aggregate,
    pub config: ExperimentConfig,
}

impl ResultsRecord {
    pub fn new(rows: Vec<ResultRow>, config: ExperimentConfig) -> Result<Self> {
        let aggregate = Aggregate::of(&rows).ok_or_else(|| HarnessError::Failed("no result rows".into()))?;
        Ok(ResultsRecord {
            engine_version: ENGINE_VERSION.into(),
            rows,
            aggregate,
            config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }

    /// Loads a record and checks the stored aggregate against its rows.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let rec: ResultsRecord = read_json(path)?;
        let expected = Aggregate::of(&rec.rows).ok_or_else(|| HarnessError::parse(path, "record has no rows"))?;
        if !expected.close_to(&rec.aggregate) {
            return Err(HarnessError::parse(path, "aggregate does not match the mean of the rows"));
        }
        Ok(rec)
    }
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Failed(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| HarnessError::parse(path, format!("at {}: {}", e.path(), e.inner())))
}

/// Writes through a sibling temporary file and a rename, so readers never see
/// a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| HarnessError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}
