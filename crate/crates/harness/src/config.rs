//! Experiment configuration files.
//!
//! Relative paths inside a config are resolved against the directory that
//! holds the config file.

use std::path::{Path, PathBuf};

use prior_forge_core::controller::SearchConfig;
use prior_forge_core::dip::{FitConfig, TaskKind, TaskSpec};
use prior_forge_core::genome::ArchGenome;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub data_dir: PathBuf,
    pub image_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genome: Option<ArchGenome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genome_path: Option<PathBuf>,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationSection>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

/// Optimizer settings for a single-image fit. Unset task-dependent fields
/// take the task's default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub iters: usize,
    pub lr: f64,
    pub eval_every: usize,
    pub ema_gamma: Option<f64>,
    pub z_scale: f64,
    pub z_perturb_std: Option<f64>,
}

impl Default for FitSection {
    fn default() -> Self {
        FitSection {
            iters: 1500,
            lr: 0.01,
            eval_every: 25,
            ema_gamma: None,
            z_scale: 0.1,
            z_perturb_std: None,
        }
    }
}

impl FitSection {
    pub fn resolve(&self, kind: TaskKind, iters: usize, seed: u64) -> FitConfig {
        let defaults = FitConfig::for_task(kind, iters);
        FitConfig {
            iters,
            lr: self.lr,
            eval_every: self.eval_every,
            ema_gamma: self.ema_gamma.unwrap_or(defaults.ema_gamma),
            z_scale: self.z_scale,
            z_perturb_std: self.z_perturb_std.unwrap_or(defaults.z_perturb_std),
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub candidates_per_update: usize,
    pub updates: usize,
    pub baseline_beta: f64,
    pub entropy_coef: f64,
    pub policy_lr: f64,
    pub depth: usize,
    pub width: usize,
    pub z_channels: usize,
    /// Per-candidate fit budget during search.
    pub fit_iters: usize,
    /// Use only the first `train_images` images of `data_dir`.
    pub train_images: Option<usize>,
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection {
            candidates_per_update: 8,
            updates: 15,
            baseline_beta: 0.9,
            entropy_coef: 1e-4,
            policy_lr: 5e-3,
            depth: 4,
            width: 32,
            z_channels: 32,
            fit_iters: 600,
            train_images: None,
        }
    }
}

/// A labelled genome file for the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSource {
    pub label: String,
    pub genome_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub sources: Vec<AblationSource>,
    /// Fixed fit budget per image; defaults to `fit.iters`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iters: Option<usize>,
}

pub const ABLATION_LABELS: [&str; 4] = ["baseline", "S-U", "S-C", "full"];

impl ExperimentConfig {
    /// Reads, resolves and validates a config file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let at = e.path().to_string();
            HarnessError::config(path, format!("at {at}: {}", e.inner()))
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate().map_err(|msg| HarnessError::config(path, msg))?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.data_dir);
        join(&mut self.output_dir);
        if let Some(p) = self.genome_path.as_mut() {
            join(p);
        }
        if let Some(ab) = self.ablation.as_mut() {
            for s in &mut ab.sources {
                join(&mut s.genome_path);
            }
        }
    }

    /// Network depth the image size must accommodate.
    pub fn depth(&self) -> usize {
        self.genome.as_ref().map_or(self.search.depth, |g| g.depth)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        self.task.validate().map_err(|e| e.to_string())?;
        if self.genome.is_some() && self.genome_path.is_some() {
            return Err("give either genome or genome_path, not both".into());
        }
        if !self.data_dir.is_dir() {
            return Err(format!("data_dir {} does not exist", self.data_dir.display()));
        }
        if let Some(p) = &self.genome_path {
            if !p.is_file() {
                return Err(format!("genome_path {} does not exist", p.display()));
            }
        }
        if let Some(ab) = &self.ablation {
            for s in &ab.sources {
                if !s.genome_path.is_file() {
                    return Err(format!("ablation source {} ({}) does not exist", s.label, s.genome_path.display()));
                }
            }
        }
        let divisor = 1usize << (self.depth().max(1) - 1);
        if self.image_size == 0 || self.image_size % divisor != 0 {
            return Err(format!(
                "image_size {} is not divisible by 2^(d-1) = {divisor} for depth {}",
                self.image_size,
                self.depth()
            ));
        }
        if self.task.kind == TaskKind::SuperResolution && self.image_size % self.task.r != 0 {
            return Err(format!("image_size {} is not divisible by the scale factor {}", self.image_size, self.task.r));
        }
        self.fit.resolve(self.task.kind, self.fit.iters, self.seed).validate().map_err(|e| e.to_string())?;
        self.search_config().validate().map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn fit_config(&self, iters: usize, seed: u64) -> FitConfig {
        self.fit.resolve(self.task.kind, iters, seed)
    }

    pub fn search_config(&self) -> SearchConfig {
        let s = &self.search;
        SearchConfig {
            candidates_per_update: s.candidates_per_update,
            updates: s.updates,
            baseline_beta: s.baseline_beta,
            entropy_coef: s.entropy_coef,
            policy_lr: s.policy_lr,
            fit_cfg: self.fit_config(s.fit_iters, self.seed),
            seed: self.seed,
            depth: s.depth,
            width: s.width,
            z_channels: s.z_channels,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("cfg.json");
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn relative_paths_and_defaults() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("train")).unwrap();
        let p = write(
            dir.path(),
            r#"{"task": {"kind": "denoise", "sigma": 0.1}, "data_dir": "train", "image_size": 64, "output_dir": "out"}"#,
        );
        let cfg = ExperimentConfig::load(&p).unwrap();
        assert_eq!(cfg.data_dir, dir.path().join("train"));
        assert_eq!(cfg.search, SearchSection::default());
        let f = cfg.fit_config(10, 3);
        assert_eq!((f.iters, f.seed, f.ema_gamma), (10, 3, 0.99));
        let again: ExperimentConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn invalid_configs_are_rejected_with_location() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("train")).unwrap();
        let cases = [
            (r#"{"task": {"kind": "denoise"}, "data_dir": "missing", "image_size": 64, "output_dir": "o"}"#, "data_dir"),
            (r#"{"task": {"kind": "denoise"}, "data_dir": "train", "image_size": 60, "output_dir": "o"}"#, "divisible"),
            (r#"{"task": {"kind": "denoise"}, "data_dir": "train", "image_size": 64, "output_dir": "o", "sed": 1}"#, "sed"),
            (r#"{"task": {"kind": "denoise"}, "data_dir": "train", "image_size": 64, "output_dir": "o", "search": {"depth": "x"}}"#, "search.depth"),
            (r#"{"task": {"kind": "denoise"}, "data_dir": "train", "image_size": 64, "output_dir": "o", "genome_path": "g.json"}"#, "g.json"),
        ];
        for (body, needle) in cases {
            let e = ExperimentConfig::load(write(dir.path(), body)).unwrap_err();
            assert_eq!(e.exit_code(), 2);
            assert!(e.to_string().contains(needle), "{e}");
        }
    }
}
