//! The experiment commands. Each returns its in-memory results after writing
//! its artifacts under the configured `output_dir`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use prior_forge_core::controller::{HistoryRow, Search, TrainImage};
use prior_forge_core::dip::{degrade, fit, psnr, FitConfig, TaskSpec};
use prior_forge_core::genome::{ArchGenome, ConnectionPattern, UpsampleCellGenome};
use prior_forge_core::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ABLATION_LABELS};
use crate::error::{HarnessError, Result};
use crate::gradcheck::{run_suite, standard_cases, GradReport};
use crate::imageio::{list_pngs, load_image, save_image};
use crate::records::{genome_hash, read_json, write_atomic, write_json, ResultRow, ResultsRecord, ENGINE_VERSION};

pub const CHECKPOINT_FILE: &str = "search_checkpoint.json";
pub const BEST_GENOME_FILE: &str = "best_genome.json";
pub const SEARCH_SUMMARY_FILE: &str = "search_summary.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const RESULTS_FILE: &str = "results.json";
pub const ABLATION_FILE: &str = "ablation.csv";

pub fn load_genome(path: impl AsRef<Path>) -> Result<ArchGenome> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    ArchGenome::from_json(&text).map_err(|e| HarnessError::parse(path, e.to_string()))
}

pub fn save_genome(genome: &ArchGenome, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), genome.to_json().as_bytes())
}

fn output_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    let dir = cfg.output_dir.as_path();
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    Ok(dir)
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

/// Loads every PNG of `dir` (sorted by name), checking the configured size.
pub fn load_dataset(dir: &Path, image_size: usize, limit: Option<usize>) -> Result<Vec<(String, Tensor)>> {
    let mut paths = list_pngs(dir)?;
    if let Some(n) = limit {
        paths.truncate(n);
    }
    if paths.is_empty() {
        return Err(HarnessError::Failed(format!("no PNG images in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let img = load_image(p)?;
            check_size(p, &img, image_size)?;
            Ok((stem(p), img))
        })
        .collect()
}

fn check_size(path: &Path, img: &Tensor, image_size: usize) -> Result<()> {
    let s = img.shape();
    if s.h != image_size || s.w != image_size {
        return Err(HarnessError::Image {
            path: path.to_path_buf(),
            msg: format!("expected {image_size}x{image_size}, found {}x{}", s.w, s.h),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchProgress {
    /// Batches completed overall, including those restored from a checkpoint.
    pub batches: usize,
    pub resumed_from: usize,
    /// Set once the search has finished and its artifacts are written.
    pub outcome: Option<(ArchGenome, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub engine_version: String,
    pub t_star: usize,
    pub best_reward: f64,
    pub genome_hash: String,
    pub updates: usize,
}

/// Runs the whole search, resuming from a checkpoint in `output_dir` if one
/// exists.
pub fn cmd_search(cfg: &ExperimentConfig) -> Result<(ArchGenome, usize)> {
    let progress = search_batches(cfg, usize::MAX)?;
    Ok(progress.outcome.expect("unbounded run finishes"))
}

/// Runs at most `budget` batches, checkpointing after each.
pub fn search_batches(cfg: &ExperimentConfig, budget: usize) -> Result<SearchProgress> {
    let out = output_dir(cfg)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let search_cfg = cfg.search_config();
    let mut run = if ckpt.is_file() {
        let run: Search = read_json(&ckpt)?;
        if run.cfg != search_cfg {
            return Err(HarnessError::config(&ckpt, "checkpoint was written with a different search configuration"));
        }
        run
    } else {
        Search::new(search_cfg)?
    };
    let resumed_from = run.state.batches;

    let images: Vec<Tensor> = load_dataset(&cfg.data_dir, cfg.image_size, cfg.search.train_images)?
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    let train = TrainImage::prepare(&images, &cfg.task, cfg.seed)?;

    let mut done = 0;
    while !run.finished() && done < budget {
        run.step(&train, &cfg.task)?;
        done += 1;
        if let Some(row) = run.state.history.last().filter(|r| r.update + 1 == run.state.batches) {
            eprintln!(
                "update {}/{}: mean reward {:.3} dB, best {:.3} dB",
                row.update + 1,
                run.cfg.updates,
                row.mean_reward,
                row.best_reward
            );
        }
        write_json(&ckpt, &run)?;
    }
    let mut progress = SearchProgress {
        batches: run.state.batches,
        resumed_from,
        outcome: None,
    };
    if run.finished() {
        let (genome, t_star) = run.outcome()?;
        save_genome(&genome, out.join(BEST_GENOME_FILE))?;
        write_history(&run.state.history, &out.join(HISTORY_FILE))?;
        write_json(
            out.join(SEARCH_SUMMARY_FILE),
            &SearchSummary {
                engine_version: ENGINE_VERSION.into(),
                t_star,
                best_reward: run.state.best_reward().expect("finished search has a best"),
                genome_hash: genome_hash(&genome),
                updates: run.cfg.updates,
            },
        )?;
        progress.outcome = Some((genome, t_star));
    }
    Ok(progress)
}

pub fn write_history(rows: &[HistoryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(["update", "mean_reward", "best_reward"])
            .map_err(|e| HarnessError::Failed(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::Failed(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Failed(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| HarnessError::parse(path, e.to_string()))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| HarnessError::parse(path, e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitRecord {
    pub engine_version: String,
    pub image_id: String,
    pub task: TaskSpec,
    pub genome_hash: String,
    pub fit: FitConfig,
    pub psnr_curve: Vec<(usize, f64)>,
    pub t_star: usize,
    pub best_psnr: Option<f64>,
    pub final_loss: f64,
    pub wall_time_s: f64,
    pub restored_png: PathBuf,
}

/// Degrades `image` with the config seed, fits `genome` to the observation
/// and writes the restored PNG, the observation PNG and a [`FitRecord`].
pub fn cmd_fit(cfg: &ExperimentConfig, image: &Path, genome: &Path) -> Result<FitRecord> {
    let genome = load_genome(genome)?;
    let gt = load_image(image)?;
    check_size(image, &gt, cfg.image_size)?;
    let out = output_dir(cfg)?;
    let id = stem(image);
    let (x0, mask) = degrade(&gt, &cfg.task, cfg.seed)?;
    let fit_cfg = cfg.fit_config(cfg.fit.iters, cfg.seed);
    let start = Instant::now();
    let r = fit(&genome, &x0, mask.as_ref(), &cfg.task, &fit_cfg, Some(&gt))?;
    let wall_time_s = start.elapsed().as_secs_f64();

    let restored_png = out.join(format!("{id}_restored.png"));
    save_image(&r.restored, &restored_png)?;
    save_image(&x0, out.join(format!("{id}_observed.png")))?;
    let record = FitRecord {
        engine_version: ENGINE_VERSION.into(),
        image_id: id.clone(),
        task: cfg.task,
        genome_hash: genome_hash(&genome),
        fit: fit_cfg,
        psnr_curve: r.psnr_curve,
        t_star: r.t_star,
        best_psnr: r.best_psnr,
        final_loss: r.final_loss,
        wall_time_s,
        restored_png,
    };
    write_json(out.join(format!("{id}_fit.json")), &record)?;
    Ok(record)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Fits `genome` to every image with fresh weights, in parallel. Image `i`
/// is degraded and fitted with seed `seed + i`.
pub fn evaluate(
    genome: &ArchGenome,
    images: &[(String, Tensor)],
    cfg: &ExperimentConfig,
    iters: usize,
) -> Result<Vec<ResultRow>> {
    let hash = genome_hash(genome);
    let mut base = cfg.fit_config(iters, cfg.seed);
    // Score the final iterate as well as the curve.
    base.eval_every = gcd(base.eval_every, iters).max(1);
    images
        .par_iter()
        .enumerate()
        .map(|(i, (id, gt))| {
            let seed = cfg.seed.wrapping_add(i as u64);
            let (x0, mask) = degrade(gt, &cfg.task, seed)?;
            let start = Instant::now();
            let r = fit(genome, &x0, mask.as_ref(), &cfg.task, &base.with_seed(seed), Some(gt))?;
            let wall_time_s = start.elapsed().as_secs_f64();
            let best = r.best_psnr.expect("fit with ground truth");
            let psnr_at_iters = match r.psnr_curve.last() {
                Some(&(t, p)) if t == iters => p,
                _ => psnr(&r.restored, gt),
            };
            Ok(ResultRow {
                image_id: id.clone(),
                task: cfg.task.kind,
                genome_hash: hash.clone(),
                best_psnr: best,
                t_star: r.t_star,
                psnr_at_iters,
                iters,
                wall_time_s,
            })
        })
        .collect()
}

pub fn cmd_eval(cfg: &ExperimentConfig, dir: &Path, genome: &Path, iters: usize) -> Result<ResultsRecord> {
    let genome = load_genome(genome)?;
    let images = load_dataset(dir, cfg.image_size, None)?;
    let rows = evaluate(&genome, &images, cfg, iters)?;
    let record = ResultsRecord::new(rows, cfg.clone())?;
    record.save(output_dir(cfg)?.join(RESULTS_FILE))?;
    Ok(record)
}

/// The four ablation genomes for a searched genome: the baseline cell with
/// the same-level pattern, the searched cell with that pattern (S-U), the
/// baseline cell with the searched pattern (S-C), and the searched genome.
pub fn ablation_genomes(full: &ArchGenome) -> Result<[(&'static str, ArchGenome); 4]> {
    let same = ConnectionPattern::same_level(full.depth);
    let with = |cell: UpsampleCellGenome, pattern: ConnectionPattern| {
        ArchGenome::new(full.depth, full.width, full.z_channels, cell, pattern)
    };
    Ok([
        ("baseline", with(UpsampleCellGenome::baseline(), same.clone())?),
        ("S-U", with(full.cell, same)?),
        ("S-C", with(UpsampleCellGenome::baseline(), full.pattern.clone())?),
        ("full", full.clone()),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub genome_hash: String,
    /// Mean PSNR after the fixed iteration budget.
    pub mean_psnr: f64,
    pub mean_best_psnr: f64,
    /// `mean_psnr` minus the baseline's.
    pub delta_db: f64,
}

pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    let section = cfg
        .ablation
        .as_ref()
        .ok_or_else(|| HarnessError::config(&cfg.output_dir, "ablate needs an `ablation` section"))?;
    if section.sources.len() < ABLATION_LABELS.len() {
        return Err(HarnessError::config(
            &cfg.output_dir,
            format!("ablation needs four genome sources, got {}", section.sources.len()),
        ));
    }
    let mut genomes = Vec::with_capacity(4);
    for label in ABLATION_LABELS {
        let matching: Vec<_> = section.sources.iter().filter(|s| s.label == label).collect();
        match matching.as_slice() {
            [one] => genomes.push((label, load_genome(&one.genome_path)?)),
            [] => return Err(HarnessError::config(&cfg.output_dir, format!("ablation source `{label}` is missing"))),
            _ => return Err(HarnessError::config(&cfg.output_dir, format!("ablation source `{label}` is repeated"))),
        }
    }
    if section.sources.len() > ABLATION_LABELS.len() {
        return Err(HarnessError::config(&cfg.output_dir, "ablation sources must be exactly baseline, S-U, S-C, full"));
    }

    let iters = section.iters.unwrap_or(cfg.fit.iters);
    let images = load_dataset(&cfg.data_dir, cfg.image_size, None)?;
    let per_variant = genomes
        .par_iter()
        .map(|(_, g)| evaluate(g, &images, cfg, iters))
        .collect::<Result<Vec<_>>>()?;

    let mean = |rows: &[ResultRow], f: fn(&ResultRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    let base = mean(&per_variant[0], |r| r.psnr_at_iters);
    let rows: Vec<AblationRow> = genomes
        .iter()
        .zip(&per_variant)
        .map(|((label, g), rows)| {
            let m = mean(rows, |r| r.psnr_at_iters);
            AblationRow {
                variant: label.to_string(),
                genome_hash: genome_hash(g),
                mean_psnr: m,
                mean_best_psnr: mean(rows, |r| r.best_psnr),
                delta_db: if *label == "baseline" { 0.0 } else { m - base },
            }
        })
        .collect();

    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| HarnessError::Failed(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Failed(e.to_string()))?;
    write_atomic(&output_dir(cfg)?.join(ABLATION_FILE), &bytes)?;
    let full = &rows[3];
    eprintln!(
        "soft check: full {} baseline ({:+.3} dB)",
        if full.delta_db >= 0.0 { ">=" } else { "<" },
        full.delta_db
    );
    Ok(rows)
}

pub fn read_ablation(path: &Path) -> Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| HarnessError::parse(path, e.to_string()))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| HarnessError::parse(path, e.to_string()))
}

/// Runs the standard gradient-check suite, failing with the names of any
/// ops over tolerance.
pub fn cmd_gradcheck(out: &mut dyn Write) -> Result<GradReport> {
    let report = run_suite(&standard_cases(), out).map_err(|e| HarnessError::io("<stdout>", e))?;
    let failing = report.failing();
    if failing.is_empty() {
        Ok(report)
    } else {
        Err(HarnessError::GradCheck(failing))
    }
}
