//! Single-image fitting of a freshly initialized generator to a degraded
//! observation, tracking PSNR against ground truth along the way.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::genome::ArchGenome;
use crate::tensor::{Adam, AdamConfig, DownsampleMode, Shape, Tape, Tensor, Var};

/// PSNR reported for (near-)identical images.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SuperResolution,
    Denoise,
    Inpaint,
}

/// Degradation model. Only the fields of the active `kind` are read.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    #[serde(default = "default_r")]
    pub r: usize,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default = "default_mask_fraction")]
    pub mask_fraction: f64,
    #[serde(default = "default_downsampler")]
    pub downsampler_mode: DownsampleMode,
}

fn default_r() -> usize {
    2
}

fn default_mask_fraction() -> f64 {
    0.5
}

fn default_downsampler() -> DownsampleMode {
    DownsampleMode::Bicubic
}

impl TaskSpec {
    pub fn super_resolution(r: usize, mode: DownsampleMode) -> Self {
        TaskSpec {
            kind: TaskKind::SuperResolution,
            r,
            downsampler_mode: mode,
            ..Self::denoise(0.0)
        }
    }

    pub fn denoise(sigma: f64) -> Self {
        TaskSpec {
            kind: TaskKind::Denoise,
            r: default_r(),
            sigma,
            mask_fraction: default_mask_fraction(),
            downsampler_mode: default_downsampler(),
        }
    }

    pub fn inpaint(mask_fraction: f64) -> Self {
        TaskSpec {
            kind: TaskKind::Inpaint,
            mask_fraction,
            ..Self::denoise(0.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument { op: "task", msg });
        match self.kind {
            TaskKind::SuperResolution if self.r < 1 => bad(format!("factor r = {} must be at least 1", self.r)),
            TaskKind::Denoise if !(0.0..=1.0).contains(&self.sigma) => bad(format!("sigma {} outside [0, 1]", self.sigma)),
            TaskKind::Inpaint if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) => {
                bad(format!("mask_fraction {} outside (0, 1)", self.mask_fraction))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub iters: usize,
    pub lr: f64,
    pub eval_every: usize,
    /// Weight of the previous average in the denoising output average.
    pub ema_gamma: f64,
    /// Input noise is drawn from `U[0, z_scale]`.
    pub z_scale: f64,
    /// Std of fresh Gaussian noise added to the stored input each iteration.
    pub z_perturb_std: f64,
    pub seed: u64,
}

impl FitConfig {
    pub fn for_task(kind: TaskKind, iters: usize) -> Self {
        FitConfig {
            iters,
            lr: 0.01,
            eval_every: 25,
            ema_gamma: if kind == TaskKind::Denoise { 0.99 } else { 0.0 },
            z_scale: 0.1,
            z_perturb_std: if kind == TaskKind::Inpaint { 0.03 } else { 0.0 },
            seed: 0,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        FitConfig { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument { op: "fit_config", msg });
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.ema_gamma) {
            return bad(format!("ema_gamma {} outside [0, 1)", self.ema_gamma));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.z_scale >= 0.0 && self.z_perturb_std >= 0.0) {
            return bad("noise scales must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// `(iteration, psnr)` every `eval_every` iterations; empty without ground truth.
    pub psnr_curve: Vec<(usize, f64)>,
    pub t_star: usize,
    /// PSNR at `t_star`; `None` for blind fits.
    pub best_psnr: Option<f64>,
    pub restored: Tensor,
    pub final_loss: f64,
    /// Loss at every iteration.
    pub loss_curve: Vec<f64>,
    pub eval_every: usize,
}

fn check_image(op: &'static str, x: &Tensor) -> Result<()> {
    let s = x.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::Shape {
            op,
            dim: if s.n != 1 { "batch" } else { "channels" },
            expected: if s.n != 1 { 1 } else { 3 },
            found: if s.n != 1 { s.n } else { s.c },
        });
    }
    Ok(())
}

/// Builds the observation `x0` (and the inpainting mask) from a clean image.
pub fn degrade(x: &Tensor, task: &TaskSpec, seed: u64) -> Result<(Tensor, Option<Tensor>)> {
    check_image("degrade", x)?;
    task.validate()?;
    match task.kind {
        TaskKind::SuperResolution => {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone())?;
            let y = tape.downsample(v, task.r, task.downsampler_mode)?;
            Ok((tape.value(y).clone(), None))
        }
        TaskKind::Denoise => {
            if task.sigma == 0.0 {
                return Ok((x.clone(), None));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, task.sigma).expect("sigma in [0, 1]");
            let mut x0 = x.clone();
            for v in x0.data_mut() {
                *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
            Ok((x0, None))
        }
        TaskKind::Inpaint => {
            let s = x.shape();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let keep = 1.0 - task.mask_fraction;
            let mask = Tensor::from_fn(Shape::new(1, 1, s.h, s.w), |_, _, _, _| f64::from(rng.random_bool(keep) as u8));
            let x0 = Tensor::from_fn(s, |n, c, h, w| x.at(n, c, h, w) * mask.at(0, 0, h, w));
            Ok((x0, Some(mask)))
        }
    }
}

/// Records the task loss between the full-resolution output and `x0`.
pub fn objective(tape: &mut Tape, out: Var, x0: &Tensor, mask: Option<&Tensor>, task: &TaskSpec) -> Result<Var> {
    let target = tape.constant(x0.clone())?;
    match task.kind {
        TaskKind::Denoise => tape.mse_loss(out, target),
        TaskKind::SuperResolution => {
            let low = tape.downsample(out, task.r, task.downsampler_mode)?;
            tape.mse_loss(low, target)
        }
        TaskKind::Inpaint => {
            let mask = mask.ok_or(Error::InvalidArgument {
                op: "objective",
                msg: "inpainting requires a mask".into(),
            })?;
            tape.masked_mse_loss(out, target, mask)
        }
    }
}

/// `-10 log10(mse)`, capped at [`PSNR_CAP`] when `mse < 1e-10`.
pub fn psnr(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "psnr operands differ in shape");
    let mse = a.zip_map(b, |x, y| (x - y) * (x - y)).mean();
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        -10.0 * mse.log10()
    }
}

/// The fixed network input `z ~ U[0, z_scale]` that [`fit`] draws for `cfg`.
pub fn input_noise(shape: Shape, cfg: &FitConfig) -> Tensor {
    let mut rng = crate::tensor::init_rng(cfg.seed, "fit.z");
    Tensor::from_fn(shape, |_, _, _, _| rng.random::<f64>() * cfg.z_scale)
}

/// `gamma * avg + (1 - gamma) * out`, starting from the first output.
pub fn ema_update(avg: Option<Tensor>, out: &Tensor, gamma: f64) -> Tensor {
    match avg {
        None => out.clone(),
        Some(prev) => prev.zip_map(out, |a, o| gamma * a + (1.0 - gamma) * o),
    }
}

/// Maps numeric blow-ups inside an iteration to a divergence error.
fn at_iteration<T>(iteration: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { .. } => Error::Divergence { iteration },
        other => other,
    })
}

/// Fits a freshly initialized generator for `genome` to the observation.
///
/// Iterations are numbered from 1. Iteration `t` evaluates the network after
/// `t - 1` Adam steps, and that output is what gets scored when
/// `t % eval_every == 0`.
pub fn fit(
    genome: &ArchGenome,
    x0: &Tensor,
    mask: Option<&Tensor>,
    task: &TaskSpec,
    cfg: &FitConfig,
    gt: Option<&Tensor>,
) -> Result<FitResult> {
    cfg.validate()?;
    task.validate()?;
    let full = match task.kind {
        TaskKind::SuperResolution => {
            let s = x0.shape();
            Shape::new(1, s.c, s.h * task.r, s.w * task.r)
        }
        _ => x0.shape(),
    };
    if let Some(gt) = gt {
        if gt.shape() != Shape::new(1, 3, full.h, full.w) {
            return Err(Error::Shape {
                op: "fit",
                dim: "ground-truth height",
                expected: full.h,
                found: gt.shape().h,
            });
        }
    }
    let mut gen = Generator::build(genome, cfg.seed)?;
    let z_shape = Shape::new(1, genome.z_channels, full.h, full.w);
    gen.check_input(z_shape)?;

    let z_base = input_noise(z_shape, cfg);
    let mut perturb_rng = crate::tensor::init_rng(cfg.seed, "fit.z_perturb");
    let perturb = Normal::new(0.0, cfg.z_perturb_std).expect("non-negative std");

    let averaging = task.kind == TaskKind::Denoise;
    let mut avg: Option<Tensor> = None;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut curve = Vec::new();
    let mut losses = Vec::with_capacity(cfg.iters);
    let mut best: Option<(usize, f64, Tensor)> = None;
    let mut last_out: Option<Tensor> = None;

    for t in 1..=cfg.iters {
        let mut z = z_base.clone();
        if cfg.z_perturb_std > 0.0 {
            for v in z.data_mut() {
                *v += perturb.sample(&mut perturb_rng);
            }
        }
        let mut tape = Tape::new();
        let (out, loss) = at_iteration(t, (|| {
            let zv = tape.constant(z)?;
            let out = gen.forward(&mut tape, zv)?;
            let loss = objective(&mut tape, out, x0, mask, task)?;
            Ok((out, loss))
        })())?;
        let loss_value = tape.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(Error::Divergence { iteration: t });
        }
        losses.push(loss_value);

        let raw = tape.value(out);
        let current = if averaging {
            let next = ema_update(avg.take(), raw, cfg.ema_gamma);
            avg = Some(next.clone());
            next
        } else {
            raw.clone()
        };
        if let Some(gt) = gt {
            if t % cfg.eval_every == 0 {
                let p = psnr(&current, gt);
                curve.push((t, p));
                if best.as_ref().is_none_or(|(_, bp, _)| p > *bp) {
                    best = Some((t, p, current.clone()));
                }
            }
        }
        last_out = Some(current);

        gen.params.zero_grads();
        at_iteration(t, tape.backward(loss, &mut gen.params))?;
        adam.step(&mut gen.params);
        if !gen.params.iter().all(|(_, p)| p.value.is_finite()) {
            return Err(Error::Divergence { iteration: t });
        }
    }

    let final_loss = losses.last().copied().unwrap_or(f64::NAN);
    let (t_star, best_psnr, restored) = match (best, gt) {
        (Some((t, p, img)), _) => (t, Some(p), img),
        (None, gt) => {
            let restored = match last_out {
                Some(img) => img,
                None => gen.output(&z_base)?,
            };
            (cfg.iters, gt.map(|g| psnr(&restored, g)), restored)
        }
    };
    Ok(FitResult {
        psnr_curve: curve,
        t_star,
        best_psnr,
        restored,
        final_loss,
        loss_curve: losses,
        eval_every: cfg.eval_every,
    })
}

/// Median of the per-image best iterations, rounded to the nearest multiple
/// of `eval_every` (ties round up).
pub fn select_t_star(results: &[FitResult]) -> Result<usize> {
    let first = results.first().ok_or(Error::Empty("fit results"))?;
    let step = first.eval_every;
    let mut stars = Vec::with_capacity(results.len());
    for r in results {
        if r.psnr_curve.is_empty() {
            return Err(Error::InvalidArgument {
                op: "select_t_star",
                msg: "every result needs a PSNR curve".into(),
            });
        }
        stars.push(r.t_star as f64);
    }
    stars.sort_by(f64::total_cmp);
    let mid = stars.len() / 2;
    let median = if stars.len() % 2 == 1 { stars[mid] } else { 0.5 * (stars[mid - 1] + stars[mid]) };
    let rounded = ((median / step as f64 + 0.5).floor() as usize) * step;
    Ok(rounded.max(step))
}
