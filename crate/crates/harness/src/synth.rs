//! Seeded synthetic test images: a smooth gradient background with a disk,
//! a rectangle and a sinusoidal texture patch.

use std::path::{Path, PathBuf};

use prior_forge_core::tensor::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{HarnessError, Result};
use crate::imageio::save_image;

pub fn synthetic_image(size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a6e);
    let mut color = |lo: f64, hi: f64| -> [f64; 3] { std::array::from_fn(|_| rng.random_range(lo..hi)) };
    let base = color(0.15, 0.6);
    let tilt = color(-0.25, 0.25);
    let disk_color = color(0.05, 0.95);
    let rect_color = color(0.05, 0.95);
    let (cy, cx, radius) = (rng.random_range(0.25..0.75), rng.random_range(0.25..0.75), rng.random_range(0.12..0.25));
    let (ry0, rx0) = (rng.random_range(0.05..0.5), rng.random_range(0.05..0.5));
    let (rh, rw) = (rng.random_range(0.2..0.45), rng.random_range(0.2..0.45));
    let freq = rng.random_range(2.0..5.0) * std::f64::consts::TAU;
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (ty0, tx0) = (rng.random_range(0.5..0.7), rng.random_range(0.05..0.6));

    Tensor::from_fn(Shape::new(1, 3, size, size), |_, c, h, w| {
        let y = (h as f64 + 0.5) / size as f64;
        let x = (w as f64 + 0.5) / size as f64;
        let mut v = base[c] + tilt[c] * (x - 0.5) + 0.5 * tilt[(c + 1) % 3] * (y - 0.5);
        if y >= ry0 && y < ry0 + rh && x >= rx0 && x < rx0 + rw {
            v = rect_color[c];
        }
        if y >= ty0 && y < ty0 + 0.25 && x >= tx0 && x < tx0 + 0.35 {
            let phase = freq * (x * angle.cos() + y * angle.sin());
            v = 0.5 + 0.35 * phase.sin() * [1.0, 0.8, 0.6][c];
        }
        if (y - cy).powi(2) + (x - cx).powi(2) < radius * radius {
            v = disk_color[c];
        }
        v.clamp(0.02, 0.98)
    })
}

/// Writes `count` synthetic images named `img_000.png`, ... into `dir`; image
/// `i` uses seed `seed + i`.
pub fn write_synthetic_set(dir: impl AsRef<Path>, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    (0..count)
        .map(|i| {
            let path = dir.join(format!("img_{i:03}.png"));
            save_image(&synthetic_image(size, seed.wrapping_add(i as u64)), &path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_range_and_varied() {
        let a = synthetic_image(32, 3);
        assert_eq!(a, synthetic_image(32, 3));
        assert_ne!(a, synthetic_image(32, 4));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = a.mean();
        let var = a.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / a.len() as f64;
        assert!(var > 1e-3);
    }
}
