//! 8-bit RGB PNG reading and writing.

use std::path::{Path, PathBuf};

use image::{ImageFormat, ImageReader, RgbImage};
use prior_forge_core::tensor::{Shape, Tensor};

use crate::error::{HarnessError, Result};

/// Loads an 8-bit RGB PNG as a `(1, 3, H, W)` tensor in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let err = |msg: String| HarnessError::Image {
        path: path.to_path_buf(),
        msg,
    };
    let mut reader = ImageReader::open(path).map_err(|e| HarnessError::io(path, e))?;
    reader.set_format(ImageFormat::Png);
    let img = reader.decode().map_err(|e| err(e.to_string()))?;
    let img = match img {
        image::DynamicImage::ImageRgb8(rgb) => rgb,
        other => return Err(err(format!("expected 8-bit RGB, found {:?}", other.color()))),
    };
    let (w, h) = img.dimensions();
    Ok(Tensor::from_fn(Shape::new(1, 3, h as usize, w as usize), |_, c, y, x| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

/// Writes a `(1, 3, H, W)` tensor as PNG, clipping to `[0, 1]` and rounding
/// to the nearest 8-bit level.
pub fn save_image(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return Err(HarnessError::Image {
            path: path.to_path_buf(),
            msg: format!("can only save (1, 3, H, W) tensors, got {s}"),
        });
    }
    let img = RgbImage::from_fn(s.w as u32, s.h as u32, |x, y| {
        image::Rgb(std::array::from_fn(|c| quantize(t.at(0, c, y as usize, x as usize))))
    });
    img.save_with_format(path, ImageFormat::Png).map_err(|e| HarnessError::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn quantize(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0).round() as u8
}

/// PNG files directly inside `dir`, sorted by file name.
pub fn list_pngs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| HarnessError::io(dir, e))?.path();
        let is_png = p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if p.is_file() && is_png {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}
