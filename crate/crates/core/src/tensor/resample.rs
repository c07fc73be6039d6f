//! Separable linear resampling operators.
//!
//! Each operator is the tensor product of two 1-D tap tables (rows, columns).
//! Sampling uses half-pixel centers and clamps tap indices to the edge.

use serde::{Deserialize, Serialize};

use super::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    Nearest,
    Bilinear,
    Bicubic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownsampleMode {
    Box,
    Bicubic,
}

/// Catmull-Rom cubic convolution kernel (a = -0.5).
pub fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// For each output position along one axis, the source taps `(index, weight)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisTaps {
    pub src_len: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

fn clamp_index(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

impl AxisTaps {
    pub fn out_len(&self) -> usize {
        self.taps.len()
    }

    /// 2x upsampling taps for `len` source samples.
    pub fn upsample_x2(len: usize, mode: ResizeMode) -> Self {
        let taps = (0..2 * len)
            .map(|t| {
                let s = (t as f64 + 0.5) / 2.0 - 0.5;
                match mode {
                    ResizeMode::Nearest => vec![(t / 2, 1.0)],
                    ResizeMode::Bilinear => {
                        let i0 = s.floor();
                        let f = s - i0;
                        let i0 = i0 as isize;
                        vec![(clamp_index(i0, len), 1.0 - f), (clamp_index(i0 + 1, len), f)]
                    }
                    ResizeMode::Bicubic => {
                        let i0 = s.floor();
                        let f = s - i0;
                        let i0 = i0 as isize;
                        (-1..=2)
                            .map(|j| (clamp_index(i0 + j, len), cubic_weight(f - j as f64)))
                            .collect()
                    }
                }
            })
            .collect();
        AxisTaps { src_len: len, taps }
    }

    /// Decimation by `factor`; `len` must be divisible by it.
    pub fn downsample(len: usize, factor: usize, mode: DownsampleMode) -> Self {
        let out = len / factor;
        let r = factor as f64;
        let taps = (0..out)
            .map(|t| match mode {
                DownsampleMode::Box => (t * factor..(t + 1) * factor).map(|i| (i, 1.0 / r)).collect(),
                DownsampleMode::Bicubic => {
                    // Kernel stretched by the factor (anti-aliased), renormalized.
                    let s = (t as f64 + 0.5) * r - 0.5;
                    let lo = (s - 2.0 * r).ceil() as isize;
                    let hi = (s + 2.0 * r).floor() as isize;
                    let mut taps: Vec<(usize, f64)> = (lo..=hi)
                        .map(|j| (clamp_index(j, len), cubic_weight((s - j as f64) / r)))
                        .filter(|&(_, wt)| wt != 0.0)
                        .collect();
                    let total: f64 = taps.iter().map(|t| t.1).sum();
                    taps.iter_mut().for_each(|t| t.1 /= total);
                    taps
                }
            })
            .collect();
        AxisTaps { src_len: len, taps }
    }
}

/// Applies `rows ⊗ cols` to every `(n, c)` plane.
pub(crate) fn apply(x: &Tensor, rows: &AxisTaps, cols: &AxisTaps) -> Tensor {
    let s = x.shape();
    let (oh, ow) = (rows.out_len(), cols.out_len());
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    let mut tmp = vec![0.0; s.h * ow];
    for (src, dst) in x.data().chunks(s.plane()).zip(out.data_mut().chunks_mut(oh * ow)) {
        for y in 0..s.h {
            let row = &src[y * s.w..(y + 1) * s.w];
            for (ox, taps) in cols.taps.iter().enumerate() {
                tmp[y * ow + ox] = taps.iter().map(|&(i, wt)| wt * row[i]).sum();
            }
        }
        for (oy, taps) in rows.taps.iter().enumerate() {
            let d = &mut dst[oy * ow..(oy + 1) * ow];
            for &(i, wt) in taps {
                for (dv, tv) in d.iter_mut().zip(&tmp[i * ow..(i + 1) * ow]) {
                    *dv += wt * tv;
                }
            }
        }
    }
    out
}

/// Adjoint of [`apply`]: maps an output-shaped gradient back to the source grid.
pub(crate) fn apply_transpose(g: &Tensor, rows: &AxisTaps, cols: &AxisTaps) -> Tensor {
    let s = g.shape();
    let (ih, iw) = (rows.src_len, cols.src_len);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, ih, iw));
    let mut tmp = vec![0.0; ih * s.w];
    for (src, dst) in g.data().chunks(s.plane()).zip(out.data_mut().chunks_mut(ih * iw)) {
        tmp.fill(0.0);
        for (oy, taps) in rows.taps.iter().enumerate() {
            let grow = &src[oy * s.w..(oy + 1) * s.w];
            for &(i, wt) in taps {
                for (tv, gv) in tmp[i * s.w..(i + 1) * s.w].iter_mut().zip(grow) {
                    *tv += wt * gv;
                }
            }
        }
        for y in 0..ih {
            let trow = &tmp[y * s.w..(y + 1) * s.w];
            let d = &mut dst[y * iw..(y + 1) * iw];
            for (ox, taps) in cols.taps.iter().enumerate() {
                for &(i, wt) in taps {
                    d[i] += wt * trow[ox];
                }
            }
        }
    }
    out
}
