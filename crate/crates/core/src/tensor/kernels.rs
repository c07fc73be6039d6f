// Convolution kernels: im2col lowering onto a dense matrix multiply.

use super::{Shape, Tensor};

/// `c = op(a) * op(b) + beta * c` for row-major buffers, where `op(a)` is
/// `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    transpose_a: bool,
    b: &[f64],
    transpose_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if transpose_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if transpose_b { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above bound every index the strided access can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Sliding-window geometry over an image of `c x h x w` producing `oh x ow`
/// window positions.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Window {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1x1, stride-1, unpadded window, whose column matrix is the input itself.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output positions whose source column `ox * stride + off` lands inside `[0, len)`.
    #[inline]
    fn valid_range(off: isize, stride: usize, len: usize, out: usize) -> (usize, usize) {
        let s = stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = if (len as isize) <= off {
            0
        } else {
            ((len as isize - off + s - 1) / s).min(out as isize)
        };
        (lo as usize, (hi.max(lo)) as usize)
    }
}

fn im2col(src: &[f64], g: &Window, cols: &mut [f64]) {
    let ncols = g.cols();
    for ci in 0..g.c {
        let plane = &src[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let oy_off = (ky * g.dilation) as isize - g.pad as isize;
            let (oy_lo, oy_hi) = Window::valid_range(oy_off, g.stride, g.h, g.oh);
            for kx in 0..g.k {
                let ox_off = (kx * g.dilation) as isize - g.pad as isize;
                let (ox_lo, ox_hi) = Window::valid_range(ox_off, g.stride, g.w, g.ow);
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                dst[..oy_lo * g.ow].fill(0.0);
                dst[oy_hi * g.ow..].fill(0.0);
                for oy in oy_lo..oy_hi {
                    let iy = (oy * g.stride) as isize + oy_off;
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let d = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    d[..ox_lo].fill(0.0);
                    d[ox_hi..].fill(0.0);
                    if g.stride == 1 {
                        let start = (ox_lo as isize + ox_off) as usize;
                        d[ox_lo..ox_hi].copy_from_slice(&src_row[start..start + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            d[ox] = src_row[((ox * g.stride) as isize + ox_off) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back onto the image; the adjoint of [`im2col`].
fn col2im(cols: &[f64], g: &Window, dst: &mut [f64]) {
    let ncols = g.cols();
    for ci in 0..g.c {
        let plane = &mut dst[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let oy_off = (ky * g.dilation) as isize - g.pad as isize;
            let (oy_lo, oy_hi) = Window::valid_range(oy_off, g.stride, g.h, g.oh);
            for kx in 0..g.k {
                let ox_off = (kx * g.dilation) as isize - g.pad as isize;
                let (ox_lo, ox_hi) = Window::valid_range(ox_off, g.stride, g.w, g.ow);
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in oy_lo..oy_hi {
                    let iy = ((oy * g.stride) as isize + oy_off) as usize;
                    let d = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let s = &src[oy * g.ow..(oy + 1) * g.ow];
                    for ox in ox_lo..ox_hi {
                        d[((ox * g.stride) as isize + ox_off) as usize] += s[ox];
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_len(&self, len: usize) -> Option<usize> {
        let span = self.dilation * (self.k - 1) + 1;
        let padded = len + 2 * self.pad;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }

    /// Output extent of the transposed operator with the same geometry.
    pub fn transposed_out_len(&self, len: usize) -> Option<usize> {
        ((len - 1) * self.stride + self.dilation * (self.k - 1) + 1).checked_sub(2 * self.pad)
    }
}

fn add_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (co, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[co % bias.len()];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad(dout: &Tensor) -> Tensor {
    let s = dout.shape();
    let mut db = Tensor::zeros(Shape::vector(s.c));
    for (i, chunk) in dout.data().chunks(s.plane()).enumerate() {
        db.data_mut()[i % s.c] += chunk.iter().sum::<f64>();
    }
    db
}

/// Grouped 2-D convolution. `w` is `(c_out, c_in / groups, k, k)`.
pub(crate) fn conv_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, geom: ConvGeom, out_shape: Shape) -> Tensor {
    let xs = x.shape();
    let cin_g = xs.c / geom.groups;
    let cout_g = out_shape.c / geom.groups;
    let win = Window {
        c: cin_g,
        h: xs.h,
        w: xs.w,
        k: geom.k,
        stride: geom.stride,
        dilation: geom.dilation,
        pad: geom.pad,
        oh: out_shape.h,
        ow: out_shape.w,
    };
    let kk = cin_g * geom.k * geom.k;
    let ohw = out_shape.plane();
    let mut out = Tensor::zeros(out_shape);
    let pointwise = win.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; win.rows() * win.cols()] };
    for ni in 0..xs.n {
        for gi in 0..geom.groups {
            let src_off = (ni * xs.c + gi * cin_g) * xs.plane();
            let src = &x.data()[src_off..src_off + cin_g * xs.plane()];
            let cols: &[f64] = if pointwise {
                src
            } else {
                im2col(src, &win, &mut cols);
                &cols
            };
            let dst_off = (ni * out_shape.c + gi * cout_g) * ohw;
            let wg = &w.data()[gi * cout_g * kk..(gi + 1) * cout_g * kk];
            gemm(
                cout_g,
                kk,
                ohw,
                wg,
                false,
                cols,
                false,
                &mut out.data_mut()[dst_off..dst_off + cout_g * ohw],
                0.0,
            );
        }
    }
    if let Some(b) = b {
        add_bias(out.data_mut(), b.data(), ohw);
    }
    out
}

/// Returns `(dx, dw, db)` for [`conv_forward`].
pub(crate) fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    dout: &Tensor,
    geom: ConvGeom,
    need_bias: bool,
) -> (Tensor, Tensor, Option<Tensor>) {
    let xs = x.shape();
    let os = dout.shape();
    let cin_g = xs.c / geom.groups;
    let cout_g = os.c / geom.groups;
    let win = Window {
        c: cin_g,
        h: xs.h,
        w: xs.w,
        k: geom.k,
        stride: geom.stride,
        dilation: geom.dilation,
        pad: geom.pad,
        oh: os.h,
        ow: os.w,
    };
    let kk = cin_g * geom.k * geom.k;
    let ohw = os.plane();
    let mut dx = Tensor::zeros(xs);
    let mut dw = Tensor::zeros(w.shape());
    let pointwise = win.is_pointwise();
    let buf_len = if pointwise { 0 } else { win.rows() * win.cols() };
    let mut cols = vec![0.0; buf_len];
    let mut dcols = vec![0.0; buf_len];
    for ni in 0..xs.n {
        for gi in 0..geom.groups {
            let src_off = (ni * xs.c + gi * cin_g) * xs.plane();
            let src_len = cin_g * xs.plane();
            let src = &x.data()[src_off..src_off + src_len];
            let g_off = (ni * os.c + gi * cout_g) * ohw;
            let dg = &dout.data()[g_off..g_off + cout_g * ohw];
            let w_range = gi * cout_g * kk..(gi + 1) * cout_g * kk;
            let dx_part = &mut dx.data_mut()[src_off..src_off + src_len];
            if pointwise {
                gemm(cout_g, ohw, kk, dg, false, src, true, &mut dw.data_mut()[w_range.clone()], 1.0);
                gemm(kk, cout_g, ohw, &w.data()[w_range], true, dg, false, dx_part, 0.0);
            } else {
                im2col(src, &win, &mut cols);
                gemm(cout_g, ohw, kk, dg, false, &cols, true, &mut dw.data_mut()[w_range.clone()], 1.0);
                gemm(kk, cout_g, ohw, &w.data()[w_range], true, dg, false, &mut dcols, 0.0);
                col2im(&dcols, &win, dx_part);
            }
        }
    }
    let db = need_bias.then(|| bias_grad(dout));
    (dx, dw, db)
}

/// Transposed convolution; `w` is `(c_in, c_out, k, k)`. No grouping.
pub(crate) fn conv_transpose_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, geom: ConvGeom, out_shape: Shape) -> Tensor {
    let xs = x.shape();
    let win = Window {
        c: out_shape.c,
        h: out_shape.h,
        w: out_shape.w,
        k: geom.k,
        stride: geom.stride,
        dilation: geom.dilation,
        pad: geom.pad,
        oh: xs.h,
        ow: xs.w,
    };
    let rows = win.rows();
    let hw = xs.plane();
    let mut out = Tensor::zeros(out_shape);
    let mut cols = vec![0.0; rows * hw];
    for ni in 0..xs.n {
        let xn = &x.data()[ni * xs.c * hw..(ni + 1) * xs.c * hw];
        gemm(rows, xs.c, hw, w.data(), true, xn, false, &mut cols, 0.0);
        let len = out_shape.c * out_shape.plane();
        col2im(&cols, &win, &mut out.data_mut()[ni * len..(ni + 1) * len]);
    }
    if let Some(b) = b {
        add_bias(out.data_mut(), b.data(), out_shape.plane());
    }
    out
}

pub(crate) fn conv_transpose_backward(
    x: &Tensor,
    w: &Tensor,
    dout: &Tensor,
    geom: ConvGeom,
    need_bias: bool,
) -> (Tensor, Tensor, Option<Tensor>) {
    let xs = x.shape();
    let os = dout.shape();
    let win = Window {
        c: os.c,
        h: os.h,
        w: os.w,
        k: geom.k,
        stride: geom.stride,
        dilation: geom.dilation,
        pad: geom.pad,
        oh: xs.h,
        ow: xs.w,
    };
    let rows = win.rows();
    let hw = xs.plane();
    let mut dx = Tensor::zeros(xs);
    let mut dw = Tensor::zeros(w.shape());
    let mut cols = vec![0.0; rows * hw];
    let len = os.c * os.plane();
    for ni in 0..xs.n {
        im2col(&dout.data()[ni * len..(ni + 1) * len], &win, &mut cols);
        let xn = &x.data()[ni * xs.c * hw..(ni + 1) * xs.c * hw];
        gemm(xs.c, rows, hw, w.data(), false, &cols, false, &mut dx.data_mut()[ni * xs.c * hw..(ni + 1) * xs.c * hw], 0.0);
        gemm(xs.c, hw, rows, xn, false, &cols, true, dw.data_mut(), 1.0);
    }
    let db = need_bias.then(|| bias_grad(dout));
    (dx, dw, db)
}
