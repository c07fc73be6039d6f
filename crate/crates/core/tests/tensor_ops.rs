//! Operator tests against independent direct-summation oracles.

use prior_forge_core::tensor::{
    grad_check, grad_check_params, Activation, ConvSpec, DownsampleMode, GradCheckOptions, ParamStore, ResizeMode,
    Shape, Tape, Tensor, Var,
};
use prior_forge_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Shape, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

/// Triple-loop direct convolution with zero padding.
fn conv_oracle(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, dil: usize, pad: usize, groups: usize) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let k = ws.h as isize;
    let oh = (xs.h + 2 * pad - dil * (ws.h - 1) - 1) / stride + 1;
    let ow = (xs.w + 2 * pad - dil * (ws.w - 1) - 1) / stride + 1;
    let cin_g = xs.c / groups;
    let cout_g = ws.n / groups;
    Tensor::from_fn(Shape::new(xs.n, ws.n, oh, ow), |n, co, y, x_| {
        let g = co / cout_g;
        let mut acc = b[co];
        for ci in 0..cin_g {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (y * stride) as isize + ky * dil as isize - pad as isize;
                    let ix = (x_ * stride) as isize + kx * dil as isize - pad as isize;
                    if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                        continue;
                    }
                    acc += w.at(co, ci, ky as usize, kx as usize) * x.at(n, g * cin_g + ci, iy as usize, ix as usize);
                }
            }
        }
        acc
    })
}

/// Scatter form of the stride-2, kernel-4, pad-1 transposed convolution.
fn conv_transpose_oracle(x: &Tensor, w: &Tensor, b: &[f64]) -> Tensor {
    let xs = x.shape();
    let cout = w.shape().c;
    let (oh, ow) = (2 * xs.h, 2 * xs.w);
    let mut out = Tensor::from_fn(Shape::new(xs.n, cout, oh, ow), |_, co, _, _| b[co]);
    for n in 0..xs.n {
        for ci in 0..xs.c {
            for iy in 0..xs.h {
                for ix in 0..xs.w {
                    for co in 0..cout {
                        for ky in 0..4 {
                            for kx in 0..4 {
                                let oy = (2 * iy + ky) as isize - 1;
                                let ox = (2 * ix + kx) as isize - 1;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                let v = out.at(n, co, oy as usize, ox as usize)
                                    + x.at(n, ci, iy, ix) * w.at(ci, co, ky, kx);
                                out.set(n, co, oy as usize, ox as usize, v);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn forward<F: Fn(&mut Tape, Var) -> prior_forge_core::Result<Var>>(x: &Tensor, f: F) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone()).unwrap();
    let out = f(&mut tape, v).unwrap();
    tape.value(out).clone()
}

#[test]
fn conv2d_identity_kernel_and_zero_input() {
    let ones = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
    let mut t = Tape::new();
    let x = t.constant(ones.clone()).unwrap();
    let w = t.constant(Tensor::full(Shape::new(1, 1, 1, 1), 1.0)).unwrap();
    let b = t.constant(Tensor::zeros(Shape::vector(1))).unwrap();
    let y = t.conv2d(x, w, Some(b), ConvSpec::new(1, 1, 0)).unwrap();
    assert_eq!(t.value(y), &ones);

    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(Shape::new(1, 2, 4, 4))).unwrap();
    let w = t.constant(random(Shape::new(3, 2, 3, 3), 1)).unwrap();
    let y = t.conv2d(x, w, None, ConvSpec::same(3, 1)).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_dilated_matches_direct_summation() {
    let x = random(Shape::new(1, 2, 5, 5), 2);
    let w = random(Shape::new(3, 2, 3, 3), 3);
    let b = [0.1, -0.2, 0.3];
    let got = forward(&x, |t, v| {
        let w = t.constant(w.clone())?;
        let bv = t.constant(Tensor::from_vec(Shape::vector(3), b.to_vec())?)?;
        t.conv2d(v, w, Some(bv), ConvSpec::new(1, 2, 2))
    });
    let want = conv_oracle(&x, &w, &b, 1, 2, 2, 1);
    assert_eq!(got.shape(), Shape::new(1, 3, 5, 5));
    assert!(got.max_abs_diff(&want) < 1e-12);
}

#[test]
fn conv2d_stride_two_matches_oracle_and_size_formula() {
    let x = random(Shape::new(2, 3, 7, 6), 4);
    let w = random(Shape::new(4, 3, 3, 3), 5);
    let b = [0.0; 4];
    let got = forward(&x, |t, v| {
        let w = t.constant(w.clone())?;
        t.conv2d(v, w, None, ConvSpec::new(2, 1, 1))
    });
    // floor((7 + 2 - 2 - 1) / 2) + 1 = 4, floor((6 + 2 - 2 - 1) / 2) + 1 = 3
    assert_eq!(got.shape(), Shape::new(2, 4, 4, 3));
    assert!(got.max_abs_diff(&conv_oracle(&x, &w, &b, 2, 1, 1, 1)) < 1e-12);
}

#[test]
fn conv2d_shape_errors_name_the_dimension() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(Shape::new(1, 3, 4, 4))).unwrap();
    let w = t.constant(Tensor::zeros(Shape::new(2, 2, 3, 3))).unwrap();
    match t.conv2d(x, w, None, ConvSpec::same(3, 1)) {
        Err(Error::Shape { dim, expected, found, .. }) => {
            assert_eq!(dim, "input channels");
            assert_eq!((expected, found), (2, 3));
        }
        other => panic!("unexpected {other:?}"),
    }
    let w3 = t.constant(Tensor::zeros(Shape::new(2, 3, 3, 3))).unwrap();
    assert!(matches!(
        t.conv2d(x, w3, None, ConvSpec::new(3, 1, 1)),
        Err(Error::InvalidArgument { .. })
    ));
}

#[test]
fn transposed_conv_single_pixel_hits_central_taps() {
    let x = Tensor::full(Shape::new(1, 1, 1, 1), 1.0);
    let w = random(Shape::new(1, 1, 4, 4), 6);
    let got = forward(&x, |t, v| {
        let w = t.constant(w.clone())?;
        t.conv_transpose2d_x2(v, w, None)
    });
    assert_eq!(got.shape(), Shape::new(1, 1, 2, 2));
    // Output (oy, ox) receives tap (oy + 1, ox + 1).
    for oy in 0..2 {
        for ox in 0..2 {
            assert!((got.at(0, 0, oy, ox) - w.at(0, 0, oy + 1, ox + 1)).abs() < 1e-15);
        }
    }
    assert!(got.max_abs_diff(&conv_transpose_oracle(&x, &w, &[0.0])) < 1e-15);
}

#[test]
fn transposed_conv_matches_scatter_oracle() {
    let x = random(Shape::new(1, 3, 4, 5), 7);
    let w = random(Shape::new(3, 2, 4, 4), 8);
    let b = [0.5, -0.25];
    let got = forward(&x, |t, v| {
        let w = t.constant(w.clone())?;
        let bv = t.constant(Tensor::from_vec(Shape::vector(2), b.to_vec())?)?;
        t.conv_transpose2d_x2(v, w, Some(bv))
    });
    assert_eq!(got.shape(), Shape::new(1, 2, 8, 10));
    assert!(got.max_abs_diff(&conv_transpose_oracle(&x, &w, &b)) < 1e-12);

    let zeros = forward(&Tensor::zeros(x.shape()), |t, v| {
        let w = t.constant(w.clone())?;
        t.conv_transpose2d_x2(v, w, None)
    });
    assert!(zeros.data().iter().all(|&v| v == 0.0));
}

/// Materializes a linear map column by column and checks <Ax, y> = <x, A^T y>,
/// with A^T realized by the backward pass.
fn adjoint_rel_err<F>(in_shape: Shape, f: F, seed: u64) -> f64
where
    F: Fn(&mut Tape, Var) -> prior_forge_core::Result<Var>,
{
    let x = random(in_shape, seed);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone()).unwrap();
    let out = f(&mut tape, xv).unwrap();
    let y = random(tape.shape(out), seed + 1000);
    let ax_y = tape.value(out).dot(&y);
    tape.backward_with_seed(out, y.clone(), &mut ParamStore::new()).unwrap();
    let aty = tape.grad(xv).unwrap().clone();
    let x_aty = x.dot(&aty);

    // Column-by-column materialization gives an independent A^T y.
    let mut materialized = Tensor::zeros(in_shape);
    for i in 0..in_shape.numel() {
        let mut e = Tensor::zeros(in_shape);
        e.data_mut()[i] = 1.0;
        let col = forward(&e, &f);
        materialized.data_mut()[i] = col.dot(&y);
    }
    let scale = ax_y.abs().max(1e-300);
    ((ax_y - x_aty).abs() / scale).max(materialized.max_abs_diff(&aty) / aty.data().iter().fold(1e-300f64, |m, v| m.max(v.abs())))
}

#[test]
fn transposed_conv_adjoint() {
    let w = random(Shape::new(1, 1, 4, 4), 9);
    let err = adjoint_rel_err(
        Shape::new(1, 1, 3, 3),
        |t, v| {
            let w = t.constant(w.clone())?;
            t.conv_transpose2d_x2(v, w, None)
        },
        10,
    );
    assert!(err < 1e-10, "{err}");
}

#[test]
fn depthwise_and_separable() {
    let x = random(Shape::new(1, 3, 5, 5), 11);
    let ident = Tensor::full(Shape::new(3, 1, 1, 1), 1.0);
    let same = forward(&x, |t, v| {
        let w = t.constant(ident.clone())?;
        t.depthwise_conv2d(v, w, None, 1, 0)
    });
    assert_eq!(same, x);

    let pw = Tensor::from_fn(Shape::new(3, 3, 1, 1), |o, i, _, _| if o == i { 1.0 } else { 0.0 });
    let same = forward(&x, |t, v| {
        let dw = t.constant(ident.clone())?;
        let pw = t.constant(pw.clone())?;
        t.separable_conv2d(v, dw, pw, None, 1, 0)
    });
    assert!(same.max_abs_diff(&x) < 1e-15);

    let w = random(Shape::new(3, 1, 3, 3), 12);
    let b = [0.1, 0.2, 0.3];
    let got = forward(&x, |t, v| {
        let w = t.constant(w.clone())?;
        let bv = t.constant(Tensor::from_vec(Shape::vector(3), b.to_vec())?)?;
        t.depthwise_conv2d(v, w, Some(bv), 2, 2)
    });
    assert!(got.max_abs_diff(&conv_oracle(&x, &w, &b, 1, 2, 2, 3)) < 1e-12);

    let mut t = Tape::new();
    let xv = t.constant(x.clone()).unwrap();
    let wrong = t.constant(Tensor::zeros(Shape::new(2, 1, 3, 3))).unwrap();
    assert!(matches!(
        t.depthwise_conv2d(xv, wrong, None, 1, 1),
        Err(Error::Shape { dim: "filter count", .. })
    ));
}

#[test]
fn nearest_resize_duplicates() {
    let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = forward(&x, |t, v| t.resize_x2(v, ResizeMode::Nearest));
    let want = [1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.];
    assert_eq!(y.data(), &want);
}

#[test]
fn resampling_reproduces_constants() {
    let c = Tensor::full(Shape::new(1, 2, 3, 4), 0.37);
    for mode in [ResizeMode::Nearest, ResizeMode::Bilinear, ResizeMode::Bicubic] {
        let y = forward(&c, |t, v| t.resize_x2(v, mode));
        assert_eq!(y.shape(), Shape::new(1, 2, 6, 8));
        assert!(y.data().iter().all(|v| (v - 0.37).abs() < 1e-15), "{mode:?}");
    }
    let c = Tensor::full(Shape::new(1, 3, 8, 8), 0.61);
    for mode in [DownsampleMode::Box, DownsampleMode::Bicubic] {
        let y = forward(&c, |t, v| t.downsample(v, 4, mode));
        assert_eq!(y.shape(), Shape::new(1, 3, 2, 2));
        assert!(y.data().iter().all(|v| (v - 0.61).abs() < 1e-15), "{mode:?}");
    }
}

#[test]
fn bilinear_matches_half_pixel_formula() {
    let x = Tensor::from_fn(Shape::new(1, 1, 3, 3), |_, _, h, w| (h * 3 + w) as f64 + 0.1 * (h * w) as f64);
    let y = forward(&x, |t, v| t.resize_x2(v, ResizeMode::Bilinear));
    let sample = |ty: usize, tx: usize| {
        let sy = (ty as f64 + 0.5) / 2.0 - 0.5;
        let sx = (tx as f64 + 0.5) / 2.0 - 0.5;
        let (y0, x0) = (sy.floor(), sx.floor());
        let (fy, fx) = (sy - y0, sx - x0);
        let clamp = |i: f64| i.clamp(0.0, 2.0) as usize;
        let v = |a: f64, b: f64| x.at(0, 0, clamp(a), clamp(b));
        (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x0 + 1.0))
            + fy * ((1.0 - fx) * v(y0 + 1.0, x0) + fx * v(y0 + 1.0, x0 + 1.0))
    };
    for ty in 0..6 {
        for tx in 0..6 {
            assert!((y.at(0, 0, ty, tx) - sample(ty, tx)).abs() < 1e-12);
        }
    }
}

#[test]
fn box_downsample_block_mean_and_divisibility() {
    let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = forward(&x, |t, v| t.downsample(v, 2, DownsampleMode::Box));
    assert_eq!(y.data(), &[2.5]);
    let mut t = Tape::new();
    let v = t.constant(Tensor::zeros(Shape::new(1, 1, 5, 4))).unwrap();
    assert!(matches!(
        t.downsample(v, 2, DownsampleMode::Box),
        Err(Error::Indivisible { dim: "h", value: 5, divisor: 2, .. })
    ));
}

#[test]
fn linear_operators_satisfy_adjoint_identity() {
    for (i, side) in [4usize, 5, 6].into_iter().enumerate() {
        let s = Shape::new(1, 4, side, side);
        for mode in [ResizeMode::Nearest, ResizeMode::Bilinear, ResizeMode::Bicubic] {
            let err = adjoint_rel_err(s, |t, v| t.resize_x2(v, mode), 20 + i as u64);
            assert!(err < 1e-10, "resize {mode:?}: {err}");
        }
        let err = adjoint_rel_err(s, |t, v| t.depth_to_space(v), 30 + i as u64);
        assert!(err < 1e-10, "depth_to_space {err}");
        let err = adjoint_rel_err(s, |t, v| t.channel_sum(v, 2), 40 + i as u64);
        assert!(err < 1e-10, "channel_sum {err}");
    }
    for side in [4usize, 6] {
        for mode in [DownsampleMode::Box, DownsampleMode::Bicubic] {
            let err = adjoint_rel_err(Shape::new(1, 2, side, side), |t, v| t.downsample(v, 2, mode), 50);
            assert!(err < 1e-10, "downsample {mode:?}: {err}");
        }
    }
}

#[test]
fn depth_to_space_layout_inverse_and_gradient() {
    let x = Tensor::from_vec(Shape::new(1, 4, 1, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = forward(&x, |t, v| t.depth_to_space(v));
    assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
    assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);

    let x = random(Shape::new(2, 8, 3, 5), 60);
    let back = forward(&x, |t, v| {
        let d = t.depth_to_space(v)?;
        t.space_to_depth(d)
    });
    assert_eq!(back, x);

    let mut t = Tape::new();
    let v = t.constant(x.clone()).unwrap();
    let d = t.depth_to_space(v).unwrap();
    let s = t.sum(d).unwrap();
    t.backward(s, &mut ParamStore::new()).unwrap();
    assert!(t.grad(v).unwrap().data().iter().all(|&g| g == 1.0));

    let mut t = Tape::new();
    let v = t.constant(Tensor::zeros(Shape::new(1, 6, 2, 2))).unwrap();
    assert!(matches!(t.depth_to_space(v), Err(Error::Indivisible { dim: "c", .. })));
}

#[test]
fn channel_sum_values() {
    let x = Tensor::from_vec(Shape::new(1, 4, 1, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(forward(&x, |t, v| t.channel_sum(v, 2)).data(), &[3.0, 7.0]);
    assert_eq!(forward(&x, |t, v| t.channel_sum(v, 1)), x);
    let mut t = Tape::new();
    let v = t.constant(x).unwrap();
    assert!(t.channel_sum(v, 3).is_err());
}

#[test]
fn activations_pointwise() {
    let x = Tensor::from_vec(Shape::vector(2), vec![-1.0, 2.0]).unwrap();
    assert_eq!(forward(&x, |t, v| t.relu(v)).data(), &[0.0, 2.0]);
    assert_eq!(forward(&x, |t, v| t.leaky_relu(v)).data(), &[-0.2, 2.0]);
    let selu = forward(&x, |t, v| t.selu(v));
    assert!((selu.data()[1] - 2.0 * 1.0507009873554805).abs() < 1e-15);
    assert!((selu.data()[0] - 1.0507009873554805 * 1.6732632423543772 * ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
    let same = forward(&x, |t, v| t.activation(v, Activation::None, None));
    assert_eq!(same, x);

    let mut t = Tape::new();
    let v = t.constant(x).unwrap();
    assert!(t.activation(v, Activation::Prelu, None).is_err());
}

#[test]
fn relu_subgradient_at_kink_is_zero() {
    let mut t = Tape::new();
    let v = t.constant(Tensor::zeros(Shape::vector(3))).unwrap();
    let y = t.relu(v).unwrap();
    let s = t.sum(y).unwrap();
    t.backward(s, &mut ParamStore::new()).unwrap();
    assert!(t.grad(v).unwrap().data().iter().all(|&g| g == 0.0));
}

#[test]
fn prelu_slope_gradient_matches_finite_differences() {
    let mut store = ParamStore::new();
    let a = store.add_full("slope", Shape::scalar(), 0.25);
    let x = Tensor::from_vec(Shape::vector(4), vec![-1.5, -0.3, 0.7, -2.0]).unwrap();
    let err = grad_check_params(
        |t, p| {
            let xv = t.constant(x.clone())?;
            let av = t.param(p, a)?;
            let y = t.prelu(xv, av)?;
            let sq = t.mul(y, y)?;
            t.sum(sq)
        },
        &mut store,
        &[a],
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn channel_norm_statistics() {
    let x = random(Shape::new(1, 3, 5, 5), 70);
    let gamma = [2.0, -0.5, 1.0];
    let beta = [0.3, -1.0, 0.0];
    let y = forward(&x, |t, v| {
        let g = t.constant(Tensor::from_vec(Shape::vector(3), gamma.to_vec())?)?;
        let b = t.constant(Tensor::from_vec(Shape::vector(3), beta.to_vec())?)?;
        t.channel_norm(v, g, b, 1e-5)
    });
    for c in 0..3 {
        let vals: Vec<f64> = (0..25).map(|i| y.at(0, c, i / 5, i % 5)).collect();
        let mean = vals.iter().sum::<f64>() / 25.0;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 25.0).sqrt();
        assert!((mean - beta[c]).abs() < 1e-12);
        assert!((std - gamma[c].abs()).abs() < 1e-3);
    }

    // Constant channel: variance zero is absorbed by eps.
    let c = Tensor::full(Shape::new(1, 1, 3, 3), 5.0);
    let y = forward(&c, |t, v| {
        let g = t.constant(Tensor::full(Shape::vector(1), 1.0))?;
        let b = t.constant(Tensor::zeros(Shape::vector(1)))?;
        t.channel_norm(v, g, b, 1e-5)
    });
    assert!(y.data().iter().all(|v| *v == 0.0));
}

#[test]
fn losses_and_backward_contract() {
    let x = random(Shape::new(1, 2, 3, 3), 80);
    let mut t = Tape::new();
    let a = t.constant(x.clone()).unwrap();
    let b = t.constant(x).unwrap();
    let l = t.mse_loss(a, b).unwrap();
    assert_eq!(t.value(l).item(), Some(0.0));

    let mut t = Tape::new();
    let a = t.constant(Tensor::scalar(0.0)).unwrap();
    let b = t.constant(Tensor::scalar(2.0)).unwrap();
    let l = t.mse_loss(a, b).unwrap();
    assert_eq!(t.value(l).item(), Some(4.0));
    let mut store = ParamStore::new();
    t.backward(l, &mut store).unwrap();
    assert_eq!(t.grad(a).unwrap().data(), &[-4.0]);
    assert_eq!(t.backward(l, &mut store), Err(Error::BackwardAlreadyRun));
}

#[test]
fn masked_mse_with_full_mask_is_mse() {
    let a = random(Shape::new(1, 3, 4, 4), 90);
    let b = random(Shape::new(1, 3, 4, 4), 91);
    let mut t = Tape::new();
    let (av, bv) = (t.constant(a).unwrap(), t.constant(b).unwrap());
    let plain = t.mse_loss(av, bv).unwrap();
    let masked = t.masked_mse_loss(av, bv, &Tensor::full(Shape::new(1, 1, 4, 4), 1.0)).unwrap();
    assert!((t.value(plain).data()[0] - t.value(masked).data()[0]).abs() < 1e-15);
    assert_eq!(
        t.masked_mse_loss(av, bv, &Tensor::zeros(Shape::new(1, 1, 4, 4))),
        Err(Error::NothingObserved)
    );
}

#[test]
fn shared_parameter_gradients_accumulate() {
    let x = random(Shape::new(1, 2, 5, 5), 100);
    let mut store = ParamStore::new();
    let w = store.add_he_normal(1, "w", Shape::new(2, 2, 3, 3), 18);

    let run = |store: &mut ParamStore, uses: &[bool; 2]| {
        store.zero_grads();
        let mut t = Tape::new();
        let xv = t.constant(x.clone()).unwrap();
        let mut terms = vec![];
        if uses[0] {
            let wv = t.param(store, w).unwrap();
            let y = t.conv2d(xv, wv, None, ConvSpec::same(3, 1)).unwrap();
            let y = t.tanh(y).unwrap();
            terms.push(t.sum(y).unwrap());
        }
        if uses[1] {
            let wv = t.param(store, w).unwrap();
            let y = t.conv2d(xv, wv, None, ConvSpec::same(3, 2)).unwrap();
            let y = t.mul(y, y).unwrap();
            terms.push(t.sum(y).unwrap());
        }
        let total = terms.into_iter().reduce(|a, b| t.add(a, b).unwrap()).unwrap();
        t.backward(total, store).unwrap();
        store.grad(w).clone()
    };
    let first = run(&mut store, &[true, false]);
    let second = run(&mut store, &[false, true]);
    let both = run(&mut store, &[true, true]);
    let summed = first.zip_map(&second, |a, b| a + b);
    assert!(both.max_abs_diff(&summed) < 1e-12);
}

#[test]
fn every_differentiable_op_passes_grad_check() {
    let opts = GradCheckOptions::default();
    let check = |name: &str, shape: Shape, f: &dyn Fn(&mut Tape, Var) -> prior_forge_core::Result<Var>| {
        let x = random(shape, name.len() as u64 + 7);
        // A random projection makes every output coordinate matter.
        let probe = |t: &mut Tape, v: Var| {
            let y = f(t, v)?;
            let r = t.constant(random(t.shape(y), 999))?;
            let p = t.mul(y, r)?;
            t.sum(p)
        };
        let err = grad_check(probe, &x, opts).unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    };
    let w33 = random(Shape::new(3, 2, 3, 3), 1);
    check("conv2d", Shape::new(1, 2, 6, 6), &|t, v| {
        let w = t.constant(w33.clone())?;
        t.conv2d(v, w, None, ConvSpec::new(2, 1, 1))
    });
    let wt = random(Shape::new(2, 3, 4, 4), 2);
    check("conv_transpose2d_x2", Shape::new(1, 2, 3, 3), &|t, v| {
        let w = t.constant(wt.clone())?;
        t.conv_transpose2d_x2(v, w, None)
    });
    let wd = random(Shape::new(2, 1, 3, 3), 3);
    let wp = random(Shape::new(4, 2, 1, 1), 4);
    check("separable", Shape::new(1, 2, 5, 5), &|t, v| {
        let d = t.constant(wd.clone())?;
        let p = t.constant(wp.clone())?;
        t.separable_conv2d(v, d, p, None, 2, 2)
    });
    for mode in [ResizeMode::Nearest, ResizeMode::Bilinear, ResizeMode::Bicubic] {
        check("resize", Shape::new(1, 2, 3, 4), &|t, v| t.resize_x2(v, mode));
    }
    check("downsample", Shape::new(1, 2, 4, 4), &|t, v| t.downsample(v, 2, DownsampleMode::Bicubic));
    check("depth_to_space", Shape::new(1, 4, 2, 3), &|t, v| t.depth_to_space(v));
    check("channel_sum", Shape::new(1, 4, 3, 3), &|t, v| t.channel_sum(v, 2));
    check("relu", Shape::new(1, 3, 4, 4), &|t, v| t.relu(v));
    check("leaky", Shape::new(1, 3, 4, 4), &|t, v| t.leaky_relu(v));
    check("selu", Shape::new(1, 3, 4, 4), &|t, v| t.selu(v));
    check("sigmoid", Shape::new(1, 3, 4, 4), &|t, v| t.sigmoid(v));
    check("tanh", Shape::new(1, 3, 4, 4), &|t, v| t.tanh(v));
    check("log_softmax", Shape::new(1, 5, 2, 2), &|t, v| t.log_softmax(v));
    check("slice", Shape::new(1, 5, 2, 2), &|t, v| t.slice_channels(v, 1, 3));
    let gamma = random(Shape::vector(3), 5);
    check("channel_norm", Shape::new(1, 3, 4, 4), &|t, v| {
        let g = t.constant(gamma.clone())?;
        let b = t.constant(Tensor::zeros(Shape::vector(3)))?;
        t.channel_norm(v, g, b, 1e-5)
    });
    let target = random(Shape::new(1, 3, 4, 4), 6);
    check("mse", Shape::new(1, 3, 4, 4), &|t, v| {
        let b = t.constant(target.clone())?;
        t.mse_loss(v, b)
    });
}

#[test]
fn ops_are_bit_deterministic() {
    let x = random(Shape::new(1, 4, 6, 6), 123);
    let w = random(Shape::new(4, 4, 3, 3), 124);
    let run = || {
        forward(&x, |t, v| {
            let w = t.constant(w.clone())?;
            let y = t.conv2d(v, w, None, ConvSpec::same(3, 2))?;
            let y = t.resize_x2(y, ResizeMode::Bicubic)?;
            t.selu(y)
        })
    };
    assert_eq!(run(), run());
}
