use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeom};
use super::resample::{self, AxisTaps, DownsampleMode, ResizeMode};
use super::{ParamId, ParamStore, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
    LeakyRelu,
    Selu,
    Prelu,
}

pub const LEAKY_SLOPE: f64 = 0.2;
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
pub const NORM_EPS: f64 = 1e-5;

/// Stride, dilation and zero padding of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, dilation: usize, pad: usize) -> Self {
        ConvSpec {
            stride,
            dilation,
            pad,
        }
    }

    /// Stride 1 with the padding that preserves spatial size for odd `k`.
    pub const fn same(k: usize, dilation: usize) -> Self {
        ConvSpec::new(1, dilation, dilation * (k - 1) / 2)
    }
}

/// Backward rule of a user-defined op: `(inputs, output, output_grad) -> input grads`.
pub type CustomBackward = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor> + Send + Sync>;

#[derive(Debug, Clone, Copy)]
enum Unary {
    Relu,
    LeakyRelu,
    Selu,
    Sigmoid,
    Tanh,
    Exp,
}

enum Op {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Resample {
        x: Var,
        rows: AxisTaps,
        cols: AxisTaps,
    },
    DepthToSpace(Var),
    SpaceToDepth(Var),
    ChannelSum {
        x: Var,
        group: usize,
    },
    Unary {
        x: Var,
        kind: Unary,
    },
    Prelu {
        x: Var,
        a: Var,
    },
    ChannelNorm {
        gamma: Var,
        beta: Var,
        x: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    SliceChannels {
        x: Var,
        start: usize,
    },
    LogSoftmax(Var),
    Sum(Var),
    Mse {
        a: Var,
        b: Var,
    },
    MaskedMse {
        a: Var,
        b: Var,
        mask: Tensor,
        observed: f64,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

struct Node {
    name: String,
    value: Tensor,
    op: Op,
}

/// Ordered record of executed operations. Backward replays it in exact
/// reverse order; a tape can be replayed once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
    touched: BTreeSet<ParamId>,
}

fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    for (dim, x, y) in [("n", a.n, b.n), ("c", a.c, b.c), ("h", a.h, b.h), ("w", a.w, b.w)] {
        if x != y {
            return Err(Error::Shape {
                op,
                dim,
                expected: x,
                found: y,
            });
        }
    }
    Ok(())
}

fn expect_dim(op: &'static str, dim: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Shape {
            op,
            dim,
            expected,
            found,
        });
    }
    Ok(())
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward output with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Ids of every parameter registered on this tape so far.
    pub fn touched_params(&self) -> &BTreeSet<ParamId> {
        &self.touched
    }

    /// Names of recorded operations in execution order.
    pub fn op_names(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(|n| n.name.as_str())
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name.to_string() });
        }
        self.nodes.push(Node {
            name: name.to_string(),
            value,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.touched.insert(id);
        let p = store.get(id);
        self.push(&p.name, p.value.clone(), Op::Param(id))
    }

    fn conv_impl(
        &mut self,
        op: &'static str,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
        groups: usize,
    ) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if spec.stride == 0 || spec.stride > 2 {
            return Err(Error::InvalidArgument {
                op,
                msg: format!("stride must be 1 or 2, got {}", spec.stride),
            });
        }
        if spec.dilation == 0 {
            return Err(Error::InvalidArgument {
                op,
                msg: "dilation must be at least 1".into(),
            });
        }
        expect_dim(op, "kernel width", ws.h, ws.w)?;
        expect_dim(op, "input channels", ws.c * groups, xs.c)?;
        if ws.n % groups != 0 {
            return Err(Error::Indivisible {
                op,
                dim: "output channels",
                value: ws.n,
                divisor: groups,
            });
        }
        if let Some(b) = b {
            expect_dim(op, "bias length", ws.n, self.shape(b).numel())?;
        }
        let geom = ConvGeom {
            k: ws.h,
            stride: spec.stride,
            dilation: spec.dilation,
            pad: spec.pad,
            groups,
        };
        let (oh, ow) = match (geom.out_len(xs.h), geom.out_len(xs.w)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::InvalidArgument {
                    op,
                    msg: format!("input {xs} smaller than dilated kernel {}", ws.h),
                })
            }
        };
        let out_shape = Shape::new(xs.n, ws.n, oh, ow);
        let value = kernels::conv_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            geom,
            out_shape,
        );
        self.push(op, value, Op::Conv { x, w, b, geom })
    }

    /// 2-D convolution; `w` is `(c_out, c_in, k, k)` and `b` has `c_out` entries.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        self.conv_impl("conv2d", x, w, b, spec, 1)
    }

    /// One `k x k` filter per channel; `w` is `(c, 1, k, k)`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize, pad: usize) -> Result<Var> {
        let c = self.shape(x).c;
        let ws = self.shape(w);
        expect_dim("depthwise_conv2d", "filter count", c, ws.n)?;
        expect_dim("depthwise_conv2d", "filter depth", 1, ws.c)?;
        self.conv_impl("depthwise_conv2d", x, w, b, ConvSpec::new(1, dilation, pad), c)
    }

    /// Depthwise filtering followed by a 1x1 pointwise map `w_pw: (c_out, c, 1, 1)`.
    pub fn separable_conv2d(
        &mut self,
        x: Var,
        w_dw: Var,
        w_pw: Var,
        b: Option<Var>,
        dilation: usize,
        pad: usize,
    ) -> Result<Var> {
        let pws = self.shape(w_pw);
        expect_dim("separable_conv2d", "pointwise kernel", 1, pws.h)?;
        let depth = self.depthwise_conv2d(x, w_dw, None, dilation, pad)?;
        self.conv_impl("separable_conv2d", depth, w_pw, b, ConvSpec::new(1, 1, 0), 1)
    }

    /// Stride-2 transposed convolution with kernel 4 and padding 1, which
    /// doubles height and width exactly. `w` is `(c_in, c_out, 4, 4)`.
    pub fn conv_transpose2d_x2(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        const OP: &str = "conv_transpose2d_x2";
        let xs = self.shape(x);
        let ws = self.shape(w);
        expect_dim(OP, "input channels", ws.n, xs.c)?;
        expect_dim(OP, "kernel height", 4, ws.h)?;
        expect_dim(OP, "kernel width", 4, ws.w)?;
        if let Some(b) = b {
            expect_dim(OP, "bias length", ws.c, self.shape(b).numel())?;
        }
        let geom = ConvGeom {
            k: 4,
            stride: 2,
            dilation: 1,
            pad: 1,
            groups: 1,
        };
        let out_shape = Shape::new(xs.n, ws.c, 2 * xs.h, 2 * xs.w);
        debug_assert_eq!(geom.transposed_out_len(xs.h), Some(2 * xs.h));
        let value = kernels::conv_transpose_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            geom,
            out_shape,
        );
        self.push(OP, value, Op::ConvTranspose { x, w, b, geom })
    }

    fn resample(&mut self, op: &'static str, x: Var, rows: AxisTaps, cols: AxisTaps) -> Result<Var> {
        let value = resample::apply(self.value(x), &rows, &cols);
        self.push(op, value, Op::Resample { x, rows, cols })
    }

    pub fn resize_x2(&mut self, x: Var, mode: ResizeMode) -> Result<Var> {
        let s = self.shape(x);
        if s.h == 0 || s.w == 0 {
            return Err(Error::InvalidArgument {
                op: "resize_x2",
                msg: "empty spatial extent".into(),
            });
        }
        let rows = AxisTaps::upsample_x2(s.h, mode);
        let cols = AxisTaps::upsample_x2(s.w, mode);
        self.resample("resize_x2", x, rows, cols)
    }

    pub fn downsample(&mut self, x: Var, factor: usize, mode: DownsampleMode) -> Result<Var> {
        const OP: &str = "downsample";
        let s = self.shape(x);
        if factor == 0 {
            return Err(Error::InvalidArgument {
                op: OP,
                msg: "factor must be positive".into(),
            });
        }
        for (dim, value) in [("h", s.h), ("w", s.w)] {
            if value % factor != 0 || value == 0 {
                return Err(Error::Indivisible {
                    op: OP,
                    dim,
                    value,
                    divisor: factor,
                });
            }
        }
        let rows = AxisTaps::downsample(s.h, factor, mode);
        let cols = AxisTaps::downsample(s.w, factor, mode);
        self.resample(OP, x, rows, cols)
    }

    /// `(n, 4c, h, w) -> (n, c, 2h, 2w)`; channel group `dy * 2 + dx` lands at offset `(dy, dx)`.
    pub fn depth_to_space(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.c % 4 != 0 {
            return Err(Error::Indivisible {
                op: "depth_to_space",
                dim: "c",
                value: s.c,
                divisor: 4,
            });
        }
        let value = depth_to_space(self.value(x));
        self.push("depth_to_space", value, Op::DepthToSpace(x))
    }

    pub fn space_to_depth(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        for (dim, value) in [("h", s.h), ("w", s.w)] {
            if value % 2 != 0 {
                return Err(Error::Indivisible {
                    op: "space_to_depth",
                    dim,
                    value,
                    divisor: 2,
                });
            }
        }
        let value = space_to_depth(self.value(x));
        self.push("space_to_depth", value, Op::SpaceToDepth(x))
    }

    /// Sums every `group` consecutive channels.
    pub fn channel_sum(&mut self, x: Var, group: usize) -> Result<Var> {
        let s = self.shape(x);
        if group == 0 || s.c % group != 0 {
            return Err(Error::Indivisible {
                op: "channel_sum",
                dim: "c",
                value: s.c,
                divisor: group,
            });
        }
        let plane = s.plane();
        let mut out = Tensor::zeros(Shape::new(s.n, s.c / group, s.h, s.w));
        for (i, src) in self.value(x).data().chunks(plane).enumerate() {
            let (n, c) = (i / s.c, i % s.c);
            let j = n * (s.c / group) + c / group;
            for (o, v) in out.data_mut()[j * plane..(j + 1) * plane].iter_mut().zip(src) {
                *o += v;
            }
        }
        self.push("channel_sum", out, Op::ChannelSum { x, group })
    }

    fn unary(&mut self, name: &'static str, x: Var, kind: Unary) -> Result<Var> {
        let f: fn(f64) -> f64 = match kind {
            Unary::Relu => |v| if v > 0.0 { v } else { 0.0 },
            Unary::LeakyRelu => |v| if v > 0.0 { v } else { LEAKY_SLOPE * v },
            Unary::Selu => |v| {
                if v > 0.0 {
                    SELU_LAMBDA * v
                } else {
                    SELU_LAMBDA * SELU_ALPHA * v.exp_m1()
                }
            },
            Unary::Sigmoid => |v| 1.0 / (1.0 + (-v).exp()),
            Unary::Tanh => f64::tanh,
            Unary::Exp => f64::exp,
        };
        let value = self.value(x).map(f);
        self.push(name, value, Op::Unary { x, kind })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var) -> Result<Var> {
        self.unary("leaky_relu", x, Unary::LeakyRelu)
    }

    pub fn selu(&mut self, x: Var) -> Result<Var> {
        self.unary("selu", x, Unary::Selu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, Unary::Tanh)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, Unary::Exp)
    }

    /// Parametric ReLU with a single learnable slope `a` of shape `(1, 1, 1, 1)`.
    pub fn prelu(&mut self, x: Var, a: Var) -> Result<Var> {
        expect_dim("prelu", "slope count", 1, self.shape(a).numel())?;
        let slope = self.value(a).data()[0];
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push("prelu", value, Op::Prelu { x, a })
    }

    pub fn activation(&mut self, x: Var, kind: Activation, prelu_slope: Option<Var>) -> Result<Var> {
        match (kind, prelu_slope) {
            (Activation::None, None) => Ok(x),
            (Activation::Relu, None) => self.relu(x),
            (Activation::LeakyRelu, None) => self.leaky_relu(x),
            (Activation::Selu, None) => self.selu(x),
            (Activation::Prelu, Some(a)) => self.prelu(x, a),
            (kind, slope) => Err(Error::InvalidArgument {
                op: "activation",
                msg: format!("{kind:?} with prelu slope present = {}", slope.is_some()),
            }),
        }
    }

    /// Per-sample, per-channel normalization over the spatial extent followed
    /// by a learned scale and shift of length `c`.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        const OP: &str = "channel_norm";
        let s = self.shape(x);
        expect_dim(OP, "gamma length", s.c, self.shape(gamma).numel())?;
        expect_dim(OP, "beta length", s.c, self.shape(beta).numel())?;
        let plane = s.plane();
        let mut xhat = Tensor::zeros(s);
        let mut inv_std = Vec::with_capacity(s.n * s.c);
        for (src, dst) in self.value(x).data().chunks(plane).zip(xhat.data_mut().chunks_mut(plane)) {
            let mean = src.iter().sum::<f64>() / plane as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (d, v) in dst.iter_mut().zip(src) {
                *d = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let c = i % s.c;
            chunk.iter_mut().for_each(|v| *v = g[c] * *v + b[c]);
        }
        self.push(
            OP,
            out,
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push("add", value, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push("mul", value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.push("scale", value, Op::Scale(x, factor))
    }

    /// Channels `[start, start + len)`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if len == 0 || start + len > s.c {
            return Err(Error::InvalidArgument {
                op: "slice_channels",
                msg: format!("range {start}..{} outside {} channels", start + len, s.c),
            });
        }
        let plane = s.plane();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(s.n * len * plane);
        for n in 0..s.n {
            let off = (n * s.c + start) * plane;
            data.extend_from_slice(&src[off..off + len * plane]);
        }
        let value = Tensor::from_vec(Shape::new(s.n, len, s.h, s.w), data)?;
        self.push("slice_channels", value, Op::SliceChannels { x, start })
    }

    /// Log-softmax across channels at every `(n, h, w)` position.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let plane = s.plane();
        let src = self.value(x);
        let mut out = Tensor::zeros(s);
        for n in 0..s.n {
            for p in 0..plane {
                let idx = |c: usize| (n * s.c + c) * plane + p;
                let max = (0..s.c).map(|c| src.data()[idx(c)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..s.c).map(|c| (src.data()[idx(c)] - max).exp()).sum::<f64>().ln();
                for c in 0..s.c {
                    out.data_mut()[idx(c)] = src.data()[idx(c)] - lse;
                }
            }
        }
        self.push("log_softmax", out, Op::LogSoftmax(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x))
    }

    /// Mean of squared differences.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mse_loss", self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let mse = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / av.len() as f64;
        self.push("mse_loss", Tensor::scalar(mse), Op::Mse { a, b })
    }

    /// `sum(mask * (a - b)^2) / sum(mask)`; `mask` is broadcast over channels
    /// when it has a single channel.
    pub fn masked_mse_loss(&mut self, a: Var, b: Var, mask: &Tensor) -> Result<Var> {
        const OP: &str = "masked_mse_loss";
        let s = self.shape(a);
        same_shape(OP, s, self.shape(b))?;
        let mask = broadcast_channels(OP, mask, s)?;
        let observed = mask.sum();
        if observed <= 0.0 {
            return Err(Error::NothingObserved);
        }
        let (av, bv) = (self.value(a), self.value(b));
        let total: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .zip(mask.data())
            .map(|((x, y), m)| m * (x - y) * (x - y))
            .sum();
        self.push(
            OP,
            Tensor::scalar(total / observed),
            Op::MaskedMse {
                a,
                b,
                mask,
                observed,
            },
        )
    }

    /// Records an externally computed value with a caller-supplied backward rule.
    pub fn custom(&mut self, name: &str, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Result<Var> {
        self.push(
            name,
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
        )
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&mut self, loss: Var, params: &mut ParamStore) -> Result<()> {
        self.check_scalar(loss)?;
        self.backward_with_seed(loss, Tensor::full(self.shape(loss), 1.0), params)
    }

    /// Backpropagates from a scalar output, leaving parameter gradients on
    /// the tape only (readable through [`Tape::grad`]).
    pub fn backward_detached(&mut self, loss: Var) -> Result<()> {
        self.check_scalar(loss)?;
        self.propagate(loss, Tensor::full(self.shape(loss), 1.0))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `out`) to every
    /// input, accumulating parameter gradients into `params`.
    pub fn backward_with_seed(&mut self, out: Var, seed: Tensor, params: &mut ParamStore) -> Result<()> {
        self.propagate(out, seed)?;
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                params.accumulate_grad(*id, g);
            }
        }
        Ok(())
    }

    fn check_scalar(&self, loss: Var) -> Result<()> {
        let len = self.value(loss).len();
        if len != 1 {
            return Err(Error::NotScalar { len });
        }
        Ok(())
    }

    fn propagate(&mut self, out: Var, seed: Tensor) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardAlreadyRun);
        }
        same_shape("backward", self.shape(out), seed.shape())?;
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            let node = &self.nodes[i];
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("backward of {}", node.name),
                });
            }
            self.backprop_node(node, g, lower)?;
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv_backward(val(*x), val(*w), g, *geom, b.is_some());
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
                if let (Some(b), Some(db)) = (b, db) {
                    accumulate(grads, *b, db.reshaped(val(*b).shape()));
                }
            }
            Op::ConvTranspose { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv_transpose_backward(val(*x), val(*w), g, *geom, b.is_some());
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
                if let (Some(b), Some(db)) = (b, db) {
                    accumulate(grads, *b, db.reshaped(val(*b).shape()));
                }
            }
            Op::Resample { x, rows, cols } => {
                accumulate(grads, *x, resample::apply_transpose(g, rows, cols));
            }
            Op::DepthToSpace(x) => accumulate(grads, *x, space_to_depth(g)),
            Op::SpaceToDepth(x) => accumulate(grads, *x, depth_to_space(g)),
            Op::ChannelSum { x, group } => {
                let s = val(*x).shape();
                let plane = s.plane();
                let gd = g.data();
                let mut dx = Tensor::zeros(s);
                for (i, dst) in dx.data_mut().chunks_mut(plane).enumerate() {
                    let (n, c) = (i / s.c, i % s.c);
                    let j = n * (s.c / group) + c / group;
                    dst.copy_from_slice(&gd[j * plane..(j + 1) * plane]);
                }
                accumulate(grads, *x, dx);
            }
            Op::Unary { x, kind } => {
                let (xv, y) = (val(*x), &node.value);
                let dx = match kind {
                    Unary::Relu => zip3(g, xv, y, |g, x, _| if x > 0.0 { g } else { 0.0 }),
                    Unary::LeakyRelu => zip3(g, xv, y, |g, x, _| if x > 0.0 { g } else { LEAKY_SLOPE * g }),
                    Unary::Selu => zip3(g, xv, y, |g, x, y| {
                        if x > 0.0 {
                            SELU_LAMBDA * g
                        } else {
                            (y + SELU_LAMBDA * SELU_ALPHA) * g
                        }
                    }),
                    Unary::Sigmoid => zip3(g, xv, y, |g, _, y| g * y * (1.0 - y)),
                    Unary::Tanh => zip3(g, xv, y, |g, _, y| g * (1.0 - y * y)),
                    Unary::Exp => zip3(g, xv, y, |g, _, y| g * y),
                };
                accumulate(grads, *x, dx);
            }
            Op::Prelu { x, a } => {
                let xv = val(*x);
                let slope = val(*a).data()[0];
                let dx = xv.zip_map(g, |x, g| if x > 0.0 { g } else { slope * g });
                let da: f64 = xv.data().iter().zip(g.data()).filter(|(x, _)| **x <= 0.0).map(|(x, g)| x * g).sum();
                accumulate(grads, *x, dx);
                accumulate(grads, *a, Tensor::full(val(*a).shape(), da));
            }
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = xhat.shape();
                let plane = s.plane();
                let gam = val(*gamma).data();
                let mut dx = Tensor::zeros(s);
                let mut dgamma = vec![0.0; s.c];
                let mut dbeta = vec![0.0; s.c];
                let chunks = xhat.data().chunks(plane).zip(g.data().chunks(plane)).zip(dx.data_mut().chunks_mut(plane));
                for (i, ((xh, gy), dst)) in chunks.enumerate() {
                    let c = i % s.c;
                    let sum_g: f64 = gy.iter().sum();
                    let sum_gx: f64 = gy.iter().zip(xh).map(|(a, b)| a * b).sum();
                    dgamma[c] += sum_gx;
                    dbeta[c] += sum_g;
                    let k = gam[c] * inv_std[i] / plane as f64;
                    for ((d, gv), xv) in dst.iter_mut().zip(gy).zip(xh) {
                        *d = k * (plane as f64 * gv - sum_g - xv * sum_gx);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, Tensor::from_vec(val(*gamma).shape(), dgamma)?);
                accumulate(grads, *beta, Tensor::from_vec(val(*beta).shape(), dbeta)?);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.zip_map(val(*b), |g, y| g * y));
                accumulate(grads, *b, g.zip_map(val(*a), |g, x| g * x));
            }
            Op::Scale(x, f) => accumulate(grads, *x, g.map(|v| v * f)),
            Op::SliceChannels { x, start } => {
                let s = val(*x).shape();
                let plane = s.plane();
                let len = g.shape().c;
                let mut dx = Tensor::zeros(s);
                for n in 0..s.n {
                    let off = (n * s.c + start) * plane;
                    dx.data_mut()[off..off + len * plane]
                        .copy_from_slice(&g.data()[n * len * plane..(n + 1) * len * plane]);
                }
                accumulate(grads, *x, dx);
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let s = y.shape();
                let plane = s.plane();
                let mut dx = Tensor::zeros(s);
                for n in 0..s.n {
                    for p in 0..plane {
                        let idx = |c: usize| (n * s.c + c) * plane + p;
                        let gsum: f64 = (0..s.c).map(|c| g.data()[idx(c)]).sum();
                        for c in 0..s.c {
                            dx.data_mut()[idx(c)] = g.data()[idx(c)] - y.data()[idx(c)].exp() * gsum;
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                accumulate(grads, *x, Tensor::full(val(*x).shape(), gv));
            }
            Op::Mse { a, b } => {
                let k = 2.0 * g.data()[0] / val(*a).len() as f64;
                let da = val(*a).zip_map(val(*b), |x, y| k * (x - y));
                accumulate(grads, *b, da.map(|v| -v));
                accumulate(grads, *a, da);
            }
            Op::MaskedMse { a, b, mask, observed } => {
                let k = 2.0 * g.data()[0] / observed;
                let diff = val(*a).zip_map(val(*b), |x, y| x - y);
                let da = diff.zip_map(mask, |d, m| k * m * d);
                accumulate(grads, *b, da.map(|v| -v));
                accumulate(grads, *a, da);
            }
            Op::Custom { inputs, backward } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let dins = backward(&ins, &node.value, g);
                if dins.len() != inputs.len() {
                    return Err(Error::InvalidArgument {
                        op: "custom",
                        msg: format!("{} returned {} gradients for {} inputs", node.name, dins.len(), inputs.len()),
                    });
                }
                for (v, d) in inputs.iter().zip(dins) {
                    same_shape("custom backward", val(*v).shape(), d.shape())?;
                    accumulate(grads, *v, d);
                }
            }
        }
        Ok(())
    }
}

fn zip3(g: &Tensor, x: &Tensor, y: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
    let data = g
        .data()
        .iter()
        .zip(x.data())
        .zip(y.data())
        .map(|((&g, &x), &y)| f(g, x, y))
        .collect();
    Tensor::from_vec(g.shape(), data).expect("matching shapes")
}

fn broadcast_channels(op: &'static str, mask: &Tensor, target: Shape) -> Result<Tensor> {
    let ms = mask.shape();
    expect_dim(op, "mask n", target.n, ms.n)?;
    expect_dim(op, "mask h", target.h, ms.h)?;
    expect_dim(op, "mask w", target.w, ms.w)?;
    if ms.c == target.c {
        return Ok(mask.clone());
    }
    expect_dim(op, "mask c", 1, ms.c)?;
    Ok(Tensor::from_fn(target, |n, _, h, w| mask.at(n, 0, h, w)))
}

pub(crate) fn depth_to_space(x: &Tensor) -> Tensor {
    let s = x.shape();
    let c = s.c / 4;
    let mut out = Tensor::zeros(Shape::new(s.n, c, 2 * s.h, 2 * s.w));
    for n in 0..s.n {
        for g in 0..4 {
            let (dy, dx) = (g / 2, g % 2);
            for ci in 0..c {
                for h in 0..s.h {
                    for w in 0..s.w {
                        out.set(n, ci, 2 * h + dy, 2 * w + dx, x.at(n, g * c + ci, h, w));
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn space_to_depth(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (h2, w2) = (s.h / 2, s.w / 2);
    let mut out = Tensor::zeros(Shape::new(s.n, 4 * s.c, h2, w2));
    for n in 0..s.n {
        for g in 0..4 {
            let (dy, dx) = (g / 2, g % 2);
            for ci in 0..s.c {
                for h in 0..h2 {
                    for w in 0..w2 {
                        out.set(n, g * s.c + ci, h, w, x.at(n, ci, 2 * h + dy, 2 * w + dx));
                    }
                }
            }
        }
    }
    out
}
