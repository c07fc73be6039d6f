//! The gradient-check suite behind the `gradcheck` command.

use std::io::Write;
use std::time::Instant;

use prior_forge_core::generator::Generator;
use prior_forge_core::genome::{ArchGenome, ConnectionPattern, SpatialOp, TransformOp, UpsampleCellGenome};
use prior_forge_core::tensor::{
    grad_check, grad_check_params, Activation, ConvSpec, DownsampleMode, GradCheckOptions, ParamId, ParamStore,
    ResizeMode, Shape, Tape, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOLERANCE: f64 = 1e-4;

type CaseFn = Box<dyn Fn() -> prior_forge_core::Result<f64> + Send + Sync>;

/// A named check returning the maximum relative error it observed.
pub struct GradCase {
    pub name: String,
    run: CaseFn,
}

impl GradCase {
    pub fn new(name: impl Into<String>, run: impl Fn() -> prior_forge_core::Result<f64> + Send + Sync + 'static) -> Self {
        GradCase {
            name: name.into(),
            run: Box::new(run),
        }
    }

    /// Checks `f` at a random input of `shape`, reduced to a scalar by a
    /// fixed random projection so every output coordinate matters.
    pub fn op<F>(name: &str, shape: Shape, f: F) -> Self
    where
        F: Fn(&mut Tape, Var) -> prior_forge_core::Result<Var> + Send + Sync + 'static,
    {
        let seed = name.bytes().map(u64::from).sum::<u64>();
        GradCase::new(name, move || {
            let x = random(shape, seed);
            grad_check(
                |t, v| {
                    let y = f(t, v)?;
                    project(t, y, seed + 1)
                },
                &x,
                GradCheckOptions::default(),
            )
        })
    }
}

pub fn random(shape: Shape, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

fn project(t: &mut Tape, y: Var, seed: u64) -> prior_forge_core::Result<Var> {
    let r = t.constant(random(t.shape(y), seed))?;
    let p = t.mul(y, r)?;
    t.sum(p)
}

/// Checks the gradient of a parametrized op with respect to its parameters.
fn param_case<F>(name: &str, params: ParamStore, input: Shape, f: F) -> GradCase
where
    F: Fn(&mut Tape, &ParamStore, Var) -> prior_forge_core::Result<Var> + Send + Sync + 'static,
{
    let seed = name.bytes().map(u64::from).sum::<u64>();
    GradCase::new(name, move || {
        let mut store = params.clone();
        let ids: Vec<ParamId> = store.ids().collect();
        let x = random(input, seed);
        grad_check_params(
            |t, s| {
                let v = t.constant(x.clone())?;
                let y = f(t, s, v)?;
                project(t, y, seed + 1)
            },
            &mut store,
            &ids,
            GradCheckOptions::default(),
        )
    })
}

fn store_with(shapes: &[(&str, Shape)], seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    for (i, (name, shape)) in shapes.iter().enumerate() {
        s.add(*name, random(*shape, seed + i as u64));
    }
    s
}

fn full_network_cases() -> Vec<GradCase> {
    let cell = UpsampleCellGenome {
        spatial_op: SpatialOp::Bicubic,
        transform_op: TransformOp::SeparableConv,
        kernel: 3,
        dilation: 2,
        act: Activation::Prelu,
    };
    let pattern = ConnectionPattern::with_offsets(3, &[-2, 0, 1, 2]).expect("valid offsets");
    let genome = ArchGenome::new(3, 4, 4, cell, pattern).expect("valid genome");
    let template = Generator::build(&genome, 5).expect("buildable genome");
    let z = random(Shape::new(1, 4, 16, 16), 6).map(|v| 0.05 * (v + 1.0));
    let (t1, z1) = (template.clone(), z.clone());
    vec![
        GradCase::new("network d=3 (params)", move || {
            let mut params = t1.params.clone();
            let ids: Vec<ParamId> = params.ids().collect();
            grad_check_params(
                |t, store| {
                    let mut g = t1.clone();
                    g.params = store.clone();
                    let v = t.constant(z1.clone())?;
                    let out = g.forward(t, v)?;
                    project(t, out, 7)
                },
                &mut params,
                &ids,
                GradCheckOptions::default(),
            )
        }),
        GradCase::new("network d=3 (input)", move || {
            grad_check(
                |t, v| {
                    let out = template.forward(t, v)?;
                    project(t, out, 7)
                },
                &z,
                GradCheckOptions::default(),
            )
        }),
    ]
}

/// Every differentiable op of the engine plus a full three-level generator.
pub fn standard_cases() -> Vec<GradCase> {
    let mut cases = vec![
        param_case(
            "conv2d",
            store_with(&[("w", Shape::new(3, 2, 3, 3)), ("b", Shape::vector(3))], 1),
            Shape::new(1, 2, 6, 6),
            |t, s, x| {
                let w = t.param(s, ParamId(0))?;
                let b = t.param(s, ParamId(1))?;
                let y = t.conv2d(x, w, Some(b), ConvSpec::same(3, 1))?;
                let dilated = t.conv2d(x, w, None, ConvSpec::same(3, 2))?;
                t.add(y, dilated)
            },
        ),
        GradCase::op("conv2d (stride 2)", Shape::new(1, 2, 6, 6), |t, v| {
            let w = t.constant(random(Shape::new(3, 2, 3, 3), 2))?;
            t.conv2d(v, w, None, ConvSpec::new(2, 1, 1))
        }),
        GradCase::op("conv2d (dilation 3)", Shape::new(1, 2, 7, 7), |t, v| {
            let w = t.constant(random(Shape::new(2, 2, 3, 3), 3))?;
            t.conv2d(v, w, None, ConvSpec::same(3, 3))
        }),
        param_case(
            "depthwise_conv2d",
            store_with(&[("w", Shape::new(3, 1, 3, 3)), ("b", Shape::vector(3))], 4),
            Shape::new(1, 3, 5, 5),
            |t, s, x| {
                let w = t.param(s, ParamId(0))?;
                let b = t.param(s, ParamId(1))?;
                t.depthwise_conv2d(x, w, Some(b), 2, 2)
            },
        ),
        param_case(
            "separable_conv2d",
            store_with(&[("dw", Shape::new(2, 1, 3, 3)), ("pw", Shape::new(4, 2, 1, 1)), ("b", Shape::vector(4))], 5),
            Shape::new(1, 2, 5, 5),
            |t, s, x| {
                let d = t.param(s, ParamId(0))?;
                let p = t.param(s, ParamId(1))?;
                let b = t.param(s, ParamId(2))?;
                t.separable_conv2d(x, d, p, Some(b), 1, 1)
            },
        ),
        param_case(
            "conv_transpose2d_x2",
            store_with(&[("w", Shape::new(2, 3, 4, 4)), ("b", Shape::vector(3))], 6),
            Shape::new(1, 2, 3, 3),
            |t, s, x| {
                let w = t.param(s, ParamId(0))?;
                let b = t.param(s, ParamId(1))?;
                t.conv_transpose2d_x2(x, w, Some(b))
            },
        ),
    ];
    for (mode, name) in [
        (ResizeMode::Nearest, "resize_x2 (nearest)"),
        (ResizeMode::Bilinear, "resize_x2 (bilinear)"),
        (ResizeMode::Bicubic, "resize_x2 (bicubic)"),
    ] {
        cases.push(GradCase::op(name, Shape::new(1, 2, 3, 4), move |t, v| t.resize_x2(v, mode)));
    }
    for (mode, name) in [(DownsampleMode::Box, "downsample (box)"), (DownsampleMode::Bicubic, "downsample (bicubic)")] {
        cases.push(GradCase::op(name, Shape::new(1, 2, 8, 8), move |t, v| t.downsample(v, 2, mode)));
    }
    cases.extend([
        GradCase::op("depth_to_space", Shape::new(1, 4, 2, 3), |t, v| t.depth_to_space(v)),
        GradCase::op("space_to_depth", Shape::new(1, 2, 4, 6), |t, v| t.space_to_depth(v)),
        GradCase::op("channel_sum", Shape::new(1, 4, 3, 3), |t, v| t.channel_sum(v, 2)),
        GradCase::op("relu", Shape::new(1, 3, 4, 4), |t, v| t.relu(v)),
        GradCase::op("leaky_relu", Shape::new(1, 3, 4, 4), |t, v| t.leaky_relu(v)),
        GradCase::op("selu", Shape::new(1, 3, 4, 4), |t, v| t.selu(v)),
        GradCase::op("sigmoid", Shape::new(1, 3, 4, 4), |t, v| t.sigmoid(v)),
        GradCase::op("tanh", Shape::new(1, 3, 4, 4), |t, v| t.tanh(v)),
        GradCase::op("exp", Shape::new(1, 3, 4, 4), |t, v| t.exp(v)),
        param_case("prelu", store_with(&[("a", Shape::vector(1))], 7), Shape::new(1, 3, 4, 4), |t, s, x| {
            let a = t.param(s, ParamId(0))?;
            t.prelu(x, a)
        }),
        GradCase::op("prelu (input)", Shape::new(1, 3, 4, 4), |t, v| {
            let a = t.constant(Tensor::full(Shape::vector(1), 0.25))?;
            t.prelu(v, a)
        }),
        param_case(
            "channel_norm",
            store_with(&[("gamma", Shape::vector(3)), ("beta", Shape::vector(3))], 8),
            Shape::new(1, 3, 4, 4),
            |t, s, x| {
                let g = t.param(s, ParamId(0))?;
                let b = t.param(s, ParamId(1))?;
                t.channel_norm(x, g, b, 1e-5)
            },
        ),
        GradCase::op("channel_norm (input)", Shape::new(1, 3, 4, 4), |t, v| {
            let g = t.constant(random(Shape::vector(3), 9))?;
            let b = t.constant(Tensor::zeros(Shape::vector(3)))?;
            t.channel_norm(v, g, b, 1e-5)
        }),
        GradCase::op("add", Shape::new(1, 2, 3, 3), |t, v| {
            let c = t.constant(random(Shape::new(1, 2, 3, 3), 10))?;
            t.add(v, c)
        }),
        GradCase::op("mul", Shape::new(1, 2, 3, 3), |t, v| t.mul(v, v)),
        GradCase::op("scale", Shape::new(1, 2, 3, 3), |t, v| t.scale(v, -1.7)),
        GradCase::op("slice_channels", Shape::new(1, 5, 2, 2), |t, v| t.slice_channels(v, 1, 3)),
        GradCase::op("log_softmax", Shape::new(1, 5, 2, 2), |t, v| t.log_softmax(v)),
        GradCase::op("sum", Shape::new(1, 2, 3, 3), |t, v| t.sum(v)),
        GradCase::op("mse_loss", Shape::new(1, 3, 4, 4), |t, v| {
            let b = t.constant(random(Shape::new(1, 3, 4, 4), 11))?;
            t.mse_loss(v, b)
        }),
        GradCase::op("masked_mse_loss", Shape::new(1, 3, 4, 4), |t, v| {
            let b = t.constant(random(Shape::new(1, 3, 4, 4), 12))?;
            let mask = Tensor::from_fn(Shape::new(1, 1, 4, 4), |_, _, h, w| ((h * 3 + w) % 2) as f64);
            t.masked_mse_loss(v, b, &mask)
        }),
    ]);
    cases.extend(full_network_cases());
    cases
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseOutcome {
    pub name: String,
    /// Max relative error, or the error message if the check could not run.
    pub result: Result<f64, String>,
}

impl CaseOutcome {
    pub fn passed(&self) -> bool {
        matches!(self.result, Ok(e) if e < TOLERANCE)
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub outcomes: Vec<CaseOutcome>,
    pub seconds: f64,
}

impl GradReport {
    pub fn failing(&self) -> Vec<String> {
        self.outcomes.iter().filter(|o| !o.passed()).map(|o| o.name.clone()).collect()
    }

    pub fn max_error(&self) -> f64 {
        self.outcomes.iter().filter_map(|o| o.result.as_ref().ok()).fold(0.0, |m, e| m.max(*e))
    }
}

/// Runs the cases in order, printing one line per case to `out`.
pub fn run_suite(cases: &[GradCase], out: &mut dyn Write) -> std::io::Result<GradReport> {
    let start = Instant::now();
    let mut outcomes = Vec::with_capacity(cases.len());
    for case in cases {
        let result = (case.run)().map_err(|e| e.to_string());
        let outcome = CaseOutcome {
            name: case.name.clone(),
            result,
        };
        let status = if outcome.passed() { "ok  " } else { "FAIL" };
        match &outcome.result {
            Ok(e) => writeln!(out, "{status} {:<28} max rel err {e:.3e}", outcome.name)?,
            Err(msg) => writeln!(out, "{status} {:<28} error: {msg}", outcome.name)?,
        }
        outcomes.push(outcome);
    }
    let report = GradReport {
        outcomes,
        seconds: start.elapsed().as_secs_f64(),
    };
    writeln!(
        out,
        "{} cases, {} failing, max rel err {:.3e}, {:.1} s",
        report.outcomes.len(),
        report.failing().len(),
        report.max_error(),
        report.seconds
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_backward_is_named() {
        let cases = vec![
            GradCase::op("relu", Shape::new(1, 1, 3, 3), |t, v| t.relu(v)),
            GradCase::op("doubled_wrong", Shape::new(1, 1, 3, 3), |t, v| {
                let value = t.value(v).map(|x| 2.0 * x);
                t.custom("doubled_wrong", &[v], value, Box::new(|_, _, g| vec![g.map(|x| 3.0 * x)]))
            }),
        ];
        let mut buf = Vec::new();
        let report = run_suite(&cases, &mut buf).unwrap();
        assert_eq!(report.failing(), vec!["doubled_wrong".to_string()]);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("FAIL doubled_wrong"), "{text}");
    }
}
