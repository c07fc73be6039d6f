//! Builds an encoder-decoder network from a genome.
//!
//! Levels are numbered `1..=d`; level `k` runs at resolution `H / 2^(k-1)`.
//! Boundary `b` sits between levels `b + 1` and `b`. Each boundary owns one
//! upsampling cell and, when some negative-offset connection needs it, one
//! stride-2 downsampling convolution. Cross-level connections of any length
//! are realized by chaining these per-boundary operators, so they never own
//! private resampling weights.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::genome::{ArchGenome, SpatialOp, TransformOp, CHANNEL_SUM_GROUP};
use crate::tensor::{Activation, ConvSpec, ParamId, ParamStore, ResizeMode, Shape, Tape, Tensor, Var, NORM_EPS};

/// Initial slope of every PReLU activation.
pub const PRELU_INIT: f64 = 0.25;

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
    spec: ConvSpec,
}

impl Conv {
    fn new(store: &mut ParamStore, seed: u64, name: &str, cin: usize, cout: usize, k: usize, spec: ConvSpec) -> Self {
        let w = store.add_he_normal(seed, &format!("{name}.w"), Shape::new(cout, cin, k, k), cin * k * k);
        let b = store.add_full(&format!("{name}.b"), Shape::vector(cout), 0.0);
        Conv { w, b, spec }
    }

    fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }

    fn apply(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (cx.p(self.w)?, cx.p(self.b)?);
        cx.tape.conv2d(x, w, Some(b), self.spec)
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        Norm {
            gamma: store.add_full(&format!("{name}.gamma"), Shape::vector(c), 1.0),
            beta: store.add_full(&format!("{name}.beta"), Shape::vector(c), 0.0),
        }
    }

    fn apply(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (cx.p(self.gamma)?, cx.p(self.beta)?);
        cx.tape.channel_norm(x, g, b, NORM_EPS)
    }
}

/// `[entry conv, conv k=3, channel_norm, leaky_relu]`; the entry conv has
/// stride 2 on every level but the first.
#[derive(Debug, Clone)]
struct EncoderBlock {
    entry: Conv,
    conv: Conv,
    norm: Norm,
}

/// `[conv k=3, channel_norm, leaky_relu]`.
#[derive(Debug, Clone)]
struct DecoderBlock {
    conv: Conv,
    norm: Norm,
}

#[derive(Debug, Clone)]
enum Transform {
    Conv(Conv),
    ChannelSum,
    Separable { dw: ParamId, pw: ParamId, b: ParamId, dilation: usize, pad: usize },
    Depthwise { w: ParamId, b: ParamId, dilation: usize, pad: usize },
    Identity,
}

#[derive(Debug, Clone)]
struct UpCell {
    spatial_op: SpatialOp,
    transposed: Option<(ParamId, ParamId)>,
    adapter: Option<Conv>,
    transform: Transform,
    act: Activation,
    prelu: Option<ParamId>,
    ids: Vec<ParamId>,
}

/// Channel count a transform expects, given the spatial op's output width.
fn transform_input_width(op: TransformOp, spatial_width: usize, width: usize) -> usize {
    match op {
        TransformOp::Conv2d | TransformOp::SeparableConv => spatial_width,
        TransformOp::ChannelSum => CHANNEL_SUM_GROUP * width,
        TransformOp::DepthwiseConv | TransformOp::Identity => width,
    }
}

impl UpCell {
    fn new(store: &mut ParamStore, seed: u64, name: &str, genome: &ArchGenome) -> Self {
        let c = genome.width;
        let cell = genome.cell;
        let first = store.len();

        let transposed = (cell.spatial_op == SpatialOp::TransposedConv).then(|| {
            let w = store.add_he_normal(seed, &format!("{name}.spatial.w"), Shape::new(c, c, 4, 4), c * 4);
            let b = store.add_full(&format!("{name}.spatial.b"), Shape::vector(c), 0.0);
            (w, b)
        });
        let spatial_width = if cell.spatial_op == SpatialOp::DepthToSpace { c / 4 } else { c };
        let needed = transform_input_width(cell.transform_op, spatial_width, c);
        let adapter = (needed != spatial_width)
            .then(|| Conv::new(store, seed, &format!("{name}.adapter"), spatial_width, needed, 1, ConvSpec::new(1, 1, 0)));

        let (k, dil) = (cell.kernel, cell.dilation);
        let pad = dil * (k - 1) / 2;
        let tname = format!("{name}.transform");
        let transform = match cell.transform_op {
            TransformOp::Conv2d => Transform::Conv(Conv::new(store, seed, &tname, needed, c, k, ConvSpec::same(k, dil))),
            TransformOp::ChannelSum => Transform::ChannelSum,
            TransformOp::SeparableConv => Transform::Separable {
                dw: store.add_he_normal(seed, &format!("{tname}.dw"), Shape::new(needed, 1, k, k), k * k),
                pw: store.add_he_normal(seed, &format!("{tname}.pw"), Shape::new(c, needed, 1, 1), needed),
                b: store.add_full(&format!("{tname}.b"), Shape::vector(c), 0.0),
                dilation: dil,
                pad,
            },
            TransformOp::DepthwiseConv => Transform::Depthwise {
                w: store.add_he_normal(seed, &format!("{tname}.w"), Shape::new(c, 1, k, k), k * k),
                b: store.add_full(&format!("{tname}.b"), Shape::vector(c), 0.0),
                dilation: dil,
                pad,
            },
            TransformOp::Identity => Transform::Identity,
        };
        let prelu = (cell.act == Activation::Prelu).then(|| store.add_full(&format!("{name}.prelu"), Shape::scalar(), PRELU_INIT));
        UpCell {
            spatial_op: cell.spatial_op,
            transposed,
            adapter,
            transform,
            act: cell.act,
            prelu,
            ids: (first..store.len()).map(ParamId).collect(),
        }
    }

    fn apply(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let mut h = match self.spatial_op {
            SpatialOp::Bilinear => cx.tape.resize_x2(x, ResizeMode::Bilinear)?,
            SpatialOp::Bicubic => cx.tape.resize_x2(x, ResizeMode::Bicubic)?,
            SpatialOp::Nearest => cx.tape.resize_x2(x, ResizeMode::Nearest)?,
            SpatialOp::DepthToSpace => cx.tape.depth_to_space(x)?,
            SpatialOp::TransposedConv => {
                let (w, b) = self.transposed.expect("transposed conv weights");
                let (w, b) = (cx.p(w)?, cx.p(b)?);
                cx.tape.conv_transpose2d_x2(x, w, Some(b))?
            }
        };
        if let Some(adapter) = &self.adapter {
            h = adapter.apply(cx, h)?;
        }
        h = match &self.transform {
            Transform::Conv(conv) => conv.apply(cx, h)?,
            Transform::ChannelSum => cx.tape.channel_sum(h, CHANNEL_SUM_GROUP)?,
            &Transform::Separable { dw, pw, b, dilation, pad } => {
                let (dw, pw, b) = (cx.p(dw)?, cx.p(pw)?, cx.p(b)?);
                cx.tape.separable_conv2d(h, dw, pw, Some(b), dilation, pad)?
            }
            &Transform::Depthwise { w, b, dilation, pad } => {
                let (w, b) = (cx.p(w)?, cx.p(b)?);
                cx.tape.depthwise_conv2d(h, w, Some(b), dilation, pad)?
            }
            Transform::Identity => h,
        };
        let slope = self.prelu.map(|a| cx.p(a)).transpose()?;
        cx.tape.activation(h, self.act, slope)
    }
}

/// Tape plus a per-forward cache so each parameter is loaded once.
struct Ctx<'a> {
    tape: &'a mut Tape,
    store: &'a ParamStore,
    cache: HashMap<ParamId, Var>,
}

impl<'a> Ctx<'a> {
    fn new(tape: &'a mut Tape, store: &'a ParamStore) -> Self {
        Ctx {
            tape,
            store,
            cache: HashMap::new(),
        }
    }

    fn p(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.cache.get(&id) {
            return Ok(v);
        }
        let v = self.tape.param(self.store, id)?;
        self.cache.insert(id, v);
        Ok(v)
    }
}

/// A network instantiated from an [`ArchGenome`] together with its weights.
#[derive(Debug, Clone)]
pub struct Generator {
    pub genome: ArchGenome,
    pub params: ParamStore,
    encoder: Vec<EncoderBlock>,
    /// Index `b - 1` holds the cell of boundary `b`.
    up_cells: Vec<UpCell>,
    down_ops: Vec<Option<Conv>>,
    adapters: BTreeMap<(usize, isize), Conv>,
    decoder: Vec<DecoderBlock>,
    head: Conv,
}

impl Generator {
    pub fn build(genome: &ArchGenome, seed: u64) -> Result<Self> {
        genome.validate()?;
        let (d, c) = (genome.depth, genome.width);
        let mut store = ParamStore::new();
        let same3 = ConvSpec::same(3, 1);

        let encoder = (1..=d)
            .map(|k| {
                let name = format!("enc{k}");
                let entry = if k == 1 {
                    Conv::new(&mut store, seed, &format!("{name}.entry"), genome.z_channels, c, 3, same3)
                } else {
                    Conv::new(&mut store, seed, &format!("{name}.entry"), c, c, 3, ConvSpec::new(2, 1, 1))
                };
                EncoderBlock {
                    entry,
                    conv: Conv::new(&mut store, seed, &format!("{name}.conv"), c, c, 3, same3),
                    norm: Norm::new(&mut store, &format!("{name}.norm"), c),
                }
            })
            .collect();

        let up_cells = (1..d).map(|b| UpCell::new(&mut store, seed, &format!("cell{b}"), genome)).collect();

        let sites = active_sites(genome);
        let mut needs_down = BTreeSet::new();
        for &(k, delta) in &sites {
            if delta < 0 {
                let src = (k as isize + delta) as usize;
                needs_down.extend(src..k);
            }
        }
        let down_ops = (1..d)
            .map(|b| {
                needs_down
                    .contains(&b)
                    .then(|| Conv::new(&mut store, seed, &format!("down{b}"), c, c, 3, ConvSpec::new(2, 1, 1)))
            })
            .collect();

        let adapters = sites
            .iter()
            .map(|&(k, delta)| {
                let conv = Conv::new(&mut store, seed, &format!("link{k}{delta:+}"), c, c, 1, ConvSpec::new(1, 1, 0));
                ((k, delta), conv)
            })
            .collect();

        let decoder = (1..=d)
            .map(|k| DecoderBlock {
                conv: Conv::new(&mut store, seed, &format!("dec{k}.conv"), c, c, 3, same3),
                norm: Norm::new(&mut store, &format!("dec{k}.norm"), c),
            })
            .collect();
        let head = Conv::new(&mut store, seed, "head", c, 3, 1, ConvSpec::new(1, 1, 0));

        Ok(Generator {
            genome: genome.clone(),
            params: store,
            encoder,
            up_cells,
            down_ops,
            adapters,
            decoder,
            head,
        })
    }

    pub fn depth(&self) -> usize {
        self.genome.depth
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Parameters of the upsampling cell at boundary `b` (between levels
    /// `b + 1` and `b`).
    pub fn cell_param_ids(&self, boundary: usize) -> &[ParamId] {
        &self.up_cells[boundary - 1].ids
    }

    /// Parameters of the 1x1 adapter at the merge site `(level, offset)`, if
    /// that connection is active.
    pub fn adapter_param_ids(&self, level: usize, offset: isize) -> Option<[ParamId; 2]> {
        self.adapters.get(&(level, offset)).map(Conv::ids)
    }

    /// Number of connection-site adapters.
    pub fn adapter_count(&self) -> usize {
        self.adapters.len()
    }

    /// Number of boundaries that own a downsampling convolution.
    pub fn down_op_count(&self) -> usize {
        self.down_ops.iter().flatten().count()
    }

    pub fn check_input(&self, shape: Shape) -> Result<()> {
        if shape.c != self.genome.z_channels {
            return Err(Error::Shape {
                op: "generator",
                dim: "input channels",
                expected: self.genome.z_channels,
                found: shape.c,
            });
        }
        let divisor = 1 << (self.depth() - 1);
        for (dim, value) in [("height", shape.h), ("width", shape.w)] {
            if value == 0 || value % divisor != 0 {
                return Err(Error::Indivisible {
                    op: "generator",
                    dim,
                    value,
                    divisor,
                });
            }
        }
        Ok(())
    }

    /// Records the full network on `tape` and returns the `(n, 3, H, W)`
    /// output in `[0, 1]`.
    pub fn forward(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        self.forward_impl(tape, z, false)
    }

    fn forward_impl(&self, tape: &mut Tape, z: Var, descending_merge: bool) -> Result<Var> {
        self.check_input(tape.shape(z))?;
        let mut cx = Ctx::new(tape, &self.params);
        let d = self.depth();

        let mut features = Vec::with_capacity(d);
        let mut h = z;
        for block in &self.encoder {
            h = block.entry.apply(&mut cx, h)?;
            h = block.conv.apply(&mut cx, h)?;
            h = block.norm.apply(&mut cx, h)?;
            h = cx.tape.leaky_relu(h)?;
            features.push(h);
        }

        let mut offsets: Vec<isize> = self.genome.pattern.active_offsets().collect();
        if descending_merge {
            offsets.reverse();
        }
        let mut below: Option<Var> = None;
        for k in (1..=d).rev() {
            let mut merged = match below {
                None => features[d - 1],
                Some(prev) => self.up_cells[k - 1].apply(&mut cx, prev)?,
            };
            for &delta in &offsets {
                let src = k as isize + delta;
                if !(1..=d as isize).contains(&src) {
                    continue;
                }
                let link = self.chain(&mut cx, features[src as usize - 1], src as usize, k)?;
                merged = cx.tape.add(merged, link)?;
            }
            let block = &self.decoder[k - 1];
            let mut h = block.conv.apply(&mut cx, merged)?;
            h = block.norm.apply(&mut cx, h)?;
            below = Some(cx.tape.leaky_relu(h)?);
        }
        let out = self.head.apply(&mut cx, below.expect("depth >= 2"))?;
        cx.tape.sigmoid(out)
    }

    /// Evaluates the network on `z` without keeping the tape.
    pub fn output(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let z = tape.constant(z.clone())?;
        let out = self.forward(&mut tape, z)?;
        Ok(tape.value(out).clone())
    }

    /// Carries a level-`from` feature to level `to` through the shared
    /// boundary operators, then through the merge-site adapter when the
    /// connection `(to, from - to)` is active.
    pub fn resample_chain(&self, tape: &mut Tape, feature: Var, from: usize, to: usize) -> Result<Var> {
        let d = self.depth();
        for (name, level) in [("from_level", from), ("to_level", to)] {
            if !(1..=d).contains(&level) {
                return Err(Error::InvalidArgument {
                    op: "resample_chain",
                    msg: format!("{name} {level} outside [1, {d}]"),
                });
            }
        }
        let mut cx = Ctx::new(tape, &self.params);
        self.chain(&mut cx, feature, from, to)
    }

    fn chain(&self, cx: &mut Ctx, feature: Var, from: usize, to: usize) -> Result<Var> {
        let mut h = feature;
        if from > to {
            for b in (to..from).rev() {
                h = self.up_cells[b - 1].apply(cx, h)?;
            }
        } else {
            for b in from..to {
                let down = self.down_ops[b - 1].as_ref().ok_or_else(|| Error::InvalidArgument {
                    op: "resample_chain",
                    msg: format!("no downsampling operator at boundary {b}"),
                })?;
                h = down.apply(cx, h)?;
            }
        }
        match self.adapters.get(&(to, from as isize - to as isize)) {
            Some(adapter) => adapter.apply(cx, h),
            None => Ok(h),
        }
    }
}

/// Connection sites `(decoder level, offset)` whose source level exists.
fn active_sites(genome: &ArchGenome) -> Vec<(usize, isize)> {
    let d = genome.depth as isize;
    let offsets: Vec<isize> = genome.pattern.active_offsets().collect();
    (1..=d)
        .flat_map(|k| offsets.iter().filter(move |&&o| (1..=d).contains(&(k + o))).map(move |&o| (k as usize, o)))
        .collect()
}
