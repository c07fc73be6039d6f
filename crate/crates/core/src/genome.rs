//! The joint architecture search space.
//!
//! A genome holds one upsampling-cell choice (shared by every decoder level
//! boundary) and one connection pattern over level offsets (shared by every
//! decoder level), plus the fixed structural sizes of the network.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::tensor::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialOp {
    Bilinear,
    Bicubic,
    Nearest,
    DepthToSpace,
    TransposedConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformOp {
    Conv2d,
    ChannelSum,
    SeparableConv,
    DepthwiseConv,
    Identity,
}

impl SpatialOp {
    pub const ALL: [SpatialOp; 5] = [
        SpatialOp::Bilinear,
        SpatialOp::Bicubic,
        SpatialOp::Nearest,
        SpatialOp::DepthToSpace,
        SpatialOp::TransposedConv,
    ];
}

impl TransformOp {
    pub const ALL: [TransformOp; 5] = [
        TransformOp::Conv2d,
        TransformOp::ChannelSum,
        TransformOp::SeparableConv,
        TransformOp::DepthwiseConv,
        TransformOp::Identity,
    ];

    /// Whether kernel size and dilation affect this transform.
    pub fn uses_kernel(self) -> bool {
        !matches!(self, TransformOp::Identity | TransformOp::ChannelSum)
    }
}

pub const KERNEL_OPTIONS: [usize; 3] = [1, 3, 5];
pub const DILATION_OPTIONS: [usize; 3] = [1, 2, 3];
pub const ACTIVATION_OPTIONS: [Activation; 5] = [
    Activation::None,
    Activation::Relu,
    Activation::LeakyRelu,
    Activation::Selu,
    Activation::Prelu,
];
/// Channels merged by the channel-sum transform.
pub const CHANNEL_SUM_GROUP: usize = 2;
/// Largest depth [`enumerate_patterns`] accepts.
pub const MAX_ENUMERATION_DEPTH: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UpsampleCellGenome {
    pub spatial_op: SpatialOp,
    pub transform_op: TransformOp,
    pub kernel: usize,
    pub dilation: usize,
    pub act: Activation,
}

impl UpsampleCellGenome {
    /// Bilinear resize followed by a 3x3 convolution and LeakyReLU.
    pub fn baseline() -> Self {
        UpsampleCellGenome {
            spatial_op: SpatialOp::Bilinear,
            transform_op: TransformOp::Conv2d,
            kernel: 3,
            dilation: 1,
            act: Activation::LeakyRelu,
        }
    }
}

/// One bit per level offset `δ ∈ [-(d-1), d-1]`; decoder level `k` receives
/// the encoder feature of level `k + δ` for every set bit.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConnectionPattern {
    depth: usize,
    bits: Vec<bool>,
}

impl ConnectionPattern {
    pub fn new(depth: usize, bits: Vec<bool>) -> Result<Self> {
        if depth < 2 {
            return Err(Error::Genome(format!("depth must be at least 2, got {depth}")));
        }
        if bits.len() != 2 * depth - 1 {
            return Err(Error::GenomeParse {
                path: "pattern.bits".into(),
                msg: format!("expected {} entries for depth {depth}, found {}", 2 * depth - 1, bits.len()),
            });
        }
        Ok(ConnectionPattern { depth, bits })
    }

    pub fn empty(depth: usize) -> Self {
        ConnectionPattern {
            depth,
            bits: vec![false; 2 * depth - 1],
        }
    }

    /// Pattern with exactly the given offsets switched on.
    pub fn with_offsets(depth: usize, offsets: &[isize]) -> Result<Self> {
        let mut p = Self::empty(depth);
        for &o in offsets {
            let i = p.bit_index(o).ok_or_else(|| Error::Genome(format!("offset {o} outside depth {depth}")))?;
            p.bits[i] = true;
        }
        Ok(p)
    }

    /// Only the same-level connection, the classic additive skip.
    pub fn same_level(depth: usize) -> Self {
        Self::with_offsets(depth, &[0]).expect("offset 0 is always valid")
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn max_offset(&self) -> isize {
        self.depth as isize - 1
    }

    fn bit_index(&self, offset: isize) -> Option<usize> {
        let i = offset + self.max_offset();
        (0..self.bits.len() as isize).contains(&i).then_some(i as usize)
    }

    pub fn is_active(&self, offset: isize) -> bool {
        self.bit_index(offset).is_some_and(|i| self.bits[i])
    }

    /// Active offsets in ascending order.
    pub fn active_offsets(&self) -> impl Iterator<Item = isize> + '_ {
        let m = self.max_offset();
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(move |(i, _)| i as isize - m)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ArchGenome {
    pub depth: usize,
    pub width: usize,
    pub z_channels: usize,
    pub cell: UpsampleCellGenome,
    pub pattern: ConnectionPattern,
}

/// A decision slot in the fixed emission order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    SpatialOp,
    TransformOp,
    Kernel,
    Dilation,
    Act,
    PatternBit(isize),
}

impl Slot {
    pub fn cardinality(self) -> usize {
        match self {
            Slot::SpatialOp => SpatialOp::ALL.len(),
            Slot::TransformOp => TransformOp::ALL.len(),
            Slot::Kernel => KERNEL_OPTIONS.len(),
            Slot::Dilation => DILATION_OPTIONS.len(),
            Slot::Act => ACTIVATION_OPTIONS.len(),
            Slot::PatternBit(_) => 2,
        }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Slot::SpatialOp => f.write_str("spatial_op"),
            Slot::TransformOp => f.write_str("transform_op"),
            Slot::Kernel => f.write_str("kernel"),
            Slot::Dilation => f.write_str("dilation"),
            Slot::Act => f.write_str("act"),
            Slot::PatternBit(o) => write!(f, "pattern_bit[{o:+}]"),
        }
    }
}

/// `[spatial_op, transform_op, kernel, dilation, act, bit(-(d-1)), ..., bit(d-1)]`.
pub fn slot_schedule(depth: usize) -> Vec<Slot> {
    let m = depth as isize - 1;
    [Slot::SpatialOp, Slot::TransformOp, Slot::Kernel, Slot::Dilation, Slot::Act]
        .into_iter()
        .chain((-m..=m).map(Slot::PatternBit))
        .collect()
}

fn position<T: PartialEq>(options: &[T], value: &T) -> usize {
    options.iter().position(|o| o == value).expect("validated genome")
}

impl ArchGenome {
    pub fn new(depth: usize, width: usize, z_channels: usize, cell: UpsampleCellGenome, pattern: ConnectionPattern) -> Result<Self> {
        let g = ArchGenome {
            depth,
            width,
            z_channels,
            cell,
            pattern,
        };
        g.validate()?;
        Ok(g)
    }

    /// Bilinear + 3x3 conv cell with only same-level connections.
    pub fn baseline(depth: usize, width: usize, z_channels: usize) -> Result<Self> {
        Self::new(depth, width, z_channels, UpsampleCellGenome::baseline(), ConnectionPattern::same_level(depth.max(2)))
    }

    pub fn validate(&self) -> Result<()> {
        let parse = |path: &str, msg: String| Error::GenomeParse { path: path.into(), msg };
        if self.depth < 2 {
            return Err(parse("depth", format!("must be at least 2, got {}", self.depth)));
        }
        if self.width == 0 {
            return Err(parse("width", "must be positive".into()));
        }
        if self.z_channels == 0 {
            return Err(parse("z_channels", "must be positive".into()));
        }
        if self.pattern.depth != self.depth {
            return Err(parse(
                "pattern.bits",
                format!("pattern depth {} differs from genome depth {}", self.pattern.depth, self.depth),
            ));
        }
        if !KERNEL_OPTIONS.contains(&self.cell.kernel) {
            return Err(parse("cell.kernel", format!("{} not in {KERNEL_OPTIONS:?}", self.cell.kernel)));
        }
        if !DILATION_OPTIONS.contains(&self.cell.dilation) {
            return Err(parse("cell.dilation", format!("{} not in {DILATION_OPTIONS:?}", self.cell.dilation)));
        }
        if self.cell.spatial_op == SpatialOp::DepthToSpace && self.width % 4 != 0 {
            return Err(Error::Genome(format!(
                "width {} must be divisible by 4 for depth_to_space",
                self.width
            )));
        }
        Ok(())
    }

    pub fn to_decision_sequence(&self) -> Vec<(Slot, usize)> {
        let c = &self.cell;
        let mut seq = vec![
            (Slot::SpatialOp, position(&SpatialOp::ALL, &c.spatial_op)),
            (Slot::TransformOp, position(&TransformOp::ALL, &c.transform_op)),
            (Slot::Kernel, position(&KERNEL_OPTIONS, &c.kernel)),
            (Slot::Dilation, position(&DILATION_OPTIONS, &c.dilation)),
            (Slot::Act, position(&ACTIVATION_OPTIONS, &c.act)),
        ];
        let m = self.pattern.max_offset();
        seq.extend((-m..=m).map(|o| (Slot::PatternBit(o), self.pattern.is_active(o) as usize)));
        seq
    }

    /// Decodes option indices given in [`slot_schedule`] order.
    pub fn from_decision_sequence(indices: &[usize], depth: usize, width: usize, z_channels: usize) -> Result<Self> {
        if depth < 2 {
            return Err(Error::Genome(format!("depth must be at least 2, got {depth}")));
        }
        let schedule = slot_schedule(depth);
        if indices.len() != schedule.len() {
            return Err(Error::Genome(format!(
                "decision sequence has {} entries, depth {depth} needs {}",
                indices.len(),
                schedule.len()
            )));
        }
        for (slot, &index) in schedule.iter().zip(indices) {
            if index >= slot.cardinality() {
                return Err(Error::SlotIndex {
                    slot: slot.to_string(),
                    index,
                    cardinality: slot.cardinality(),
                });
            }
        }
        let cell = UpsampleCellGenome {
            spatial_op: SpatialOp::ALL[indices[0]],
            transform_op: TransformOp::ALL[indices[1]],
            kernel: KERNEL_OPTIONS[indices[2]],
            dilation: DILATION_OPTIONS[indices[3]],
            act: ACTIVATION_OPTIONS[indices[4]],
        };
        let pattern = ConnectionPattern::new(depth, indices[5..].iter().map(|&i| i == 1).collect())?;
        Self::new(depth, width, z_channels, cell, pattern)
    }

    /// Uniform draw over the whole space.
    pub fn sample_uniform<R: Rng + ?Sized>(rng: &mut R, depth: usize, width: usize, z_channels: usize) -> Result<Self> {
        let indices: Vec<usize> = slot_schedule(depth)
            .iter()
            .map(|s| rng.random_range(0..s.cardinality()))
            .collect();
        Self::from_decision_sequence(&indices, depth, width, z_channels)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&GenomeWire::from(self)).expect("genome serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let wire: GenomeWire = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::GenomeParse {
                path: if path == "." { "<root>".into() } else { path },
                msg: e.into_inner().to_string(),
            }
        })?;
        let pattern = ConnectionPattern::new(wire.depth.max(2), wire.pattern_bits)?;
        Self::new(wire.depth, wire.width, wire.z_channels, wire.cell, pattern)
    }
}

impl Serialize for ArchGenome {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        GenomeWire::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for ArchGenome {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let wire = GenomeWire::deserialize(d)?;
        let pattern = ConnectionPattern::new(wire.depth.max(2), wire.pattern_bits).map_err(serde::de::Error::custom)?;
        ArchGenome::new(wire.depth, wire.width, wire.z_channels, wire.cell, pattern).map_err(serde::de::Error::custom)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenomeWire {
    depth: usize,
    width: usize,
    z_channels: usize,
    cell: UpsampleCellGenome,
    pattern_bits: Vec<bool>,
}

impl From<&ArchGenome> for GenomeWire {
    fn from(g: &ArchGenome) -> Self {
        GenomeWire {
            depth: g.depth,
            width: g.width,
            z_channels: g.z_channels,
            cell: g.cell,
            pattern_bits: g.pattern.bits.clone(),
        }
    }
}

/// Number of options per cell slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OptionSets {
    pub spatial_ops: usize,
    pub transform_ops: usize,
    pub kernels: usize,
    pub dilations: usize,
    pub activations: usize,
}

impl Default for OptionSets {
    fn default() -> Self {
        OptionSets {
            spatial_ops: SpatialOp::ALL.len(),
            transform_ops: TransformOp::ALL.len(),
            kernels: KERNEL_OPTIONS.len(),
            dilations: DILATION_OPTIONS.len(),
            activations: ACTIVATION_OPTIONS.len(),
        }
    }
}

/// `(cell_count, pattern_count)`: the product of the cell option counts and
/// `2^(2d - 1)` shared connection patterns.
pub fn search_space_size(depth: usize, options: &OptionSets) -> (u128, u128) {
    assert!((2..=64).contains(&depth), "depth {depth} outside [2, 64]");
    let cells = [
        options.spatial_ops,
        options.transform_ops,
        options.kernels,
        options.dilations,
        options.activations,
    ]
    .iter()
    .map(|&n| n as u128)
    .product();
    (cells, 1u128 << (2 * depth - 1))
}

/// All `2^(2d - 1)` patterns in lexicographic bit order (first bit most
/// significant), from all-off to all-on.
pub fn enumerate_patterns(depth: usize) -> Result<impl Iterator<Item = ConnectionPattern>> {
    if !(2..=MAX_ENUMERATION_DEPTH).contains(&depth) {
        return Err(Error::InvalidArgument {
            op: "enumerate_patterns",
            msg: format!("depth {depth} outside [2, {MAX_ENUMERATION_DEPTH}]"),
        });
    }
    let len = 2 * depth - 1;
    Ok((0u64..1 << len).map(move |code| ConnectionPattern {
        depth,
        bits: (0..len).map(|i| code >> (len - 1 - i) & 1 == 1).collect(),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    #[test]
    fn zero_sequence_decodes_to_first_options() {
        let g = ArchGenome::from_decision_sequence(&[0; 12], 4, 32, 32).unwrap();
        assert_eq!(g.cell.spatial_op, SpatialOp::Bilinear);
        assert_eq!(g.cell.transform_op, TransformOp::Conv2d);
        assert_eq!((g.cell.kernel, g.cell.dilation), (1, 1));
        assert_eq!(g.cell.act, Activation::None);
        assert!(g.pattern.bits().iter().all(|b| !b));
        assert_eq!(g.to_decision_sequence().len(), 5 + 7);
        assert_eq!(slot_schedule(4).len(), 12);
    }

    #[test]
    fn out_of_range_index_names_the_slot() {
        let mut seq = vec![0; 12];
        seq[3] = 3;
        match ArchGenome::from_decision_sequence(&seq, 4, 32, 32) {
            Err(Error::SlotIndex { slot, index, cardinality }) => {
                assert_eq!(slot, "dilation");
                assert_eq!((index, cardinality), (3, 3));
            }
            other => panic!("{other:?}"),
        }
        seq[3] = 0;
        seq[11] = 2;
        assert!(matches!(
            ArchGenome::from_decision_sequence(&seq, 4, 32, 32),
            Err(Error::SlotIndex { slot, .. }) if slot == "pattern_bit[+3]"
        ));
    }

    #[test]
    fn thousand_random_genomes_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let g = ArchGenome::sample_uniform(&mut rng, 4, 32, 32).unwrap();
            let seq: Vec<usize> = g.to_decision_sequence().into_iter().map(|(_, i)| i).collect();
            let back = ArchGenome::from_decision_sequence(&seq, 4, 32, 32).unwrap();
            assert_eq!(back, g);
            assert_eq!(ArchGenome::from_json(&g.to_json()).unwrap(), g);
        }
    }

    #[test]
    fn space_sizes() {
        let opts = OptionSets::default();
        assert_eq!(search_space_size(5, &opts).1, 512);
        assert_eq!(search_space_size(3, &opts).1, 32);
        assert_eq!(search_space_size(4, &opts).0, 1125);
    }

    #[test]
    fn enumeration_is_exhaustive_and_ordered() {
        for (d, n) in [(2, 8usize), (3, 32), (4, 128), (5, 512)] {
            let all: Vec<_> = enumerate_patterns(d).unwrap().collect();
            assert_eq!(all.len(), n);
            let distinct: HashSet<_> = all.iter().map(|p| p.bits().to_vec()).collect();
            assert_eq!(distinct.len(), n);
            assert!(all[0].bits().iter().all(|b| !b));
            assert!(all[n - 1].bits().iter().all(|&b| b));
            assert!(all.windows(2).all(|w| w[0].bits() < w[1].bits()));
        }
        assert!(enumerate_patterns(7).is_err());
    }

    #[test]
    fn json_errors_carry_field_paths() {
        assert!(matches!(ArchGenome::from_json(""), Err(Error::GenomeParse { .. })));

        let g = ArchGenome::baseline(3, 16, 8).unwrap();
        let text = g.to_json().replace("\"bilinear\"", "\"lanczos\"");
        match ArchGenome::from_json(&text) {
            Err(Error::GenomeParse { path, .. }) => assert_eq!(path, "cell.spatial_op"),
            other => panic!("{other:?}"),
        }

        let text = g.to_json().replace("\"z_channels\": 8,", "");
        assert!(matches!(ArchGenome::from_json(&text), Err(Error::GenomeParse { .. })));

        let mut v: serde_json::Value = serde_json::from_str(&g.to_json()).unwrap();
        v["pattern_bits"] = serde_json::json!([false, false, true, false, false, false]);
        match ArchGenome::from_json(&v.to_string()) {
            Err(Error::GenomeParse { path, .. }) => assert_eq!(path, "pattern.bits"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_field_names_are_exact() {
        let g = ArchGenome::baseline(2, 8, 4).unwrap();
        let v: serde_json::Value = serde_json::from_str(&g.to_json()).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys, ["cell", "depth", "pattern_bits", "width", "z_channels"]);
        let cell: Vec<_> = v["cell"].as_object().unwrap().keys().cloned().collect();
        assert_eq!(cell, ["act", "dilation", "kernel", "spatial_op", "transform_op"]);
        assert_eq!(v["cell"]["act"], "leaky_relu");
    }

    #[test]
    fn depth_to_space_requires_width_multiple_of_four() {
        let mut seq = vec![0; 10];
        seq[0] = 3;
        assert!(ArchGenome::from_decision_sequence(&seq, 3, 30, 8).is_err());
        assert!(ArchGenome::from_decision_sequence(&seq, 3, 32, 8).is_ok());
    }

    proptest! {
        #[test]
        fn encodings_agree(seq in proptest::collection::vec(0usize..2, 7), cell in (0usize..5, 0usize..5, 0usize..3, 0usize..3, 0usize..5)) {
            let mut indices = vec![cell.0, cell.1, cell.2, cell.3, cell.4];
            indices.extend(seq);
            let g = ArchGenome::from_decision_sequence(&indices, 4, 32, 16).unwrap();
            let text = g.to_json();
            let parsed = ArchGenome::from_json(&text).unwrap();
            prop_assert_eq!(&parsed, &g);
            prop_assert_eq!(parsed.to_json(), text);
            let decoded: Vec<usize> = parsed.to_decision_sequence().into_iter().map(|(_, i)| i).collect();
            prop_assert_eq!(decoded, indices);
        }
    }
}
