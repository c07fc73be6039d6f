use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A tensor dimension did not match what the operation requires.
    #[error("{op}: shape mismatch in {dim}: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        found: usize,
    },

    /// A spatial or channel extent is not divisible by the required factor.
    #[error("{op}: {dim} = {value} is not divisible by {divisor}")]
    Indivisible {
        op: &'static str,
        dim: &'static str,
        value: usize,
        divisor: usize,
    },

    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: String },

    #[error("backward was already run on this tape; build a new tape")]
    BackwardAlreadyRun,

    #[error("backward requires a scalar output, got {len} elements")]
    NotScalar { len: usize },

    #[error("decision slot {slot}: index {index} out of range (cardinality {cardinality})")]
    SlotIndex {
        slot: String,
        index: usize,
        cardinality: usize,
    },

    #[error("genome parse error at {path}: {msg}")]
    GenomeParse { path: String, msg: String },

    #[error("invalid genome: {0}")]
    Genome(String),

    #[error("fit diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("inpainting mask observes no pixels")]
    NothingObserved,

    #[error("{0}: empty input")]
    Empty(&'static str),
}
