use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the core engine.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("softmax row {row} is entirely masked")]
    AllMaskedRow { row: usize },
    #[error("sequence {sequence} has no tissue patch (all pct entries are zero)")]
    AllBackground { sequence: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("duplicate parameter name {0}")]
    DuplicateParameter(String),
    #[error("layer index {index} out of range for {depth} layers")]
    LayerOutOfRange { index: usize, depth: usize },
    #[error("ISUP label {0} outside 0..=5")]
    LabelOutOfRange(i64),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("non-deterministic objective: repeated evaluation gave {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: u64, loss: f64 },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
