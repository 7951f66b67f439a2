use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("invalid spacing {0:?}: every axis must be strictly positive")]
    InvalidSpacing([f64; 3]),
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("volume too small for cubic B-spline: need at least 4 voxels per axis, got {0:?}")]
    TooSmallForSpline([usize; 3]),
    #[error("sample point {0:?} is outside the interpolation support")]
    OutOfSupport([f64; 3]),
    #[error("non-finite activations in layer {layer}")]
    NonFiniteLayer { layer: usize },
    #[error("degenerate batch: layer {layer} activations are constant in the {branch} branch")]
    DegenerateBatch { layer: usize, branch: &'static str },
    #[error("training diverged at iteration {iteration}")]
    Diverged { iteration: usize, history: Vec<f64> },
    #[error("insufficient overlap: {valid} in-support samples, need {required}")]
    InsufficientOverlap { valid: usize, required: usize },
    #[error("non-finite registration cost at iteration {iteration}")]
    NonFiniteCost { iteration: usize },
    #[error("empty mask")]
    EmptyMask,
    #[error("sample too small: need at least {required} values, got {actual}")]
    SampleTooSmall { required: usize, actual: usize },
    #[error("value {0} is outside the open support of the transformed density")]
    OutsideDensitySupport(f64),
    #[error("drift remap is not monotone: {0}")]
    NonMonotoneRemap(String),
    #[error("trace {0} has no Dice annotation")]
    MissingDice(usize),
}
