use thiserror::Error;

pub type Result<T> = std::result::Result<T, DfpError>;

#[derive(Debug, Error)]
pub enum DfpError {
    #[error("non-finite value {value} at element {index}")]
    NonFinite { index: usize, value: f32 },

    #[error("tensor is empty")]
    EmptyTensor,

    #[error("shape {shape:?} holds {expected} elements but {actual} were given")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("bit width {0} outside [2, 16]")]
    BitWidth(u32),

    #[error("pre-shift {pre_shift} must be smaller than bit width {bits}")]
    PreShift { pre_shift: u32, bits: u32 },

    #[error("element {index} = {value} does not fit a {bits}-bit DFP element")]
    ElementRange { index: usize, value: i32, bits: u32 },

    #[error("shared exponent {0} outside the signed 8-bit range")]
    ExponentRange(i32),

    #[error("scale 2^{0} is not representable in FP32")]
    ScaleRange(i32),

    #[error("value overflows FP32 when dequantizing element {index}")]
    Fp32Overflow { index: usize },

    #[error("malformed tensor file at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("invalid blocking: {0}")]
    Blocking(String),

    #[error(
        "strict overflow policy violated: chain length {chain} exceeds limit {max_chain} \
         (safe_chain_length for these operands is {safe})"
    )]
    StrictPolicy {
        chain: usize,
        max_chain: usize,
        safe: u64,
    },

    #[error("precision mismatch in layer `{layer}`: {reason}")]
    PrecisionMismatch { layer: String, reason: String },

    #[error("layer `{0}` has no cached forward activations")]
    MissingCache(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at iteration {iteration} in layer `{layer}`: {report}")]
    Divergence {
        iteration: u64,
        layer: String,
        report: String,
    },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
