use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("head {index} at ({x}, {y}) lies outside the {width}x{height} image")]
    HeadOutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error(
        "degenerate count distribution: all {n} counts equal {value}; \
         fall back to uniform-width group boundaries"
    )]
    DegenerateDistribution { n: usize, value: f64 },

    #[error("input of {height}x{width} is not a multiple of {multiple} in both dimensions; pad it with pad_input first")]
    UnpaddedInput {
        height: usize,
        width: usize,
        multiple: usize,
    },

    #[error("channel mismatch at {layer}: expected {expected} input channels, found {actual}")]
    ChannelMismatch {
        layer: String,
        expected: usize,
        actual: usize,
    },

    #[error(
        "shape mismatch for tensor `{name}`: expected {}, found {}",
        describe_shape(.expected.as_deref()),
        describe_shape(.actual.as_deref())
    )]
    ShapeMismatch {
        name: String,
        /// `None` when the configuration has no such tensor.
        expected: Option<Vec<usize>>,
        /// `None` when the tensor is absent.
        actual: Option<Vec<usize>>,
    },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("training stopped by observer: {0}")]
    Observer(String),
}

fn describe_shape(shape: Option<&[usize]>) -> String {
    match shape {
        Some(s) => alloc::format!("{s:?}"),
        None => "no such tensor".into(),
    }
}
