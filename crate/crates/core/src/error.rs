use std::fmt;

/// Errors raised by tensor arithmetic, model construction and the training harness.
#[derive(Debug)]
pub enum Error {
    /// A tensor extent was zero or the data length did not match the shape.
    InvalidShape(String),
    /// Two operands have incompatible shapes.
    ShapeMismatch(String),
    /// A reduction was asked to combine zero tensors.
    EmptyReduction,
    /// `backward` was called on a tensor with more than one element.
    NonScalarLoss(Vec<usize>),
    /// A model, attention or patch configuration is inconsistent.
    InvalidConfig(String),
    /// A class label is outside `[0, classes)`.
    InvalidLabel { label: usize, classes: usize },
    /// A tuning method was attached to a graph that already carries one.
    AlreadyAttached(String),
    /// Checkpoint entries do not line up with the graph.
    CheckpointMismatch(String),
    /// A trainable parameter reached the optimizer without a gradient.
    MissingGradient(String),
    /// A synthetic dataset specification cannot be honoured.
    InvalidSpec(String),
    /// Evaluation was requested on a split with no samples.
    EmptySplit,
    /// A parameter name was looked up but is not registered.
    UnknownParameter(String),
    /// Writing an output artifact failed.
    WriteFailed(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidShape(msg) => write!(f, "invalid shape: {msg}"),
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::EmptyReduction => write!(f, "reduction over an empty list of tensors"),
            Error::NonScalarLoss(shape) => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::InvalidLabel { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            Error::AlreadyAttached(method) => {
                write!(f, "a tuning method ({method}) is already attached")
            }
            Error::CheckpointMismatch(msg) => write!(f, "checkpoint mismatch: {msg}"),
            Error::MissingGradient(name) => write!(f, "parameter `{name}` has no gradient"),
            Error::InvalidSpec(msg) => write!(f, "invalid dataset spec: {msg}"),
            Error::EmptySplit => write!(f, "cannot evaluate an empty split"),
            Error::UnknownParameter(name) => write!(f, "unknown parameter `{name}`"),
            Error::WriteFailed(msg) => write!(f, "write failed: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
