use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("input of {height}x{width} is not divisible by {factor}; pad the image first")]
    NotDivisible {
        height: usize,
        width: usize,
        factor: usize,
    },

    #[error("value {value} is not on the quantization grid (t = {step})")]
    OffGrid { value: f64, step: f64 },

    #[error("invalid prior parameters: {0}")]
    InvalidPrior(String),

    #[error("frequency table: {0}")]
    Table(String),

    #[error("entropy decoding failed: {0}")]
    Decode(String),

    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    Version(u16),

    #[error("CRC mismatch in {section}: stored {stored:#010x}, computed {computed:#010x}")]
    Crc {
        section: &'static str,
        stored: u32,
        computed: u32,
    },

    #[error("stream truncated while reading {0}")]
    Truncated(&'static str),

    #[error("global model hash mismatch: stream expects {expected}, model is {actual}")]
    ModelHash { expected: String, actual: String },

    #[error("parameter update does not match the receiver side: {0}")]
    UpdateMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
