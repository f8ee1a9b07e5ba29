//! Crate-wide error types.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    #[error("{what} ({value}) must be divisible by {by}")]
    NotDivisible {
        what: String,
        value: usize,
        by: usize,
    },

    #[error("quantizer mode {mode} is only valid during training")]
    QuantizerMode { mode: String },

    #[error("tag id {id} exceeds the 13-bit dictionary capacity (8192 entries)")]
    TagOutOfRange { id: u32 },

    #[error("unknown tag {0:?}")]
    UnknownTag(String),

    #[error("tag dictionary error: {0}")]
    Dictionary(String),

    #[error("invalid feature site {site:?}")]
    InvalidSite { site: String },

    #[error("timestep {t} out of range (schedule has {steps} steps)")]
    TimestepOutOfRange { t: usize, steps: usize },

    #[error("invalid argument: {what}")]
    InvalidArgument { what: String },

    #[error("non-finite {component} loss during training")]
    NonFiniteLoss { component: String },

    #[error("missing prerequisite checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error(transparent)]
    Coding(#[from] CodingError),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),
}

/// Container sections, used to pinpoint truncation errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    Header,
    TagPayload,
    HyperLength,
    Hyper,
    MainLength,
    Main,
}

impl std::fmt::Display for Section {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Section::Header => "header",
            Section::TagPayload => "tag payload",
            Section::HyperLength => "hyper length",
            Section::Hyper => "hyper section",
            Section::MainLength => "main length",
            Section::Main => "main section",
        };
        f.write_str(name)
    }
}

/// Errors raised while parsing a serialized container.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("bad magic bytes {0:02x?}")]
    BadMagic([u8; 4]),

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),

    #[error("stream truncated inside {section}")]
    Truncated { section: Section },

    #[error("nonzero padding bits in tag section")]
    NonzeroPadding,

    #[error("invalid header: {0}")]
    InvalidHeader(String),

    #[error("{0} trailing bytes after container end")]
    TrailingBytes(usize),
}

/// Errors raised by the range coder.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodingError {
    #[error("symbol {symbol} outside table support of {support} entries")]
    SymbolOutOfSupport { symbol: i64, support: usize },

    #[error("truncated range-coded stream")]
    TruncatedStream,

    #[error("invalid cdf table: {0}")]
    InvalidTable(String),

    #[error("decoded value {0} has no matching symbol")]
    NoMatchingSymbol(u32),
}
