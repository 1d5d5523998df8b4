use thiserror::Error;

/// Errors surfaced by the library. The CLI maps these onto process exit
/// codes: config/usage problems, data or checkpoint incompatibilities, and
/// numeric failures each get a distinct code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {found} (reader supports version {supported})")]
    BadVersion { found: u32, supported: u32 },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    BadChecksum { stored: u32, computed: u32 },

    #[error("truncated or malformed container: {0}")]
    Malformed(String),

    #[error("incompatible inputs: {0}")]
    Incompatible(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
