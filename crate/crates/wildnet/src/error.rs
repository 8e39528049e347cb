//! Error type shared by every module. Each variant names the module that
//! produced it so CLI diagnostics point at the failing subsystem.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Non-finite values where finite data is required.
    #[error("{module}: non-finite value in {what}")]
    NonFinite { module: &'static str, what: String },

    /// Incompatible array shapes or channel counts.
    #[error("{module}: shape mismatch: {details}")]
    Shape { module: &'static str, details: String },

    /// Out-of-range or inconsistent parameters.
    #[error("{module}: invalid parameter: {details}")]
    Parameter { module: &'static str, details: String },

    /// Malformed or inconsistent data (labels, files, mappings).
    #[error("{module}: data error: {details}")]
    Data { module: &'static str, details: String },

    /// Nearest-neighbor query against a store with no entries.
    #[error("wilddict: nearest-neighbor query on an empty store")]
    EmptyStore,

    /// Configuration file or override problems; maps to CLI exit code 2.
    #[error("config: {0}")]
    Config(String),

    #[error("{module}: {path}: {source}")]
    Io {
        module: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Training aborted on a non-finite objective; carries the diagnostic
    /// snapshot of all loss terms at the failing iteration.
    #[error(
        "trainharness: non-finite loss at iteration {iter} \
         (orig={l_orig}, sce={l_sce}, wce={l_wce}, sel={l_sel}, scr={l_scr})"
    )]
    NonFiniteLoss {
        iter: u64,
        l_orig: f64,
        l_sce: f64,
        l_wce: f64,
        l_sel: f64,
        l_scr: f64,
    },

    /// Corrupt or incompatible checkpoint/snapshot files.
    #[error("{module}: invalid file format: {details}")]
    Format { module: &'static str, details: String },
}

impl Error {
    pub fn io(module: &'static str, path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            module,
            path: path.into(),
            source,
        }
    }

    /// Exit code for the CLI contract: 2 for argument/config errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}
