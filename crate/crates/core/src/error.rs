use std::io;
use std::path::PathBuf;

use crate::casstore::{FsckReport, ObjectId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Everything that can go wrong across the store, remote, deployment and
/// sandbox layers.
///
/// Variant names double as the diagnostic taxonomy printed by the CLI, see
/// [`Error::kind_name`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed runtime reference {input:?}: {reason}")]
    MalformedRef { input: String, reason: String },

    #[error("manifest is not valid TOML: {0}")]
    ManifestSyntax(String),

    #[error("manifest has an invalid value: {0}")]
    ManifestType(String),

    #[error("command {0:?} contains no words")]
    EmptyCommand(String),

    #[error("{} is not writable: {source}", path.display())]
    NotWritable { path: PathBuf, source: io::Error },

    #[error("{} is not a runtimebox repository: {reason}", path.display())]
    CorruptRepo { path: PathBuf, reason: String },

    #[error(
        "{} is on a filesystem without extended attribute support; \
         point XDG_DATA_HOME/HOME (or RUNTIMEBOX_DATA_HOME/RUNTIMEBOX_STATE_HOME) \
         at a directory on a filesystem that supports them",
        path.display()
    )]
    XattrUnsupported { path: PathBuf },

    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },

    #[error("{} cannot be stored: {kind} entries are not supported", path.display())]
    UnsupportedEntry { path: PathBuf, kind: &'static str },

    #[error("object {id} ({kind}) is missing from the repository")]
    MissingObject { id: ObjectId, kind: &'static str },

    #[error("cannot hardlink {} across filesystems; retry with copy mode", path.display())]
    CrossDevice { path: PathBuf },

    #[error("destination {} exists and is not empty", path.display())]
    DestNotEmpty { path: PathBuf },

    #[error("remote {name:?} already exists with url {url}")]
    DuplicateRemote { name: String, url: String },

    #[error("invalid remote name {0:?}: use letters, digits, '.', '_' or '-'")]
    InvalidRemoteName(String),

    #[error("unknown remote {0:?}")]
    UnknownRemote(String),

    #[error("no remote configured")]
    NoRemote,

    #[error("malformed url {url:?}: {reason}")]
    MalformedUrl { url: String, reason: String },

    #[error("runtime {0} not found")]
    RefNotFound(String),

    #[error("object {id} failed digest verification (got {actual})")]
    DigestMismatch { id: ObjectId, actual: ObjectId },

    #[error("network error fetching {path}: {reason}")]
    NetworkError { path: String, reason: String },

    #[error("remote is missing object {id} ({kind})")]
    IncompleteClosure { id: ObjectId, kind: &'static str },

    #[error("{reference} is already deployed at commit {current}; use --update")]
    AlreadyDeployed { reference: String, current: ObjectId },

    #[error("{reference} is not deployed")]
    NotDeployed { reference: String },

    #[error("a sandbox is running on {} (pid {pid})", path.display())]
    SandboxRunning { path: PathBuf, pid: i32 },

    #[error("malformed bind {0:?}: host and runtime paths must be absolute")]
    MalformedBind(String),

    #[error("{0}; on Windows use WSL, on macOS use lima")]
    KernelUnsupported(String),

    #[error("overlay mount failed: {0}")]
    MountFailed(String),

    #[error("launch failed: {0}")]
    LaunchFailed(String),

    #[error("{} does not look like a root filesystem tree (no bin/ or usr/bin/)", path.display())]
    NotARootTree { path: PathBuf },

    #[error("{} has not been initialised; run `maps package --initialise` first", path.display())]
    NotInitialised { path: PathBuf },

    #[error("nothing to commit: tree {tree} is identical to the current head of {reference}")]
    EmptyCommit { reference: String, tree: ObjectId },

    #[error("repository failed verification: {0}")]
    FsckFailed(FsckReport),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Stable taxonomy name used in single-line diagnostics.
    pub fn kind_name(&self) -> &'static str {
        match self {
            Error::MalformedRef { .. } => "MalformedRef",
            Error::ManifestSyntax(_) => "ManifestSyntax",
            Error::ManifestType(_) => "ManifestType",
            Error::EmptyCommand(_) => "EmptyCommand",
            Error::NotWritable { .. } => "NotWritable",
            Error::CorruptRepo { .. } => "CorruptRepo",
            Error::XattrUnsupported { .. } => "XattrUnsupported",
            Error::Io { .. } => "IoError",
            Error::UnsupportedEntry { .. } => "UnsupportedEntry",
            Error::MissingObject { .. } => "MissingObject",
            Error::CrossDevice { .. } => "CrossDevice",
            Error::DestNotEmpty { .. } => "DestNotEmpty",
            Error::DuplicateRemote { .. } => "DuplicateRemote",
            Error::InvalidRemoteName(_) => "InvalidRemoteName",
            Error::UnknownRemote(_) => "UnknownRemote",
            Error::NoRemote => "NoRemote",
            Error::MalformedUrl { .. } => "MalformedUrl",
            Error::RefNotFound(_) => "RefNotFound",
            Error::DigestMismatch { .. } => "DigestMismatch",
            Error::NetworkError { .. } => "NetworkError",
            Error::IncompleteClosure { .. } => "IncompleteClosure",
            Error::AlreadyDeployed { .. } => "AlreadyDeployed",
            Error::NotDeployed { .. } => "NotDeployed",
            Error::SandboxRunning { .. } => "SandboxRunning",
            Error::MalformedBind(_) => "MalformedBind",
            Error::KernelUnsupported(_) => "KernelUnsupported",
            Error::MountFailed(_) => "MountFailed",
            Error::LaunchFailed(_) => "LaunchFailed",
            Error::NotARootTree { .. } => "NotARootTree",
            Error::NotInitialised { .. } => "NotInitialised",
            Error::EmptyCommit { .. } => "EmptyCommit",
            Error::FsckFailed(_) => "FsckFailed",
        }
    }

    /// True for failures caused by the host rather than by the request:
    /// kernel, filesystem capabilities, network, disk and store integrity.
    pub fn is_environmental(&self) -> bool {
        matches!(
            self,
            Error::NotWritable { .. }
                | Error::CorruptRepo { .. }
                | Error::XattrUnsupported { .. }
                | Error::Io { .. }
                | Error::MissingObject { .. }
                | Error::CrossDevice { .. }
                | Error::DigestMismatch { .. }
                | Error::NetworkError { .. }
                | Error::IncompleteClosure { .. }
                | Error::KernelUnsupported(_)
                | Error::MountFailed(_)
                | Error::LaunchFailed(_)
                | Error::FsckFailed(_)
        )
    }
}
