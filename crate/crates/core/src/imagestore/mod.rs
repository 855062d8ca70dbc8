//! Shared image store: layered-image import, flattening into a single
//! deterministic artifact, remapped overlay views and store lifecycle.
//!
//! On-store layout, relative to the store root:
//!
//! ```text
//! artifacts/<hex>.sqimg   squashed artifact (see `artifact`)
//! meta/<hex>.rec          one record per image, line-oriented key=value
//! ```
//!
//! `<hex>` is the hex part of the artifact digest.

use thiserror::Error;

pub mod artifact;
pub mod backend;
pub mod flatten;
pub mod layer;
pub mod store;
pub mod view;

pub use artifact::{FileKind, IndexEntry, LowerImage};
pub use backend::{DiskBackend, FsOp, FsOpKind, MemBackend, OpCounters, Recorder, StoreBackend};
pub use flatten::{flatten_layers, FlattenWarning, Flattened, Node, NodeKind, Tree};
pub use layer::{Entry, EntryKind, ImageConfig, Layer, LayeredImage};
pub use store::{
    import_image, ImageRecord, LocalStore, Migration, PlainTreeView, RemovalReport, SharedStore,
    SquashedImage, StoreRecord, WatcherReport,
};
pub use view::{Identity, MountHandle, MountOwner, ReleaseOutcome, Stat, UpperEntry, UpperLayer};

#[derive(Debug, Error)]
pub enum ImageStoreError {
    #[error("invalid image reference {0:?}")]
    InvalidReference(String),
    #[error("image {0} has no layers")]
    EmptyImage(String),
    #[error("{what} digest mismatch: expected {expected}, got {actual}")]
    DigestMismatch {
        what: String,
        expected: String,
        actual: String,
    },
    #[error("malformed path {0:?}")]
    MalformedPath(String),
    #[error("reference {reference} already bound to {existing}, refusing {new}")]
    ReferenceConflict {
        reference: String,
        existing: String,
        new: String,
    },
    #[error("artifact {digest} already stored as {existing}, refusing alias {reference}")]
    DigestAliased {
        digest: String,
        existing: String,
        reference: String,
    },
    #[error("image {0} is not in the local store")]
    NotInLocalStore(String),
    #[error("unknown image reference {0}")]
    UnknownReference(String),
    #[error("image {reference} has {live} live mount(s)")]
    Busy { reference: String, live: usize },
    #[error("corrupt artifact: {0}")]
    CorruptArtifact(String),
    #[error("bad store record {path}: {reason}")]
    BadRecord { path: String, reason: String },
    #[error("store i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("upper layer is not writable")]
    UpperNotWritable,
    #[error("mount handle has been released")]
    StaleHandle,
    #[error("{0}: no such file or directory")]
    NotFound(String),
    #[error("{0}: not a directory")]
    NotADirectory(String),
    #[error("{0}: not a regular file")]
    NotAFile(String),
}

impl ImageStoreError {
    pub(crate) fn io(path: &str, source: std::io::Error) -> Self {
        ImageStoreError::Io {
            path: path.to_string(),
            source,
        }
    }
}
