use serde::{Deserialize, Serialize};

use super::ImageStoreError;
use crate::digest::{Digest, Hasher};

pub const WHITEOUT_PREFIX: &str = ".wh.";
pub const OPAQUE_WHITEOUT: &str = ".wh..wh..opq";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryKind {
    File(Vec<u8>),
    Dir,
    Symlink(String),
    /// Materialized as an independent copy of the target at flatten time.
    Hardlink(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub path: String,
    pub kind: EntryKind,
    pub mode: u32,
    pub uid: u32,
    pub gid: u32,
    /// Discarded when flattening.
    pub mtime: u64,
}

impl Entry {
    pub fn file(path: impl Into<String>, content: impl Into<Vec<u8>>) -> Self {
        Entry {
            path: path.into(),
            kind: EntryKind::File(content.into()),
            mode: 0o644,
            uid: 0,
            gid: 0,
            mtime: 0,
        }
    }

    pub fn dir(path: impl Into<String>) -> Self {
        Entry {
            path: path.into(),
            kind: EntryKind::Dir,
            mode: 0o755,
            uid: 0,
            gid: 0,
            mtime: 0,
        }
    }

    pub fn symlink(path: impl Into<String>, target: impl Into<String>) -> Self {
        Entry {
            path: path.into(),
            kind: EntryKind::Symlink(target.into()),
            mode: 0o777,
            uid: 0,
            gid: 0,
            mtime: 0,
        }
    }

    pub fn hardlink(path: impl Into<String>, target: impl Into<String>) -> Self {
        Entry {
            path: path.into(),
            kind: EntryKind::Hardlink(target.into()),
            mode: 0o644,
            uid: 0,
            gid: 0,
            mtime: 0,
        }
    }

    /// Whiteout marking `<parent>/<name>` as deleted.
    pub fn whiteout(parent: &str, name: &str) -> Self {
        Entry::file(
            join(parent, &format!("{WHITEOUT_PREFIX}{name}")),
            Vec::new(),
        )
    }

    pub fn opaque(dir: &str) -> Self {
        Entry::file(join(dir, OPAQUE_WHITEOUT), Vec::new())
    }

    pub fn owned(mut self, uid: u32, gid: u32) -> Self {
        self.uid = uid;
        self.gid = gid;
        self
    }

    pub fn with_mode(mut self, mode: u32) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_mtime(mut self, mtime: u64) -> Self {
        self.mtime = mtime;
        self
    }
}

pub(crate) fn join(parent: &str, name: &str) -> String {
    if parent == "/" {
        format!("/{name}")
    } else {
        format!("{parent}/{name}")
    }
}

/// Splits `/a/b` into (`/a`, `b`); parent of a top-level entry is `/`.
pub(crate) fn split_parent(path: &str) -> (&str, &str) {
    let idx = path.rfind('/').expect("normalized paths are absolute");
    let parent = if idx == 0 { "/" } else { &path[..idx] };
    (parent, &path[idx + 1..])
}

/// Absolute, no empty/`.`/`..` components, no trailing slash, not `/`.
pub fn is_normalized(path: &str) -> bool {
    path.len() > 1
        && path.starts_with('/')
        && path[1..]
            .split('/')
            .all(|c| !c.is_empty() && c != "." && c != "..")
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub entries: Vec<Entry>,
}

impl Layer {
    pub fn new(entries: Vec<Entry>) -> Self {
        Layer { entries }
    }

    /// Digest over the canonical encoding of the entries, in order.
    pub fn digest(&self) -> Digest {
        let mut h = Hasher::new();
        h.field(b"layer/v1");
        for e in &self.entries {
            h.field(e.path.as_bytes());
            let (tag, payload): (u8, &[u8]) = match &e.kind {
                EntryKind::File(c) => (0, c),
                EntryKind::Dir => (1, &[]),
                EntryKind::Symlink(t) => (2, t.as_bytes()),
                EntryKind::Hardlink(t) => (3, t.as_bytes()),
            };
            h.field(&[tag]);
            h.field(payload);
            h.field(&e.mode.to_le_bytes());
            h.field(&e.uid.to_le_bytes());
            h.field(&e.gid.to_le_bytes());
            h.field(&e.mtime.to_le_bytes());
        }
        h.finish()
    }

    pub fn check_paths(&self) -> Result<(), ImageStoreError> {
        match self.entries.iter().find(|e| !is_normalized(&e.path)) {
            Some(e) => Err(ImageStoreError::MalformedPath(e.path.clone())),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageConfig {
    pub entrypoint: Vec<String>,
    pub env: Vec<(String, String)>,
}

/// An image as pulled: ordered layers, bottom first, with declared digests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayeredImage {
    pub reference: String,
    pub layers: Vec<Layer>,
    pub layer_digests: Vec<Digest>,
    pub config: ImageConfig,
    pub config_digest: Digest,
}

impl LayeredImage {
    /// Builds an image whose declared digests match its content.
    pub fn new(reference: impl Into<String>, layers: Vec<Layer>, config: ImageConfig) -> Self {
        let layer_digests: Vec<Digest> = layers.iter().map(Layer::digest).collect();
        let config_digest = config_digest(&config, &layer_digests);
        LayeredImage {
            reference: reference.into(),
            layers,
            layer_digests,
            config,
            config_digest,
        }
    }

    /// Checks declared digests against content.
    pub fn verify(&self) -> Result<(), ImageStoreError> {
        if self.layers.len() != self.layer_digests.len() {
            return Err(ImageStoreError::DigestMismatch {
                what: "layer count".into(),
                expected: self.layer_digests.len().to_string(),
                actual: self.layers.len().to_string(),
            });
        }
        for (i, (layer, declared)) in self.layers.iter().zip(&self.layer_digests).enumerate() {
            let actual = layer.digest();
            if &actual != declared {
                return Err(ImageStoreError::DigestMismatch {
                    what: format!("layer {i}"),
                    expected: declared.to_string(),
                    actual: actual.to_string(),
                });
            }
        }
        let actual = config_digest(&self.config, &self.layer_digests);
        if actual != self.config_digest {
            return Err(ImageStoreError::DigestMismatch {
                what: "config".into(),
                expected: self.config_digest.to_string(),
                actual: actual.to_string(),
            });
        }
        Ok(())
    }
}

pub fn config_digest(config: &ImageConfig, layers: &[Digest]) -> Digest {
    let mut h = Hasher::new();
    h.field(b"config/v1");
    h.field(&(config.entrypoint.len() as u64).to_le_bytes());
    for t in &config.entrypoint {
        h.field(t.as_bytes());
    }
    h.field(&(config.env.len() as u64).to_le_bytes());
    for (k, v) in &config.env {
        h.field(k.as_bytes());
        h.field(v.as_bytes());
    }
    for d in layers {
        h.field(d.as_str().as_bytes());
    }
    h.finish()
}
