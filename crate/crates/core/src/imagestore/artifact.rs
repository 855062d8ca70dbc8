//! The squashed single-file artifact.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "HPCSQIMG"
//! version      u32      1
//! entry_count  u64
//! entries      entry_count records, sorted by path:
//!                path_len u32, path bytes,
//!                kind u8 (0 file, 1 dir, 2 symlink),
//!                mode u32, uid u32, gid u32,
//!                size u64, blob_offset u64,
//!                content sha256 (32 raw bytes)
//! blob_len     u64
//! blobs        file contents and symlink targets, in entry order
//! trailer      sha256 of every preceding byte (32 raw bytes)
//! ```
//!
//! Timestamps are not stored, so the artifact digest (the trailer) depends
//! only on the entry set and its metadata.

use std::collections::BTreeMap;
use std::sync::Arc;

use sha2::{Digest as _, Sha256};

use super::flatten::{Node, NodeKind, Tree};
use super::ImageStoreError;
use crate::digest::Digest;

pub const MAGIC: &[u8; 8] = b"HPCSQIMG";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileKind {
    File,
    Dir,
    Symlink,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    pub kind: FileKind,
    pub mode: u32,
    pub uid: u32,
    pub gid: u32,
    pub size: u64,
    /// Absolute offset of the blob within the artifact.
    pub offset: u64,
    pub content_digest: Digest,
}

/// Serializes a flattened tree into artifact bytes.
pub fn encode(tree: &Tree) -> Vec<u8> {
    let mut table = Vec::new();
    let mut blobs: Vec<u8> = Vec::new();
    for (path, node) in tree {
        let (kind, payload): (u8, &[u8]) = match &node.kind {
            NodeKind::File(c) => (0, c),
            NodeKind::Dir => (1, &[]),
            NodeKind::Symlink(t) => (2, t.as_bytes()),
        };
        table.extend_from_slice(&(path.len() as u32).to_le_bytes());
        table.extend_from_slice(path.as_bytes());
        table.push(kind);
        table.extend_from_slice(&node.mode.to_le_bytes());
        table.extend_from_slice(&node.uid.to_le_bytes());
        table.extend_from_slice(&node.gid.to_le_bytes());
        table.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        table.extend_from_slice(&(blobs.len() as u64).to_le_bytes());
        table.extend_from_slice(&Sha256::digest(payload));
        blobs.extend_from_slice(payload);
    }
    let mut out = Vec::with_capacity(8 + 4 + 8 + table.len() + 8 + blobs.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tree.len() as u64).to_le_bytes());
    out.extend_from_slice(&table);
    out.extend_from_slice(&(blobs.len() as u64).to_le_bytes());
    out.extend_from_slice(&blobs);
    let trailer = Sha256::digest(&out);
    out.extend_from_slice(&trailer);
    out
}

/// Digest of an encoded artifact, read from its trailer.
pub fn artifact_digest(bytes: &[u8]) -> Option<Digest> {
    let tail = bytes.len().checked_sub(32)?;
    Some(Digest::from_raw(bytes[tail..].try_into().ok()?))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ImageStoreError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ImageStoreError::CorruptArtifact("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ImageStoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ImageStoreError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// A decoded, verified artifact: the read-only lower layer of a view.
#[derive(Debug)]
pub struct LowerImage {
    pub digest: Digest,
    pub index: BTreeMap<String, IndexEntry>,
    bytes: Arc<[u8]>,
}

impl LowerImage {
    /// Verifies the trailer and every entry, then builds the path index.
    pub fn decode(bytes: Arc<[u8]>) -> Result<Self, ImageStoreError> {
        let corrupt = |m: &str| ImageStoreError::CorruptArtifact(m.to_string());
        if bytes.len() < 8 + 4 + 8 + 8 + 32 {
            return Err(corrupt("too short"));
        }
        let body_len = bytes.len() - 32;
        let computed = Sha256::digest(&bytes[..body_len]);
        if computed.as_slice() != &bytes[body_len..] {
            return Err(corrupt("trailer digest mismatch"));
        }
        let body = &bytes[..body_len];
        let mut c = Cursor { buf: body, pos: 0 };
        if c.take(8)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        if c.u32()? != VERSION {
            return Err(corrupt("unsupported version"));
        }
        let count = c.u64()?;
        let mut raw = Vec::new();
        for _ in 0..count {
            let plen = c.u32()? as usize;
            let path = std::str::from_utf8(c.take(plen)?)
                .map_err(|_| corrupt("path is not UTF-8"))?
                .to_string();
            let kind = match c.take(1)?[0] {
                0 => FileKind::File,
                1 => FileKind::Dir,
                2 => FileKind::Symlink,
                _ => return Err(corrupt("unknown entry kind")),
            };
            let mode = c.u32()?;
            let uid = c.u32()?;
            let gid = c.u32()?;
            let size = c.u64()?;
            let rel = c.u64()?;
            let content: [u8; 32] = c.take(32)?.try_into().unwrap();
            raw.push((path, kind, mode, uid, gid, size, rel, content));
        }
        let blob_len = c.u64()? as usize;
        let blob_base = c.pos;
        c.take(blob_len)?;
        if c.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        let mut index = BTreeMap::new();
        let mut prev: Option<String> = None;
        for (path, kind, mode, uid, gid, size, rel, content) in raw {
            if prev.as_ref().is_some_and(|p| p >= &path) {
                return Err(corrupt("entries not sorted"));
            }
            let start = (rel as usize)
                .checked_add(blob_base)
                .filter(|s| s + size as usize <= blob_base + blob_len)
                .ok_or_else(|| corrupt("blob out of range"))?;
            if Sha256::digest(&body[start..start + size as usize]).as_slice() != content {
                return Err(corrupt("entry content digest mismatch"));
            }
            prev = Some(path.clone());
            index.insert(
                path,
                IndexEntry {
                    kind,
                    mode,
                    uid,
                    gid,
                    size,
                    offset: start as u64,
                    content_digest: Digest::from_raw(content),
                },
            );
        }
        Ok(LowerImage {
            digest: Digest::from_raw(computed.into()),
            index,
            bytes,
        })
    }

    pub fn blob(&self, entry: &IndexEntry) -> &[u8] {
        &self.bytes[entry.offset as usize..(entry.offset + entry.size) as usize]
    }

    pub fn bytes(&self) -> &Arc<[u8]> {
        &self.bytes
    }

    /// Rebuilds the tree the artifact was encoded from.
    pub fn to_tree(&self) -> Tree {
        self.index
            .iter()
            .map(|(path, e)| {
                let blob = self.blob(e);
                let kind = match e.kind {
                    FileKind::File => NodeKind::File(blob.to_vec()),
                    FileKind::Dir => NodeKind::Dir,
                    FileKind::Symlink => {
                        NodeKind::Symlink(String::from_utf8_lossy(blob).into_owned())
                    }
                };
                (
                    path.clone(),
                    Node {
                        kind,
                        mode: e.mode,
                        uid: e.uid,
                        gid: e.gid,
                    },
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tree {
        let mut t = Tree::new();
        t.insert("/etc".into(), Node::implicit_dir());
        t.insert(
            "/etc/x".into(),
            Node {
                kind: NodeKind::File(b"hello".to_vec()),
                mode: 0o600,
                uid: 0,
                gid: 0,
            },
        );
        t.insert(
            "/l".into(),
            Node {
                kind: NodeKind::Symlink("/etc/x".into()),
                mode: 0o777,
                uid: 0,
                gid: 0,
            },
        );
        t
    }

    #[test]
    fn encode_decode_round_trip() {
        let t = sample();
        let bytes: Arc<[u8]> = encode(&t).into();
        let lower = LowerImage::decode(bytes.clone()).unwrap();
        assert_eq!(lower.to_tree(), t);
        assert_eq!(Some(lower.digest.clone()), artifact_digest(&bytes));
        assert_eq!(lower.blob(&lower.index["/etc/x"]), b"hello");
    }

    #[test]
    fn encoding_is_deterministic() {
        assert_eq!(encode(&sample()), encode(&sample()));
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode(&sample());
        let n = bytes.len();
        bytes[n / 2] ^= 0xff;
        assert!(matches!(
            LowerImage::decode(bytes.into()),
            Err(ImageStoreError::CorruptArtifact(_))
        ));
        assert!(LowerImage::decode(Arc::from(&b"HPCSQIMG"[..])).is_err());
    }
}
