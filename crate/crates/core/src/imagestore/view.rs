//! Merged read-through views over a squashed artifact.
//!
//! A view combines the read-only lower artifact with a writable upper
//! layer. Every entry seen through the view reports the view's identity as
//! owner; the artifact itself keeps its stored ownership.

use std::collections::BTreeMap;
use std::ops::Bound;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use super::artifact::{FileKind, LowerImage};
use super::layer::{is_normalized, split_parent};
use super::ImageStoreError;
use crate::digest::Digest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Identity {
    pub uid: u32,
    pub gid: u32,
}

impl Identity {
    pub fn new(uid: u32, gid: u32) -> Self {
        Identity { uid, gid }
    }
}

/// The step (and node) a view belongs to; the watcher reclaims views whose
/// owner has terminated.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub struct MountOwner {
    pub job: u64,
    pub step: u64,
    pub node: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpperEntry {
    File {
        data: Vec<u8>,
        mode: u32,
    },
    /// `opaque` hides every lower entry below this directory.
    Dir {
        mode: u32,
        opaque: bool,
    },
    Whiteout,
}

/// Scratch layer receiving all writes of a view.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpperLayer {
    pub entries: BTreeMap<String, UpperEntry>,
    pub writable: bool,
}

impl Default for UpperLayer {
    fn default() -> Self {
        UpperLayer {
            entries: BTreeMap::new(),
            writable: true,
        }
    }
}

impl UpperLayer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn read_only() -> Self {
        UpperLayer {
            writable: false,
            ..Self::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Stat {
    pub kind: FileKind,
    pub size: u64,
    pub mode: u32,
    pub uid: u32,
    pub gid: u32,
}

#[derive(Debug, PartialEq, Eq)]
pub enum ReleaseOutcome {
    /// The upper layer is handed back so callers may persist it.
    Released(UpperLayer),
    AlreadyReleased,
}

#[derive(Debug)]
struct MountState {
    live: bool,
    upper: UpperLayer,
}

#[derive(Debug)]
pub struct Mount {
    id: u64,
    reference: String,
    identity: Identity,
    owner: MountOwner,
    lower: Arc<LowerImage>,
    index_lookups: AtomicU64,
    state: Mutex<MountState>,
}

/// Shared handle to a live view. Clones refer to the same view.
#[derive(Debug, Clone)]
pub struct MountHandle(Arc<Mount>);

enum Resolved<'a> {
    Root,
    Upper(&'a UpperEntry),
    Lower(&'a super::artifact::IndexEntry),
}

impl MountHandle {
    pub(super) fn new(
        id: u64,
        reference: String,
        lower: Arc<LowerImage>,
        upper: UpperLayer,
        identity: Identity,
        owner: MountOwner,
    ) -> Self {
        MountHandle(Arc::new(Mount {
            id,
            reference,
            identity,
            owner,
            lower,
            index_lookups: AtomicU64::new(0),
            state: Mutex::new(MountState { live: true, upper }),
        }))
    }

    pub fn ptr_eq(&self, other: &MountHandle) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn reference(&self) -> &str {
        &self.0.reference
    }

    pub fn digest(&self) -> &Digest {
        &self.0.lower.digest
    }

    pub fn identity(&self) -> Identity {
        self.0.identity
    }

    pub fn owner(&self) -> MountOwner {
        self.0.owner
    }

    pub fn lower(&self) -> &LowerImage {
        &self.0.lower
    }

    pub fn is_live(&self) -> bool {
        self.lock().live
    }

    /// Lower-index probes performed so far; these never touch the store.
    pub fn index_lookups(&self) -> u64 {
        self.0.index_lookups.load(Ordering::Relaxed)
    }

    pub fn upper_snapshot(&self) -> UpperLayer {
        self.lock().upper.clone()
    }

    /// Marks the view dead and hands back its upper layer.
    pub fn release(&self) -> ReleaseOutcome {
        let mut st = self.lock();
        if !st.live {
            return ReleaseOutcome::AlreadyReleased;
        }
        st.live = false;
        ReleaseOutcome::Released(std::mem::take(&mut st.upper))
    }

    fn lock(&self) -> MutexGuard<'_, MountState> {
        self.0.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn live(&self) -> Result<MutexGuard<'_, MountState>, ImageStoreError> {
        let st = self.lock();
        if st.live {
            Ok(st)
        } else {
            Err(ImageStoreError::StaleHandle)
        }
    }

    fn check_path(path: &str) -> Result<(), ImageStoreError> {
        if path == "/" || is_normalized(path) {
            Ok(())
        } else {
            Err(ImageStoreError::MalformedPath(path.to_string()))
        }
    }

    /// Ancestors of `path` excluding `/`, shallowest first.
    fn ancestors(path: &str) -> impl Iterator<Item = &str> {
        path.match_indices('/')
            .skip(1)
            .map(move |(i, _)| &path[..i])
    }

    fn resolve<'a>(&'a self, upper: &'a UpperLayer, path: &str) -> Option<Resolved<'a>> {
        if path == "/" {
            return Some(Resolved::Root);
        }
        let lower = &self.0.lower.index;
        self.0.index_lookups.fetch_add(1, Ordering::Relaxed);
        let mut lower_visible = true;
        for a in Self::ancestors(path) {
            match upper.entries.get(a) {
                Some(UpperEntry::Whiteout) | Some(UpperEntry::File { .. }) => return None,
                Some(UpperEntry::Dir { opaque, .. }) => {
                    if *opaque {
                        lower_visible = false;
                    }
                }
                None => match lower.get(a) {
                    Some(e) if lower_visible && e.kind == FileKind::Dir => {}
                    _ => return None,
                },
            }
        }
        match upper.entries.get(path) {
            Some(UpperEntry::Whiteout) => None,
            Some(e) => Some(Resolved::Upper(e)),
            None if lower_visible => lower.get(path).map(Resolved::Lower),
            None => None,
        }
    }

    fn stat_resolved(&self, r: &Resolved<'_>) -> Stat {
        let id = self.0.identity;
        let (kind, size, mode) = match r {
            Resolved::Root => (FileKind::Dir, 0, 0o755),
            Resolved::Upper(UpperEntry::File { data, mode }) => {
                (FileKind::File, data.len() as u64, *mode)
            }
            Resolved::Upper(UpperEntry::Dir { mode, .. }) => (FileKind::Dir, 0, *mode),
            Resolved::Upper(UpperEntry::Whiteout) => unreachable!("whiteouts never resolve"),
            Resolved::Lower(e) => (e.kind, e.size, e.mode),
        };
        Stat {
            kind,
            size,
            mode,
            uid: id.uid,
            gid: id.gid,
        }
    }

    pub fn stat(&self, path: &str) -> Result<Stat, ImageStoreError> {
        Self::check_path(path)?;
        let st = self.live()?;
        let r = self
            .resolve(&st.upper, path)
            .ok_or_else(|| ImageStoreError::NotFound(path.to_string()))?;
        Ok(self.stat_resolved(&r))
    }

    pub fn exists(&self, path: &str) -> Result<bool, ImageStoreError> {
        match self.stat(path) {
            Ok(_) => Ok(true),
            Err(ImageStoreError::NotFound(_)) => Ok(false),
            Err(e) => Err(e),
        }
    }

    pub fn read(&self, path: &str) -> Result<Vec<u8>, ImageStoreError> {
        Self::check_path(path)?;
        let st = self.live()?;
        match self.resolve(&st.upper, path) {
            None => Err(ImageStoreError::NotFound(path.to_string())),
            Some(Resolved::Upper(UpperEntry::File { data, .. })) => Ok(data.clone()),
            Some(Resolved::Lower(e)) if e.kind == FileKind::File => {
                Ok(self.0.lower.blob(e).to_vec())
            }
            Some(_) => Err(ImageStoreError::NotAFile(path.to_string())),
        }
    }

    /// Symlink target, for lower symlinks.
    pub fn read_link(&self, path: &str) -> Result<String, ImageStoreError> {
        Self::check_path(path)?;
        let st = self.live()?;
        match self.resolve(&st.upper, path) {
            None => Err(ImageStoreError::NotFound(path.to_string())),
            Some(Resolved::Lower(e)) if e.kind == FileKind::Symlink => {
                Ok(String::from_utf8_lossy(self.0.lower.blob(e)).into_owned())
            }
            Some(_) => Err(ImageStoreError::NotAFile(path.to_string())),
        }
    }

    /// Sorted names directly under `dir`.
    pub fn list_dir(&self, dir: &str) -> Result<Vec<String>, ImageStoreError> {
        Self::check_path(dir)?;
        let st = self.live()?;
        let upper = &st.upper;
        let lower_visible = match self.resolve(upper, dir) {
            None => return Err(ImageStoreError::NotFound(dir.to_string())),
            Some(Resolved::Root) => true,
            Some(Resolved::Upper(UpperEntry::Dir { opaque, .. })) => {
                !*opaque
                    && Self::ancestors(dir).all(|a| {
                        !matches!(
                            upper.entries.get(a),
                            Some(UpperEntry::Dir { opaque: true, .. })
                        )
                    })
                    && self
                        .0
                        .lower
                        .index
                        .get(dir)
                        .is_some_and(|e| e.kind == FileKind::Dir)
            }
            Some(Resolved::Lower(e)) if e.kind == FileKind::Dir => true,
            Some(_) => return Err(ImageStoreError::NotADirectory(dir.to_string())),
        };
        let prefix = if dir == "/" {
            "/".to_string()
        } else {
            format!("{dir}/")
        };
        let direct = |k: &str| -> Option<String> {
            let rest = k.strip_prefix(&prefix)?;
            (!rest.is_empty() && !rest.contains('/')).then(|| rest.to_string())
        };
        let mut names = std::collections::BTreeSet::new();
        if lower_visible {
            for (k, _) in self
                .0
                .lower
                .index
                .range::<String, _>((Bound::Included(&prefix), Bound::Unbounded))
                .take_while(|(k, _)| k.starts_with(&prefix))
            {
                if let Some(n) = direct(k) {
                    names.insert(n);
                }
            }
        }
        for (k, e) in upper
            .entries
            .range::<String, _>((Bound::Included(&prefix), Bound::Unbounded))
            .take_while(|(k, _)| k.starts_with(&prefix))
        {
            if let Some(n) = direct(k) {
                if matches!(e, UpperEntry::Whiteout) {
                    names.remove(&n);
                } else {
                    names.insert(n);
                }
            }
        }
        Ok(names.into_iter().collect())
    }

    /// Creates missing ancestors of `path` in the upper layer.
    fn make_parents(&self, upper: &mut UpperLayer, path: &str) -> Result<(), ImageStoreError> {
        let ancestors: Vec<String> = Self::ancestors(path).map(str::to_string).collect();
        for a in ancestors {
            let kind = self.resolve(upper, &a).map(|r| self.stat_resolved(&r).kind);
            match kind {
                Some(FileKind::Dir) => {}
                Some(_) => return Err(ImageStoreError::NotADirectory(a)),
                None => {
                    let opaque = matches!(upper.entries.get(&a), Some(UpperEntry::Whiteout))
                        || Self::ancestors(&a).any(|x| {
                            matches!(
                                upper.entries.get(x),
                                Some(UpperEntry::Whiteout)
                                    | Some(UpperEntry::Dir { opaque: true, .. })
                            )
                        });
                    upper.entries.insert(
                        a,
                        UpperEntry::Dir {
                            mode: 0o755,
                            opaque,
                        },
                    );
                }
            }
        }
        Ok(())
    }

    fn writable(&self) -> Result<MutexGuard<'_, MountState>, ImageStoreError> {
        let st = self.live()?;
        if !st.upper.writable {
            return Err(ImageStoreError::UpperNotWritable);
        }
        Ok(st)
    }

    /// Writes a file, creating parent directories as needed.
    pub fn write(&self, path: &str, data: &[u8]) -> Result<(), ImageStoreError> {
        Self::check_path(path)?;
        if path == "/" {
            return Err(ImageStoreError::NotAFile(path.into()));
        }
        let mut st = self.writable()?;
        let upper = &mut st.upper;
        self.make_parents(upper, path)?;
        let mode = match self.resolve(upper, path) {
            Some(r) => {
                let s = self.stat_resolved(&r);
                if s.kind == FileKind::Dir {
                    return Err(ImageStoreError::NotAFile(path.to_string()));
                }
                s.mode
            }
            None => 0o644,
        };
        upper.entries.insert(
            path.to_string(),
            UpperEntry::File {
                data: data.to_vec(),
                mode,
            },
        );
        Ok(())
    }

    pub fn mkdir_all(&self, path: &str) -> Result<(), ImageStoreError> {
        Self::check_path(path)?;
        if path == "/" {
            return Ok(());
        }
        let mut st = self.writable()?;
        let upper = &mut st.upper;
        self.make_parents(upper, path)?;
        match self
            .resolve(upper, path)
            .map(|r| self.stat_resolved(&r).kind)
        {
            Some(FileKind::Dir) => Ok(()),
            Some(_) => Err(ImageStoreError::NotADirectory(path.to_string())),
            None => {
                let opaque = matches!(upper.entries.get(path), Some(UpperEntry::Whiteout));
                upper.entries.insert(
                    path.to_string(),
                    UpperEntry::Dir {
                        mode: 0o755,
                        opaque,
                    },
                );
                Ok(())
            }
        }
    }

    /// Removes a file or a directory tree; lower entries are shadowed.
    pub fn remove(&self, path: &str) -> Result<(), ImageStoreError> {
        Self::check_path(path)?;
        if path == "/" {
            return Err(ImageStoreError::NotAFile(path.into()));
        }
        let mut st = self.writable()?;
        let upper = &mut st.upper;
        if self.resolve(upper, path).is_none() {
            return Err(ImageStoreError::NotFound(path.to_string()));
        }
        let prefix = format!("{path}/");
        upper.entries.retain(|k, _| !k.starts_with(&prefix));
        upper.entries.insert(path.to_string(), UpperEntry::Whiteout);
        Ok(())
    }

    /// Owner recorded in the artifact, bypassing the remap.
    pub fn stored_owner(&self, path: &str) -> Option<Identity> {
        self.0
            .lower
            .index
            .get(path)
            .map(|e| Identity::new(e.uid, e.gid))
    }

    /// Every visible path below `dir`, sorted.
    pub fn walk(&self, dir: &str) -> Result<Vec<String>, ImageStoreError> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_string()];
        while let Some(d) = stack.pop() {
            for name in self.list_dir(&d)? {
                let p = if d == "/" {
                    format!("/{name}")
                } else {
                    format!("{d}/{name}")
                };
                if self.stat(&p)?.kind == FileKind::Dir {
                    stack.push(p.clone());
                }
                out.push(p);
            }
        }
        out.sort();
        Ok(out)
    }
}

/// Parent directory of a normalized path.
pub fn parent_of(path: &str) -> &str {
    split_parent(path).0
}
