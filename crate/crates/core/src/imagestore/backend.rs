//! Storage backends for the shared store.
//!
//! Paths are relative to the store root and use `/` separators
//! (`artifacts/<hex>.sqimg`). Writes are whole-object and atomic.

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

pub trait StoreBackend {
    fn read(&self, path: &str) -> io::Result<Vec<u8>>;
    /// Size of the object, or `None` when absent.
    fn stat(&self, path: &str) -> io::Result<Option<u64>>;
    /// Sorted names directly under `dir`; empty when `dir` is absent.
    fn list(&self, dir: &str) -> io::Result<Vec<String>>;
    fn write_atomic(&self, path: &str, data: &[u8]) -> io::Result<()>;
    fn remove(&self, path: &str) -> io::Result<()>;
}

impl<B: StoreBackend + ?Sized> StoreBackend for &B {
    fn read(&self, path: &str) -> io::Result<Vec<u8>> {
        (**self).read(path)
    }
    fn stat(&self, path: &str) -> io::Result<Option<u64>> {
        (**self).stat(path)
    }
    fn list(&self, dir: &str) -> io::Result<Vec<String>> {
        (**self).list(dir)
    }
    fn write_atomic(&self, path: &str, data: &[u8]) -> io::Result<()> {
        (**self).write_atomic(path, data)
    }
    fn remove(&self, path: &str) -> io::Result<()> {
        (**self).remove(path)
    }
}

/// In-memory object space.
#[derive(Debug, Default)]
pub struct MemBackend {
    objects: RefCell<BTreeMap<String, Vec<u8>>>,
    fail_writes: Cell<bool>,
}

impl MemBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes every subsequent write fail, for fault injection.
    pub fn set_fail_writes(&self, fail: bool) {
        self.fail_writes.set(fail);
    }

    pub fn paths(&self) -> Vec<String> {
        self.objects.borrow().keys().cloned().collect()
    }

    /// Direct mutation that bypasses any recorder; tests use it to corrupt
    /// objects.
    pub fn poke(&self, path: &str, data: Vec<u8>) {
        self.objects.borrow_mut().insert(path.to_string(), data);
    }
}

fn not_found(path: &str) -> io::Error {
    io::Error::new(io::ErrorKind::NotFound, format!("{path}: no such object"))
}

impl StoreBackend for MemBackend {
    fn read(&self, path: &str) -> io::Result<Vec<u8>> {
        self.objects
            .borrow()
            .get(path)
            .cloned()
            .ok_or_else(|| not_found(path))
    }

    fn stat(&self, path: &str) -> io::Result<Option<u64>> {
        Ok(self.objects.borrow().get(path).map(|o| o.len() as u64))
    }

    fn list(&self, dir: &str) -> io::Result<Vec<String>> {
        let prefix = format!("{}/", dir.trim_end_matches('/'));
        let names: BTreeSet<String> = self
            .objects
            .borrow()
            .keys()
            .filter_map(|k| k.strip_prefix(&prefix))
            .map(|rest| rest.split('/').next().unwrap_or(rest).to_string())
            .collect();
        Ok(names.into_iter().collect())
    }

    fn write_atomic(&self, path: &str, data: &[u8]) -> io::Result<()> {
        if self.fail_writes.get() {
            return Err(io::Error::new(
                io::ErrorKind::PermissionDenied,
                format!("{path}: injected write failure"),
            ));
        }
        self.objects
            .borrow_mut()
            .insert(path.to_string(), data.to_vec());
        Ok(())
    }

    fn remove(&self, path: &str) -> io::Result<()> {
        self.objects
            .borrow_mut()
            .remove(path)
            .map(|_| ())
            .ok_or_else(|| not_found(path))
    }
}

/// A directory on the host filesystem.
#[derive(Debug, Clone)]
pub struct DiskBackend {
    root: PathBuf,
}

impl DiskBackend {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DiskBackend { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn resolve(&self, path: &str) -> PathBuf {
        self.root.join(path)
    }
}

impl StoreBackend for DiskBackend {
    fn read(&self, path: &str) -> io::Result<Vec<u8>> {
        fs::read(self.resolve(path))
    }

    fn stat(&self, path: &str) -> io::Result<Option<u64>> {
        match fs::metadata(self.resolve(path)) {
            Ok(m) => Ok(Some(m.len())),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn list(&self, dir: &str) -> io::Result<Vec<String>> {
        let rd = match fs::read_dir(self.resolve(dir)) {
            Ok(rd) => rd,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e),
        };
        let mut names = Vec::new();
        for entry in rd {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if !name.starts_with(".tmp-") {
                names.push(name);
            }
        }
        names.sort();
        Ok(names)
    }

    fn write_atomic(&self, path: &str, data: &[u8]) -> io::Result<()> {
        let target = self.resolve(path);
        let dir = target.parent().expect("store paths have a parent");
        fs::create_dir_all(dir)?;
        let name = target.file_name().unwrap().to_string_lossy();
        let tmp = dir.join(format!(".tmp-{name}-{}", std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(data)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &target)
    }

    fn remove(&self, path: &str) -> io::Result<()> {
        fs::remove_file(self.resolve(path))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FsOpKind {
    Read,
    Stat,
    List,
    Write,
    Remove,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FsOp {
    pub kind: FsOpKind,
    pub path: String,
    /// Label of the operation that was in progress, see [`Recorder::scope`].
    pub scope: &'static str,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct OpCounters {
    pub reads: u64,
    pub stats: u64,
    pub lists: u64,
    pub writes: u64,
    pub removes: u64,
}

impl OpCounters {
    /// Every operation touches metadata (an open, stat, lookup or rename).
    pub fn metadata_ops(&self) -> u64 {
        self.reads + self.stats + self.lists + self.writes + self.removes
    }

    pub fn mutations(&self) -> u64 {
        self.writes + self.removes
    }

    pub fn since(&self, earlier: &OpCounters) -> OpCounters {
        OpCounters {
            reads: self.reads - earlier.reads,
            stats: self.stats - earlier.stats,
            lists: self.lists - earlier.lists,
            writes: self.writes - earlier.writes,
            removes: self.removes - earlier.removes,
        }
    }
}

/// Counts and logs every operation on the wrapped backend.
#[derive(Debug, Default)]
pub struct Recorder<B> {
    inner: B,
    counters: Cell<OpCounters>,
    log: RefCell<Vec<FsOp>>,
    scope: Cell<&'static str>,
    keep_log: bool,
}

impl<B> Recorder<B> {
    pub fn new(inner: B) -> Self {
        Recorder {
            inner,
            counters: Cell::new(OpCounters::default()),
            log: RefCell::new(Vec::new()),
            scope: Cell::new(""),
            keep_log: true,
        }
    }

    /// Counters only; for workloads issuing millions of operations.
    pub fn counting(inner: B) -> Self {
        Recorder {
            keep_log: false,
            ..Recorder::new(inner)
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn counters(&self) -> OpCounters {
        self.counters.get()
    }

    pub fn log(&self) -> Vec<FsOp> {
        self.log.borrow().clone()
    }

    pub fn clear_log(&self) {
        self.log.borrow_mut().clear();
    }

    /// Labels operations until the guard drops.
    pub fn scope(&self, label: &'static str) -> ScopeGuard<'_, B> {
        let previous = self.scope.replace(label);
        ScopeGuard {
            recorder: self,
            previous,
        }
    }

    fn note(&self, kind: FsOpKind, path: &str) {
        let mut c = self.counters.get();
        match kind {
            FsOpKind::Read => c.reads += 1,
            FsOpKind::Stat => c.stats += 1,
            FsOpKind::List => c.lists += 1,
            FsOpKind::Write => c.writes += 1,
            FsOpKind::Remove => c.removes += 1,
        }
        self.counters.set(c);
        if self.keep_log {
            self.log.borrow_mut().push(FsOp {
                kind,
                path: path.to_string(),
                scope: self.scope.get(),
            });
        }
    }
}

pub struct ScopeGuard<'a, B> {
    recorder: &'a Recorder<B>,
    previous: &'static str,
}

impl<B> Drop for ScopeGuard<'_, B> {
    fn drop(&mut self) {
        self.recorder.scope.set(self.previous);
    }
}

impl<B: StoreBackend> StoreBackend for Recorder<B> {
    fn read(&self, path: &str) -> io::Result<Vec<u8>> {
        self.note(FsOpKind::Read, path);
        self.inner.read(path)
    }

    fn stat(&self, path: &str) -> io::Result<Option<u64>> {
        self.note(FsOpKind::Stat, path);
        self.inner.stat(path)
    }

    fn list(&self, dir: &str) -> io::Result<Vec<String>> {
        self.note(FsOpKind::List, dir);
        self.inner.list(dir)
    }

    fn write_atomic(&self, path: &str, data: &[u8]) -> io::Result<()> {
        self.note(FsOpKind::Write, path);
        self.inner.write_atomic(path, data)
    }

    fn remove(&self, path: &str) -> io::Result<()> {
        self.note(FsOpKind::Remove, path);
        self.inner.remove(path)
    }
}
