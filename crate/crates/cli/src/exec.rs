//! A tiny command interpreter standing in for container processes.
//!
//! Verbs: `echo-env NAME...`, `write PATH CONTENT`, `read PATH`,
//! `copy SRC DST`, `exit CODE`, `barrier`. Commands are separated by `;`.
//! `sh -c SCRIPT` (or `-lc`) is accepted and its script split shell-style.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use hpcc_core::imagestore::{FileKind, MountHandle};

/// Exit code for an unknown verb, as a shell reports a missing command.
pub const NOT_FOUND: i32 = 127;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verb {
    EchoEnv(Vec<String>),
    Write {
        path: String,
        content: String,
    },
    Read(String),
    Copy {
        src: String,
        dst: String,
    },
    Exit(i32),
    Barrier,
    /// Kept so that the failure happens when the command runs.
    Unknown(String),
}

impl Verb {
    pub fn name(&self) -> &str {
        match self {
            Verb::EchoEnv(_) => "echo-env",
            Verb::Write { .. } => "write",
            Verb::Read(_) => "read",
            Verb::Copy { .. } => "copy",
            Verb::Exit(_) => "exit",
            Verb::Barrier => "barrier",
            Verb::Unknown(v) => v,
        }
    }
}

/// Splits a command line into verbs.
pub fn parse_command(tokens: &[String]) -> Result<Vec<Verb>, String> {
    let words: Vec<String> = match tokens {
        [sh, flag, script] if is_shell(sh) && (flag == "-c" || flag == "-lc") => {
            shell_words::split(script).map_err(|e| format!("cannot split {script:?}: {e}"))?
        }
        _ => tokens.to_vec(),
    };
    let mut groups: Vec<Vec<String>> = vec![Vec::new()];
    for w in words {
        if w == ";" {
            groups.push(Vec::new());
        } else if let Some(head) = w.strip_suffix(';') {
            if !head.is_empty() {
                groups.last_mut().unwrap().push(head.to_string());
            }
            groups.push(Vec::new());
        } else {
            groups.last_mut().unwrap().push(w);
        }
    }
    groups
        .into_iter()
        .filter(|g| !g.is_empty())
        .map(|g| parse_verb(&g))
        .collect()
}

fn is_shell(s: &str) -> bool {
    matches!(s, "sh" | "bash" | "/bin/sh" | "/bin/bash")
}

fn parse_verb(words: &[String]) -> Result<Verb, String> {
    let args = &words[1..];
    let arity = |n: usize| {
        if args.len() == n {
            Ok(())
        } else {
            Err(format!(
                "{} takes {n} argument(s), got {}",
                words[0],
                args.len()
            ))
        }
    };
    Ok(match words[0].as_str() {
        "echo-env" => {
            if args.is_empty() {
                return Err("echo-env needs at least one name".into());
            }
            Verb::EchoEnv(args.to_vec())
        }
        "write" => {
            arity(2)?;
            Verb::Write {
                path: args[0].clone(),
                content: args[1].clone(),
            }
        }
        "read" => {
            arity(1)?;
            Verb::Read(args[0].clone())
        }
        "copy" => {
            arity(2)?;
            Verb::Copy {
                src: args[0].clone(),
                dst: args[1].clone(),
            }
        }
        "exit" => {
            arity(1)?;
            Verb::Exit(
                args[0]
                    .parse()
                    .map_err(|_| format!("exit code {:?} is not a number", args[0]))?,
            )
        }
        "barrier" => {
            arity(0)?;
            Verb::Barrier
        }
        other => Verb::Unknown(other.to_string()),
    })
}

/// Files of an emptyDir volume, keyed by path relative to the volume.
pub type SharedDir = Rc<RefCell<BTreeMap<String, Vec<u8>>>>;

#[derive(Debug, Clone)]
pub enum Backing {
    Host { root: PathBuf, read_only: bool },
    Shared { files: SharedDir, read_only: bool },
}

/// A container's file namespace: the image view plus mounts over it.
#[derive(Debug, Clone)]
pub struct ContainerFs {
    pub view: MountHandle,
    mounts: Vec<(String, Backing)>,
}

enum Target<'a> {
    View(&'a str),
    Mount(&'a Backing, String),
}

impl ContainerFs {
    pub fn new(view: MountHandle) -> Self {
        ContainerFs {
            view,
            mounts: Vec::new(),
        }
    }

    pub fn mount(&mut self, destination: &str, backing: Backing) {
        self.mounts
            .push((destination.trim_end_matches('/').to_string(), backing));
    }

    fn target<'a>(&'a self, path: &'a str) -> Target<'a> {
        let best = self
            .mounts
            .iter()
            .filter(|(d, _)| path == d || path.starts_with(&format!("{d}/")))
            .max_by_key(|(d, _)| d.len());
        match best {
            Some((d, b)) => Target::Mount(b, path[d.len()..].to_string()),
            None => Target::View(path),
        }
    }

    pub fn read(&self, path: &str) -> Result<Vec<u8>, String> {
        match self.target(path) {
            Target::View(p) => self.view.read(p).map_err(|e| e.to_string()),
            Target::Mount(Backing::Host { root, .. }, rel) => {
                let p = host_path(root, &rel);
                std::fs::read(&p).map_err(|e| format!("{path}: {e}"))
            }
            Target::Mount(Backing::Shared { files, .. }, rel) => files
                .borrow()
                .get(&rel)
                .cloned()
                .ok_or_else(|| format!("{path}: no such file or directory")),
        }
    }

    pub fn write(&self, path: &str, data: &[u8]) -> Result<(), String> {
        match self.target(path) {
            Target::View(p) => self.view.write(p, data).map_err(|e| e.to_string()),
            Target::Mount(
                Backing::Host {
                    read_only: true, ..
                },
                _,
            )
            | Target::Mount(
                Backing::Shared {
                    read_only: true, ..
                },
                _,
            ) => Err(format!("{path}: read-only file system")),
            Target::Mount(Backing::Host { root, .. }, rel) => {
                if rel.is_empty() {
                    return Err(format!("{path}: is a directory"));
                }
                let p = host_path(root, &rel);
                if let Some(parent) = p.parent() {
                    std::fs::create_dir_all(parent).map_err(|e| format!("{path}: {e}"))?;
                }
                std::fs::write(&p, data).map_err(|e| format!("{path}: {e}"))
            }
            Target::Mount(Backing::Shared { files, .. }, rel) => {
                if rel.is_empty() {
                    return Err(format!("{path}: is a directory"));
                }
                files.borrow_mut().insert(rel, data.to_vec());
                Ok(())
            }
        }
    }

    pub fn is_dir(&self, path: &str) -> bool {
        match self.target(path) {
            Target::View(p) => self
                .view
                .stat(p)
                .map(|s| s.kind == FileKind::Dir)
                .unwrap_or(false),
            Target::Mount(Backing::Host { root, .. }, rel) => host_path(root, &rel).is_dir(),
            Target::Mount(Backing::Shared { files, .. }, rel) => {
                rel.is_empty()
                    || files
                        .borrow()
                        .keys()
                        .any(|k| k.starts_with(&format!("{rel}/")))
            }
        }
    }

    pub fn list(&self, dir: &str) -> Result<Vec<String>, String> {
        match self.target(dir) {
            Target::View(p) => self.view.list_dir(p).map_err(|e| e.to_string()),
            Target::Mount(Backing::Host { root, .. }, rel) => {
                let p = host_path(root, &rel);
                let mut names: Vec<String> = std::fs::read_dir(&p)
                    .map_err(|e| format!("{dir}: {e}"))?
                    .filter_map(|e| e.ok())
                    .map(|e| e.file_name().to_string_lossy().into_owned())
                    .collect();
                names.sort();
                Ok(names)
            }
            Target::Mount(Backing::Shared { files, .. }, rel) => {
                let prefix = format!("{rel}/");
                let mut names: Vec<String> = files
                    .borrow()
                    .keys()
                    .filter_map(|k| k.strip_prefix(&prefix))
                    .map(|rest| rest.split('/').next().unwrap_or(rest).to_string())
                    .collect();
                names.dedup();
                Ok(names)
            }
        }
    }
}

fn host_path(root: &Path, rel: &str) -> PathBuf {
    let rel = rel.trim_start_matches('/');
    if rel.is_empty() {
        root.to_path_buf()
    } else {
        root.join(rel)
    }
}

/// Resolves `path` against `cwd` and removes `.` and `..` components.
pub fn normalize(cwd: &str, path: &str) -> String {
    let joined = if path.starts_with('/') {
        path.to_string()
    } else {
        format!("{cwd}/{path}")
    };
    let mut parts: Vec<&str> = Vec::new();
    for c in joined.split('/') {
        match c {
            "" | "." => {}
            ".." => {
                parts.pop();
            }
            c => parts.push(c),
        }
    }
    format!("/{}", parts.join("/"))
}

fn wildcard(pattern: &str, name: &str) -> bool {
    match pattern.split_once('*') {
        None => pattern == name,
        Some((head, tail)) => {
            let Some(rest) = name.strip_prefix(head) else {
                return false;
            };
            (0..=rest.len())
                .filter(|&i| rest.is_char_boundary(i))
                .any(|i| wildcard(tail, &rest[i..]))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    /// The verb finished; more may follow.
    Continue,
    /// Parked at a barrier.
    Barrier,
    Exited(i32),
}

/// One simulated process.
#[derive(Debug, Clone)]
pub struct Process {
    verbs: Vec<Verb>,
    pc: usize,
    env: Vec<(String, String)>,
    cwd: String,
    pub stdout: Vec<String>,
    pub stderr: Vec<String>,
    pub exit_code: Option<i32>,
}

impl Process {
    pub fn new(verbs: Vec<Verb>, env: Vec<(String, String)>, cwd: impl Into<String>) -> Self {
        Process {
            verbs,
            pc: 0,
            env,
            cwd: cwd.into(),
            stdout: Vec::new(),
            stderr: Vec::new(),
            exit_code: None,
        }
    }

    pub fn next_verb(&self) -> Option<&Verb> {
        self.verbs.get(self.pc)
    }

    fn getenv(&self, name: &str) -> Option<&str> {
        self.env
            .iter()
            .rev()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    }

    fn fail(&mut self, code: i32, message: String) -> Outcome {
        self.stderr.push(message);
        self.exit_code = Some(code);
        Outcome::Exited(code)
    }

    /// Runs the next verb. A process with nothing left exits with 0.
    pub fn step(&mut self, fs: &ContainerFs) -> Outcome {
        if let Some(code) = self.exit_code {
            return Outcome::Exited(code);
        }
        let Some(verb) = self.verbs.get(self.pc).cloned() else {
            self.exit_code = Some(0);
            return Outcome::Exited(0);
        };
        self.pc += 1;
        match verb {
            Verb::EchoEnv(names) => {
                for n in names {
                    let v = self.getenv(&n).unwrap_or("").to_string();
                    self.stdout.push(v);
                }
            }
            Verb::Write { path, content } => {
                let p = normalize(&self.cwd, &path);
                if let Err(e) = fs.write(&p, content.as_bytes()) {
                    return self.fail(1, format!("write: {e}"));
                }
            }
            Verb::Read(path) => {
                let p = normalize(&self.cwd, &path);
                match fs.read(&p) {
                    Ok(bytes) => {
                        let text = String::from_utf8_lossy(&bytes);
                        self.stdout.extend(text.lines().map(str::to_string));
                    }
                    Err(e) => return self.fail(1, format!("read: {e}")),
                }
            }
            Verb::Copy { src, dst } => {
                if let Err(e) = self.copy(fs, &src, &dst) {
                    return self.fail(1, format!("copy: {e}"));
                }
            }
            Verb::Exit(code) => {
                self.exit_code = Some(code);
                return Outcome::Exited(code);
            }
            Verb::Barrier => return Outcome::Barrier,
            Verb::Unknown(name) => {
                return self.fail(NOT_FOUND, format!("{name}: command not found"));
            }
        }
        Outcome::Continue
    }

    fn copy(&self, fs: &ContainerFs, src: &str, dst: &str) -> Result<(), String> {
        let src = normalize(&self.cwd, src);
        let dst_dir = dst.ends_with('/');
        let dst = normalize(&self.cwd, dst);
        let (dir, pattern) = src.rsplit_once('/').expect("normalized paths are absolute");
        let dir = if dir.is_empty() { "/" } else { dir };
        let sources: Vec<String> = if pattern.contains('*') {
            let found: Vec<String> = fs
                .list(dir)?
                .into_iter()
                .filter(|n| wildcard(pattern, n))
                .map(|n| normalize(dir, &n))
                .collect();
            if found.is_empty() {
                return Err(format!("{src}: no match"));
            }
            found
        } else {
            vec![src.clone()]
        };
        let into_dir = dst_dir || sources.len() > 1 || fs.is_dir(&dst);
        for s in sources {
            let bytes = fs.read(&s)?;
            let target = if into_dir {
                normalize(&dst, s.rsplit('/').next().unwrap_or(&s))
            } else {
                dst.clone()
            };
            fs.write(&target, &bytes)?;
        }
        Ok(())
    }

    /// Runs to completion, treating barriers as no-ops.
    pub fn run(&mut self, fs: &ContainerFs) -> i32 {
        loop {
            if let Outcome::Exited(code) = self.step(fs) {
                return code;
            }
        }
    }
}
