//! Shared-library handling: version and ABI checks, the linker cache model
//! and host-library injection.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::spec::SpecMount;
use super::HookError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Version {
    pub major: u32,
    pub minor: u32,
    pub patch: u32,
}

impl Version {
    pub fn new(major: u32, minor: u32, patch: u32) -> Self {
        Version {
            major,
            minor,
            patch,
        }
    }

    /// `MAJOR[.MINOR[.PATCH]]`, decimal components; missing ones are 0.
    pub fn parse(s: &str) -> Result<Self, HookError> {
        let bad = || HookError::UnparseableVersion(s.to_string());
        let parts: Vec<&str> = s.split('.').collect();
        if parts.len() > 3 {
            return Err(bad());
        }
        let mut nums = [0u32; 3];
        for (i, p) in parts.iter().enumerate() {
            if p.is_empty() || !p.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            nums[i] = p.parse().map_err(|_| bad())?;
        }
        Ok(Version::new(nums[0], nums[1], nums[2]))
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.major, self.minor, self.patch)
    }
}

/// Host library `host` may stand in for container library `container`.
///
/// Both are `(soname, version)`. Compatible when the sonames are equal, the
/// major versions are equal and the host's (minor, patch) is not older than
/// the container's.
pub fn abi_compatible(container: (&str, &str), host: (&str, &str)) -> Result<bool, HookError> {
    let c = Version::parse(container.1)?;
    let h = Version::parse(host.1)?;
    Ok(container.0 == host.0
        && c.major == h.major
        && (h.minor, h.patch).cmp(&(c.minor, c.patch)) != Ordering::Less)
}

/// Splits a library file name `libX.so.V` into its soname (`libX.so.MAJOR`)
/// and version. Names that do not follow the pattern yield `None`.
pub fn soname_of(file_name: &str) -> Option<(String, Version)> {
    if !file_name.starts_with("lib") {
        return None;
    }
    let idx = file_name.find(".so.")?;
    let (stem, rest) = (&file_name[..idx], &file_name[idx + 4..]);
    if stem.len() <= 3 {
        return None;
    }
    let version = Version::parse(rest).ok()?;
    Some((format!("{stem}.so.{}", version.major), version))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub soname: String,
    pub path: String,
    pub abi_tag: String,
    pub version: Version,
}

/// What the dynamic linker would resolve: one path per (soname, ABI tag).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LinkerCacheModel {
    entries: BTreeMap<(String, String), CacheEntry>,
}

impl LinkerCacheModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, entry: CacheEntry) {
        self.entries
            .insert((entry.soname.clone(), entry.abi_tag.clone()), entry);
    }

    /// Entries for `soname` under any ABI tag.
    pub fn lookup(&self, soname: &str) -> Vec<&CacheEntry> {
        self.entries
            .range((soname.to_string(), String::new())..)
            .take_while(|((s, _), _)| s == soname)
            .map(|(_, e)| e)
            .collect()
    }

    pub fn resolve(&self, soname: &str, abi_tag: &str) -> Option<&CacheEntry> {
        self.entries.get(&(soname.to_string(), abi_tag.to_string()))
    }

    pub fn entries(&self) -> impl Iterator<Item = &CacheEntry> {
        self.entries.values()
    }

    pub fn sonames(&self) -> BTreeSet<String> {
        self.entries.keys().map(|(s, _)| s.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Rescans `dirs` (not recursively) in `files`. For each soname the
    /// highest version wins; on a tie the earlier directory wins.
    pub fn scan(files: &BTreeSet<String>, dirs: &[String], abi_tag: &str) -> Self {
        let mut cache = LinkerCacheModel::new();
        for dir in dirs {
            let prefix = format!("{}/", dir.trim_end_matches('/'));
            for path in files
                .range(prefix.clone()..)
                .take_while(|p| p.starts_with(&prefix))
            {
                let name = &path[prefix.len()..];
                if name.contains('/') {
                    continue;
                }
                let Some((soname, version)) = soname_of(name) else {
                    continue;
                };
                let key = (soname.clone(), abi_tag.to_string());
                if cache
                    .entries
                    .get(&key)
                    .is_some_and(|e| e.version >= version)
                {
                    continue;
                }
                cache.entries.insert(
                    key,
                    CacheEntry {
                        soname,
                        path: path.clone(),
                        abi_tag: abi_tag.to_string(),
                        version,
                    },
                );
            }
        }
        cache
    }
}

/// The node's filesystem, as far as hooks can see it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostFs {
    pub files: BTreeSet<String>,
}

impl HostFs {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(files: I) -> Self {
        HostFs {
            files: files.into_iter().map(Into::into).collect(),
        }
    }

    pub fn exists(&self, path: &str) -> bool {
        self.files.contains(path) || self.under(path).next().is_some()
    }

    fn under<'a>(&'a self, dir: &str) -> impl Iterator<Item = &'a String> + 'a {
        let prefix = format!("{}/", dir.trim_end_matches('/'));
        self.files
            .range(prefix.clone()..)
            .take_while(move |p| p.starts_with(&prefix))
    }
}

/// Files visible in the container: the image files with each mount laid
/// over them in order. A mount hides whatever the image had at and below
/// its destination.
pub fn effective_files(
    base: &BTreeSet<String>,
    mounts: &[SpecMount],
    host: &HostFs,
) -> BTreeSet<String> {
    let mut files = base.clone();
    for m in mounts {
        let dst = m.destination.trim_end_matches('/');
        let prefix = format!("{dst}/");
        files.retain(|f| f != dst && !f.starts_with(&prefix));
        if host.files.contains(&m.source) {
            files.insert(dst.to_string());
        }
        let src_prefix = format!("{}/", m.source.trim_end_matches('/'));
        for f in host.under(&m.source) {
            files.insert(format!("{dst}/{}", &f[src_prefix.len()..]));
        }
    }
    files
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostLibrary {
    pub soname: String,
    pub path: String,
    pub version: String,
    pub abi_tag: String,
    #[serde(default)]
    pub inject_if_missing: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostLibraryCatalog {
    #[serde(default)]
    pub libraries: Vec<HostLibrary>,
}

impl HostLibraryCatalog {
    pub fn new(libraries: Vec<HostLibrary>) -> Self {
        HostLibraryCatalog { libraries }
    }

    pub fn check(&self, host: &HostFs) -> Result<(), HookError> {
        let mut seen = BTreeSet::new();
        for lib in &self.libraries {
            let v = Version::parse(&lib.version)?;
            match soname_of(&lib.soname) {
                Some((s, sv)) if s == lib.soname && sv.major == v.major => {}
                _ => {
                    return Err(HookError::InvalidConfig(format!(
                        "host library {} does not match version {}",
                        lib.soname, lib.version
                    )))
                }
            }
            if !host.files.contains(&lib.path) {
                return Err(HookError::InvalidConfig(format!(
                    "host library {} missing at {}",
                    lib.soname, lib.path
                )));
            }
            if !seen.insert((&lib.soname, &lib.abi_tag)) {
                return Err(HookError::InvalidConfig(format!(
                    "host library {} ({}) listed twice",
                    lib.soname, lib.abi_tag
                )));
            }
        }
        Ok(())
    }

    /// Every entry for `soname`, in catalog order.
    pub fn by_soname(&self, soname: &str) -> Vec<&HostLibrary> {
        self.libraries
            .iter()
            .filter(|l| l.soname == soname)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectPolicy {
    pub abi_tag: String,
    #[serde(default = "default_inject_dir")]
    pub inject_dir: String,
    #[serde(default = "default_library_dirs")]
    pub library_dirs: Vec<String>,
}

fn default_inject_dir() -> String {
    "/usr/lib/injected".to_string()
}

fn default_library_dirs() -> Vec<String> {
    ["/lib", "/lib64", "/usr/lib", "/usr/lib64"]
        .map(String::from)
        .to_vec()
}

impl Default for InjectPolicy {
    fn default() -> Self {
        InjectPolicy {
            abi_tag: "x86_64".to_string(),
            inject_dir: default_inject_dir(),
            library_dirs: default_library_dirs(),
        }
    }
}

impl InjectPolicy {
    /// Search directories, with the injection directory last.
    pub fn search_dirs(&self) -> Vec<String> {
        let mut dirs = self.library_dirs.clone();
        if !dirs.contains(&self.inject_dir) {
            dirs.push(self.inject_dir.clone());
        }
        dirs
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Placement {
    pub soname: String,
    pub host_path: String,
    pub container_path: String,
}

impl Placement {
    pub fn mount(&self) -> SpecMount {
        SpecMount::bind(self.host_path.clone(), self.container_path.clone(), true)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Skip {
    pub soname: String,
    pub host_path: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct InjectionPlan {
    pub replacements: Vec<Placement>,
    pub additions: Vec<Placement>,
    pub skips: Vec<Skip>,
}

impl InjectionPlan {
    pub fn is_empty(&self) -> bool {
        self.replacements.is_empty() && self.additions.is_empty() && self.skips.is_empty()
    }

    pub fn len(&self) -> usize {
        self.replacements.len() + self.additions.len() + self.skips.len()
    }

    pub fn mounts(&self) -> Vec<SpecMount> {
        self.replacements
            .iter()
            .chain(&self.additions)
            .map(Placement::mount)
            .collect()
    }
}

/// Decides, for each host library, whether it replaces a container library,
/// is added to the injection directory, or is skipped. Every host library
/// gets exactly one outcome.
pub fn libinject_hook(
    cache: &LinkerCacheModel,
    hosts: &[HostLibrary],
    policy: &InjectPolicy,
) -> InjectionPlan {
    let mut plan = InjectionPlan::default();
    let mut targets = BTreeSet::new();
    for lib in hosts {
        let skip = |reason: String| Skip {
            soname: lib.soname.clone(),
            host_path: lib.path.clone(),
            reason,
        };
        let matches = cache.lookup(&lib.soname);
        if let Some(entry) = matches.iter().find(|e| e.abi_tag == lib.abi_tag) {
            let container_version = entry.version.to_string();
            match abi_compatible(
                (&entry.soname, &container_version),
                (&lib.soname, &lib.version),
            ) {
                Ok(true) if targets.insert(entry.path.clone()) => {
                    plan.replacements.push(Placement {
                        soname: lib.soname.clone(),
                        host_path: lib.path.clone(),
                        container_path: entry.path.clone(),
                    })
                }
                Ok(true) => plan
                    .skips
                    .push(skip(format!("{} already replaced", entry.path))),
                Ok(false) => plan.skips.push(skip(format!(
                    "host {} incompatible with container {}",
                    lib.version, container_version
                ))),
                Err(e) => plan.skips.push(skip(e.to_string())),
            }
        } else if !matches.is_empty() {
            plan.skips.push(skip(format!(
                "no {} entry (container has {})",
                lib.abi_tag,
                matches
                    .iter()
                    .map(|e| e.abi_tag.as_str())
                    .collect::<Vec<_>>()
                    .join(",")
            )));
        } else if lib.inject_if_missing {
            match Version::parse(&lib.version) {
                Ok(v) => {
                    let dst = format!(
                        "{}/{}.{}.{}",
                        policy.inject_dir.trim_end_matches('/'),
                        lib.soname,
                        v.minor,
                        v.patch
                    );
                    if targets.insert(dst.clone()) {
                        plan.additions.push(Placement {
                            soname: lib.soname.clone(),
                            host_path: lib.path.clone(),
                            container_path: dst,
                        });
                    } else {
                        plan.skips.push(skip(format!("{dst} already injected")));
                    }
                }
                Err(e) => plan.skips.push(skip(e.to_string())),
            }
        } else {
            plan.skips
                .push(skip("no matching container library".to_string()));
        }
    }
    plan
}

/// Rebuilds the cache from the container's effective file set.
pub fn ldcache_refresh(files: &BTreeSet<String>, policy: &InjectPolicy) -> LinkerCacheModel {
    LinkerCacheModel::scan(files, &policy.search_dirs(), &policy.abi_tag)
}
