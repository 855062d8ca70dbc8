//! Runtime hook pipeline applied to a container's runtime configuration
//! before it starts.
//!
//! Stages run in a fixed order: device edits (CDI), precreate edits,
//! host-library injection, linker cache refresh, MPS service. Hooks are
//! selected by annotations of the form `com.hooks.<name>.enabled = "true"`,
//! with optional `com.hooks.<name>.<param>` parameters.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod cdi;
pub mod libs;
pub mod pce;
pub mod spec;

pub use cdi::{apply_cdi, CdiDevice, CdiRegistry, CdiSpec, ContainerEdits};
pub use libs::{
    abi_compatible, effective_files, ldcache_refresh, libinject_hook, CacheEntry, HostFs,
    HostLibrary, HostLibraryCatalog, InjectPolicy, InjectionPlan, LinkerCacheModel, Placement,
    Skip, Version,
};
pub use pce::{check_precreate_scope, pce_hook, PceConfig, Profile};
pub use spec::{DeviceNode, RuntimeSpec, SpecMount, StageHooks};

pub const HOOK_PREFIX: &str = "com.hooks.";
pub const MPS_HOOK: &str = "nvidia_cuda_mps";
pub const MPS_PIPE_ENV: &str = "CUDA_MPS_PIPE_DIRECTORY";
pub const MPS_LOG_ENV: &str = "CUDA_MPS_LOG_DIRECTORY";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HookError {
    #[error("unknown device {0}")]
    UnknownDevice(String),
    #[error("environment variable {name} set by {first} and {second}")]
    EnvConflict {
        name: String,
        first: String,
        second: String,
    },
    #[error("mount destination {destination} claimed by {first} and {second}")]
    MountConflict {
        destination: String,
        first: String,
        second: String,
    },
    #[error("no hook profile {0}")]
    MissingProfile(String),
    #[error("hook contract violation: {0}")]
    ContractViolation(String),
    #[error("unparseable version {0:?}")]
    UnparseableVersion(String),
    #[error("invalid hook annotation {key}: {reason}")]
    InvalidAnnotation { key: String, reason: String },
    #[error("host library {0} is not in the catalog")]
    UnknownLibrary(String),
    #[error("invalid hook configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid runtime configuration: {0}")]
    InvalidSpec(String),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Cdi,
    Pce,
    Libinject,
    Ldcache,
    Mps,
}

impl Stage {
    pub const ORDER: [Stage; 5] = [
        Stage::Cdi,
        Stage::Pce,
        Stage::Libinject,
        Stage::Ldcache,
        Stage::Mps,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "edit", rename_all = "kebab-case")]
pub enum Edit {
    SetEnv {
        name: String,
        value: String,
    },
    AddMount(SpecMount),
    AddDevice(DeviceNode),
    ReplaceLibrary(Placement),
    AddLibrary(Placement),
    SkipLibrary(Skip),
    RefreshCache {
        entries: usize,
    },
    StartMps {
        pipe_directory: String,
        log_directory: String,
    },
}

/// One entry of the pipeline's action log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Action {
    pub stage: Stage,
    /// Device or hook the edit came from.
    pub origin: String,
    #[serde(flatten)]
    pub edit: Edit,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HookRequest {
    pub enabled: bool,
    pub params: BTreeMap<String, String>,
}

/// Hook activation parsed from annotations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HookRequests {
    hooks: BTreeMap<String, HookRequest>,
}

impl HookRequests {
    /// Reads every `com.hooks.*` annotation; others are ignored.
    pub fn parse(annotations: &BTreeMap<String, String>) -> Result<Self, HookError> {
        let mut hooks: BTreeMap<String, HookRequest> = BTreeMap::new();
        for (key, value) in annotations {
            let Some(rest) = key.strip_prefix(HOOK_PREFIX) else {
                continue;
            };
            let bad = |reason: &str| HookError::InvalidAnnotation {
                key: key.clone(),
                reason: reason.to_string(),
            };
            let (name, param) = rest
                .split_once('.')
                .ok_or_else(|| bad("expected com.hooks.<name>.<parameter>"))?;
            if name.is_empty() || param.is_empty() {
                return Err(bad("expected com.hooks.<name>.<parameter>"));
            }
            let req = hooks.entry(name.to_string()).or_default();
            if param == "enabled" {
                req.enabled = match value.as_str() {
                    "true" => true,
                    "false" => false,
                    _ => return Err(bad("enabled must be \"true\" or \"false\"")),
                };
            } else {
                req.params.insert(param.to_string(), value.clone());
            }
        }
        Ok(HookRequests { hooks })
    }

    pub fn enabled(&self) -> impl Iterator<Item = (&str, &HookRequest)> {
        self.hooks
            .iter()
            .filter(|(_, r)| r.enabled)
            .map(|(n, r)| (n.as_str(), r))
    }

    pub fn is_enabled(&self, name: &str) -> bool {
        self.hooks.get(name).is_some_and(|r| r.enabled)
    }
}

/// Hooks handled by a dedicated stage rather than by precreate profiles.
pub(crate) fn owned_by_pce(name: &str) -> bool {
    name != MPS_HOOK
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpsConfig {
    pub pipe_directory: String,
    pub log_directory: String,
}

impl Default for MpsConfig {
    fn default() -> Self {
        MpsConfig {
            pipe_directory: "/tmp/nvidia-mps".to_string(),
            log_directory: "/tmp/nvidia-log".to_string(),
        }
    }
}

/// Record of an MPS control daemon the node would start for the container.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MpsService {
    pub pipe_directory: String,
    pub log_directory: String,
}

/// Returns the service record and adds its directories to the env when
/// `com.hooks.nvidia_cuda_mps.enabled` is `"true"`.
pub fn mps_hook(
    spec: &mut RuntimeSpec,
    annotations: &BTreeMap<String, String>,
    config: &MpsConfig,
) -> Option<MpsService> {
    let key = format!("{HOOK_PREFIX}{MPS_HOOK}.enabled");
    if annotations.get(&key).map(String::as_str) != Some("true") {
        return None;
    }
    spec.set_env(MPS_PIPE_ENV, &config.pipe_directory);
    spec.set_env(MPS_LOG_ENV, &config.log_directory);
    Some(MpsService {
        pipe_directory: config.pipe_directory.clone(),
        log_directory: config.log_directory.clone(),
    })
}

/// Node-side hook configuration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HookRegistry {
    pub cdi: CdiRegistry,
    pub pce: PceConfig,
    pub host: HostFs,
    pub libraries: HostLibraryCatalog,
    pub policy: InjectPolicy,
    pub mps: MpsConfig,
}

/// `host.toml` in a hook configuration directory.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct HostFile {
    #[serde(default)]
    files: Vec<String>,
    #[serde(default)]
    libraries: Vec<HostLibrary>,
    #[serde(default)]
    policy: Option<InjectPolicy>,
    #[serde(default)]
    mps: Option<MpsConfig>,
}

impl HookRegistry {
    /// Loads `<dir>/host.toml`, `<dir>/pce.toml` and the device files in
    /// `cdi_dir`. Missing files yield empty sections.
    pub fn load(dir: &Path, cdi_dir: &Path) -> Result<Self, HookError> {
        let read = |name: &str| -> Result<Option<String>, HookError> {
            let p = dir.join(name);
            match std::fs::read_to_string(&p) {
                Ok(t) => Ok(Some(t)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                Err(e) => Err(HookError::Io(format!("{}: {e}", p.display()))),
            }
        };
        let host: HostFile = match read("host.toml")? {
            Some(t) => toml::from_str(&t)
                .map_err(|e| HookError::InvalidConfig(format!("host.toml: {e}")))?,
            None => HostFile::default(),
        };
        let pce = match read("pce.toml")? {
            Some(t) => PceConfig::parse(&t)?,
            None => PceConfig::default(),
        };
        let reg = HookRegistry {
            cdi: CdiRegistry::load_dir(cdi_dir)?,
            pce,
            host: HostFs::new(host.files),
            libraries: HostLibraryCatalog::new(host.libraries),
            policy: host.policy.unwrap_or_default(),
            mps: host.mps.unwrap_or_default(),
        };
        reg.libraries.check(&reg.host)?;
        Ok(reg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub spec: RuntimeSpec,
    pub log: Vec<Action>,
    /// Cache of the container as configured before the pipeline.
    pub cache_before: LinkerCacheModel,
    pub cache_after: LinkerCacheModel,
    pub injection: InjectionPlan,
    pub mps: Option<MpsService>,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{stage:?} stage failed: {error}")]
pub struct PipelineFailure {
    pub stage: Stage,
    pub error: HookError,
    /// Actions of the stages that completed.
    pub log: Vec<Action>,
}

/// Runs every stage over `spec`. `rootfs` lists the image's files;
/// `devices` are requested device names.
pub fn run_pipeline(
    spec: &RuntimeSpec,
    annotations: &BTreeMap<String, String>,
    devices: &[String],
    rootfs: &BTreeSet<String>,
    registry: &HookRegistry,
) -> Result<PipelineOutput, PipelineFailure> {
    let mut log = Vec::new();
    let fail = |stage, error, log: &Vec<Action>| PipelineFailure {
        stage,
        error,
        log: log.clone(),
    };

    let cache_before = ldcache_refresh(
        &effective_files(rootfs, &spec.mounts, &registry.host),
        &registry.policy,
    );

    let cdi = apply_cdi(spec, &registry.cdi, devices).map_err(|e| fail(Stage::Cdi, e, &log))?;
    log.extend(cdi.actions);

    let requests = HookRequests::parse(annotations).map_err(|e| fail(Stage::Pce, e, &log))?;
    let pce = pce_hook(&cdi.spec, &registry.pce, &requests, &cdi.env_origins)
        .map_err(|e| fail(Stage::Pce, e, &log))?;
    log.extend(pce.actions);
    let mut current = pce.spec;

    let cache = ldcache_refresh(
        &effective_files(rootfs, &current.mounts, &registry.host),
        &registry.policy,
    );
    let mut hosts = Vec::new();
    let mut origin_of = BTreeMap::new();
    for (soname, origin) in &pce.libraries {
        let found = registry.libraries.by_soname(soname);
        if found.is_empty() {
            return Err(fail(
                Stage::Libinject,
                HookError::UnknownLibrary(soname.clone()),
                &log,
            ));
        }
        for lib in found {
            origin_of.insert(lib.path.clone(), origin.clone());
            hosts.push(lib.clone());
        }
    }
    let mut injection = libinject_hook(&cache, &hosts, &registry.policy);
    // A target another stage already mounts over stays as it is.
    let taken: BTreeSet<String> = current
        .mounts
        .iter()
        .map(|m| m.destination.clone())
        .collect();
    let (keep, clash): (Vec<_>, Vec<_>) = injection
        .replacements
        .drain(..)
        .partition(|p| !taken.contains(&p.container_path));
    injection.replacements = keep;
    injection.skips.extend(clash.into_iter().map(|p| Skip {
        reason: format!("{} is already a mount target", p.container_path),
        soname: p.soname,
        host_path: p.host_path,
    }));
    let origin = |host_path: &str| origin_of.get(host_path).cloned().unwrap_or_default();
    for p in &injection.replacements {
        log.push(Action {
            stage: Stage::Libinject,
            origin: origin(&p.host_path),
            edit: Edit::ReplaceLibrary(p.clone()),
        });
    }
    for p in &injection.additions {
        log.push(Action {
            stage: Stage::Libinject,
            origin: origin(&p.host_path),
            edit: Edit::AddLibrary(p.clone()),
        });
    }
    for s in &injection.skips {
        log.push(Action {
            stage: Stage::Libinject,
            origin: origin(&s.host_path),
            edit: Edit::SkipLibrary(s.clone()),
        });
    }
    current.mounts.extend(injection.mounts());

    let cache_after = ldcache_refresh(
        &effective_files(rootfs, &current.mounts, &registry.host),
        &registry.policy,
    );
    if !injection.replacements.is_empty()
        || !injection.additions.is_empty()
        || cache_after != cache_before
    {
        log.push(Action {
            stage: Stage::Ldcache,
            origin: "ldcache".to_string(),
            edit: Edit::RefreshCache {
                entries: cache_after.len(),
            },
        });
    }

    let mps = mps_hook(&mut current, annotations, &registry.mps);
    if let Some(svc) = &mps {
        log.push(Action {
            stage: Stage::Mps,
            origin: MPS_HOOK.to_string(),
            edit: Edit::StartMps {
                pipe_directory: svc.pipe_directory.clone(),
                log_directory: svc.log_directory.clone(),
            },
        });
    }
    current.check().map_err(|e| fail(Stage::Mps, e, &log))?;

    Ok(PipelineOutput {
        spec: current,
        log,
        cache_before,
        cache_after,
        injection,
        mps,
    })
}
