//! Device descriptions and their application to a runtime configuration.
//!
//! One TOML document per device kind:
//!
//! ```toml
//! kind = "nvidia.com/gpu"
//!
//! [container_edits]            # applied once when any device is selected
//! env = ["NVIDIA_VISIBLE_DEVICES=void"]
//!
//! [[devices]]
//! name = "0"
//! [devices.container_edits]
//! device_nodes = [{ path = "/dev/nvidia0", type = "c", major = 195, minor = 0 }]
//! mounts = [{ source = "/usr/bin/nvidia-smi", destination = "/usr/bin/nvidia-smi", options = ["ro"] }]
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::spec::{split_env, DeviceNode, RuntimeSpec, SpecMount};
use super::{Action, Edit, HookError, Stage};
use crate::edf::parse_device_name;

pub const ALL_DEVICES: &str = "all";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerEdits {
    #[serde(default)]
    pub env: Vec<String>,
    #[serde(default)]
    pub mounts: Vec<SpecMount>,
    #[serde(default)]
    pub device_nodes: Vec<DeviceNode>,
}

impl ContainerEdits {
    pub fn is_empty(&self) -> bool {
        self.env.is_empty() && self.mounts.is_empty() && self.device_nodes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CdiDevice {
    pub name: String,
    #[serde(default)]
    pub container_edits: ContainerEdits,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CdiSpec {
    pub kind: String,
    #[serde(default)]
    pub container_edits: ContainerEdits,
    #[serde(default)]
    pub devices: Vec<CdiDevice>,
}

impl CdiSpec {
    pub fn parse(text: &str) -> Result<Self, HookError> {
        let spec: CdiSpec =
            toml::from_str(text).map_err(|e| HookError::InvalidConfig(e.to_string()))?;
        spec.check()?;
        Ok(spec)
    }

    fn check(&self) -> Result<(), HookError> {
        let bad = |m: String| Err(HookError::InvalidConfig(m));
        match self.kind.split_once('/') {
            Some((v, c)) if !v.is_empty() && !c.is_empty() && !c.contains(['/', '=']) => {}
            _ => return bad(format!("kind {:?} is not vendor/class", self.kind)),
        }
        let mut seen = BTreeSet::new();
        for d in &self.devices {
            if d.name.is_empty() || d.name.contains(['=', '/']) || d.name == ALL_DEVICES {
                return bad(format!("{}: invalid device name {:?}", self.kind, d.name));
            }
            if !seen.insert(&d.name) {
                return bad(format!("{}: duplicate device {}", self.kind, d.name));
            }
        }
        Ok(())
    }
}

/// All device kinds known on a node.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CdiRegistry {
    specs: BTreeMap<String, CdiSpec>,
}

impl CdiRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, spec: CdiSpec) -> Result<(), HookError> {
        spec.check()?;
        if self.specs.contains_key(&spec.kind) {
            return Err(HookError::InvalidConfig(format!(
                "device kind {} defined twice",
                spec.kind
            )));
        }
        self.specs.insert(spec.kind.clone(), spec);
        Ok(())
    }

    /// Loads every `*.toml` file in `dir`, in name order.
    pub fn load_dir(dir: &Path) -> Result<Self, HookError> {
        let mut reg = CdiRegistry::new();
        let rd = match std::fs::read_dir(dir) {
            Ok(rd) => rd,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(reg),
            Err(e) => return Err(HookError::Io(format!("{}: {e}", dir.display()))),
        };
        let mut files: Vec<_> = rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        files.sort();
        for f in files {
            let text = std::fs::read_to_string(&f)
                .map_err(|e| HookError::Io(format!("{}: {e}", f.display())))?;
            let spec = CdiSpec::parse(&text).map_err(|e| match e {
                HookError::InvalidConfig(m) => {
                    HookError::InvalidConfig(format!("{}: {m}", f.display()))
                }
                other => other,
            })?;
            reg.add(spec)?;
        }
        Ok(reg)
    }

    pub fn kinds(&self) -> impl Iterator<Item = &CdiSpec> {
        self.specs.values()
    }

    /// Expands requested names into sorted, deduplicated `(kind, device)`
    /// pairs.
    pub fn resolve(&self, requested: &[String]) -> Result<Vec<(&CdiSpec, &CdiDevice)>, HookError> {
        let mut picked: BTreeMap<(String, String), (&CdiSpec, &CdiDevice)> = BTreeMap::new();
        for name in requested {
            let (vendor, class, dev) =
                parse_device_name(name).ok_or_else(|| HookError::UnknownDevice(name.clone()))?;
            let kind = format!("{vendor}/{class}");
            let spec = self
                .specs
                .get(&kind)
                .ok_or_else(|| HookError::UnknownDevice(name.clone()))?;
            let matched: Vec<&CdiDevice> = if dev == ALL_DEVICES {
                spec.devices.iter().collect()
            } else {
                spec.devices.iter().filter(|d| d.name == dev).collect()
            };
            if matched.is_empty() {
                return Err(HookError::UnknownDevice(name.clone()));
            }
            for d in matched {
                picked.insert((kind.clone(), d.name.clone()), (spec, d));
            }
        }
        Ok(picked.into_values().collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdiOutcome {
    pub spec: RuntimeSpec,
    pub actions: Vec<Action>,
    /// Environment set by this stage, with the edit that set it.
    pub env_origins: BTreeMap<String, (String, String)>,
}

/// Merges the edits of every requested device into `spec`, ordered by
/// qualified device name. Kind-wide edits precede the kind's first device.
pub fn apply_cdi(
    spec: &RuntimeSpec,
    registry: &CdiRegistry,
    requested: &[String],
) -> Result<CdiOutcome, HookError> {
    let resolved = registry.resolve(requested)?;
    let mut out = CdiOutcome {
        spec: spec.clone(),
        actions: Vec::new(),
        env_origins: BTreeMap::new(),
    };
    let mut kinds_done = BTreeSet::new();
    for (kind, dev) in resolved {
        if kinds_done.insert(kind.kind.as_str()) && !kind.container_edits.is_empty() {
            merge(&mut out, &kind.kind, &kind.container_edits)?;
        }
        let origin = format!("{}={}", kind.kind, dev.name);
        merge(&mut out, &origin, &dev.container_edits)?;
    }
    out.spec.check()?;
    Ok(out)
}

fn merge(out: &mut CdiOutcome, origin: &str, edits: &ContainerEdits) -> Result<(), HookError> {
    let act = |edit| Action {
        stage: Stage::Cdi,
        origin: origin.to_string(),
        edit,
    };
    for item in &edits.env {
        let (k, v) = split_env(item)?;
        if let Some((prev_v, prev_origin)) = out.env_origins.get(k) {
            if prev_v != v {
                return Err(HookError::EnvConflict {
                    name: k.to_string(),
                    first: format!("{prev_origin} ({prev_v})"),
                    second: format!("{origin} ({v})"),
                });
            }
            continue;
        }
        out.env_origins
            .insert(k.to_string(), (v.to_string(), origin.to_string()));
        out.spec.set_env(k, v);
        out.actions.push(act(Edit::SetEnv {
            name: k.to_string(),
            value: v.to_string(),
        }));
    }
    for m in &edits.mounts {
        match out.spec.mount_at(&m.destination) {
            Some(existing) if existing == m => continue,
            Some(existing) => {
                return Err(HookError::MountConflict {
                    destination: m.destination.clone(),
                    first: existing.source.clone(),
                    second: m.source.clone(),
                })
            }
            None => {}
        }
        out.spec.mounts.push(m.clone());
        out.actions.push(act(Edit::AddMount(m.clone())));
    }
    for d in &edits.device_nodes {
        match out.spec.devices.iter().find(|x| x.path == d.path) {
            Some(existing) if existing == d => continue,
            Some(_) => {
                return Err(HookError::InvalidConfig(format!(
                    "device node {} defined with different numbers",
                    d.path
                )))
            }
            None => {}
        }
        out.spec.devices.push(d.clone());
        out.actions.push(act(Edit::AddDevice(d.clone())));
    }
    Ok(())
}
