//! Precreate container edits: environment and mount changes taken from
//! site profiles selected by hook annotations.
//!
//! ```toml
//! [profiles.cxi]
//! env = ["FI_PROVIDER=cxi"]
//! mounts = [{ source = "/opt/cray/libfabric/1.22.0", destination = "/opt/cray/libfabric", options = ["ro"] }]
//! libraries = ["libfabric.so.1"]
//!
//! [profiles."aws_ofi_nccl.cuda12"]
//! env = ["NCCL_NET_PLUGIN=ofi"]
//! ```
//!
//! A profile is looked up as `<hook>.<variant>` when the hook carries a
//! `variant` parameter, otherwise as `<hook>`. `libraries` names host
//! libraries handed to the injection stage.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::spec::{split_env, DeviceNode, RuntimeSpec, SpecMount};
use super::{Action, Edit, HookError, HookRequests, Stage};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profile {
    #[serde(default)]
    pub env: Vec<String>,
    #[serde(default)]
    pub mounts: Vec<SpecMount>,
    /// Not an edit this stage may make; a profile carrying device nodes
    /// fails the scope check when applied.
    #[serde(default)]
    pub device_nodes: Vec<DeviceNode>,
    #[serde(default)]
    pub libraries: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PceConfig {
    #[serde(default)]
    pub profiles: BTreeMap<String, Profile>,
}

impl PceConfig {
    pub fn parse(text: &str) -> Result<Self, HookError> {
        toml::from_str(text).map_err(|e| HookError::InvalidConfig(e.to_string()))
    }

    /// Profile key for hook `name` given its parameters.
    pub fn profile_key(name: &str, params: &BTreeMap<String, String>) -> String {
        match params.get("variant") {
            Some(v) => format!("{name}.{v}"),
            None => name.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PceOutcome {
    pub spec: RuntimeSpec,
    pub actions: Vec<Action>,
    /// Host library sonames requested by the applied profiles, with the
    /// first profile requesting each.
    pub libraries: BTreeMap<String, String>,
}

/// Fails unless `after` differs from `before` only in env and mounts.
pub fn check_precreate_scope(before: &RuntimeSpec, after: &RuntimeSpec) -> Result<(), HookError> {
    let mut changed = Vec::new();
    if before.devices != after.devices {
        changed.push("devices");
    }
    if before.annotations != after.annotations {
        changed.push("annotations");
    }
    if before.hooks != after.hooks {
        changed.push("hooks");
    }
    if before.root != after.root {
        changed.push("root");
    }
    if changed.is_empty() {
        Ok(())
    } else {
        Err(HookError::ContractViolation(format!(
            "precreate edits changed {}",
            changed.join(", ")
        )))
    }
}

/// Applies the profile of every enabled hook the stage owns, in hook-name
/// order. `env_owner` holds environment already set by earlier stages; a
/// different value for the same name is a conflict.
pub fn pce_hook(
    spec: &RuntimeSpec,
    config: &PceConfig,
    requests: &HookRequests,
    env_owner: &BTreeMap<String, (String, String)>,
) -> Result<PceOutcome, HookError> {
    let mut out = PceOutcome {
        spec: spec.clone(),
        actions: Vec::new(),
        libraries: BTreeMap::new(),
    };
    let mut owner = env_owner.clone();
    for (name, req) in requests.enabled() {
        if !super::owned_by_pce(name) {
            continue;
        }
        let key = PceConfig::profile_key(name, &req.params);
        let profile = config
            .profiles
            .get(&key)
            .ok_or_else(|| HookError::MissingProfile(key.clone()))?;
        let act = |edit| Action {
            stage: Stage::Pce,
            origin: name.to_string(),
            edit,
        };
        for item in &profile.env {
            let (k, v) = split_env(item)?;
            if let Some((prev_v, prev_origin)) = owner.get(k) {
                if prev_v != v {
                    return Err(HookError::EnvConflict {
                        name: k.to_string(),
                        first: format!("{prev_origin} ({prev_v})"),
                        second: format!("{name} ({v})"),
                    });
                }
                continue;
            }
            owner.insert(k.to_string(), (v.to_string(), name.to_string()));
            out.spec.set_env(k, v);
            out.actions.push(act(Edit::SetEnv {
                name: k.to_string(),
                value: v.to_string(),
            }));
        }
        for m in &profile.mounts {
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
        out.spec
            .devices
            .extend(profile.device_nodes.iter().cloned());
        for lib in &profile.libraries {
            out.libraries
                .entry(lib.clone())
                .or_insert_with(|| name.to_string());
        }
    }
    check_precreate_scope(spec, &out.spec)?;
    out.spec.check()?;
    Ok(out)
}
