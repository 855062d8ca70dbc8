//! A reduced OCI runtime configuration: the parts hooks read and edit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::HookError;
use crate::plan::EnginePlan;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecMount {
    pub source: String,
    pub destination: String,
    #[serde(default)]
    pub options: Vec<String>,
}

impl SpecMount {
    pub fn bind(
        source: impl Into<String>,
        destination: impl Into<String>,
        read_only: bool,
    ) -> Self {
        SpecMount {
            source: source.into(),
            destination: destination.into(),
            options: vec![
                "rbind".to_string(),
                if read_only { "ro" } else { "rw" }.to_string(),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceNode {
    pub path: String,
    /// `c` (character) or `b` (block).
    #[serde(rename = "type")]
    pub kind: String,
    pub major: u32,
    pub minor: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageHooks {
    pub precreate: Vec<String>,
    pub create_runtime: Vec<String>,
    pub prestart: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeSpec {
    pub env: Vec<(String, String)>,
    pub mounts: Vec<SpecMount>,
    pub devices: Vec<DeviceNode>,
    pub annotations: BTreeMap<String, String>,
    pub hooks: StageHooks,
    pub root: String,
}

impl RuntimeSpec {
    pub fn new(root: impl Into<String>) -> Self {
        RuntimeSpec {
            root: root.into(),
            ..Self::default()
        }
    }

    /// Initial configuration the engine would derive from a plan, before
    /// device resolution.
    pub fn from_plan(plan: &EnginePlan, root: impl Into<String>) -> Self {
        let mut spec = RuntimeSpec::new(root);
        for (k, v) in plan.env() {
            spec.set_env(k, v);
        }
        for m in plan.mounts() {
            spec.mounts.push(SpecMount::bind(
                m.source.clone(),
                m.destination.clone(),
                m.read_only,
            ));
        }
        for (k, v) in plan.annotations() {
            spec.annotations.insert(k.to_string(), v.to_string());
        }
        spec
    }

    pub fn get_env(&self, name: &str) -> Option<&str> {
        self.env
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    }

    /// Replaces an existing value in place, otherwise appends.
    pub fn set_env(&mut self, name: &str, value: &str) {
        match self.env.iter_mut().find(|(k, _)| k == name) {
            Some(slot) => slot.1 = value.to_string(),
            None => self.env.push((name.to_string(), value.to_string())),
        }
    }

    pub fn mount_at(&self, destination: &str) -> Option<&SpecMount> {
        self.mounts.iter().find(|m| m.destination == destination)
    }

    pub fn check(&self) -> Result<(), HookError> {
        for (i, (k, _)) in self.env.iter().enumerate() {
            if self.env[..i].iter().any(|(p, _)| p == k) {
                return Err(HookError::InvalidSpec(format!("duplicate env {k}")));
            }
        }
        for m in &self.mounts {
            if !m.destination.starts_with('/') {
                return Err(HookError::InvalidSpec(format!(
                    "mount destination {} is not absolute",
                    m.destination
                )));
            }
        }
        Ok(())
    }
}

/// Parses `NAME=value`.
pub(crate) fn split_env(item: &str) -> Result<(&str, &str), HookError> {
    match item.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k, v)),
        _ => Err(HookError::InvalidConfig(format!(
            "env entry {item:?} is not NAME=value"
        ))),
    }
}
