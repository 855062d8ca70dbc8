//! Pod manifests: a strict subset of the Kubernetes `v1/Pod` schema, planned
//! into per-container engine plans and run on one simulated node.
//!
//! Supported keys: `apiVersion`, `kind`, `metadata.{name,annotations}`,
//! `spec.{restartPolicy,volumes,initContainers,containers}`; volumes with
//! `emptyDir: {}` or `hostPath: {path}`; containers with `name`, `image`,
//! `command`, `args`, `workingDir`, `env`, `volumeMounts` and
//! `resources.limits`. Anything else is an error naming the key.
//!
//! A pod annotation key ending in `/<container>` applies to that container
//! only and takes precedence over the pod-wide key.

use std::cell::RefCell;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use hpcc_core::edf::{parse_device_name, Edf, MountSpec, ValidatedEdf};
use hpcc_core::hooks::{run_pipeline, HookRegistry, RuntimeSpec};
use hpcc_core::imagestore::{Identity, MountOwner, SharedStore, StoreBackend, UpperLayer};
use hpcc_core::plan::{render_plan, EnginePlan, SiteConfig, StepContext};

use crate::error::CliError;
use crate::exec::{parse_command, Backing, ContainerFs, Outcome, Process, SharedDir, Verb};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PodError {
    #[error("manifest: {0}")]
    Parse(String),
    #[error("unsupported kind `{0}` (only Pod)")]
    UnsupportedKind(String),
    #[error("unsupported apiVersion `{0}` (only v1)")]
    UnsupportedApiVersion(String),
    #[error("unsupported value `{value}` for `{key}`")]
    Unsupported { key: String, value: String },
    #[error("pod has no containers")]
    NoContainers,
    #[error("duplicate volume `{0}`")]
    DuplicateVolume(String),
    #[error("volume `{name}`: {reason}")]
    BadVolume { name: String, reason: String },
    #[error("container `{container}` mounts undeclared volume `{volume}`")]
    UndeclaredVolume { container: String, volume: String },
    #[error("duplicate container name `{0}`")]
    DuplicateContainer(String),
    #[error("container `{container}`: {reason}")]
    BadContainer { container: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct PodManifest {
    pub api_version: String,
    pub kind: String,
    pub metadata: Metadata,
    pub spec: PodSpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub name: String,
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub annotations: IndexMap<String, String>,
}

fn never() -> String {
    "Never".to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct PodSpec {
    #[serde(default = "never")]
    pub restart_policy: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub volumes: Vec<Volume>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub init_containers: Vec<ContainerSpec>,
    pub containers: Vec<ContainerSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct Volume {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub empty_dir: Option<EmptyDir>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host_path: Option<HostPath>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmptyDir {}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostPath {
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VolumeKind<'a> {
    EmptyDir,
    HostPath(&'a str),
}

impl Volume {
    pub fn kind(&self) -> Result<VolumeKind<'_>, PodError> {
        match (&self.empty_dir, &self.host_path) {
            (Some(_), None) => Ok(VolumeKind::EmptyDir),
            (None, Some(h)) => Ok(VolumeKind::HostPath(&h.path)),
            _ => Err(PodError::BadVolume {
                name: self.name.clone(),
                reason: "needs exactly one of emptyDir or hostPath".into(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct ContainerSpec {
    pub name: String,
    pub image: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub command: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub args: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub working_dir: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub env: Vec<EnvVar>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub volume_mounts: Vec<VolumeMount>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resources: Option<Resources>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvVar {
    pub name: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct VolumeMount {
    pub name: String,
    pub mount_path: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub read_only: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resources {
    #[serde(default)]
    pub limits: IndexMap<String, u32>,
}

impl ContainerSpec {
    /// The CDI device requested through `resources.limits`, if any.
    pub fn device_request(&self) -> Option<&str> {
        self.resources
            .as_ref()
            .and_then(|r| r.limits.keys().next())
            .map(String::as_str)
    }
}

impl PodManifest {
    pub fn all_containers(&self) -> impl Iterator<Item = &ContainerSpec> {
        self.spec
            .init_containers
            .iter()
            .chain(&self.spec.containers)
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("manifests serialize")
    }

    /// Annotations seen by `container`: pod-wide keys, then keys scoped to
    /// the container with `/<name>`, which win.
    pub fn effective_annotations(&self, container: &str) -> IndexMap<String, String> {
        let names: Vec<&str> = self.all_containers().map(|c| c.name.as_str()).collect();
        let scope = |key: &str| {
            key.rsplit_once('/')
                .filter(|(_, c)| names.contains(c))
                .map(|(k, c)| (k.to_string(), c.to_string()))
        };
        let mut out = IndexMap::new();
        for (k, v) in &self.metadata.annotations {
            if scope(k).is_none() {
                out.insert(k.clone(), v.clone());
            }
        }
        for (k, v) in &self.metadata.annotations {
            if let Some((key, c)) = scope(k) {
                if c == container {
                    out.insert(key, v.clone());
                }
            }
        }
        out
    }

    fn check(&self) -> Result<(), PodError> {
        if self.spec.restart_policy != "Never" {
            return Err(PodError::Unsupported {
                key: "spec.restartPolicy".into(),
                value: self.spec.restart_policy.clone(),
            });
        }
        if self.metadata.name.is_empty() {
            return Err(PodError::Parse("metadata.name is empty".into()));
        }
        if self.spec.containers.is_empty() {
            return Err(PodError::NoContainers);
        }
        let mut volumes = BTreeMap::new();
        for v in &self.spec.volumes {
            if volumes.insert(v.name.as_str(), v).is_some() {
                return Err(PodError::DuplicateVolume(v.name.clone()));
            }
            if let VolumeKind::HostPath(p) = v.kind()? {
                if !p.starts_with('/') {
                    return Err(PodError::BadVolume {
                        name: v.name.clone(),
                        reason: format!("hostPath `{p}` is not absolute"),
                    });
                }
            }
        }
        let mut seen = Vec::new();
        for c in self.all_containers() {
            let bad = |reason: String| PodError::BadContainer {
                container: c.name.clone(),
                reason,
            };
            if c.name.is_empty() {
                return Err(PodError::Parse("container without a name".into()));
            }
            if seen.contains(&c.name.as_str()) {
                return Err(PodError::DuplicateContainer(c.name.clone()));
            }
            seen.push(&c.name);
            if c.image.is_empty() {
                return Err(bad("empty image".into()));
            }
            let mut paths = Vec::new();
            for m in &c.volume_mounts {
                if !volumes.contains_key(m.name.as_str()) {
                    return Err(PodError::UndeclaredVolume {
                        container: c.name.clone(),
                        volume: m.name.clone(),
                    });
                }
                if !m.mount_path.starts_with('/') {
                    return Err(bad(format!("mountPath `{}` is not absolute", m.mount_path)));
                }
                if paths.contains(&m.mount_path.as_str()) {
                    return Err(bad(format!("mountPath `{}` used twice", m.mount_path)));
                }
                paths.push(&m.mount_path);
            }
            if let Some(w) = &c.working_dir {
                if !w.starts_with('/') {
                    return Err(bad(format!("workingDir `{w}` is not absolute")));
                }
            }
            if let Some(r) = &c.resources {
                if r.limits.len() > 1 {
                    return Err(bad("at most one resource limit is supported".into()));
                }
                for (name, count) in &r.limits {
                    if parse_device_name(name).is_none() {
                        return Err(bad(format!(
                            "limit `{name}` is not a device name (vendor/class=device)"
                        )));
                    }
                    if *count == 0 {
                        return Err(bad(format!("limit `{name}` must be at least 1")));
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn parse_pod_manifest(text: &str) -> Result<PodManifest, PodError> {
    let doc: serde_yaml::Value =
        serde_yaml::from_str(text).map_err(|e| PodError::Parse(e.to_string()))?;
    let field = |k: &str| doc.get(k).and_then(|v| v.as_str()).map(str::to_string);
    match field("kind") {
        Some(k) if k == "Pod" => {}
        Some(k) => return Err(PodError::UnsupportedKind(k)),
        None => return Err(PodError::Parse("missing `kind`".into())),
    }
    match field("apiVersion") {
        Some(v) if v == "v1" => {}
        Some(v) => return Err(PodError::UnsupportedApiVersion(v)),
        None => return Err(PodError::Parse("missing `apiVersion`".into())),
    }
    let m: PodManifest = serde_yaml::from_value(doc).map_err(|e| PodError::Parse(e.to_string()))?;
    m.check()?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum VolumeBinding {
    /// Fresh per pod run; `source` is the path handed to the engine.
    EmptyDir {
        name: String,
        source: String,
    },
    HostPath {
        name: String,
        path: String,
    },
}

impl VolumeBinding {
    pub fn name(&self) -> &str {
        match self {
            VolumeBinding::EmptyDir { name, .. } | VolumeBinding::HostPath { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContainerPlan {
    pub name: String,
    pub image: String,
    /// `command` followed by `args`; empty means the image entrypoint.
    pub command: Vec<String>,
    pub workdir: Option<String>,
    /// (volume, mount path, read-only)
    pub mounts: Vec<(String, String, bool)>,
    pub annotations: BTreeMap<String, String>,
    pub devices: Vec<String>,
    pub engine: EnginePlan,
    pub spec: RuntimeSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PodPlan {
    pub name: String,
    pub volumes: Vec<VolumeBinding>,
    pub init: Vec<ContainerPlan>,
    pub main: Vec<ContainerPlan>,
}

/// Builds one engine plan per container through the same path an
/// environment definition takes.
pub fn plan_pod(
    m: &PodManifest,
    site: &SiteConfig,
    ctx: &StepContext,
) -> Result<PodPlan, PodError> {
    m.check()?;
    let pod = &m.metadata.name;
    let volumes: Vec<VolumeBinding> = m
        .spec
        .volumes
        .iter()
        .map(|v| match v.kind().expect("checked") {
            VolumeKind::EmptyDir => VolumeBinding::EmptyDir {
                name: v.name.clone(),
                source: format!("/tmp/{}/pods/{pod}/volumes/{}", ctx.user, v.name),
            },
            VolumeKind::HostPath(p) => VolumeBinding::HostPath {
                name: v.name.clone(),
                path: p.to_string(),
            },
        })
        .collect();
    let source_of = |vol: &str| -> String {
        match volumes.iter().find(|b| b.name() == vol).expect("checked") {
            VolumeBinding::EmptyDir { source, .. } => source.clone(),
            VolumeBinding::HostPath { path, .. } => path.clone(),
        }
    };

    let plan_one = |c: &ContainerSpec| -> Result<ContainerPlan, PodError> {
        let bad = |reason: String| PodError::BadContainer {
            container: c.name.clone(),
            reason,
        };
        let command: Vec<String> = c.command.iter().chain(&c.args).cloned().collect();
        let edf = Edf {
            image: c.image.clone(),
            mounts: c
                .volume_mounts
                .iter()
                .map(|vm| MountSpec::new(source_of(&vm.name), vm.mount_path.clone(), vm.read_only))
                .collect(),
            workdir: c.working_dir.clone(),
            entrypoint: c.command.is_empty(),
            writable: true,
            devices: c.device_request().map(str::to_string).into_iter().collect(),
            env: c
                .env
                .iter()
                .map(|e| (e.name.clone(), e.value.clone()))
                .collect(),
            annotations: m.effective_annotations(&c.name),
        };
        let validated = ValidatedEdf::new(edf).map_err(|e| bad(e.to_string()))?;
        let engine = render_plan(&validated, site, ctx).map_err(|e| bad(e.to_string()))?;
        let spec = RuntimeSpec::from_plan(&engine, format!("/run/pods/{pod}/{}/rootfs", c.name));
        Ok(ContainerPlan {
            name: c.name.clone(),
            image: c.image.clone(),
            command,
            workdir: c.working_dir.clone(),
            mounts: c
                .volume_mounts
                .iter()
                .map(|vm| (vm.name.clone(), vm.mount_path.clone(), vm.read_only))
                .collect(),
            annotations: engine
                .annotations()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            devices: engine.devices().map(str::to_string).collect(),
            engine,
            spec,
        })
    };

    Ok(PodPlan {
        name: pod.clone(),
        init: m
            .spec
            .init_containers
            .iter()
            .map(plan_one)
            .collect::<Result<_, _>>()?,
        main: m
            .spec
            .containers
            .iter()
            .map(plan_one)
            .collect::<Result<_, _>>()?,
        volumes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PodPhase {
    Init,
    Main,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PodEvent {
    pub t_us: u64,
    pub container: String,
    pub phase: PodPhase,
    pub event: &'static str,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ContainerResult {
    pub name: String,
    pub phase: PodPhase,
    pub started: bool,
    pub exit_code: Option<i32>,
    pub annotations: BTreeMap<String, String>,
    pub devices: Vec<String>,
    /// Device nodes present after the hook pipeline.
    pub device_nodes: Vec<String>,
    pub hook_actions: usize,
    pub stdout: Vec<String>,
    pub stderr: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PodStatus {
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PodResult {
    pub pod: String,
    pub status: PodStatus,
    pub containers: Vec<ContainerResult>,
    pub events: Vec<PodEvent>,
    pub end_us: u64,
}

impl PodResult {
    pub fn container(&self, name: &str) -> Option<&ContainerResult> {
        self.containers.iter().find(|c| c.name == name)
    }

    pub fn events_of<'a>(&'a self, container: &'a str) -> impl Iterator<Item = &'a PodEvent> {
        self.events.iter().filter(move |e| e.container == container)
    }

    /// Events, then one summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("events serialize"));
            out.push('\n');
        }
        let summary = serde_json::json!({
            "record": "pod",
            "pod": self.pod,
            "status": self.status,
            "end_us": self.end_us,
            "containers": self.containers,
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }
}

#[derive(Debug, Clone)]
pub struct PodRunOptions {
    pub seed: u64,
    /// hostPath volumes resolve below this directory when set.
    pub host_root: Option<PathBuf>,
    pub identity: Identity,
}

impl Default for PodRunOptions {
    fn default() -> Self {
        PodRunOptions {
            seed: 0,
            host_root: None,
            identity: Identity::new(1000, 1000),
        }
    }
}

struct Live {
    process: Process,
    fs: ContainerFs,
}

struct Runner<'a, B: StoreBackend> {
    plan: &'a PodPlan,
    store: &'a mut SharedStore<B>,
    registry: &'a HookRegistry,
    opts: &'a PodRunOptions,
    rng: ChaCha8Rng,
    shared: BTreeMap<String, SharedDir>,
    events: Vec<PodEvent>,
    results: Vec<ContainerResult>,
}

impl<'a, B: StoreBackend> Runner<'a, B> {
    fn emit(
        &mut self,
        t_us: u64,
        container: &str,
        phase: PodPhase,
        event: &'static str,
        detail: String,
    ) {
        self.events.push(PodEvent {
            t_us,
            container: container.to_string(),
            phase,
            event,
            detail,
        });
    }

    fn result(&mut self, name: &str) -> &mut ContainerResult {
        self.results
            .iter_mut()
            .find(|r| r.name == name)
            .expect("every container has a result")
    }

    fn host_dir(&self, path: &str) -> PathBuf {
        match &self.opts.host_root {
            Some(root) => root.join(path.trim_start_matches('/')),
            None => Path::new(path).to_path_buf(),
        }
    }

    /// Mounts the image, runs the hook pipeline and prepares the process.
    fn start(&mut self, c: &ContainerPlan, phase: PodPhase, t: u64) -> Result<Live, CliError> {
        let img = self.store.open(&c.image)?;
        let view = self.store.mount_view(
            &img,
            UpperLayer::new(),
            self.opts.identity,
            MountOwner {
                job: 0,
                step: 0,
                node: 0,
            },
        )?;
        let rootfs = match view.walk("/") {
            Ok(r) => r.into_iter().collect(),
            Err(e) => {
                self.store.release_view(&view);
                return Err(e.into());
            }
        };
        let out = match run_pipeline(&c.spec, &c.annotations, &c.devices, &rootfs, self.registry) {
            Ok(out) => out,
            Err(f) => {
                self.store.release_view(&view);
                return Err(f.into());
            }
        };
        let mut fs = ContainerFs::new(view);
        for (vol, dest, ro) in &c.mounts {
            let binding = self
                .plan
                .volumes
                .iter()
                .find(|b| b.name() == vol)
                .expect("planned mounts name declared volumes");
            let backing = match binding {
                VolumeBinding::EmptyDir { name, .. } => Backing::Shared {
                    files: self.shared[name].clone(),
                    read_only: *ro,
                },
                VolumeBinding::HostPath { path, .. } => Backing::Host {
                    root: self.host_dir(path),
                    read_only: *ro,
                },
            };
            fs.mount(dest, backing);
        }
        let mut env = img.record.env.clone();
        env.extend(out.spec.env.iter().cloned());
        let command = if c.command.is_empty() {
            img.record.entrypoint.clone()
        } else {
            c.command.clone()
        };
        let verbs = match parse_command(&command) {
            Ok(v) => v,
            Err(e) => vec![Verb::Unknown(format!("bad command: {e}"))],
        };
        let cwd = c.workdir.clone().unwrap_or_else(|| "/".into());
        let r = self.result(&c.name);
        r.started = true;
        r.hook_actions = out.log.len();
        r.device_nodes = out.spec.devices.iter().map(|d| d.path.clone()).collect();
        self.emit(
            t,
            &c.name,
            phase,
            "started",
            format!("{} hook action(s)", out.log.len()),
        );
        Ok(Live {
            process: Process::new(verbs, env, cwd),
            fs,
        })
    }

    fn start_or_fail(&mut self, c: &ContainerPlan, phase: PodPhase, t: u64) -> Option<Live> {
        match self.start(c, phase, t) {
            Ok(l) => Some(l),
            Err(e) => {
                self.emit(t, &c.name, phase, "start-failed", e.to_string());
                let r = self.result(&c.name);
                r.stderr.push(e.to_string());
                None
            }
        }
    }

    fn verb_detail(p: &Process) -> String {
        match p.next_verb() {
            Some(Verb::Write { path, .. }) => format!("write {path}"),
            Some(Verb::Read(path)) => format!("read {path}"),
            Some(Verb::Copy { src, dst }) => format!("copy {src} {dst}"),
            Some(v) => v.name().to_string(),
            None => String::new(),
        }
    }

    fn finish(&mut self, name: &str, phase: PodPhase, t: u64, live: Live) {
        self.emit(
            t,
            name,
            phase,
            "exited",
            format!("code {}", live.process.exit_code.unwrap_or(-1)),
        );
        let r = self.result(name);
        r.exit_code = live.process.exit_code;
        r.stdout = live.process.stdout;
        r.stderr.extend(live.process.stderr);
        self.store.release_view(&live.fs.view);
    }

    fn start_cost(&mut self) -> u64 {
        self.rng.random_range(1_000..=3_000)
    }

    fn verb_cost(&mut self) -> u64 {
        self.rng.random_range(200..=800)
    }

    /// Runs init containers one after another; false when one failed.
    fn init_phase(&mut self, mut t: u64) -> (bool, u64) {
        let plan = self.plan;
        for c in &plan.init {
            t += self.start_cost();
            let Some(mut live) = self.start_or_fail(c, PodPhase::Init, t) else {
                return (false, t);
            };
            loop {
                let detail = Self::verb_detail(&live.process);
                match live.process.step(&live.fs) {
                    Outcome::Exited(_) => break,
                    Outcome::Continue | Outcome::Barrier => {
                        self.emit(t, &c.name, PodPhase::Init, "exec", detail);
                        t += self.verb_cost();
                    }
                }
            }
            let ok = live.process.exit_code == Some(0);
            self.finish(&c.name, PodPhase::Init, t, live);
            if !ok {
                return (false, t);
            }
        }
        (true, t)
    }

    /// Runs the main containers interleaved on simulated time. A barrier
    /// holds a container until every container still running has reached
    /// one.
    fn main_phase(&mut self, start: u64) -> u64 {
        let plan = self.plan;
        let n = plan.main.len();
        let mut live: Vec<Option<Live>> = (0..n).map(|_| None).collect();
        let mut waiting = vec![false; n];
        let mut done = vec![false; n];
        let mut heap = BinaryHeap::new();
        let mut seq = 0u64;
        let mut push = |heap: &mut BinaryHeap<_>, t: u64, i: usize, starting: bool| {
            heap.push(Reverse((t, seq, i, starting)));
            seq += 1;
        };
        for i in 0..n {
            let t = start + self.start_cost();
            push(&mut heap, t, i, true);
        }
        let mut now = start;
        while let Some(Reverse((t, _, i, starting))) = heap.pop() {
            now = t;
            let c = &plan.main[i];
            if starting {
                match self.start_or_fail(c, PodPhase::Main, t) {
                    Some(l) => {
                        live[i] = Some(l);
                        push(&mut heap, t, i, false);
                    }
                    None => done[i] = true,
                }
            } else {
                let l = live[i].as_mut().expect("scheduled containers are live");
                let detail = Self::verb_detail(&l.process);
                match l.process.step(&l.fs) {
                    Outcome::Continue => {
                        self.emit(t, &c.name, PodPhase::Main, "exec", detail);
                        let dt = self.verb_cost();
                        push(&mut heap, t + dt, i, false);
                    }
                    Outcome::Barrier => {
                        self.emit(t, &c.name, PodPhase::Main, "barrier", String::new());
                        waiting[i] = true;
                    }
                    Outcome::Exited(_) => {
                        done[i] = true;
                        let l = live[i].take().expect("live");
                        self.finish(&c.name, PodPhase::Main, t, l);
                    }
                }
            }
            let pending = heap.iter().any(|Reverse((_, _, _, s))| *s);
            let all_parked = (0..n).all(|j| done[j] || waiting[j]);
            if !pending && all_parked && waiting.iter().any(|w| *w) {
                for (j, w) in waiting.iter_mut().enumerate() {
                    if *w {
                        *w = false;
                        self.emit(
                            t,
                            &plan.main[j].name,
                            PodPhase::Main,
                            "released",
                            String::new(),
                        );
                        push(&mut heap, t, j, false);
                    }
                }
            }
        }
        now
    }
}

/// Runs a planned pod on one simulated node. Images must already be in
/// `store`.
pub fn kube_run<B: StoreBackend>(
    plan: &PodPlan,
    store: &mut SharedStore<B>,
    registry: &HookRegistry,
    opts: &PodRunOptions,
) -> PodResult {
    let mut results = Vec::new();
    for (phase, list) in [(PodPhase::Init, &plan.init), (PodPhase::Main, &plan.main)] {
        for c in list {
            results.push(ContainerResult {
                name: c.name.clone(),
                phase,
                started: false,
                exit_code: None,
                annotations: c.annotations.clone(),
                devices: c.devices.clone(),
                device_nodes: Vec::new(),
                hook_actions: 0,
                stdout: Vec::new(),
                stderr: Vec::new(),
            });
        }
    }
    let shared = plan
        .volumes
        .iter()
        .filter_map(|v| match v {
            VolumeBinding::EmptyDir { name, .. } => {
                Some((name.clone(), Rc::new(RefCell::new(BTreeMap::new()))))
            }
            VolumeBinding::HostPath { .. } => None,
        })
        .collect();
    let mut r = Runner {
        plan,
        store,
        registry,
        opts,
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
        shared,
        events: Vec::new(),
        results,
    };
    let (ok, t) = r.init_phase(0);
    let end = if ok {
        r.main_phase(t)
    } else {
        for c in &plan.main {
            r.emit(
                t,
                &c.name,
                PodPhase::Main,
                "skipped",
                "init phase failed".into(),
            );
        }
        t
    };
    let status = if r.results.iter().all(|c| c.exit_code == Some(0)) {
        PodStatus::Succeeded
    } else {
        PodStatus::Failed
    };
    PodResult {
        pod: plan.name.clone(),
        status,
        containers: r.results,
        events: r.events,
        end_us: end,
    }
}
