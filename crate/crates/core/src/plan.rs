//! Engine invocation plans.
//!
//! A [`EnginePlan`] is the fully explicit form of an environment definition:
//! global engine options (namespaces, storage roots, image store and mount
//! program), run options (mounts, workdir, entrypoint, devices, env,
//! annotations) and the image reference. Options are semantic values; the
//! token syntax lives only in [`plan_to_argv`] and [`argv_to_plan`].

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::edf::{MountSpec, ValidatedEdf};

pub const ENGINE_BINARY: &str = "podman";
pub const STORE_OPT_IMAGE_STORE: &str = "additionalimagestore";
pub const STORE_OPT_MOUNT_PROGRAM: &str = "mount_program";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("template `{0}` has no `{{step}}` placeholder")]
    TemplateMissingStep(String),
    #[error("template `{template}` uses unknown placeholder `{{{name}}}`")]
    UnknownPlaceholder { template: String, name: String },
    #[error("site configuration: {0}")]
    Site(String),
    #[error("conflicting option: {option} is `{present}`, module requires `{required}`")]
    Conflict {
        option: String,
        present: String,
        required: String,
    },
    #[error("engine module `{requested}` is not available (site provides `{available}`)")]
    UnknownModule {
        requested: String,
        available: String,
    },
    #[error("step context: {0}")]
    Context(String),
    #[error("malformed argument vector at token {index}: {reason}")]
    Argv { index: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteConfig {
    pub hpc_module: String,
    /// Shared read-only image store.
    pub shared_store: String,
    pub mount_program: String,
    /// Placeholders: `{job}`, `{step}`, `{user}`.
    pub root_template: String,
    pub runroot_template: String,
    pub hook_pipeline: String,
    pub cdi_dir: String,
}

impl Default for SiteConfig {
    fn default() -> Self {
        SiteConfig {
            hpc_module: "hpc".into(),
            shared_store: "/capstor/images".into(),
            mount_program: "/usr/bin/parallax-mount-program".into(),
            root_template: "/tmp/{user}/podman/{job}.{step}/root".into(),
            runroot_template: "/tmp/{user}/podman/{job}.{step}/runroot".into(),
            hook_pipeline: "default".into(),
            cdi_dir: "/etc/cdi".into(),
        }
    }
}

impl SiteConfig {
    pub fn check(&self) -> Result<(), PlanError> {
        for (name, value) in [
            ("shared_store", &self.shared_store),
            ("mount_program", &self.mount_program),
            ("root_template", &self.root_template),
            ("runroot_template", &self.runroot_template),
        ] {
            if !Path::new(value).is_absolute() {
                return Err(PlanError::Site(format!("{name} `{value}` is not absolute")));
            }
        }
        for t in [&self.root_template, &self.runroot_template] {
            if !t.contains("{step}") {
                return Err(PlanError::TemplateMissingStep(t.clone()));
            }
        }
        if self.hpc_module.is_empty() {
            return Err(PlanError::Site("hpc_module is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepContext {
    pub job_id: u64,
    pub step_id: u64,
    pub user: String,
    pub uid: u32,
    pub gid: u32,
    pub nodes: u32,
    pub ranks_per_node: u32,
}

impl StepContext {
    pub fn new(
        job_id: u64,
        step_id: u64,
        user: impl Into<String>,
        uid: u32,
        gid: u32,
        nodes: u32,
        ranks_per_node: u32,
    ) -> Result<Self, PlanError> {
        if nodes == 0 || ranks_per_node == 0 {
            return Err(PlanError::Context(
                "node count and ranks per node must be at least 1".into(),
            ));
        }
        Ok(StepContext {
            job_id,
            step_id,
            user: user.into(),
            uid,
            gid,
            nodes,
            ranks_per_node,
        })
    }
}

/// Instantiates a per-step path template.
pub fn instantiate_template(template: &str, ctx: &StepContext) -> Result<String, PlanError> {
    if !template.contains("{step}") {
        return Err(PlanError::TemplateMissingStep(template.to_string()));
    }
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let Some(close) = rest[open..].find('}') else {
            out.push_str(&rest[open..]);
            rest = "";
            break;
        };
        let name = &rest[open + 1..open + close];
        match name {
            "job" => out.push_str(&ctx.job_id.to_string()),
            "step" => out.push_str(&ctx.step_id.to_string()),
            "user" => out.push_str(&ctx.user),
            _ => {
                return Err(PlanError::UnknownPlaceholder {
                    template: template.to_string(),
                    name: name.to_string(),
                })
            }
        }
        rest = &rest[open + close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Namespace {
    Ipc,
    Network,
    Pid,
    Uts,
    Cgroup,
}

impl Namespace {
    fn flag(self) -> &'static str {
        match self {
            Namespace::Ipc => "--ipc",
            Namespace::Network => "--network",
            Namespace::Pid => "--pid",
            Namespace::Uts => "--uts",
            Namespace::Cgroup => "--cgroupns",
        }
    }

    fn from_flag(flag: &str) -> Option<Self> {
        Some(match flag {
            "--ipc" => Namespace::Ipc,
            "--network" => Namespace::Network,
            "--pid" => Namespace::Pid,
            "--uts" => Namespace::Uts,
            "--cgroupns" => Namespace::Cgroup,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GlobalOption {
    Namespace(Namespace, String),
    Userns(String),
    Cgroups(String),
    Tz(String),
    Root(String),
    Runroot(String),
    StorageOpt { key: String, value: String },
}

impl GlobalOption {
    /// Options of the same slot conflict when their values differ.
    fn slot(&self) -> String {
        match self {
            GlobalOption::Namespace(ns, _) => ns.flag().to_string(),
            GlobalOption::Userns(_) => "--userns".into(),
            GlobalOption::Cgroups(_) => "--cgroups".into(),
            GlobalOption::Tz(_) => "--tz".into(),
            GlobalOption::Root(_) => "--root".into(),
            GlobalOption::Runroot(_) => "--runroot".into(),
            GlobalOption::StorageOpt { key, .. } => format!("--storage-opt {key}"),
        }
    }

    fn value(&self) -> &str {
        match self {
            GlobalOption::Namespace(_, v)
            | GlobalOption::Userns(v)
            | GlobalOption::Cgroups(v)
            | GlobalOption::Tz(v)
            | GlobalOption::Root(v)
            | GlobalOption::Runroot(v)
            | GlobalOption::StorageOpt { value: v, .. } => v,
        }
    }

    fn is_module_option(&self) -> bool {
        matches!(
            self,
            GlobalOption::Namespace(..)
                | GlobalOption::Userns(_)
                | GlobalOption::Cgroups(_)
                | GlobalOption::Tz(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RunOption {
    Mount(MountSpec),
    Workdir(String),
    Entrypoint(String),
    Device(String),
    Env(String, String),
    Annotation(String, String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnginePlan {
    pub global: Vec<GlobalOption>,
    pub run: Vec<RunOption>,
    pub image: String,
    pub detach: bool,
    /// Process started inside the container; follows the image reference.
    pub shim_command: Option<Vec<String>>,
}

impl EnginePlan {
    pub fn new(image: impl Into<String>) -> Self {
        EnginePlan {
            global: Vec::new(),
            run: Vec::new(),
            image: image.into(),
            detach: false,
            shim_command: None,
        }
    }

    pub fn userns(&self) -> Option<&str> {
        self.global.iter().find_map(|o| match o {
            GlobalOption::Userns(v) => Some(v.as_str()),
            _ => None,
        })
    }

    pub fn root(&self) -> Option<&str> {
        self.global.iter().find_map(|o| match o {
            GlobalOption::Root(v) => Some(v.as_str()),
            _ => None,
        })
    }

    pub fn runroot(&self) -> Option<&str> {
        self.global.iter().find_map(|o| match o {
            GlobalOption::Runroot(v) => Some(v.as_str()),
            _ => None,
        })
    }

    pub fn storage_opt(&self, key: &str) -> Vec<&str> {
        self.global
            .iter()
            .filter_map(|o| match o {
                GlobalOption::StorageOpt { key: k, value } if k == key => Some(value.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn mounts(&self) -> impl Iterator<Item = &MountSpec> {
        self.run.iter().filter_map(|o| match o {
            RunOption::Mount(m) => Some(m),
            _ => None,
        })
    }

    pub fn devices(&self) -> impl Iterator<Item = &str> {
        self.run.iter().filter_map(|o| match o {
            RunOption::Device(d) => Some(d.as_str()),
            _ => None,
        })
    }

    pub fn env(&self) -> impl Iterator<Item = (&str, &str)> {
        self.run.iter().filter_map(|o| match o {
            RunOption::Env(k, v) => Some((k.as_str(), v.as_str())),
            _ => None,
        })
    }

    pub fn annotations(&self) -> impl Iterator<Item = (&str, &str)> {
        self.run.iter().filter_map(|o| match o {
            RunOption::Annotation(k, v) => Some((k.as_str(), v.as_str())),
            _ => None,
        })
    }

    pub fn workdir(&self) -> Option<&str> {
        self.run.iter().find_map(|o| match o {
            RunOption::Workdir(w) => Some(w.as_str()),
            _ => None,
        })
    }

    pub fn entrypoint_override(&self) -> Option<&str> {
        self.run.iter().find_map(|o| match o {
            RunOption::Entrypoint(e) => Some(e.as_str()),
            _ => None,
        })
    }
}

/// The option set installed by the HPC engine module, in rendering order.
pub fn hpc_module_options() -> Vec<GlobalOption> {
    let host = || "host".to_string();
    vec![
        GlobalOption::Namespace(Namespace::Ipc, host()),
        GlobalOption::Namespace(Namespace::Network, host()),
        GlobalOption::Namespace(Namespace::Pid, host()),
        GlobalOption::Namespace(Namespace::Uts, host()),
        GlobalOption::Userns("keep-id".into()),
        GlobalOption::Namespace(Namespace::Cgroup, host()),
        GlobalOption::Cgroups("no-conmon".into()),
        GlobalOption::Tz("local".into()),
    ]
}

/// Installs the HPC module options at the front of the global section.
/// Idempotent; a differing value in any module slot is a conflict.
pub fn apply_hpc_module(plan: &EnginePlan, site: &SiteConfig) -> Result<EnginePlan, PlanError> {
    if site.hpc_module.is_empty() {
        return Err(PlanError::Site("hpc_module is empty".into()));
    }
    let required = hpc_module_options();
    for present in plan.global.iter().filter(|o| o.is_module_option()) {
        match required.iter().find(|r| r.slot() == present.slot()) {
            Some(r) if r.value() == present.value() => {}
            Some(r) => {
                return Err(PlanError::Conflict {
                    option: present.slot(),
                    present: present.value().to_string(),
                    required: r.value().to_string(),
                })
            }
            None => unreachable!("every module option has a slot"),
        }
    }
    let mut out = plan.clone();
    out.global.retain(|o| !o.is_module_option());
    let mut global = required;
    global.append(&mut out.global);
    out.global = global;
    Ok(out)
}

/// Renders a validated environment into an engine plan for one step.
pub fn render_plan(
    edf: &ValidatedEdf,
    site: &SiteConfig,
    ctx: &StepContext,
) -> Result<EnginePlan, PlanError> {
    site.check()?;
    let settings = edf.settings();
    if let Some(module) = &settings.engine_module {
        if module != &site.hpc_module {
            return Err(PlanError::UnknownModule {
                requested: module.clone(),
                available: site.hpc_module.clone(),
            });
        }
    }
    let (root, runroot) = match &settings.tmpdir {
        Some(tmp) => {
            let base = tmp.trim_end_matches('/');
            (
                instantiate_template(&format!("{base}/root-{{job}}.{{step}}"), ctx)?,
                instantiate_template(&format!("{base}/runroot-{{job}}.{{step}}"), ctx)?,
            )
        }
        None => (
            instantiate_template(&site.root_template, ctx)?,
            instantiate_template(&site.runroot_template, ctx)?,
        ),
    };
    let store = settings
        .parallax_store
        .clone()
        .unwrap_or_else(|| site.shared_store.clone());

    let e = edf.edf();
    let mut plan = EnginePlan::new(e.image.clone());
    plan.global = vec![
        GlobalOption::Root(root),
        GlobalOption::Runroot(runroot),
        GlobalOption::StorageOpt {
            key: STORE_OPT_IMAGE_STORE.into(),
            value: store,
        },
        GlobalOption::StorageOpt {
            key: STORE_OPT_MOUNT_PROGRAM.into(),
            value: site.mount_program.clone(),
        },
    ];
    plan.run
        .extend(e.mounts.iter().cloned().map(RunOption::Mount));
    if let Some(w) = &e.workdir {
        plan.run.push(RunOption::Workdir(w.clone()));
    }
    if !e.entrypoint {
        plan.run.push(RunOption::Entrypoint(String::new()));
    }
    plan.run
        .extend(e.devices.iter().cloned().map(RunOption::Device));
    plan.run.extend(
        e.env
            .iter()
            .map(|(k, v)| RunOption::Env(k.clone(), v.clone())),
    );
    plan.run.extend(
        edf.forwarded_annotations()
            .iter()
            .map(|(k, v)| RunOption::Annotation(k.clone(), v.clone())),
    );
    apply_hpc_module(&plan, site)
}

fn mount_token(m: &MountSpec) -> String {
    let mut s = format!("type=bind,src={},dst={}", m.source, m.destination);
    if m.read_only {
        s.push_str(",readonly");
    }
    s
}

fn parse_mount_token(token: &str) -> Option<MountSpec> {
    let mut src = None;
    let mut dst = None;
    let mut ro = false;
    let mut saw_type = false;
    for part in token.split(',') {
        match part.split_once('=') {
            Some(("type", "bind")) if !saw_type => saw_type = true,
            Some(("src", v)) if src.is_none() => src = Some(v),
            Some(("dst", v)) if dst.is_none() => dst = Some(v),
            None if part == "readonly" && !ro => ro = true,
            _ => return None,
        }
    }
    (saw_type).then_some(())?;
    Some(MountSpec::new(src?, dst?, ro))
}

/// Deterministic token rendering of a plan.
pub fn plan_to_argv(plan: &EnginePlan) -> Vec<String> {
    let mut argv = vec![ENGINE_BINARY.to_string()];
    for opt in &plan.global {
        let (flag, value) = match opt {
            GlobalOption::Namespace(ns, v) => (ns.flag().to_string(), v.clone()),
            GlobalOption::Userns(v) => ("--userns".into(), v.clone()),
            GlobalOption::Cgroups(v) => ("--cgroups".into(), v.clone()),
            GlobalOption::Tz(v) => ("--tz".into(), v.clone()),
            GlobalOption::Root(v) => ("--root".into(), v.clone()),
            GlobalOption::Runroot(v) => ("--runroot".into(), v.clone()),
            GlobalOption::StorageOpt { key, value } => {
                ("--storage-opt".into(), format!("{key}={value}"))
            }
        };
        argv.push(flag);
        argv.push(value);
    }
    argv.push("run".into());
    if plan.detach {
        argv.push("--detach".into());
    }
    for opt in &plan.run {
        let (flag, value) = match opt {
            RunOption::Mount(m) => ("--mount", mount_token(m)),
            RunOption::Workdir(w) => ("--workdir", w.clone()),
            RunOption::Entrypoint(e) => ("--entrypoint", e.clone()),
            RunOption::Device(d) => ("--device", d.clone()),
            RunOption::Env(k, v) => ("--env", format!("{k}={v}")),
            RunOption::Annotation(k, v) => ("--annotation", format!("{k}={v}")),
        };
        argv.push(flag.to_string());
        argv.push(value);
    }
    argv.push(plan.image.clone());
    if let Some(cmd) = &plan.shim_command {
        argv.extend(cmd.iter().cloned());
    }
    argv
}

/// Inverse of [`plan_to_argv`].
pub fn argv_to_plan(argv: &[String]) -> Result<EnginePlan, PlanError> {
    let err = |index: usize, reason: &str| PlanError::Argv {
        index,
        reason: reason.to_string(),
    };
    let mut i = 0;
    if argv.first().map(String::as_str) != Some(ENGINE_BINARY) {
        return Err(err(0, "expected engine binary"));
    }
    i += 1;
    let mut global = Vec::new();
    loop {
        let Some(flag) = argv.get(i) else {
            return Err(err(i, "missing `run`"));
        };
        if flag == "run" {
            i += 1;
            break;
        }
        let value = argv
            .get(i + 1)
            .ok_or_else(|| err(i, "flag without value"))?
            .clone();
        let opt = match flag.as_str() {
            "--userns" => GlobalOption::Userns(value),
            "--cgroups" => GlobalOption::Cgroups(value),
            "--tz" => GlobalOption::Tz(value),
            "--root" => GlobalOption::Root(value),
            "--runroot" => GlobalOption::Runroot(value),
            "--storage-opt" => {
                let (key, value) = value
                    .split_once('=')
                    .ok_or_else(|| err(i + 1, "storage option without `=`"))?;
                GlobalOption::StorageOpt {
                    key: key.into(),
                    value: value.into(),
                }
            }
            other => match Namespace::from_flag(other) {
                Some(ns) => GlobalOption::Namespace(ns, value),
                None => return Err(err(i, "unknown global flag")),
            },
        };
        global.push(opt);
        i += 2;
    }
    let mut detach = false;
    if argv.get(i).map(String::as_str) == Some("--detach") {
        detach = true;
        i += 1;
    }
    let mut run = Vec::new();
    while let Some(flag) = argv.get(i) {
        let opt_kind = match flag.as_str() {
            "--mount" | "--workdir" | "--entrypoint" | "--device" | "--env" | "--annotation" => {
                flag.as_str()
            }
            _ => break,
        };
        let value = argv
            .get(i + 1)
            .ok_or_else(|| err(i, "flag without value"))?;
        let opt = match opt_kind {
            "--mount" => RunOption::Mount(
                parse_mount_token(value).ok_or_else(|| err(i + 1, "bad mount token"))?,
            ),
            "--workdir" => RunOption::Workdir(value.clone()),
            "--entrypoint" => RunOption::Entrypoint(value.clone()),
            "--device" => RunOption::Device(value.clone()),
            "--env" | "--annotation" => {
                let (k, v) = value
                    .split_once('=')
                    .ok_or_else(|| err(i + 1, "missing `=`"))?;
                if opt_kind == "--env" {
                    RunOption::Env(k.into(), v.into())
                } else {
                    RunOption::Annotation(k.into(), v.into())
                }
            }
            _ => unreachable!(),
        };
        run.push(opt);
        i += 2;
    }
    let image = argv.get(i).ok_or_else(|| err(i, "missing image"))?.clone();
    let rest = &argv[i + 1..];
    Ok(EnginePlan {
        global,
        run,
        image,
        detach,
        shim_command: (!rest.is_empty()).then(|| rest.to_vec()),
    })
}

/// Golden-file form: one token per line, trailing newline.
pub fn argv_to_lines(argv: &[String]) -> String {
    let mut out = String::new();
    for t in argv {
        out.push_str(t);
        out.push('\n');
    }
    out
}

/// Shell-quoted single-line rendering, for humans.
pub struct ShellCommand<'a>(pub &'a [String]);

impl fmt::Display for ShellCommand<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            let plain = !t.is_empty()
                && t.bytes()
                    .all(|b| b.is_ascii_alphanumeric() || b"-_./=:,+@".contains(&b));
            if plain {
                f.write_str(t)?;
            } else {
                write!(f, "\"{}\"", t.replace('\\', "\\\\").replace('"', "\\\""))?;
            }
        }
        Ok(())
    }
}
