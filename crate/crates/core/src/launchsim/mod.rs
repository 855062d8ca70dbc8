//! Deterministic discrete-event model of a multi-node job step: image
//! acquisition by a single writer, one helper container per node, namespace
//! joins for the remaining ranks and teardown.
//!
//! Time is simulated in integer microseconds. Every random draw comes from
//! the cluster's seeded generator, so equal seeds give byte-identical traces.

mod cluster;
mod cost;
mod fault;
mod pynamic;
mod report;
mod step;
mod sync;

use serde::Serialize;

pub use cluster::{build_cluster, sample_image, ClusterSim};
pub use cost::CostModel;
pub use fault::{CrashPoint, Fault, FaultPoint};
pub use pynamic::{pynamic_run, Layout, PynamicReport, PynamicWorkload};
pub use report::{measure_startup, Decomposition, DecompositionRow, ROW_LABELS};
pub use step::{
    join_namespaces, run_job_step, run_step, NamespaceHandle, ShimRecord, StepRequest,
    HOST_NAMESPACES, JOINED_NAMESPACES, SHIM_COMMAND,
};
pub use sync::{sync_path, SyncRecord, SyncStatus};

use crate::imagestore::{Identity, ImageStoreError, MountHandle, OpCounters};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("cluster needs at least one node and one rank per node")]
    ZeroSize,
    #[error("incomplete trace: {0}")]
    IncompleteTrace(String),
    #[error("bad fault spec {spec:?}: {reason}")]
    BadFault { spec: String, reason: String },
    #[error("bad workload: {0}")]
    BadWorkload(String),
    #[error(transparent)]
    Store(#[from] ImageStoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartMode {
    Cold,
    Warm,
}

impl std::str::FromStr for StartMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cold" => Ok(StartMode::Cold),
            "warm" => Ok(StartMode::Warm),
            other => Err(format!("unknown start mode {other:?} (cold|warm)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    ImageAcquisition,
    PodmanMediatedStartup,
    RuntimePreparation,
    NamespaceJoin,
    Teardown,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::ImageAcquisition => "image-acquisition",
            Phase::PodmanMediatedStartup => "podman-mediated-startup",
            Phase::RuntimePreparation => "runtime-preparation",
            Phase::NamespaceJoin => "namespace-join",
            Phase::Teardown => "teardown",
        }
    }
}

/// Which component emitted an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    /// The workload manager: rank lifecycle only.
    Scheduler,
    /// The container layer plugin.
    Plugin,
    /// The container engine.
    Engine,
    /// The shared image store.
    Store,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Entity {
    Job,
    Node(u32),
    Rank(u32),
}

impl std::fmt::Display for Entity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Entity::Job => write!(f, "job"),
            Entity::Node(n) => write!(f, "node:{n}"),
            Entity::Rank(r) => write!(f, "rank:{r}"),
        }
    }
}

impl Serialize for Entity {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    RankCreated,
    RankStarted,
    RankExited,
    RankFailed,
    EdfRendered,
    EdfReconstructed,
    RankWaiting,
    SyncChecked,
    SyncReclaimed,
    SyncWritten,
    SyncObserved,
    ImagePulled,
    Migrated,
    MigrateFailed,
    TempRemoved,
    WriterCrashed,
    ScratchCreated,
    MountView,
    ContainerStarted,
    ContainerStartFailed,
    ShimReady,
    PreparationDone,
    NamespaceJoined,
    JoinFailed,
    ContainerStopped,
    StopSuppressed,
    MountReleased,
    ScratchRemoved,
    SyncDeleted,
}

impl EventKind {
    /// Rank lifecycle transitions; only the scheduler may emit these.
    pub fn is_lifecycle(self) -> bool {
        matches!(
            self,
            EventKind::RankCreated
                | EventKind::RankStarted
                | EventKind::RankExited
                | EventKind::RankFailed
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceEvent {
    pub t_us: u64,
    pub seq: u64,
    pub entity: Entity,
    pub provenance: Provenance,
    pub kind: EventKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub detail: String,
    /// Shared-store operations issued by this action.
    pub ops: OpCounters,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    pub node: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<u32>,
    pub start_us: u64,
    pub duration_us: u64,
    pub metadata_ops: u64,
}

impl PhaseRecord {
    pub fn end_us(&self) -> u64 {
        self.start_us + self.duration_us
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureReason {
    EdfInvalid,
    PlanInvalid,
    AcquisitionFailed,
    AcquisitionTimeout,
    WriterLost,
    ImageMissing,
    MountFailed,
    ContainerStartFailed,
    MissingNamespaceHandle,
    StaleHandle,
    RankFailed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Failure {
    pub reason: FailureReason,
    pub detail: String,
}

impl Failure {
    pub fn new(reason: FailureReason, detail: impl Into<String>) -> Self {
        Failure {
            reason,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankPhase {
    Created,
    Waiting,
    Joined,
    Running,
    Exited,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct RankState {
    pub global: u32,
    pub node: u32,
    pub local: u32,
    pub phase: RankPhase,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<Failure>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub identity: Option<Identity>,
    /// Namespaces entered from the node's helper container.
    pub joined: Vec<&'static str>,
    /// Namespaces kept from the host.
    pub inherited: Vec<&'static str>,
    /// Filesystem view of the rank, shared with its node's container.
    #[serde(skip)]
    pub view: Option<MountHandle>,
}

impl RankState {
    pub fn new(global: u32, node: u32, local: u32) -> Self {
        RankState {
            global,
            node,
            local,
            phase: RankPhase::Created,
            exit_code: None,
            failure: None,
            identity: None,
            joined: Vec::new(),
            inherited: Vec::new(),
            view: None,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.phase, RankPhase::Exited | RankPhase::Failed)
    }
}

/// Per-step scratch directory on a node's local disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScratchDir {
    pub node: u32,
    pub path: String,
    pub uid: u32,
    pub gid: u32,
    pub mode: u32,
    pub removed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StopRecord {
    pub node: u32,
    /// Global index of the last local rank to exit.
    pub by_rank: u32,
    pub t_us: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TeardownReport {
    pub stops: Vec<StopRecord>,
    pub mounts_released: u32,
    pub scratch_removed: Vec<u32>,
    pub sync_deleted_by: Option<u32>,
    pub image_retained: bool,
    pub warnings: Vec<String>,
    /// Some rank failed or a node was lost.
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum StepStatus {
    Completed,
    Failed {
        reason: FailureReason,
        detail: String,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct StepTrace {
    pub job_id: u64,
    pub step_id: u64,
    pub mode: StartMode,
    pub nodes: u32,
    pub ranks_per_node: u32,
    pub start_us: u64,
    pub end_us: u64,
    pub events: Vec<TraceEvent>,
    pub phases: Vec<PhaseRecord>,
    pub ranks: Vec<RankState>,
    #[serde(skip)]
    pub shims: Vec<ShimRecord>,
    pub scratch: Vec<ScratchDir>,
    pub teardown: TeardownReport,
    /// Shared-store operations over the whole step.
    pub store_ops: OpCounters,
    pub status: StepStatus,
}

impl StepTrace {
    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn events_of(&self, kind: EventKind) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    pub fn phases_of(&self, phase: Phase) -> impl Iterator<Item = &PhaseRecord> {
        self.phases.iter().filter(move |p| p.phase == phase)
    }

    pub fn is_completed(&self) -> bool {
        self.status == StepStatus::Completed
    }

    pub fn failure_reasons(&self) -> Vec<FailureReason> {
        let mut out: Vec<FailureReason> = self
            .ranks
            .iter()
            .filter_map(|r| r.failure.as_ref().map(|f| f.reason))
            .collect();
        out.dedup();
        out
    }

    /// One JSON object per line: events first, then phase records, then a
    /// summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("events serialize"));
            out.push('\n');
        }
        for p in &self.phases {
            let line = serde_json::json!({ "record": "phase", "phase": p });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        let summary = serde_json::json!({
            "record": "summary",
            "job": self.job_id,
            "step": self.step_id,
            "mode": self.mode,
            "start_us": self.start_us,
            "end_us": self.end_us,
            "ranks": self.ranks,
            "scratch": self.scratch,
            "teardown": self.teardown,
            "store_ops": self.store_ops,
            "status": self.status,
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }
}
