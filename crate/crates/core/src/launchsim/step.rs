use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use serde::Serialize;

use super::sync::{sync_path, SyncRecord, SyncStatus};
use super::{
    ClusterSim, CrashPoint, Entity, EventKind, Failure, FailureReason, Fault, Phase, PhaseRecord,
    Provenance, RankPhase, RankState, ScratchDir, StartMode, StepStatus, StepTrace, StopRecord,
    TeardownReport, TraceEvent,
};
use crate::edf::{from_job_env, to_job_env, ValidatedEdf, JOB_ENV_EDF_DIGEST};
use crate::imagestore::{
    import_image, Identity, ImageStoreError, LocalStore, MountHandle, MountOwner, OpCounters,
    ReleaseOutcome, SharedStore, StoreBackend, UpperLayer,
};
use crate::plan::{render_plan, EnginePlan, SiteConfig, StepContext, STORE_OPT_IMAGE_STORE};

/// Process kept alive inside each node's container.
pub const SHIM_COMMAND: &str = "/usr/libexec/hpcc/shim";
/// Namespaces every rank keeps from the host.
pub const HOST_NAMESPACES: [&str; 5] = ["ipc", "network", "pid", "uts", "cgroup"];
/// Namespaces taken from the node's container.
pub const JOINED_NAMESPACES: [&str; 2] = ["user", "mnt"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NamespaceHandle {
    pub container_id: String,
    pub id: u64,
}

/// Node-local record of the running helper container; the other ranks on
/// the node find the namespaces through it.
#[derive(Debug, Clone)]
pub struct ShimRecord {
    pub node: u32,
    pub container_id: String,
    pub handle: Option<NamespaceHandle>,
    pub mount: MountHandle,
    pub plan: EnginePlan,
    pub identity: Identity,
    pub stopped: bool,
}

/// Moves a waiting rank into the container's user and mount namespaces.
pub fn join_namespaces(rank: &mut RankState, shim: &ShimRecord) -> Result<(), Failure> {
    if rank.node != shim.node {
        return Err(Failure::new(
            FailureReason::MissingNamespaceHandle,
            format!("rank {} is not on node {}", rank.global, shim.node),
        ));
    }
    if shim.stopped || !shim.mount.is_live() {
        return Err(Failure::new(
            FailureReason::StaleHandle,
            format!("container {} is gone", shim.container_id),
        ));
    }
    if shim.handle.is_none() {
        return Err(Failure::new(
            FailureReason::MissingNamespaceHandle,
            format!("no namespace handle for {}", shim.container_id),
        ));
    }
    if rank.phase != RankPhase::Waiting {
        return Err(Failure::new(
            FailureReason::StaleHandle,
            format!("rank {} is {:?}, not waiting", rank.global, rank.phase),
        ));
    }
    rank.phase = RankPhase::Joined;
    rank.view = Some(shim.mount.clone());
    rank.identity = Some(shim.identity);
    rank.joined = JOINED_NAMESPACES.to_vec();
    rank.inherited = HOST_NAMESPACES.to_vec();
    Ok(())
}

#[derive(Debug, Clone)]
pub struct StepRequest {
    pub job_id: u64,
    /// Allocated from the cluster when unset.
    pub step_id: Option<u64>,
    pub user: String,
    pub uid: u32,
    pub gid: u32,
    pub edf: String,
    /// Submission environment used for variable expansion.
    pub env: BTreeMap<String, String>,
    pub mode: StartMode,
    pub faults: Vec<Fault>,
}

impl StepRequest {
    pub fn new(edf: impl Into<String>, mode: StartMode) -> Self {
        let env = [
            ("USER", "alice"),
            ("HOME", "/users/alice"),
            ("SCRATCH", "/scratch/alice"),
        ]
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        StepRequest {
            job_id: 1000,
            step_id: None,
            user: "alice".into(),
            uid: 1000,
            gid: 1000,
            edf: edf.into(),
            env,
            mode,
            faults: Vec::new(),
        }
    }

    pub fn with_fault(mut self, fault: Fault) -> Self {
        self.faults.push(fault);
        self
    }
}

pub fn run_job_step(
    cluster: &mut ClusterSim,
    edf: &str,
    site: &SiteConfig,
    mode: StartMode,
) -> StepTrace {
    run_step(cluster, &StepRequest::new(edf, mode), site)
}

pub fn run_step(cluster: &mut ClusterSim, req: &StepRequest, site: &SiteConfig) -> StepTrace {
    let step_id = req.step_id.unwrap_or(cluster.next_step);
    cluster.next_step = cluster.next_step.max(step_id + 1);
    let mut run = Run::new(cluster, req, site, step_id);
    run.drive();
    run.finish()
}

#[derive(Debug, Clone, Copy)]
enum Acq {
    Check,
    WriteInProgress,
    Pull,
    Migrate,
    RemoveTemp,
    WriteComplete,
}

#[derive(Debug, Clone, Copy)]
enum Ev {
    Begin,
    NodeInit(u32),
    Acquire(Acq),
    Poll(u32),
    StartContainer(u32),
    ShimReady(u32),
    PrepDone(u32),
    JoinDone(u32),
    RankExit(u32),
    NodeTeardown { node: u32, by_rank: u32 },
    StepEnd,
}

#[derive(Debug, Default)]
struct NodeRt {
    plan: Option<EnginePlan>,
    wait_start: u64,
    live_ranks: u32,
    mount: Option<MountHandle>,
    shim: Option<usize>,
    shim_ready_at: u64,
    dead: bool,
}

struct Run<'a> {
    c: &'a mut ClusterSim,
    req: &'a StepRequest,
    site: &'a SiteConfig,
    ctx: StepContext,
    step_id: u64,
    start_us: u64,
    store_before: OpCounters,

    queue: BinaryHeap<Reverse<(u64, u64)>>,
    pending: BTreeMap<u64, Ev>,
    next_seq: u64,

    events: Vec<TraceEvent>,
    phases: Vec<PhaseRecord>,
    ranks: Vec<RankState>,
    nodes: Vec<NodeRt>,
    shims: Vec<ShimRecord>,
    scratch: Vec<ScratchDir>,
    teardown: TeardownReport,
    join_started: BTreeMap<u32, u64>,

    job_env: BTreeMap<String, String>,
    image: String,
    writable: bool,
    writer: String,
    local: LocalStore,
    acq_start: u64,
    acq_ops: u64,
    acq_digest: Option<String>,
    wrote_sync: bool,
    nodes_done: u32,
    last_teardown_end: u64,
    first_failure: Option<Failure>,
    end_us: u64,
}

impl<'a> Run<'a> {
    fn new(
        c: &'a mut ClusterSim,
        req: &'a StepRequest,
        site: &'a SiteConfig,
        step_id: u64,
    ) -> Self {
        let ctx = StepContext {
            job_id: req.job_id,
            step_id,
            user: req.user.clone(),
            uid: req.uid,
            gid: req.gid,
            nodes: c.nodes,
            ranks_per_node: c.ranks_per_node,
        };
        let nodes = (0..c.nodes)
            .map(|_| NodeRt {
                live_ranks: c.ranks_per_node,
                ..NodeRt::default()
            })
            .collect();
        Run {
            ranks: c.ranks(),
            start_us: c.now_us,
            store_before: c.store.backend().counters(),
            writer: format!("{}.{}/task0", req.job_id, step_id),
            c,
            req,
            site,
            ctx,
            step_id,
            queue: BinaryHeap::new(),
            pending: BTreeMap::new(),
            next_seq: 0,
            events: Vec::new(),
            phases: Vec::new(),
            nodes,
            shims: Vec::new(),
            scratch: Vec::new(),
            teardown: TeardownReport::default(),
            join_started: BTreeMap::new(),
            job_env: BTreeMap::new(),
            image: String::new(),
            writable: true,
            local: LocalStore::new(),
            acq_start: 0,
            acq_ops: 0,
            acq_digest: None,
            wrote_sync: false,
            nodes_done: 0,
            last_teardown_end: 0,
            first_failure: None,
            end_us: 0,
        }
    }

    fn schedule(&mut self, t: u64, ev: Ev) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.pending.insert(seq, ev);
        self.queue.push(Reverse((t, seq)));
    }

    fn drive(&mut self) {
        let t0 = self.start_us;
        self.schedule(t0, Ev::Begin);
        while let Some(Reverse((t, seq))) = self.queue.pop() {
            let ev = self.pending.remove(&seq).expect("queued event");
            self.handle(t, ev);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn emit(
        &mut self,
        t: u64,
        entity: Entity,
        provenance: Provenance,
        kind: EventKind,
        phase: Option<Phase>,
        detail: impl Into<String>,
        ops: OpCounters,
    ) {
        debug_assert!(
            !kind.is_lifecycle() || provenance == Provenance::Scheduler,
            "{kind:?} emitted by {provenance:?}"
        );
        let seq = self.events.len() as u64;
        self.events.push(TraceEvent {
            t_us: t,
            seq,
            entity,
            provenance,
            kind,
            phase,
            detail: detail.into(),
            ops,
        });
    }

    fn plugin(
        &mut self,
        t: u64,
        entity: Entity,
        kind: EventKind,
        phase: Option<Phase>,
        detail: impl Into<String>,
    ) {
        self.emit(
            t,
            entity,
            Provenance::Plugin,
            kind,
            phase,
            detail,
            OpCounters::default(),
        );
    }

    /// Runs `f` against the cluster and returns the shared-store operations
    /// it issued.
    fn with_store<T>(&mut self, f: impl FnOnce(&mut ClusterSim) -> T) -> (T, OpCounters) {
        let before = self.c.store.backend().counters();
        let out = f(self.c);
        let ops = self.c.store.backend().counters().since(&before);
        (out, ops)
    }

    fn has_fault(&self, pred: impl Fn(&Fault) -> bool) -> bool {
        self.req.faults.iter().any(pred)
    }

    fn rpn(&self) -> u32 {
        self.c.ranks_per_node
    }

    fn task0(&self, node: u32) -> u32 {
        node * self.rpn()
    }

    fn node_ranks(&self, node: u32) -> std::ops::Range<u32> {
        let first = self.task0(node);
        first..first + self.rpn()
    }

    // -- scheduler --------------------------------------------------------

    fn scheduler(&mut self, t: u64, rank: u32, kind: EventKind, detail: impl Into<String>) {
        self.emit(
            t,
            Entity::Rank(rank),
            Provenance::Scheduler,
            kind,
            None,
            detail,
            OpCounters::default(),
        );
    }

    fn start_rank(&mut self, t: u64, g: u32) {
        self.ranks[g as usize].phase = RankPhase::Running;
        self.scheduler(t, g, EventKind::RankStarted, "");
        let workload = self.c.cost.workload_us;
        self.schedule(t + workload, Ev::RankExit(g));
    }

    fn note_failure(&mut self, f: &Failure) {
        if self.first_failure.is_none() {
            self.first_failure = Some(f.clone());
        }
        self.teardown.degraded = true;
    }

    fn fail_rank(&mut self, t: u64, g: u32, failure: Failure) {
        if self.ranks[g as usize].is_terminal() {
            return;
        }
        self.note_failure(&failure);
        let detail = format!("{:?}: {}", failure.reason, failure.detail);
        let r = &mut self.ranks[g as usize];
        r.phase = RankPhase::Failed;
        r.failure = Some(failure);
        self.scheduler(t, g, EventKind::RankFailed, detail);
        self.rank_terminal(t, g);
    }

    fn fail_node(&mut self, t: u64, node: u32, failure: Failure) {
        for g in self.node_ranks(node) {
            self.fail_rank(t, g, failure.clone());
        }
    }

    fn fail_all(&mut self, t: u64, failure: Failure) {
        for n in 0..self.c.nodes {
            self.fail_node(t, n, failure.clone());
        }
    }

    fn rank_terminal(&mut self, t: u64, g: u32) {
        let node = self.ranks[g as usize].node;
        let rt = &mut self.nodes[node as usize];
        rt.live_ranks -= 1;
        if rt.live_ranks == 0 {
            self.schedule(t, Ev::NodeTeardown { node, by_rank: g });
        }
    }

    // -- event handlers ---------------------------------------------------

    fn handle(&mut self, t: u64, ev: Ev) {
        match ev {
            Ev::Begin => self.begin(t),
            Ev::NodeInit(n) => self.node_init(t, n),
            Ev::Acquire(stage) => self.acquire(t, stage),
            Ev::Poll(n) => self.poll(t, n),
            Ev::StartContainer(n) => self.start_container(t, n),
            Ev::ShimReady(n) => self.shim_ready(t, n),
            Ev::PrepDone(n) => self.prep_done(t, n),
            Ev::JoinDone(g) => self.join_done(t, g),
            Ev::RankExit(g) => self.rank_exit(t, g),
            Ev::NodeTeardown { node, by_rank } => self.node_teardown(t, node, by_rank),
            Ev::StepEnd => self.step_end(t),
        }
    }

    fn begin(&mut self, t: u64) {
        for g in 0..self.ranks.len() as u32 {
            self.scheduler(t, g, EventKind::RankCreated, "");
        }
        // Allocator context: expand and validate once, then publish the
        // result through the job environment.
        let validated = match ValidatedEdf::load(&self.req.edf, &self.req.env) {
            Ok(v) => v,
            Err(e) => {
                self.fail_all(t, Failure::new(FailureReason::EdfInvalid, e.to_string()));
                return;
            }
        };
        self.image = validated.edf().image.clone();
        self.job_env = to_job_env(validated.edf()).into_iter().collect();
        let digest = self
            .job_env
            .get(JOB_ENV_EDF_DIGEST)
            .cloned()
            .unwrap_or_default();
        self.plugin(
            t,
            Entity::Job,
            EventKind::EdfRendered,
            None,
            format!("{} {}", self.image, digest),
        );
        let next = t + self.c.cost.render_us;
        for n in 0..self.c.nodes {
            self.schedule(next, Ev::NodeInit(n));
        }
    }

    fn node_init(&mut self, t: u64, n: u32) {
        // Remote context: the EDF comes only from the job environment.
        let validated = match from_job_env(&self.job_env) {
            Ok(v) => v,
            Err(e) => {
                self.fail_node(t, n, Failure::new(FailureReason::EdfInvalid, e.to_string()));
                return;
            }
        };
        self.plugin(t, Entity::Node(n), EventKind::EdfReconstructed, None, "");
        self.writable = validated.edf().writable;
        let plan = render_plan(&validated, self.site, &self.ctx).map(|mut p| {
            p.detach = true;
            p.shim_command = Some(vec![SHIM_COMMAND.to_string()]);
            p
        });
        match plan
            .map_err(|e| e.to_string())
            .and_then(|p| check_plan(&p).map(|_| p))
        {
            Ok(p) => self.nodes[n as usize].plan = Some(p),
            Err(e) => {
                self.fail_node(t, n, Failure::new(FailureReason::PlanInvalid, e));
                return;
            }
        }
        for g in self.node_ranks(n).skip(1) {
            self.ranks[g as usize].phase = RankPhase::Waiting;
            self.plugin(t, Entity::Rank(g), EventKind::RankWaiting, None, "");
        }
        let t = t + self.c.cost.reconstruct_us;
        match self.req.mode {
            StartMode::Warm => self.schedule(t, Ev::StartContainer(n)),
            StartMode::Cold if n == 0 => {
                self.acq_start = t;
                self.schedule(t, Ev::Acquire(Acq::Check));
            }
            StartMode::Cold => {
                self.nodes[n as usize].wait_start = t;
                self.schedule(t, Ev::Poll(n));
            }
        }
    }

    fn read_sync(&mut self) -> (Option<SyncRecord>, OpCounters) {
        let path = sync_path(&self.image);
        let (bytes, ops) = self.with_store(|c| c.store.backend().read(&path).ok());
        let rec = bytes.and_then(|b| SyncRecord::parse(&String::from_utf8_lossy(&b)).ok());
        (rec, ops)
    }

    fn write_sync(
        &mut self,
        t: u64,
        status: SyncStatus,
        digest: &str,
        reason: Option<String>,
    ) -> (u64, bool) {
        let rec = SyncRecord {
            status,
            digest: digest.to_string(),
            writer: self.writer.clone(),
            ts_us: t,
            reason,
        };
        let path = sync_path(&self.image);
        let (res, ops) = self.with_store(|c| {
            c.store
                .backend()
                .write_atomic(&path, rec.to_text().as_bytes())
        });
        self.acq_ops += ops.metadata_ops();
        let done = self.c.charge_ops(t, ops.metadata_ops());
        let ok = res.is_ok();
        self.emit(
            t,
            Entity::Rank(0),
            Provenance::Plugin,
            EventKind::SyncWritten,
            Some(Phase::ImageAcquisition),
            if ok {
                status.as_str().to_string()
            } else {
                format!("{} (write failed)", status.as_str())
            },
            ops,
        );
        if ok {
            self.wrote_sync = true;
        }
        (done + self.c.cost.sync_write_us, ok)
    }

    fn acquire(&mut self, t: u64, stage: Acq) {
        let phase = Some(Phase::ImageAcquisition);
        match stage {
            Acq::Check => {
                let (rec, ops) = self.read_sync();
                self.acq_ops += ops.metadata_ops();
                let done = self.c.charge_ops(t, ops.metadata_ops());
                let timeout = self.c.cost.stale_timeout_us;
                match rec {
                    Some(r)
                        if r.status == SyncStatus::InProgress
                            && t.saturating_sub(r.ts_us) < timeout =>
                    {
                        let until = r.ts_us + timeout;
                        self.emit(
                            t,
                            Entity::Rank(0),
                            Provenance::Plugin,
                            EventKind::SyncChecked,
                            phase,
                            format!("busy: {r}; recheck at {until}"),
                            ops,
                        );
                        self.schedule(until, Ev::Acquire(Acq::Check));
                    }
                    Some(r) if r.status == SyncStatus::InProgress => {
                        self.emit(
                            t,
                            Entity::Rank(0),
                            Provenance::Plugin,
                            EventKind::SyncReclaimed,
                            phase,
                            format!("stale: {r}"),
                            ops,
                        );
                        self.schedule(done, Ev::Acquire(Acq::WriteInProgress));
                    }
                    other => {
                        let detail = other
                            .map(|r| format!("replacing {r}"))
                            .unwrap_or_else(|| "absent".into());
                        self.emit(
                            t,
                            Entity::Rank(0),
                            Provenance::Plugin,
                            EventKind::SyncChecked,
                            phase,
                            detail,
                            ops,
                        );
                        self.schedule(done, Ev::Acquire(Acq::WriteInProgress));
                    }
                }
            }
            Acq::WriteInProgress => {
                let (next, ok) = self.write_sync(t, SyncStatus::InProgress, "-", None);
                if !ok {
                    self.acquisition_failed(next, "cannot write sync file".into());
                } else if self.has_fault(|f| *f == Fault::WriterCrash(CrashPoint::AfterInProgress))
                {
                    self.writer_crash(next);
                } else {
                    self.schedule(next, Ev::Acquire(Acq::Pull));
                }
            }
            Acq::Pull => {
                if self.has_fault(|f| *f == Fault::PullFails) {
                    self.acquisition_failed(t, format!("pull of {} failed", self.image));
                    return;
                }
                let Some(image) = self.c.registry.get(&self.image).cloned() else {
                    self.acquisition_failed(t, format!("{} not found in registry", self.image));
                    return;
                };
                let layers = image.layers.len() as u64;
                if let Err(e) = import_image(image, &mut self.local) {
                    self.acquisition_failed(t, format!("import: {e}"));
                    return;
                }
                self.plugin(
                    t,
                    Entity::Rank(0),
                    EventKind::ImagePulled,
                    phase,
                    format!("{} layers", layers),
                );
                let c = &self.c.cost;
                let next = t + c.pull_base_us + layers * c.pull_per_layer_us;
                self.schedule(next, Ev::Acquire(Acq::Migrate));
            }
            Acq::Migrate => {
                let inject = self.has_fault(|f| *f == Fault::MigrateWriteFails);
                let image = self.image.clone();
                let created = t / 1_000_000;
                let local = std::mem::take(&mut self.local);
                let (res, ops) = self.with_store(|c| {
                    c.store.backend().inner().set_fail_writes(inject);
                    let res = c.store.migrate(&image, &local, created);
                    c.store.backend().inner().set_fail_writes(false);
                    res
                });
                self.local = local;
                self.acq_ops += ops.metadata_ops();
                let done = self.c.charge_ops(t, ops.metadata_ops());
                match res {
                    Ok(m) => {
                        let detail = format!(
                            "{}{}",
                            m.image.digest(),
                            if m.already_present {
                                " (already present)"
                            } else {
                                ""
                            }
                        );
                        self.emit(
                            t,
                            Entity::Rank(0),
                            Provenance::Store,
                            EventKind::Migrated,
                            phase,
                            detail,
                            ops,
                        );
                        let c = &self.c.cost;
                        let next = done
                            + c.migrate_base_us
                            + m.image.lower.index.len() as u64 * c.migrate_per_entry_us;
                        self.acq_digest = Some(m.image.digest().to_string());
                        if self.has_fault(|f| *f == Fault::WriterCrash(CrashPoint::AfterMigrate)) {
                            self.writer_crash(next);
                        } else {
                            self.schedule(next, Ev::Acquire(Acq::RemoveTemp));
                        }
                    }
                    Err(e) => {
                        self.emit(
                            t,
                            Entity::Rank(0),
                            Provenance::Store,
                            EventKind::MigrateFailed,
                            phase,
                            e.to_string(),
                            ops,
                        );
                        self.acquisition_failed(done, format!("migrate: {e}"));
                    }
                }
            }
            Acq::RemoveTemp => {
                self.local.remove(&self.image);
                self.plugin(t, Entity::Rank(0), EventKind::TempRemoved, phase, "");
                let next = t + self.c.cost.remove_temp_us;
                self.schedule(next, Ev::Acquire(Acq::WriteComplete));
            }
            Acq::WriteComplete => {
                let digest = self.acq_digest.clone().unwrap_or_else(|| "-".into());
                let (next, ok) = self.write_sync(t, SyncStatus::Complete, &digest, None);
                if !ok {
                    self.acquisition_failed(next, "cannot write sync file".into());
                    return;
                }
                self.acq_phase(next);
                self.schedule(next, Ev::StartContainer(0));
            }
        }
    }

    fn acq_phase(&mut self, end: u64) {
        self.phases.push(PhaseRecord {
            phase: Phase::ImageAcquisition,
            node: 0,
            rank: Some(0),
            start_us: self.acq_start,
            duration_us: end - self.acq_start,
            metadata_ops: self.acq_ops,
        });
    }

    fn acquisition_failed(&mut self, t: u64, reason: String) {
        self.local.remove(&self.image);
        let digest = self.acq_digest.clone().unwrap_or_else(|| "-".into());
        let (next, _) = self.write_sync(t, SyncStatus::Failed, &digest, Some(reason.clone()));
        self.acq_phase(next);
        self.fail_node(
            next,
            0,
            Failure::new(FailureReason::AcquisitionFailed, reason),
        );
    }

    fn writer_crash(&mut self, t: u64) {
        self.plugin(
            t,
            Entity::Rank(0),
            EventKind::WriterCrashed,
            Some(Phase::ImageAcquisition),
            "node 0 lost",
        );
        self.nodes[0].dead = true;
        self.fail_node(
            t,
            0,
            Failure::new(
                FailureReason::WriterLost,
                "writer node lost during acquisition",
            ),
        );
    }

    fn poll(&mut self, t: u64, n: u32) {
        if self.ranks[self.task0(n) as usize].is_terminal() {
            return;
        }
        let (rec, ops) = self.read_sync();
        let done = self.c.charge_ops(t, ops.metadata_ops());
        let mine = rec.as_ref().filter(|r| r.writer == self.writer);
        let timeout = self.c.cost.stale_timeout_us;
        match mine {
            Some(r) if r.status == SyncStatus::Complete => {
                let detail = r.to_string();
                self.emit(
                    t,
                    Entity::Rank(self.task0(n)),
                    Provenance::Plugin,
                    EventKind::SyncObserved,
                    Some(Phase::ImageAcquisition),
                    detail,
                    ops,
                );
                self.schedule(done, Ev::StartContainer(n));
            }
            Some(r) if r.status == SyncStatus::Failed => {
                let reason = r.reason.clone().unwrap_or_default();
                let detail = r.to_string();
                self.emit(
                    t,
                    Entity::Rank(self.task0(n)),
                    Provenance::Plugin,
                    EventKind::SyncObserved,
                    Some(Phase::ImageAcquisition),
                    detail,
                    ops,
                );
                self.fail_node(
                    done,
                    n,
                    Failure::new(FailureReason::AcquisitionFailed, reason),
                );
            }
            other => {
                let stale = match other {
                    Some(r) => t.saturating_sub(r.ts_us) >= timeout,
                    None => true,
                };
                let waited = t.saturating_sub(self.nodes[n as usize].wait_start);
                if stale && waited >= timeout {
                    let detail = format!("no progress for {waited} us");
                    self.emit(
                        t,
                        Entity::Rank(self.task0(n)),
                        Provenance::Plugin,
                        EventKind::SyncObserved,
                        Some(Phase::ImageAcquisition),
                        detail.clone(),
                        ops,
                    );
                    self.fail_node(
                        done,
                        n,
                        Failure::new(FailureReason::AcquisitionTimeout, detail),
                    );
                } else {
                    let next = done.max(t + self.c.cost.poll_interval_us);
                    self.schedule(next, Ev::Poll(n));
                }
            }
        }
    }

    fn start_container(&mut self, t: u64, n: u32) {
        let task0 = self.task0(n);
        let me = Entity::Rank(task0);
        let plan = self.nodes[n as usize]
            .plan
            .clone()
            .expect("plan rendered at init");
        let phase = Some(Phase::PodmanMediatedStartup);

        for path in [plan.root(), plan.runroot()].into_iter().flatten() {
            self.scratch.push(ScratchDir {
                node: n,
                path: path.to_string(),
                uid: self.req.uid,
                gid: self.req.gid,
                mode: 0o700,
                removed: false,
            });
            self.plugin(
                t,
                me,
                EventKind::ScratchCreated,
                phase,
                format!("{path} 0700 {}:{}", self.req.uid, self.req.gid),
            );
        }
        let t1 = t + self.c.cost.scratch_us;

        let image = self.image.clone();
        let identity = Identity::new(self.req.uid, self.req.gid);
        let owner = MountOwner {
            job: self.req.job_id,
            step: self.step_id,
            node: n,
        };
        let upper = if self.writable {
            UpperLayer::new()
        } else {
            UpperLayer::read_only()
        };
        let (res, ops) = self.with_store(|c| {
            let img = c.store.open(&image)?;
            c.store.mount_view(&img, upper, identity, owner)
        });
        let ready_ops = self.c.charge_ops(t1, ops.metadata_ops());
        let mount = match res {
            Ok(h) => h,
            Err(e) => {
                let reason = match e {
                    ImageStoreError::UnknownReference(_) => FailureReason::ImageMissing,
                    _ => FailureReason::MountFailed,
                };
                self.emit(
                    t1,
                    me,
                    Provenance::Store,
                    EventKind::MountView,
                    phase,
                    format!("failed: {e}"),
                    ops,
                );
                self.fail_node(ready_ops, n, Failure::new(reason, e.to_string()));
                return;
            }
        };
        self.emit(
            t1,
            me,
            Provenance::Store,
            EventKind::MountView,
            phase,
            format!("mount {}", mount.id()),
            ops,
        );
        self.nodes[n as usize].mount = Some(mount.clone());

        let container_id = format!("hpcc-{}.{}-n{}", self.req.job_id, self.step_id, n);
        if self
            .has_fault(|f| matches!(f, Fault::StartFails(None)) || *f == Fault::StartFails(Some(n)))
        {
            self.emit(
                ready_ops,
                me,
                Provenance::Engine,
                EventKind::ContainerStartFailed,
                phase,
                container_id.clone(),
                OpCounters::default(),
            );
            self.fail_node(
                ready_ops,
                n,
                Failure::new(
                    FailureReason::ContainerStartFailed,
                    format!("engine could not start {container_id}"),
                ),
            );
            return;
        }
        let (base, spread) = (self.c.cost.startup_us, self.c.cost.startup_jitter_us);
        let ready = ready_ops + self.c.jitter(base, spread);
        self.emit(
            t,
            me,
            Provenance::Engine,
            EventKind::ContainerStarted,
            phase,
            container_id.clone(),
            OpCounters::default(),
        );
        self.phases.push(PhaseRecord {
            phase: Phase::PodmanMediatedStartup,
            node: n,
            rank: None,
            start_us: t,
            duration_us: ready - t,
            metadata_ops: ops.metadata_ops(),
        });
        let r0 = &mut self.ranks[task0 as usize];
        r0.view = Some(mount.clone());
        r0.identity = Some(identity);
        r0.joined = JOINED_NAMESPACES.to_vec();
        r0.inherited = HOST_NAMESPACES.to_vec();
        self.shims.push(ShimRecord {
            node: n,
            handle: Some(NamespaceHandle {
                container_id: container_id.clone(),
                id: mount.id(),
            }),
            container_id,
            mount,
            plan,
            identity,
            stopped: false,
        });
        self.nodes[n as usize].shim = Some(self.shims.len() - 1);
        self.schedule(ready, Ev::ShimReady(n));
    }

    fn shim_ready(&mut self, t: u64, n: u32) {
        let idx = self.nodes[n as usize].shim.expect("shim started");
        if self.has_fault(|f| *f == Fault::JoinFailsNode(n)) {
            self.shims[idx].handle = None;
        }
        let id = self.shims[idx].container_id.clone();
        self.emit(
            t,
            Entity::Rank(self.task0(n)),
            Provenance::Engine,
            EventKind::ShimReady,
            Some(Phase::RuntimePreparation),
            id,
            OpCounters::default(),
        );
        self.nodes[n as usize].shim_ready_at = t;
        let (base, spread) = (self.c.cost.prep_us, self.c.cost.prep_jitter_us);
        let prep = self.c.jitter(base, spread);
        self.schedule(t + prep, Ev::PrepDone(n));
    }

    fn prep_done(&mut self, t: u64, n: u32) {
        let task0 = self.task0(n);
        self.plugin(
            t,
            Entity::Rank(task0),
            EventKind::PreparationDone,
            Some(Phase::RuntimePreparation),
            "",
        );
        let mut max_join = 0;
        for g in self.node_ranks(n).skip(1) {
            if self.ranks[g as usize].phase != RankPhase::Waiting {
                continue;
            }
            let j = self.c.join_cost();
            max_join = max_join.max(j);
            self.join_started.insert(g, t);
            self.schedule(t + j, Ev::JoinDone(g));
        }
        let start = self.nodes[n as usize].shim_ready_at;
        self.phases.push(PhaseRecord {
            phase: Phase::RuntimePreparation,
            node: n,
            rank: None,
            start_us: start,
            duration_us: t + max_join - start,
            metadata_ops: 0,
        });
        if !self.ranks[task0 as usize].is_terminal() {
            self.start_rank(t, task0);
        }
    }

    fn join_done(&mut self, t: u64, g: u32) {
        let node = self.ranks[g as usize].node;
        let idx = self.nodes[node as usize].shim.expect("shim started");
        let phase = Some(Phase::NamespaceJoin);
        let started = self.join_started[&g];
        let result = if self.has_fault(|f| *f == Fault::JoinFailsRank(g)) {
            Err(Failure::new(
                FailureReason::MissingNamespaceHandle,
                format!("rank {g} found no namespace handle"),
            ))
        } else {
            let before = self.c.store.backend().counters();
            let r = join_namespaces(&mut self.ranks[g as usize], &self.shims[idx]);
            debug_assert_eq!(self.c.store.backend().counters(), before);
            r
        };
        match result {
            Ok(()) => {
                let id = self.shims[idx].container_id.clone();
                self.plugin(t, Entity::Rank(g), EventKind::NamespaceJoined, phase, id);
                self.phases.push(PhaseRecord {
                    phase: Phase::NamespaceJoin,
                    node,
                    rank: Some(g),
                    start_us: started,
                    duration_us: t - started,
                    metadata_ops: 0,
                });
                self.start_rank(t, g);
            }
            Err(f) => {
                self.plugin(
                    t,
                    Entity::Rank(g),
                    EventKind::JoinFailed,
                    phase,
                    f.detail.clone(),
                );
                self.fail_rank(t, g, f);
            }
        }
    }

    fn rank_exit(&mut self, t: u64, g: u32) {
        let code = self
            .req
            .faults
            .iter()
            .find_map(|f| match f {
                Fault::RankCrash { rank, code } if *rank == g => Some(*code),
                _ => None,
            })
            .unwrap_or(0);
        self.scheduler(t, g, EventKind::RankExited, format!("code={code}"));
        let r = &mut self.ranks[g as usize];
        r.exit_code = Some(code);
        if code == 0 {
            r.phase = RankPhase::Exited;
        } else {
            let failure = Failure::new(FailureReason::RankFailed, format!("exit code {code}"));
            r.phase = RankPhase::Failed;
            r.failure = Some(failure.clone());
            self.note_failure(&failure);
        }
        self.rank_terminal(t, g);
    }

    /// Stops a node's container once. A second request is refused.
    fn stop_container(&mut self, t: u64, n: u32, by_rank: u32) -> bool {
        let Some(idx) = self.nodes[n as usize].shim else {
            return false;
        };
        let id = self.shims[idx].container_id.clone();
        if self.shims[idx].stopped {
            self.teardown
                .warnings
                .push(format!("double stop of {id} suppressed"));
            self.emit(
                t,
                Entity::Rank(by_rank),
                Provenance::Plugin,
                EventKind::StopSuppressed,
                Some(Phase::Teardown),
                id,
                OpCounters::default(),
            );
            return false;
        }
        self.shims[idx].stopped = true;
        self.emit(
            t,
            Entity::Rank(by_rank),
            Provenance::Engine,
            EventKind::ContainerStopped,
            Some(Phase::Teardown),
            id,
            OpCounters::default(),
        );
        self.teardown.stops.push(StopRecord {
            node: n,
            by_rank,
            t_us: t,
        });
        true
    }

    fn node_teardown(&mut self, t: u64, n: u32, by_rank: u32) {
        self.nodes_done += 1;
        if self.nodes[n as usize].dead {
            self.teardown
                .warnings
                .push(format!("node {n} lost; nothing to tear down"));
            self.teardown.degraded = true;
        } else {
            let mut end = t;
            if self.stop_container(t, n, by_rank) {
                end += self.c.cost.stop_us;
            }
            if let Some(h) = self.nodes[n as usize].mount.take() {
                match self.c.store.release_view(&h) {
                    ReleaseOutcome::Released(_) => {
                        self.teardown.mounts_released += 1;
                        self.plugin(
                            end,
                            Entity::Node(n),
                            EventKind::MountReleased,
                            Some(Phase::Teardown),
                            format!("mount {}", h.id()),
                        );
                    }
                    ReleaseOutcome::AlreadyReleased => {
                        self.teardown
                            .warnings
                            .push(format!("mount {} already released", h.id()));
                    }
                }
            }
            let mut removed = false;
            for i in 0..self.scratch.len() {
                if self.scratch[i].node == n && !self.scratch[i].removed {
                    self.scratch[i].removed = true;
                    removed = true;
                    let path = self.scratch[i].path.clone();
                    self.plugin(
                        end,
                        Entity::Node(n),
                        EventKind::ScratchRemoved,
                        Some(Phase::Teardown),
                        path,
                    );
                }
            }
            if removed {
                self.teardown.scratch_removed.push(n);
                end += self.c.cost.scratch_us;
            }
            self.phases.push(PhaseRecord {
                phase: Phase::Teardown,
                node: n,
                rank: Some(by_rank),
                start_us: t,
                duration_us: end - t,
                metadata_ops: 0,
            });
            self.last_teardown_end = self.last_teardown_end.max(end);
        }
        self.last_teardown_end = self.last_teardown_end.max(t);
        if self.nodes_done == self.c.nodes {
            let end = self.last_teardown_end;
            self.schedule(end, Ev::StepEnd);
        }
    }

    fn step_end(&mut self, t: u64) {
        let mut end = t;
        if self.wrote_sync {
            if self.nodes[0].dead {
                self.teardown
                    .warnings
                    .push("designated node lost; sync file left for reclamation".into());
            } else {
                let path = sync_path(&self.image);
                let (res, ops) = self.with_store(|c| c.store.backend().remove(&path));
                end = self.c.charge_ops(t, ops.metadata_ops());
                if res.is_ok() {
                    self.teardown.sync_deleted_by = Some(0);
                    self.emit(
                        t,
                        Entity::Node(0),
                        Provenance::Plugin,
                        EventKind::SyncDeleted,
                        Some(Phase::Teardown),
                        path,
                        ops,
                    );
                }
            }
        }
        let plain = SharedStore::new(self.c.store.backend().inner());
        self.teardown.image_retained =
            !self.image.is_empty() && matches!(plain.find(&self.image), Ok(Some(_)));
        self.end_us = end;
    }

    fn finish(self) -> StepTrace {
        let store_ops = self.c.store.backend().counters().since(&self.store_before);
        let end_us = self.end_us.max(self.start_us);
        self.c.now_us = end_us;
        let status = match self.first_failure {
            None => StepStatus::Completed,
            Some(f) => StepStatus::Failed {
                reason: f.reason,
                detail: f.detail,
            },
        };
        StepTrace {
            job_id: self.req.job_id,
            step_id: self.step_id,
            mode: self.req.mode,
            nodes: self.c.nodes,
            ranks_per_node: self.c.ranks_per_node,
            start_us: self.start_us,
            end_us,
            events: self.events,
            phases: self.phases,
            ranks: self.ranks,
            shims: self.shims,
            scratch: self.scratch,
            teardown: self.teardown,
            store_ops,
            status,
        }
    }
}

fn check_plan(plan: &EnginePlan) -> Result<(), String> {
    if !plan.detach {
        return Err("container must be started detached".into());
    }
    if plan.shim_command.is_none() {
        return Err("no shim command".into());
    }
    if plan.storage_opt(STORE_OPT_IMAGE_STORE).is_empty() {
        return Err("no shared image store configured".into());
    }
    if plan.root().is_none() || plan.runroot().is_none() {
        return Err("per-step storage paths missing".into());
    }
    Ok(())
}
