use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use hpcc_core::digest::Digest;
use hpcc_core::edf::{expand_variables, parse_edf, validate_edf, ValidatedEdf};
use hpcc_core::hooks::{run_pipeline, HookRegistry, RuntimeSpec};
use hpcc_core::imagestore::{
    import_image, DiskBackend, Identity, LayeredImage, LocalStore, MemBackend, MountOwner,
    SharedStore, StoreBackend, UpperLayer,
};
use hpcc_core::launchsim::{
    build_cluster, measure_startup, pynamic_run, run_job_step, run_step, sample_image, CostModel,
    EventKind, Fault, Layout, PynamicWorkload, StartMode, StepRequest, StepTrace,
};
use hpcc_core::plan::{
    argv_to_lines, plan_to_argv, render_plan, ShellCommand, SiteConfig, StepContext,
};

use crate::cli::*;
use crate::config::{host_env, load_site, parse_pairs};
use crate::error::{exit, CliError};
use crate::exec::{parse_command, Backing, ContainerFs, Process};
use crate::layout::{load_layout, load_registry};
use crate::pod::{kube_run, parse_pod_manifest, plan_pod, PodRunOptions, PodStatus};

type Out<'a> = &'a mut dyn Write;

fn emit(out: Out, text: impl AsRef<str>) -> Result<(), CliError> {
    out.write_all(text.as_ref().as_bytes())
        .map_err(|e| CliError::io("<stdout>", e))
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, data: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, data).map_err(|e| CliError::io(path, e))
}

fn json_line<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string(v).expect("records serialize");
    s.push('\n');
    s
}

/// Runs one parsed command line; returns the process exit code.
pub fn dispatch(cli: Cli, out: Out) -> Result<i32, CliError> {
    let site = load_site(cli.site.as_deref())?;
    match cli.command {
        Command::Validate(a) => validate(a, out),
        Command::Render(a) => render(a, &site, out),
        Command::Images(a) => images(a, out),
        Command::Run(a) => run(a, &site, out),
        Command::SimLaunch(a) => sim_launch(a, &site, out),
        Command::KubeRun(a) => kube(a, &site, out),
        Command::Bench(BenchCommand::Startup(a)) => bench_startup(a, &site, out),
        Command::Bench(BenchCommand::Pynamic(a)) => bench_pynamic(a, out),
    }
}

fn validate(a: ValidateArgs, out: Out) -> Result<i32, CliError> {
    let text = read(&a.edf)?;
    let env = host_env(a.env.clean_env, &a.env.env)?;
    let parsed = parse_edf(&text)?;
    let expanded = expand_variables(&parsed, &env)?;
    let report = validate_edf(&expanded);
    if a.json {
        emit(out, json_line(&report))?;
    } else {
        emit(out, report.to_string())?;
        if report.is_ok() {
            emit(out, "ok\n")?;
        }
    }
    Ok(if report.is_ok() {
        exit::OK
    } else {
        exit::INVALID
    })
}

fn step_context(s: &StepArgs, env: &BTreeMap<String, String>) -> Result<StepContext, CliError> {
    let user = match &s.user {
        Some(u) => u.clone(),
        None => env
            .get("USER")
            .cloned()
            .ok_or_else(|| CliError::Usage("no --user and USER is unset".into()))?,
    };
    Ok(StepContext::new(s.job, s.step, user, s.uid, s.gid, 1, 1)?)
}

fn render(a: RenderArgs, site: &SiteConfig, out: Out) -> Result<i32, CliError> {
    let text = read(&a.edf)?;
    let env = host_env(a.env.clean_env, &a.env.env)?;
    let edf = ValidatedEdf::load(&text, &env)?;
    let ctx = step_context(&a.step, &env)?;
    let mut plan = render_plan(&edf, site, &ctx)?;
    plan.detach = a.detach;
    let argv = plan_to_argv(&plan);
    if a.shell {
        emit(out, format!("{}\n", ShellCommand(&argv)))?;
    } else {
        emit(out, argv_to_lines(&argv))?;
    }
    Ok(exit::OK)
}

fn staging_dir(s: &StoreArgs) -> PathBuf {
    s.staging.clone().unwrap_or_else(|| {
        let mut p = s.store.clone().into_os_string();
        p.push(".staging");
        p.into()
    })
}

fn staged_path(dir: &Path, reference: &str) -> PathBuf {
    dir.join(format!("{}.json", Digest::of(reference.as_bytes()).hex()))
}

/// Verifies `image` and keeps it in the staging directory.
fn stage(dir: &Path, image: LayeredImage) -> Result<LayeredImage, CliError> {
    let mut local = LocalStore::new();
    if let Some(prev) = load_staged(dir, &image.reference)? {
        import_image(prev, &mut local)?;
    }
    let record = import_image(image.clone(), &mut local)?;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = staged_path(dir, &record.reference);
    write_file(&path, serde_json::to_vec(&image).expect("images serialize"))?;
    Ok(image)
}

fn load_staged(dir: &Path, reference: &str) -> Result<Option<LayeredImage>, CliError> {
    let path = staged_path(dir, reference);
    match std::fs::read(&path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(CliError::io(&path, e)),
    }
}

fn now_secs() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn images(a: ImagesArgs, out: Out) -> Result<i32, CliError> {
    let staging = staging_dir(&a.store);
    let mut store = SharedStore::new(DiskBackend::new(&a.store.store));
    match a.command {
        ImagesCommand::Import { layout } => {
            let image = stage(&staging, load_layout(&layout)?)?;
            emit(
                out,
                format!("imported {} {}\n", image.reference, image.config_digest),
            )?;
        }
        ImagesCommand::Migrate {
            reference,
            layout,
            created_at,
        } => {
            let image = match (reference, layout) {
                (_, Some(dir)) => stage(&staging, load_layout(&dir)?)?,
                (Some(r), None) => load_staged(&staging, &r)?.ok_or(CliError::Store(
                    hpcc_core::imagestore::ImageStoreError::NotInLocalStore(r),
                ))?,
                (None, None) => unreachable!("clap requires one of them"),
            };
            let m = store.migrate_image(&image, created_at.unwrap_or_else(now_secs))?;
            let verb = if m.already_present {
                "already present"
            } else {
                "migrated"
            };
            emit(
                out,
                format!("{verb} {} {}\n", image.reference, m.image.digest()),
            )?;
            for w in &m.warnings {
                emit(out, format!("warning: {w:?}\n"))?;
            }
        }
        ImagesCommand::List { json } => {
            for r in store.list_images()? {
                if json {
                    let rec = serde_json::json!({
                        "reference": r.reference,
                        "digest": r.digest,
                        "created_at": r.created_at,
                    });
                    emit(out, json_line(&rec))?;
                } else {
                    emit(
                        out,
                        format!("{} {} {}\n", r.reference, r.digest, r.created_at),
                    )?;
                }
            }
        }
        ImagesCommand::Remove { reference } => {
            let r = store.remove_image(&reference)?;
            emit(out, format!("removed {} {}\n", r.reference, r.digest))?;
        }
    }
    Ok(exit::OK)
}

fn registry_from(dir: Option<&Path>, site: &SiteConfig) -> Result<HookRegistry, CliError> {
    match dir {
        Some(d) => {
            let cdi = d.join("cdi");
            HookRegistry::load(d, &cdi).map_err(|e| CliError::Hooks(e.to_string()))
        }
        None => HookRegistry::load(Path::new(&site.hook_pipeline), Path::new(&site.cdi_dir))
            .map_err(|e| CliError::Hooks(e.to_string())),
    }
}

fn run(a: RunArgs, site: &SiteConfig, out: Out) -> Result<i32, CliError> {
    let text = read(&a.edf)?;
    let env = host_env(a.env.clean_env, &a.env.env)?;
    let edf = ValidatedEdf::load(&text, &env)?;
    let ctx = step_context(&a.step, &env)?;
    let plan = render_plan(&edf, site, &ctx)?;
    let registry = registry_from(a.hooks.as_deref(), site)?;

    let mut store = SharedStore::new(DiskBackend::new(&a.store.store));
    if store.find(&plan.image)?.is_none() {
        if let Some(dir) = &a.import {
            let image = stage(&staging_dir(&a.store), load_layout(dir)?)?;
            if image.reference != plan.image {
                return Err(CliError::Usage(format!(
                    "{} holds {}, not {}",
                    dir.display(),
                    image.reference,
                    plan.image
                )));
            }
            store.migrate_image(&image, now_secs())?;
        }
    }
    let img = store.open(&plan.image)?;
    let upper = if edf.edf().writable {
        UpperLayer::new()
    } else {
        UpperLayer::read_only()
    };
    let view = store.mount_view(
        &img,
        upper,
        Identity::new(ctx.uid, ctx.gid),
        MountOwner {
            job: ctx.job_id,
            step: ctx.step_id,
            node: 0,
        },
    )?;
    let rootfs = view.walk("/")?.into_iter().collect();
    let annotations = plan
        .annotations()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let devices: Vec<String> = plan.devices().map(str::to_string).collect();
    let spec = RuntimeSpec::from_plan(&plan, plan.root().unwrap_or("/").to_string() + "/rootfs");
    let hooked = run_pipeline(&spec, &annotations, &devices, &rootfs, &registry)?;

    let mut fs = ContainerFs::new(view.clone());
    for m in plan.mounts() {
        fs.mount(
            &m.destination,
            Backing::Host {
                root: PathBuf::from(&m.source),
                read_only: m.read_only,
            },
        );
    }
    let mut penv = img.record.env.clone();
    penv.extend(hooked.spec.env.iter().cloned());
    let mut command: Vec<String> = match plan.entrypoint_override() {
        Some("") => Vec::new(),
        _ => img.record.entrypoint.clone(),
    };
    command.extend(a.command.iter().cloned());
    if command.is_empty() {
        return Err(CliError::Usage(
            "no command: the entrypoint is disabled and none was given".into(),
        ));
    }
    let verbs = parse_command(&command).map_err(CliError::Usage)?;
    let cwd = plan.workdir().unwrap_or("/").to_string();
    let mut process = Process::new(verbs, penv, cwd);
    let code = process.run(&fs);
    for line in &process.stdout {
        emit(out, format!("{line}\n"))?;
    }
    for line in &process.stderr {
        eprintln!("{line}");
    }
    if let Some(path) = &a.report {
        let upper: Vec<String> = view.upper_snapshot().entries.keys().cloned().collect();
        let report = serde_json::json!({
            "exit_code": code,
            "image": plan.image,
            "digest": img.digest(),
            "upper": upper,
            "hook_actions": hooked.log,
            "env": hooked.spec.env,
        });
        write_file(path, json_line(&report))?;
    }
    store.release_view(&view);
    Ok(code)
}

fn sim_request(edf: &str, overrides: &[String], mode: StartMode) -> Result<StepRequest, CliError> {
    let mut req = StepRequest::new(edf, mode);
    req.env.extend(parse_pairs(overrides, "--env")?);
    if let Some(u) = req.env.get("USER") {
        req.user = u.clone();
    }
    Ok(req)
}

fn sim_summary(trace: &StepTrace) -> serde_json::Value {
    let joins = trace
        .events
        .iter()
        .filter(|e| e.kind == EventKind::NamespaceJoined)
        .count();
    serde_json::json!({
        "record": "sim-launch",
        "job": trace.job_id,
        "step": trace.step_id,
        "mode": trace.mode,
        "nodes": trace.nodes,
        "ranks_per_node": trace.ranks_per_node,
        "container_starts": trace.count(EventKind::ContainerStarted),
        "migrations": trace.count(EventKind::Migrated),
        "joins": joins,
        "store_ops": trace.store_ops,
        "status": trace.status,
        "failure_reasons": trace.failure_reasons(),
        "makespan_us": trace.end_us - trace.start_us,
    })
}

fn sim_launch(a: SimLaunchArgs, site: &SiteConfig, out: Out) -> Result<i32, CliError> {
    let text = read(&a.edf)?;
    let mut req = sim_request(&text, &a.env, a.mode)?;
    for f in &a.faults {
        req.faults.push(f.parse::<Fault>()?);
    }
    let image_ref = ValidatedEdf::load(&text, &req.env)?.edf().image.clone();
    let image = match &a.image {
        Some(dir) => load_layout(dir)?,
        None => sample_image(&image_ref),
    };
    let mut cluster = build_cluster(a.nodes, a.ranks_per_node, CostModel::default(), a.seed)?;
    cluster.publish(image);
    if a.mode == StartMode::Warm {
        cluster.preload(&image_ref)?;
    }
    let trace = run_step(&mut cluster, &req, site);

    std::fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    write_file(&a.out.join("trace.jsonl"), trace.to_jsonl())?;
    let summary = sim_summary(&trace);
    let mut report = String::new();
    for key in [
        "mode",
        "nodes",
        "ranks_per_node",
        "container_starts",
        "migrations",
        "joins",
        "status",
    ] {
        report.push_str(&format!("{key}: {}\n", summary[key]));
    }
    let mut json = summary.clone();
    if trace.is_completed() {
        let d = measure_startup(std::slice::from_ref(&trace))?;
        report.push('\n');
        report.push_str(&d.to_table());
        json["decomposition"] = serde_json::to_value(&d).expect("reports serialize");
    }
    write_file(&a.out.join("report.txt"), &report)?;
    write_file(&a.out.join("report.json"), json_line(&json))?;
    emit(out, &report)?;
    if trace.is_completed() {
        Ok(exit::OK)
    } else {
        Err(CliError::SimFailed(format!(
            "step failed: {}",
            serde_json::to_string(&trace.status).expect("status serializes")
        )))
    }
}

fn kube(a: KubeRunArgs, site: &SiteConfig, out: Out) -> Result<i32, CliError> {
    let manifest = parse_pod_manifest(&read(&a.manifest)?)?;
    let ctx = StepContext::new(0, 0, a.user.clone(), a.uid, a.gid, 1, 1)?;
    let plan = plan_pod(&manifest, site, &ctx)?;
    let registry = registry_from(a.hooks.as_deref(), site)?;
    let opts = PodRunOptions {
        seed: a.seed,
        host_root: a.host_root.clone(),
        identity: Identity::new(a.uid, a.gid),
    };
    let images: Vec<LayeredImage> = match &a.registry {
        Some(dir) => load_registry(dir)?,
        None => Vec::new(),
    };
    let result = match &a.store {
        Some(dir) => {
            let mut store = SharedStore::new(DiskBackend::new(dir));
            provide_images(&mut store, &plan, &images)?;
            kube_run(&plan, &mut store, &registry, &opts)
        }
        None => {
            let mut store = SharedStore::new(MemBackend::new());
            provide_images(&mut store, &plan, &images)?;
            kube_run(&plan, &mut store, &registry, &opts)
        }
    };
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        write_file(&dir.join("trace.jsonl"), result.to_jsonl())?;
        write_file(&dir.join("result.json"), json_line(&result))?;
    }
    for c in &result.containers {
        let code = c.exit_code.map_or("-".to_string(), |c| c.to_string());
        emit(
            out,
            format!(
                "{} {:?} started={} exit={} devices={}\n",
                c.name,
                c.phase,
                c.started,
                code,
                c.devices.join(",")
            ),
        )?;
        for line in &c.stdout {
            emit(out, format!("  {line}\n"))?;
        }
    }
    emit(out, format!("pod {} {:?}\n", result.pod, result.status))?;
    Ok(match result.status {
        PodStatus::Succeeded => exit::OK,
        PodStatus::Failed => exit::RUNTIME,
    })
}

/// Migrates every image the pod needs that the store lacks.
fn provide_images<B: StoreBackend>(
    store: &mut SharedStore<B>,
    plan: &crate::pod::PodPlan,
    images: &[LayeredImage],
) -> Result<(), CliError> {
    for c in plan.init.iter().chain(&plan.main) {
        if store.find(&c.image)?.is_some() {
            continue;
        }
        if let Some(img) = images.iter().find(|i| i.reference == c.image) {
            store.migrate_image(img, 0)?;
        }
    }
    Ok(())
}

const BENCH_EDF: &str = r#"image = "registry.example/bench/startup:1"
mounts = ["/scratch/$USER/run:/run"]
workdir = "/run"
"#;

fn bench_startup(a: BenchStartupArgs, site: &SiteConfig, out: Out) -> Result<i32, CliError> {
    let text = match &a.edf {
        Some(p) => read(p)?,
        None => BENCH_EDF.to_string(),
    };
    let req = sim_request(&text, &[], StartMode::Warm)?;
    let image_ref = ValidatedEdf::load(&text, &req.env)?.edf().image.clone();
    let mut cluster = build_cluster(a.nodes, a.ranks_per_node, CostModel::default(), a.seed)?;
    cluster.publish(sample_image(&image_ref));
    cluster.preload(&image_ref)?;
    let mut traces = Vec::with_capacity(a.reps as usize);
    for _ in 0..a.reps {
        traces.push(run_job_step(&mut cluster, &text, site, StartMode::Warm));
    }
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        for (i, t) in traces.iter().enumerate() {
            write_file(&dir.join(format!("trace-{i:02}.jsonl")), t.to_jsonl())?;
        }
    }
    let d = measure_startup(&traces)?;
    if let Some(dir) = &a.out {
        write_file(&dir.join("decomposition.json"), json_line(&d))?;
    }
    if a.json {
        for r in &d.rows {
            emit(out, json_line(r))?;
        }
    } else {
        emit(out, d.to_table())?;
    }
    Ok(exit::OK)
}

fn bench_pynamic(a: BenchPynamicArgs, out: Out) -> Result<i32, CliError> {
    let workload = PynamicWorkload {
        modules: a.modules,
        libraries: a.libraries,
        avg_functions: a.functions,
    };
    let layouts = match a.layout {
        Some(l) => vec![l],
        None => vec![Layout::Plain, Layout::Squashed],
    };
    for layout in layouts {
        let mut cluster = build_cluster(a.nodes, 1, CostModel::default(), a.seed)?;
        let r = pynamic_run(&mut cluster, workload, layout)?;
        if a.json {
            let rec = serde_json::json!({
                "record": "pynamic",
                "layout": r.layout,
                "nodes": r.nodes,
                "files": r.files,
                "functions_per_node": r.functions_per_node,
                "total_metadata_ops": r.total.metadata_ops(),
                "max_node_metadata_ops": r.max_node_ops(),
                "index_lookups_per_node": r.index_lookups_per_node,
                "makespan_us": r.makespan_us,
            });
            emit(out, json_line(&rec))?;
        } else {
            emit(
                out,
                format!(
                    "{:<8} nodes={} files={} metadata_ops={} per_node_max={} makespan={:.3}s\n",
                    serde_json::to_value(r.layout)
                        .expect("layouts serialize")
                        .as_str()
                        .unwrap_or(""),
                    r.nodes,
                    r.files,
                    r.total.metadata_ops(),
                    r.max_node_ops(),
                    r.makespan_us as f64 / 1e6
                ),
            )?;
        }
    }
    Ok(exit::OK)
}
