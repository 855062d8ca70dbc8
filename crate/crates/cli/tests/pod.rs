use std::collections::BTreeMap;
use std::path::Path;

use indexmap::IndexMap;
use proptest::prelude::*;

use hpcc_core::hooks::HookRegistry;
use hpcc_core::imagestore::{MemBackend, SharedStore};
use hpcc_core::plan::{SiteConfig, StepContext};
use hpcctl::layout::load_layout;
use hpcctl::pod::*;

const IMAGE: &str = "python:3.14-trixie";

fn ctx() -> StepContext {
    StepContext::new(0, 0, "alice", 1000, 1000, 1, 1).unwrap()
}

fn container(name: &str, command: Vec<String>, mounts: Vec<VolumeMount>) -> ContainerSpec {
    ContainerSpec {
        name: name.into(),
        image: IMAGE.into(),
        command,
        args: Vec::new(),
        working_dir: None,
        env: Vec::new(),
        volume_mounts: mounts,
        resources: None,
    }
}

fn mount(volume: &str, path: &str) -> VolumeMount {
    VolumeMount {
        name: volume.into(),
        mount_path: path.into(),
        read_only: false,
    }
}

fn manifest(
    name: &str,
    annotations: IndexMap<String, String>,
    volumes: Vec<Volume>,
    init: Vec<ContainerSpec>,
    main: Vec<ContainerSpec>,
) -> PodManifest {
    PodManifest {
        api_version: "v1".into(),
        kind: "Pod".into(),
        metadata: Metadata {
            name: name.into(),
            annotations,
        },
        spec: PodSpec {
            restart_policy: "Never".into(),
            volumes,
            init_containers: init,
            containers: main,
        },
    }
}

fn empty_dir(name: &str) -> Volume {
    Volume {
        name: name.into(),
        empty_dir: Some(EmptyDir {}),
        host_path: None,
    }
}

fn ident() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9]{0,6}"
}

fn annotation_key() -> impl Strategy<Value = String> {
    prop::collection::vec(ident(), 1..4).prop_map(|p| p.join("."))
}

fn arb_container(name: String, volumes: Vec<String>) -> impl Strategy<Value = ContainerSpec> {
    let vols = if volumes.is_empty() {
        Just(Vec::new()).boxed()
    } else {
        prop::sample::subsequence(volumes.clone(), 0..=volumes.len()).boxed()
    };
    (
        prop::collection::vec("[a-z0-9./=-]{1,8}", 0..3),
        prop::collection::vec("[a-z0-9]{1,6}", 0..3),
        prop::option::of(ident().prop_map(|w| format!("/{w}"))),
        prop::collection::btree_map("[A-Z][A-Z0-9_]{0,6}", "[a-z0-9 :/]{0,10}", 0..3),
        vols,
        any::<bool>(),
        prop::option::of(1u32..4),
    )
        .prop_map(
            move |(command, args, working_dir, env, vols, ro, gpu)| ContainerSpec {
                name: name.clone(),
                image: IMAGE.into(),
                command,
                args,
                working_dir,
                env: env
                    .into_iter()
                    .map(|(name, value)| EnvVar { name, value })
                    .collect(),
                volume_mounts: vols
                    .iter()
                    .enumerate()
                    .map(|(i, v)| VolumeMount {
                        name: v.clone(),
                        mount_path: format!("/mnt/{i}/{v}"),
                        read_only: ro && i == 0,
                    })
                    .collect(),
                resources: gpu.map(|n| Resources {
                    limits: [("nvidia.com/gpu=all".to_string(), n)]
                        .into_iter()
                        .collect(),
                }),
            },
        )
}

fn arb_manifest() -> impl Strategy<Value = PodManifest> {
    (
        ident(),
        prop::collection::btree_set(ident(), 0..4),
        prop::collection::btree_set(ident(), 1..6),
        0usize..3,
        prop::collection::vec((annotation_key(), "[a-z0-9]{0,6}"), 0..4),
        any::<bool>(),
    )
        .prop_flat_map(|(name, vols, names, n_init, annotations, host)| {
            let vols: Vec<String> = vols.into_iter().collect();
            let names: Vec<String> = names.into_iter().collect();
            let n_init = n_init.min(names.len() - 1);
            let containers: Vec<_> = names
                .iter()
                .map(|n| arb_container(n.clone(), vols.clone()))
                .collect();
            (Just((name, vols, n_init, annotations, host)), containers)
        })
        .prop_map(
            |((name, vols, n_init, annotations, host), mut containers)| {
                let main = containers.split_off(n_init);
                let volumes = vols
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        if host && i == 0 {
                            Volume {
                                name: v.clone(),
                                empty_dir: None,
                                host_path: Some(HostPath {
                                    path: format!("/srv/{v}"),
                                }),
                            }
                        } else {
                            empty_dir(v)
                        }
                    })
                    .collect();
                manifest(
                    &name,
                    annotations.into_iter().collect(),
                    volumes,
                    containers,
                    main,
                )
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn accepted_manifests_round_trip(m in arb_manifest()) {
        let text = m.to_yaml();
        let parsed = parse_pod_manifest(&text).unwrap();
        prop_assert_eq!(&parsed, &m);
        prop_assert_eq!(parsed.to_yaml(), text);
    }

    #[test]
    fn unknown_keys_are_named(
        m in arb_manifest(),
        key in "x[a-z]{2,8}",
        at in 0usize..6,
    ) {
        let mut doc: serde_yaml::Value = serde_yaml::from_str(&m.to_yaml()).unwrap();
        let target = match at {
            0 => Some(&mut doc),
            1 => doc.get_mut("metadata"),
            2 => doc.get_mut("spec"),
            3 => doc["spec"]["containers"].get_mut(0),
            4 => doc["spec"].get_mut("volumes").and_then(|v| v.get_mut(0)),
            _ => doc["spec"]["containers"][0].get_mut("volumeMounts").and_then(|v| v.get_mut(0)),
        };
        prop_assume!(target.is_some());
        let target = target.unwrap().as_mapping_mut().unwrap();
        target.insert(key.clone().into(), serde_yaml::Value::Bool(true));
        let text = serde_yaml::to_string(&doc).unwrap();
        let e = parse_pod_manifest(&text).unwrap_err().to_string();
        prop_assert!(e.contains(&format!("`{key}`")), "{}", e);
    }

    #[test]
    fn annotations_reach_every_container(
        pod in prop::collection::btree_map(annotation_key(), "[a-z0-9]{1,5}", 0..5),
        scoped in prop::collection::vec((0usize..4, annotation_key(), "[A-Z]{1,5}"), 0..6),
    ) {
        let names = ["init0", "c1", "c2", "c3"];
        let mut annotations: IndexMap<String, String> =
            pod.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        for (i, k, v) in &scoped {
            annotations.insert(format!("{k}/{}", names[*i]), v.clone());
        }
        let exit0 = || vec!["exit".to_string(), "0".to_string()];
        let m = manifest(
            "p",
            annotations,
            Vec::new(),
            vec![container(names[0], exit0(), Vec::new())],
            names[1..].iter().map(|n| container(n, exit0(), Vec::new())).collect(),
        );
        let m = parse_pod_manifest(&m.to_yaml()).unwrap();
        let plan = plan_pod(&m, &SiteConfig::default(), &ctx()).unwrap();
        for (i, c) in plan.init.iter().chain(&plan.main).enumerate() {
            // Oracle: the pod map, overlaid with this container's own keys.
            let mut expected: BTreeMap<String, String> = pod.clone().into_iter().collect();
            for (j, k, v) in &scoped {
                if *j == i {
                    expected.insert(k.clone(), v.clone());
                }
            }
            prop_assert_eq!(&c.annotations, &expected, "container {}", c.name);
            let in_spec: BTreeMap<String, String> =
                c.spec.annotations.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
            prop_assert_eq!(&in_spec, &expected);
        }
    }
}

fn store() -> SharedStore<MemBackend> {
    let img =
        load_layout(&Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/images/python")).unwrap();
    let s = SharedStore::new(MemBackend::new());
    s.migrate_image(&img, 0).unwrap();
    s
}

fn cmd(script: &str) -> Vec<String> {
    vec!["sh".into(), "-c".into(), script.into()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn empty_dir_is_shared_within_the_pod_only(
        payload in "[a-z0-9]{1,24}",
        writer_in_init in any::<bool>(),
        readers in 1usize..4,
        seed in any::<u64>(),
    ) {
        let write = format!("write /shared/blob {payload}");
        let read = "read /shared/blob";
        let mut init = Vec::new();
        let mut main = Vec::new();
        let writer = if writer_in_init {
            container("writer", cmd(&write), vec![mount("w", "/shared")])
        } else {
            container("writer", cmd(&format!("{write}; barrier")), vec![mount("w", "/shared")])
        };
        if writer_in_init { init.push(writer) } else { main.push(writer) }
        for r in 0..readers {
            let script = if writer_in_init { read.to_string() } else { format!("barrier; {read}") };
            main.push(container(&format!("reader{r}"), cmd(&script), vec![mount("w", "/shared")]));
        }
        // Mounted elsewhere, the same volume is the same bytes.
        main.push(container(
            "other-path",
            cmd(&if writer_in_init { "read /elsewhere/blob".to_string() } else { "barrier; read /elsewhere/blob".to_string() }),
            vec![mount("w", "/elsewhere")],
        ));
        // Without the mount the file does not exist.
        main.push(container("outsider", cmd("read /shared/blob"), Vec::new()));

        let m = manifest("share", IndexMap::new(), vec![empty_dir("w")], init, main);
        let plan = plan_pod(&m, &SiteConfig::default(), &ctx()).unwrap();
        let mut s = store();
        let opts = PodRunOptions { seed, ..Default::default() };
        let result = kube_run(&plan, &mut s, &HookRegistry::default(), &opts);

        for r in 0..readers {
            let c = result.container(&format!("reader{r}")).unwrap();
            prop_assert_eq!(c.exit_code, Some(0));
            prop_assert_eq!(&c.stdout, &vec![payload.clone()]);
        }
        let c = result.container("other-path").unwrap();
        prop_assert_eq!(&c.stdout, &vec![payload.clone()]);
        let c = result.container("outsider").unwrap();
        prop_assert_ne!(c.exit_code, Some(0));
        prop_assert!(c.stdout.is_empty());

        // A second pod over the same store starts from an empty volume.
        let m2 = manifest(
            "share",
            IndexMap::new(),
            vec![empty_dir("w")],
            Vec::new(),
            vec![container("late", cmd("read /shared/blob"), vec![mount("w", "/shared")])],
        );
        let plan2 = plan_pod(&m2, &SiteConfig::default(), &ctx()).unwrap();
        let result2 = kube_run(&plan2, &mut s, &HookRegistry::default(), &opts);
        let late = result2.container("late").unwrap();
        prop_assert_ne!(late.exit_code, Some(0));
        prop_assert!(late.stdout.is_empty());
    }

    #[test]
    fn init_precedes_main(n_init in 0usize..4, n_main in 1usize..4, seed in any::<u64>()) {
        let init = (0..n_init).map(|i| container(&format!("i{i}"), cmd("exit 0"), Vec::new())).collect();
        let main = (0..n_main).map(|i| container(&format!("m{i}"), cmd("barrier; exit 0"), Vec::new())).collect();
        let m = manifest("order", IndexMap::new(), Vec::new(), init, main);
        let plan = plan_pod(&m, &SiteConfig::default(), &ctx()).unwrap();
        let opts = PodRunOptions { seed, ..Default::default() };
        let r = kube_run(&plan, &mut store(), &HookRegistry::default(), &opts);
        prop_assert_eq!(r.status, PodStatus::Succeeded);
        let last_init = r.events.iter().rposition(|e| e.phase == PodPhase::Init);
        let first_main = r.events.iter().position(|e| e.phase == PodPhase::Main).unwrap();
        if let Some(last) = last_init {
            prop_assert!(last < first_main);
            prop_assert!(r.events[last].t_us <= r.events[first_main].t_us);
        } else {
            prop_assert_eq!(first_main, 0);
        }
        // Init containers run one at a time, in order.
        let init_starts: Vec<&str> = r.events.iter()
            .filter(|e| e.phase == PodPhase::Init && e.event == "started")
            .map(|e| e.container.as_str())
            .collect();
        let expected: Vec<String> = (0..n_init).map(|i| format!("i{i}")).collect();
        prop_assert_eq!(init_starts, expected.iter().map(String::as_str).collect::<Vec<_>>());
    }
}
