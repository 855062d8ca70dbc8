//! Seeded generators for hook inputs and the independent checks run over
//! them.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use hpcc_core::hooks::{
    pce_hook, run_pipeline, CdiRegistry, DeviceNode, HookError, HookRegistry, HookRequests, HostFs,
    HostLibrary, HostLibraryCatalog, InjectPolicy, MpsConfig, PceConfig, Profile, RuntimeSpec,
    SpecMount,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pick<'a>(rng: &mut ChaCha8Rng, items: &[&'a str]) -> &'a str {
    items[rng.random_range(0..items.len())]
}

pub fn random_spec(rng: &mut ChaCha8Rng) -> RuntimeSpec {
    let mut spec = RuntimeSpec::new("/rootfs");
    for _ in 0..rng.random_range(0..4) {
        spec.set_env(pick(rng, &["PATH", "HOME", "LANG", "FI_PROVIDER"]), "base");
    }
    for i in 0..rng.random_range(0..3) {
        spec.mounts.push(SpecMount::bind(
            format!("/h/base{i}"),
            format!("/base{i}"),
            false,
        ));
    }
    if rng.random_bool(0.5) {
        spec.devices.push(DeviceNode {
            path: "/dev/fuse".into(),
            kind: "c".into(),
            major: 10,
            minor: 229,
        });
    }
    spec.annotations
        .insert("org.example.owner".into(), "team".into());
    spec
}

pub fn random_profile(rng: &mut ChaCha8Rng) -> Profile {
    let mut p = Profile::default();
    for _ in 0..rng.random_range(0..5) {
        let k = pick(
            rng,
            &["FI_PROVIDER", "NCCL_NET", "LD_PRELOAD", "PATH", "OMP"],
        );
        let v = pick(rng, &["a", "b", "c"]);
        p.env.push(format!("{k}={v}"));
    }
    for _ in 0..rng.random_range(0..4) {
        let d = pick(
            rng,
            &["/opt/a", "/opt/b", "/etc/x.conf", "/base0", "/usr/lib/y"],
        );
        let s = pick(rng, &["/h/1", "/h/2"]);
        p.mounts.push(SpecMount::bind(s, d, rng.random_bool(0.5)));
    }
    if rng.random_bool(0.2) {
        p.device_nodes.push(DeviceNode {
            path: "/dev/kmsg".into(),
            kind: "c".into(),
            major: 1,
            minor: 11,
        });
    }
    p
}

#[derive(Debug)]
pub enum ScopeCase {
    /// Accepted and only env and mounts changed, matching the profile.
    Applied,
    /// Rejected: the profile tried to add devices.
    Refused,
    /// Rejected for an in-profile conflict.
    Conflict,
}

/// Runs the precreate stage on one random profile and checks the outcome
/// field by field. Panics with a description on violation.
pub fn check_precreate_case(seed: u64) -> ScopeCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = random_spec(&mut rng);
    let profile = random_profile(&mut rng);
    let config = PceConfig {
        profiles: BTreeMap::from([("p".to_string(), profile.clone())]),
    };
    let ann = BTreeMap::from([("com.hooks.p.enabled".to_string(), "true".to_string())]);
    let req = HookRequests::parse(&ann).unwrap();
    match pce_hook(&spec, &config, &req, &BTreeMap::new()) {
        Ok(out) => {
            assert!(profile.device_nodes.is_empty(), "device edit accepted");
            let after = out.spec;
            assert_eq!(after.devices, spec.devices);
            assert_eq!(after.annotations, spec.annotations);
            assert_eq!(after.hooks, spec.hooks);
            assert_eq!(after.root, spec.root);
            // env: base entries keep their order; every change comes from
            // the profile.
            for (k, v) in &after.env {
                let from_profile = profile.env.iter().any(|e| e == &format!("{k}={v}"));
                let from_base = spec.env.iter().any(|(bk, bv)| bk == k && bv == v);
                assert!(from_profile || from_base, "stray env {k}={v}");
            }
            for e in &profile.env {
                let (k, v) = e.split_once('=').unwrap();
                assert_eq!(after.env.iter().find(|(x, _)| x == k).unwrap().1, v);
            }
            assert_eq!(&after.mounts[..spec.mounts.len()], &spec.mounts[..]);
            for m in &after.mounts[spec.mounts.len()..] {
                assert!(profile.mounts.contains(m), "stray mount {m:?}");
            }
            ScopeCase::Applied
        }
        Err(HookError::ContractViolation(_)) => {
            assert!(!profile.device_nodes.is_empty(), "spurious violation");
            ScopeCase::Refused
        }
        Err(HookError::EnvConflict { .. }) | Err(HookError::MountConflict { .. }) => {
            ScopeCase::Conflict
        }
        Err(e) => panic!("unexpected error {e}"),
    }
}

const LIBS: [&str; 6] = [
    "libfabric",
    "libmpi",
    "libcuda",
    "libz",
    "libnccl-net",
    "libucx",
];

fn version(rng: &mut ChaCha8Rng, major: u32) -> String {
    format!(
        "{major}.{}.{}",
        rng.random_range(0..4),
        rng.random_range(0..4)
    )
}

pub struct CatalogCase {
    pub rootfs: BTreeSet<String>,
    pub registry: HookRegistry,
    pub hosts: Vec<HostLibrary>,
}

/// Random image libraries plus a random host catalog over the same names.
pub fn random_catalog(seed: u64) -> CatalogCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rootfs = BTreeSet::new();
    for lib in LIBS {
        if rng.random_bool(0.6) {
            let major = rng.random_range(1..3);
            let dir = pick(&mut rng, &["/usr/lib", "/usr/lib64", "/lib"]);
            rootfs.insert(format!("{dir}/{lib}.so.{}", version(&mut rng, major)));
            if rng.random_bool(0.5) {
                rootfs.insert(format!("{dir}/{lib}.so.{major}"));
            }
        }
    }
    rootfs.insert("/usr/bin/app".into());
    let mut host_files = BTreeSet::new();
    let mut hosts = Vec::new();
    let mut names: Vec<&str> = LIBS.to_vec();
    names.shuffle(&mut rng);
    for lib in names.iter().take(rng.random_range(0..=LIBS.len())) {
        let major = rng.random_range(1..3);
        let v = version(&mut rng, major);
        let tag = if rng.random_bool(0.85) {
            "x86_64"
        } else {
            "aarch64"
        };
        let path = format!("/host/{tag}/{lib}.so.{v}");
        host_files.insert(path.clone());
        hosts.push(HostLibrary {
            soname: format!("{lib}.so.{major}"),
            path,
            version: v,
            abi_tag: tag.into(),
            inject_if_missing: rng.random_bool(0.5),
        });
    }
    let profile = Profile {
        libraries: hosts.iter().map(|h| h.soname.clone()).collect(),
        ..Profile::default()
    };
    let registry = HookRegistry {
        cdi: CdiRegistry::new(),
        pce: PceConfig {
            profiles: BTreeMap::from([("inject".to_string(), profile)]),
        },
        host: HostFs { files: host_files },
        libraries: HostLibraryCatalog::new(hosts.clone()),
        policy: InjectPolicy {
            abi_tag: "x86_64".into(),
            ..InjectPolicy::default()
        },
        mps: MpsConfig::default(),
    };
    registry.libraries.check(&registry.host).unwrap();
    CatalogCase {
        rootfs,
        registry,
        hosts,
    }
}

/// Runs the pipeline on one random catalog; checks link integrity and skip
/// accounting. Returns the number of host libraries.
pub fn check_link_integrity_case(seed: u64) -> usize {
    let case = random_catalog(seed);
    let ann = BTreeMap::from([("com.hooks.inject.enabled".to_string(), "true".to_string())]);
    let out = run_pipeline(
        &RuntimeSpec::new("/rootfs"),
        &ann,
        &[],
        &case.rootfs,
        &case.registry,
    )
    .unwrap();
    for e in out.cache_before.entries() {
        let after = out
            .cache_after
            .resolve(&e.soname, &e.abi_tag)
            .unwrap_or_else(|| panic!("{} lost", e.soname));
        assert_eq!(after.path, e.path, "{} moved", e.soname);
    }
    let inj = &out.injection;
    assert_eq!(
        inj.replacements.len() + inj.additions.len() + inj.skips.len(),
        case.hosts.len()
    );
    for a in &inj.additions {
        assert!(out.cache_after.resolve(&a.soname, "x86_64").is_some());
    }
    case.hosts.len()
}
