//! A small site: four GPUs, a libfabric provider profile, an NCCL plugin
//! profile with a variant, and the matching host libraries.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use hpcc_core::hooks::{
    CdiRegistry, CdiSpec, HookRegistry, HostFs, HostLibrary, HostLibraryCatalog, InjectPolicy,
    MpsConfig, PceConfig, RuntimeSpec,
};

pub const GPU_CDI: &str = r#"
kind = "nvidia.com/gpu"

[container_edits]
env = ["NVIDIA_DRIVER_CAPABILITIES=compute,utility"]
mounts = [{ source = "/usr/lib64/libcuda.so.550.54.15", destination = "/usr/lib64/libcuda.so.550.54.15", options = ["ro"] }]

[[devices]]
name = "0"
[devices.container_edits]
device_nodes = [{ path = "/dev/nvidia0", type = "c", major = 195, minor = 0 }]

[[devices]]
name = "1"
[devices.container_edits]
device_nodes = [{ path = "/dev/nvidia1", type = "c", major = 195, minor = 1 }]

[[devices]]
name = "2"
[devices.container_edits]
device_nodes = [{ path = "/dev/nvidia2", type = "c", major = 195, minor = 2 }]

[[devices]]
name = "3"
[devices.container_edits]
device_nodes = [{ path = "/dev/nvidia3", type = "c", major = 195, minor = 3 }]
"#;

pub const PCE: &str = r#"
[profiles.cxi]
env = ["FI_PROVIDER=cxi"]
mounts = [{ source = "/opt/cray/libfabric/1.22.0", destination = "/opt/cray/libfabric", options = ["rbind", "ro"] }]
libraries = ["libfabric.so.1"]

[profiles."aws_ofi_nccl.cuda12"]
env = ["NCCL_NET_PLUGIN=ofi", "FI_PROVIDER=cxi"]
libraries = ["libnccl-net.so.1"]

[profiles.rogue]
device_nodes = [{ path = "/dev/kmsg", type = "c", major = 1, minor = 11 }]
"#;

pub fn host() -> HostFs {
    HostFs::new([
        "/usr/lib64/libcuda.so.550.54.15",
        "/opt/cray/libfabric/1.22.0/lib64/libfabric.so.1.22.0",
        "/opt/cray/libfabric/1.22.0/share/doc",
        "/opt/aws-ofi-nccl/lib/libnccl-net.so.1.17.2",
    ])
}

pub fn libraries() -> HostLibraryCatalog {
    HostLibraryCatalog::new(vec![
        HostLibrary {
            soname: "libfabric.so.1".into(),
            path: "/opt/cray/libfabric/1.22.0/lib64/libfabric.so.1.22.0".into(),
            version: "1.22.0".into(),
            abi_tag: "aarch64".into(),
            inject_if_missing: false,
        },
        HostLibrary {
            soname: "libnccl-net.so.1".into(),
            path: "/opt/aws-ofi-nccl/lib/libnccl-net.so.1.17.2".into(),
            version: "1.17.2".into(),
            abi_tag: "aarch64".into(),
            inject_if_missing: true,
        },
    ])
}

pub fn registry() -> HookRegistry {
    let mut cdi = CdiRegistry::new();
    cdi.add(CdiSpec::parse(GPU_CDI).unwrap()).unwrap();
    let reg = HookRegistry {
        cdi,
        pce: PceConfig::parse(PCE).unwrap(),
        host: host(),
        libraries: libraries(),
        policy: InjectPolicy {
            abi_tag: "aarch64".into(),
            ..InjectPolicy::default()
        },
        mps: MpsConfig::default(),
    };
    reg.libraries.check(&reg.host).unwrap();
    reg
}

/// The image's files: an older libfabric and the usual base libraries.
pub fn rootfs() -> BTreeSet<String> {
    [
        "/usr/lib/libfabric.so.1",
        "/usr/lib/libfabric.so.1.18.1",
        "/usr/lib/libc.so.6",
        "/usr/lib/libstdc++.so.6.0.33",
        "/usr/bin/python3",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

pub fn listing_annotations() -> BTreeMap<String, String> {
    [
        ("com.hooks.cxi.enabled", "true"),
        ("com.hooks.aws_ofi_nccl.enabled", "true"),
        ("com.hooks.aws_ofi_nccl.variant", "cuda12"),
        ("com.hooks.nvidia_cuda_mps.enabled", "true"),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

pub fn base_spec() -> RuntimeSpec {
    let mut spec = RuntimeSpec::new("/run/containers/step/rootfs");
    spec.set_env("HUGGINGFACE_HUB_CACHE", "/opt/hf/hub");
    spec.mounts.push(hpcc_core::hooks::SpecMount::bind(
        "/scratch/alice/data",
        "/data",
        false,
    ));
    spec
}
