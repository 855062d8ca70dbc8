//! Shared launch fixtures: a small training EDF and cluster builders.

#![allow(dead_code)]

use hpcc_core::launchsim::{build_cluster, sample_image, ClusterSim, CostModel};
use hpcc_core::plan::SiteConfig;

pub const IMAGE: &str = "registry.example/ml/train:1.4";

pub const EDF: &str = r#"image = "registry.example/ml/train:1.4"
mounts = ["/scratch/$USER/data:/data", "/scratch/$USER/out:/out"]
workdir = "/out"

[env]
OMP_NUM_THREADS = "8"

[annotations]
com.hooks.cxi.enabled = "true"
"#;

pub fn site() -> SiteConfig {
    SiteConfig::default()
}

/// A cluster with the fixture image published in its registry.
pub fn cluster(nodes: u32, rpn: u32, seed: u64) -> ClusterSim {
    let mut c = build_cluster(nodes, rpn, CostModel::default(), seed).unwrap();
    c.publish(sample_image(IMAGE));
    c
}

/// Same, with the image already in the shared store.
pub fn warm_cluster(nodes: u32, rpn: u32, seed: u64) -> ClusterSim {
    let mut c = cluster(nodes, rpn, seed);
    c.preload(IMAGE).unwrap();
    c
}
