use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::cluster::queue_ops;
use super::{ClusterSim, SimError};
use crate::imagestore::{
    flatten_layers, Entry, Identity, ImageConfig, Layer, LayeredImage, MountOwner, OpCounters,
    PlainTreeView, StoreBackend, UpperLayer,
};

const MODULE_DIR: &str = "/opt/pynamic/modules";
const UTILITY_DIR: &str = "/opt/pynamic/utility";

/// A Python-style startup benchmark: many small shared objects loaded and
/// walked by every rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PynamicWorkload {
    pub modules: u32,
    pub libraries: u32,
    pub avg_functions: u32,
}

impl PynamicWorkload {
    /// 280 modules and 215 utility libraries, 1850 functions each on
    /// average.
    pub fn reference() -> Self {
        PynamicWorkload {
            modules: 280,
            libraries: 215,
            avg_functions: 1850,
        }
    }

    pub fn files(&self) -> u32 {
        self.modules + self.libraries
    }

    fn check(&self) -> Result<(), SimError> {
        if self.files() == 0 {
            return Err(SimError::BadWorkload("no files".into()));
        }
        if self.avg_functions == 0 {
            return Err(SimError::BadWorkload("no functions".into()));
        }
        Ok(())
    }

    pub fn reference_name(&self) -> String {
        format!(
            "bench/pynamic:{}m-{}l-{}f",
            self.modules, self.libraries, self.avg_functions
        )
    }

    /// Function counts per file; they average exactly `avg_functions`.
    pub fn function_counts(&self, seed: u64) -> Vec<u32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let avg = self.avg_functions;
        let n = self.files() as usize;
        let mut out = Vec::with_capacity(n);
        while out.len() + 1 < n {
            let d = rng.random_range(0..=avg / 2);
            out.push(avg + d);
            out.push(avg - d);
        }
        if out.len() < n {
            out.push(avg);
        }
        out
    }

    pub fn image(&self, seed: u64) -> LayeredImage {
        let counts = self.function_counts(seed);
        let mut entries = vec![
            Entry::dir("/opt"),
            Entry::dir("/opt/pynamic"),
            Entry::dir(MODULE_DIR),
            Entry::dir(UTILITY_DIR),
        ];
        for (i, k) in counts.iter().enumerate() {
            let i = i as u32;
            let path = if i < self.modules {
                format!("{MODULE_DIR}/libmodule{i:04}.so")
            } else {
                format!("{UTILITY_DIR}/libutility{:04}.so", i - self.modules)
            };
            entries.push(Entry::file(path, format!("functions={k}\n").into_bytes()));
        }
        LayeredImage::new(
            self.reference_name(),
            vec![Layer::new(entries)],
            ImageConfig {
                entrypoint: vec!["/usr/bin/python3".into(), "pynamic_driver.py".into()],
                env: Vec::new(),
            },
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// One squashed artifact mounted per node.
    Squashed,
    /// The image unpacked file by file on the shared filesystem.
    Plain,
}

impl std::str::FromStr for Layout {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "squashed" => Ok(Layout::Squashed),
            "plain" => Ok(Layout::Plain),
            other => Err(format!("unknown layout {other:?} (squashed|plain)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PynamicReport {
    pub layout: Layout,
    pub nodes: u32,
    pub files: u32,
    pub functions_per_node: u64,
    /// Shared-store operations issued by each node.
    pub per_node: Vec<OpCounters>,
    pub total: OpCounters,
    /// Lookups answered from a mounted artifact's in-memory index.
    pub index_lookups_per_node: u64,
    /// Time until the slowest node has visited every function.
    pub makespan_us: u64,
}

impl PynamicReport {
    pub fn max_node_ops(&self) -> u64 {
        self.per_node
            .iter()
            .map(|c| c.metadata_ops())
            .max()
            .unwrap_or(0)
    }
}

fn functions_in(bytes: &[u8]) -> u64 {
    String::from_utf8_lossy(bytes)
        .trim()
        .strip_prefix("functions=")
        .and_then(|v| v.parse().ok())
        .unwrap_or(0)
}

/// Runs the import, traverse and visit phases on every node of `cluster`
/// and counts shared-store operations per node. Setup (publishing the
/// workload) is not counted.
pub fn pynamic_run(
    cluster: &mut ClusterSim,
    workload: PynamicWorkload,
    layout: Layout,
) -> Result<PynamicReport, SimError> {
    workload.check()?;
    let image = workload.image(cluster.seed);
    let nodes = cluster.nodes;
    let cost = cluster.cost.clone();
    let start = cluster.now_us;
    let mut per_node = Vec::with_capacity(nodes as usize);
    let mut clocks = vec![start; nodes as usize];
    let mut functions_per_node = 0;
    let mut lookups_per_node = 0;

    match layout {
        Layout::Plain => {
            let root = format!("plain/{}", image.config_digest.hex());
            let flat = flatten_layers(&image.layers);
            let store = cluster.store.backend();
            let view = PlainTreeView::unpack(store, &root, &flat.tree)?;
            let files: Vec<String> = flat
                .tree
                .iter()
                .filter(|(_, n)| matches!(n.kind, crate::imagestore::NodeKind::File(_)))
                .map(|(p, _)| p.clone())
                .collect();
            let mut counters = vec![OpCounters::default(); nodes as usize];
            let mut functions = vec![0u64; nodes as usize];
            // Traverse: one listing per package directory.
            for (n, c) in counters.iter_mut().enumerate() {
                let before = store.counters();
                for dir in [MODULE_DIR, UTILITY_DIR] {
                    let path = format!("{root}{dir}");
                    store
                        .list(&path)
                        .map_err(|e| crate::imagestore::ImageStoreError::io(&path, e))?;
                }
                let ops = store.counters().since(&before);
                *c = add(*c, ops);
                clocks[n] = queue_ops(
                    &mut cluster.mds_free_us,
                    clocks[n],
                    ops.metadata_ops(),
                    cost.metadata_op_us,
                );
            }
            // Import: nodes interleave file by file on the metadata server.
            for f in &files {
                for n in 0..nodes as usize {
                    let before = store.counters();
                    let bytes = view.open(f)?;
                    let ops = store.counters().since(&before);
                    counters[n] = add(counters[n], ops);
                    functions[n] += functions_in(&bytes);
                    clocks[n] = queue_ops(
                        &mut cluster.mds_free_us,
                        clocks[n],
                        ops.metadata_ops(),
                        cost.metadata_op_us,
                    );
                }
            }
            functions_per_node = functions[0];
            per_node = counters;
        }
        Layout::Squashed => {
            if cluster.store.find(&image.reference)?.is_none() {
                cluster.store.migrate_image(&image, start / 1_000_000)?;
            }
            for n in 0..nodes {
                let before = cluster.store.backend().counters();
                let img = cluster.store.open(&image.reference)?;
                let handle = cluster.store.mount_view(
                    &img,
                    UpperLayer::read_only(),
                    Identity::new(1000, 1000),
                    MountOwner {
                        job: 0,
                        step: 0,
                        node: n,
                    },
                )?;
                let ops = cluster.store.backend().counters().since(&before);
                clocks[n as usize] = queue_ops(
                    &mut cluster.mds_free_us,
                    clocks[n as usize],
                    ops.metadata_ops(),
                    cost.metadata_op_us,
                );
                let mut functions = 0;
                for dir in [MODULE_DIR, UTILITY_DIR] {
                    for name in handle.list_dir(dir)? {
                        functions += functions_in(&handle.read(&format!("{dir}/{name}"))?);
                    }
                }
                let lookups = handle.index_lookups();
                clocks[n as usize] += lookups * cost.index_lookup_ns / 1_000;
                cluster.store.release_view(&handle);
                debug_assert_eq!(
                    cluster.store.backend().counters().since(&before),
                    ops,
                    "index reads touched the store"
                );
                functions_per_node = functions;
                lookups_per_node = lookups;
                per_node.push(ops);
            }
        }
    }

    for c in clocks.iter_mut() {
        *c += functions_per_node * cost.function_visit_ns / 1_000;
    }
    let end = clocks.iter().copied().max().unwrap_or(start);
    cluster.now_us = end;
    let total = per_node
        .iter()
        .fold(OpCounters::default(), |a, b| add(a, *b));
    Ok(PynamicReport {
        layout,
        nodes,
        files: workload.files(),
        functions_per_node,
        per_node,
        total,
        index_lookups_per_node: lookups_per_node,
        makespan_us: end - start,
    })
}

fn add(a: OpCounters, b: OpCounters) -> OpCounters {
    OpCounters {
        reads: a.reads + b.reads,
        stats: a.stats + b.stats,
        lists: a.lists + b.lists,
        writes: a.writes + b.writes,
        removes: a.removes + b.removes,
    }
}
