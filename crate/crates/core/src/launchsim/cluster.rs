use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CostModel, RankState, SimError};
use crate::imagestore::{
    Entry, ImageConfig, Layer, LayeredImage, MemBackend, Migration, Recorder, SharedStore,
};

/// A simulated cluster: nodes, ranks, a shared image store on a parallel
/// filesystem and a registry to pull from. Simulated time persists across
/// steps.
#[derive(Debug)]
pub struct ClusterSim {
    pub(crate) nodes: u32,
    pub(crate) ranks_per_node: u32,
    pub(crate) cost: CostModel,
    pub(crate) seed: u64,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) now_us: u64,
    pub(crate) mds_free_us: u64,
    pub(crate) next_step: u64,
    pub(crate) store: SharedStore<Recorder<MemBackend>>,
    pub(crate) registry: BTreeMap<String, LayeredImage>,
}

pub fn build_cluster(
    nodes: u32,
    ranks_per_node: u32,
    cost: CostModel,
    seed: u64,
) -> Result<ClusterSim, SimError> {
    if nodes == 0 || ranks_per_node == 0 {
        return Err(SimError::ZeroSize);
    }
    Ok(ClusterSim {
        nodes,
        ranks_per_node,
        cost,
        seed,
        rng: ChaCha8Rng::seed_from_u64(seed),
        now_us: 0,
        mds_free_us: 0,
        next_step: 0,
        store: SharedStore::new(Recorder::counting(MemBackend::new())),
        registry: BTreeMap::new(),
    })
}

impl ClusterSim {
    pub fn nodes(&self) -> u32 {
        self.nodes
    }

    pub fn ranks_per_node(&self) -> u32 {
        self.ranks_per_node
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn cost(&self) -> &CostModel {
        &self.cost
    }

    pub fn now_us(&self) -> u64 {
        self.now_us
    }

    /// Moves simulated time forward, e.g. between a failed step and its
    /// retry.
    pub fn advance(&mut self, us: u64) {
        self.now_us += us;
    }

    /// Fresh rank table, all in the created phase.
    pub fn ranks(&self) -> Vec<RankState> {
        (0..self.nodes)
            .flat_map(|n| {
                (0..self.ranks_per_node)
                    .map(move |l| RankState::new(n * self.ranks_per_node + l, n, l))
            })
            .collect()
    }

    pub fn store(&self) -> &SharedStore<Recorder<MemBackend>> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut SharedStore<Recorder<MemBackend>> {
        &mut self.store
    }

    /// Makes an image available for pulling.
    pub fn publish(&mut self, image: LayeredImage) {
        self.registry.insert(image.reference.clone(), image);
    }

    /// Migrates a registry image straight into the shared store, outside
    /// any step. Used to set up warm starts.
    pub fn preload(&mut self, reference: &str) -> Result<Migration, SimError> {
        let image = self
            .registry
            .get(reference)
            .ok_or_else(|| SimError::BadWorkload(format!("{reference} is not published")))?;
        Ok(self.store.migrate_image(image, self.now_us / 1_000_000)?)
    }

    /// Queues `ops` metadata operations issued at `at` on the metadata
    /// server; returns when they finish.
    pub(crate) fn charge_ops(&mut self, at: u64, ops: u64) -> u64 {
        queue_ops(&mut self.mds_free_us, at, ops, self.cost.metadata_op_us)
    }

    pub(crate) fn jitter(&mut self, base: u64, spread: u64) -> u64 {
        if spread == 0 {
            return base;
        }
        let lo = base.saturating_sub(spread);
        self.rng.random_range(lo..=base + spread)
    }

    pub(crate) fn join_cost(&mut self) -> u64 {
        let c = &self.cost;
        let (lo, hi, bound) = (
            c.join_min_us,
            c.join_max_us.max(c.join_min_us),
            c.join_bound_us,
        );
        self.rng.random_range(lo..=hi).min(bound)
    }
}

/// Single-server FIFO: returns when `ops` operations issued at `at` finish.
pub(crate) fn queue_ops(free: &mut u64, at: u64, ops: u64, op_us: u64) -> u64 {
    if ops == 0 {
        return at;
    }
    let start = at.max(*free);
    *free = start + ops * op_us;
    *free
}

/// A small two-layer image with a whiteout, standing in for a registry
/// image.
pub fn sample_image(reference: &str) -> LayeredImage {
    let base = Layer::new(vec![
        Entry::dir("/usr"),
        Entry::dir("/usr/bin"),
        Entry::file("/usr/bin/python3", b"\x7fELF python".to_vec()).with_mode(0o755),
        Entry::dir("/usr/lib"),
        Entry::file("/usr/lib/libc.so.6", b"\x7fELF libc".to_vec()),
        Entry::file("/usr/lib/libfabric.so.1.18.1", b"\x7fELF fabric".to_vec()),
        Entry::symlink("/usr/lib/libfabric.so.1", "libfabric.so.1.18.1"),
        Entry::dir("/tmp").with_mode(0o1777),
        Entry::file("/tmp/build.log", b"scratch".to_vec()),
    ]);
    let app = Layer::new(vec![
        Entry::whiteout("/tmp", "build.log"),
        Entry::dir("/opt"),
        Entry::dir("/opt/app"),
        Entry::file("/opt/app/train.py", format!("# {reference}\n").into_bytes()),
    ]);
    LayeredImage::new(
        reference,
        vec![base, app],
        ImageConfig {
            entrypoint: vec!["/usr/bin/python3".into()],
            env: vec![("PATH".into(), "/usr/bin".into())],
        },
    )
}
