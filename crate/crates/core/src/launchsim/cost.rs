use serde::{Deserialize, Serialize};

/// Base costs per phase plus a per-operation cost for the shared
/// filesystem's metadata service. Only the ordering startup ≫ preparation ≫
/// join is meant to be realistic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub render_us: u64,
    pub reconstruct_us: u64,
    pub sync_write_us: u64,
    pub poll_interval_us: u64,
    pub stale_timeout_us: u64,
    pub pull_base_us: u64,
    pub pull_per_layer_us: u64,
    pub migrate_base_us: u64,
    pub migrate_per_entry_us: u64,
    pub remove_temp_us: u64,
    pub scratch_us: u64,
    pub startup_us: u64,
    pub startup_jitter_us: u64,
    pub prep_us: u64,
    pub prep_jitter_us: u64,
    pub join_min_us: u64,
    pub join_max_us: u64,
    /// Hard ceiling for one namespace join.
    pub join_bound_us: u64,
    pub workload_us: u64,
    pub stop_us: u64,
    /// Service time of one metadata operation; operations queue on a
    /// single metadata server.
    pub metadata_op_us: u64,
    pub index_lookup_ns: u64,
    pub function_visit_ns: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            render_us: 2_000,
            reconstruct_us: 1_000,
            sync_write_us: 5_000,
            poll_interval_us: 100_000,
            stale_timeout_us: 300_000_000,
            pull_base_us: 3_000_000,
            pull_per_layer_us: 400_000,
            migrate_base_us: 2_000_000,
            migrate_per_entry_us: 200,
            remove_temp_us: 50_000,
            scratch_us: 1_000,
            startup_us: 950_000,
            startup_jitter_us: 95_000,
            prep_us: 55_000,
            prep_jitter_us: 13_000,
            join_min_us: 150,
            join_max_us: 850,
            join_bound_us: 1_000,
            workload_us: 1_000_000,
            stop_us: 150_000,
            metadata_op_us: 50,
            index_lookup_ns: 200,
            function_visit_ns: 20,
        }
    }
}
