use serde::Serialize;

use super::{Phase, SimError, StepTrace};

pub const ROW_LABELS: [&str; 4] = [
    "Podman-mediated startup",
    "Runtime preparation",
    "of which: namespace join",
    "Total",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecompositionRow {
    pub label: &'static str,
    pub mean_s: f64,
    pub stdev_s: f64,
    /// Largest per-repetition value.
    pub max_s: f64,
}

/// Per-node startup time split into its components, aggregated over
/// repetitions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Decomposition {
    pub repetitions: usize,
    pub nodes: u32,
    pub rows: Vec<DecompositionRow>,
    /// Slowest single namespace join seen in any repetition.
    pub max_join_us: u64,
}

impl Decomposition {
    pub fn row(&self, label: &str) -> Option<&DecompositionRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<30} {:>9} {:>9}\n",
            "Phase (per node)", "mean [s]", "stdev [s]"
        );
        for r in &self.rows {
            let label = if r.label.starts_with("of which") {
                format!("  {}", r.label)
            } else {
                r.label.to_string()
            };
            out.push_str(&format!(
                "{label:<30} {:>9.3} {:>9.3}\n",
                r.mean_s, r.stdev_s
            ));
        }
        out.push_str(&format!(
            "({} repetitions, {} nodes)\n",
            self.repetitions, self.nodes
        ));
        out
    }
}

/// Sums of one repetition, in microseconds, over its nodes.
struct Sample {
    startup: u64,
    prep: u64,
    join: u64,
    nodes: u64,
}

fn sample(trace: &StepTrace) -> Result<(Sample, u64), SimError> {
    if !trace.is_completed() {
        return Err(SimError::IncompleteTrace(format!(
            "step {}.{} did not complete",
            trace.job_id, trace.step_id
        )));
    }
    let mut s = Sample {
        startup: 0,
        prep: 0,
        join: 0,
        nodes: trace.nodes as u64,
    };
    let mut max_join = 0;
    for n in 0..trace.nodes {
        let one = |phase: Phase| {
            trace
                .phases_of(phase)
                .find(|p| p.node == n)
                .map(|p| p.duration_us)
                .ok_or_else(|| {
                    SimError::IncompleteTrace(format!("node {n} has no {} record", phase.name()))
                })
        };
        s.startup += one(Phase::PodmanMediatedStartup)?;
        s.prep += one(Phase::RuntimePreparation)?;
        let join = trace
            .phases_of(Phase::NamespaceJoin)
            .filter(|p| p.node == n)
            .map(|p| p.duration_us)
            .max()
            .unwrap_or(0);
        max_join = max_join.max(join);
        s.join += join;
    }
    Ok((s, max_join))
}

fn stats(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let stdev = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    let max = values.iter().cloned().fold(f64::MIN, f64::max);
    (mean, stdev, max)
}

/// Aggregates completed warm-start traces, one per repetition. Each
/// repetition contributes its per-node mean; the total row is computed from
/// the per-node sums, so it equals startup plus preparation.
pub fn measure_startup(traces: &[StepTrace]) -> Result<Decomposition, SimError> {
    if traces.is_empty() {
        return Err(SimError::IncompleteTrace("no repetitions".into()));
    }
    let mut cols: [Vec<f64>; 4] = Default::default();
    let mut max_join_us = 0;
    for t in traces {
        let (s, mj) = sample(t)?;
        max_join_us = max_join_us.max(mj);
        let per_node = |v: u64| v as f64 / s.nodes as f64 / 1e6;
        cols[0].push(per_node(s.startup));
        cols[1].push(per_node(s.prep));
        cols[2].push(per_node(s.join));
        cols[3].push(per_node(s.startup + s.prep));
    }
    let rows = ROW_LABELS
        .iter()
        .zip(cols.iter())
        .map(|(label, col)| {
            let (mean_s, stdev_s, max_s) = stats(col);
            DecompositionRow {
                label,
                mean_s,
                stdev_s,
                max_s,
            }
        })
        .collect();
    Ok(Decomposition {
        repetitions: traces.len(),
        nodes: traces[0].nodes,
        rows,
        max_join_us,
    })
}
