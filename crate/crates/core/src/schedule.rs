//! Longest-processing-time-first scheduling of per-cluster index builds.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BuildSchedule {
    pub machines: usize,
    /// Machine index for each job, in input order.
    pub assignment: Vec<usize>,
    pub loads: Vec<f64>,
    pub makespan: f64,
}

/// Greedy LPT: jobs in descending cost (input order on ties), each placed on
/// the currently least-loaded machine (lowest index on ties).
pub fn schedule_lpt(costs: &[f64], m: usize) -> Result<BuildSchedule> {
    if costs.is_empty() {
        return Err(Error::InvalidInput("no jobs to schedule".into()));
    }
    if m == 0 {
        return Err(Error::InvalidInput("machine count must be ≥ 1".into()));
    }
    if let Some(c) = costs.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
        return Err(Error::InvalidInput(format!("job costs must be positive and finite, got {c}")));
    }
    let mut order: Vec<usize> = (0..costs.len()).collect();
    order.sort_by(|&a, &b| costs[b].total_cmp(&costs[a]));
    let mut loads = vec![0.0; m];
    let mut assignment = vec![0; costs.len()];
    for j in order {
        let mut best = 0;
        for i in 1..m {
            if loads[i] < loads[best] {
                best = i;
            }
        }
        loads[best] += costs[j];
        assignment[j] = best;
    }
    let makespan = loads.iter().copied().fold(0.0, f64::max);
    Ok(BuildSchedule {
        machines: m,
        assignment,
        loads,
        makespan,
    })
}

/// `(machines, makespan)` for each requested machine count, in the given order.
pub fn simulate_build(times: &[f64], machine_counts: &[usize]) -> Result<Vec<(usize, f64)>> {
    machine_counts
        .iter()
        .map(|&m| schedule_lpt(times, m).map(|s| (m, s.makespan)))
        .collect()
}

pub fn write_makespans(path: impl AsRef<Path>, rows: &[(usize, f64)]) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(out, "machines\tmakespan_seconds").map_err(io)?;
    for (m, s) in rows {
        writeln!(out, "{m}\t{s:.6}").map_err(io)?;
    }
    out.flush().map_err(io)
}
