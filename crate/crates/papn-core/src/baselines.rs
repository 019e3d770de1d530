//! Non-learned greedy route predictors used as comparison floors.
//!
//! Both walk the to-visit set one hop at a time, restricted to nodes that
//! are mask-available at the current decode step and not yet visited.
//! Distance-greedy always takes the nearest candidate (node's
//! distance-to-start feature for the first hop, the distance edge channel
//! afterwards); time-greedy takes the earliest promised pickup, breaking
//! ties by distance and then by lowest node index.

use crate::instance::{Instance, FEAT_DIST_START};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    DistanceGreedy,
    TimeGreedy,
}

impl FromStr for BaselineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "distance" | "distance_greedy" => Ok(BaselineKind::DistanceGreedy),
            "time" | "time_greedy" => Ok(BaselineKind::TimeGreedy),
            other => Err(format!(
                "unknown baseline {other:?}, expected \"distance\" or \"time\""
            )),
        }
    }
}

impl std::fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BaselineKind::DistanceGreedy => "distance_greedy",
            BaselineKind::TimeGreedy => "time_greedy",
        })
    }
}

pub fn predict(kind: BaselineKind, inst: &Instance) -> Vec<usize> {
    match kind {
        BaselineKind::DistanceGreedy => distance_greedy(inst),
        BaselineKind::TimeGreedy => time_greedy(inst),
    }
}

/// Distance from the courier's current position to node `j` at decode row
/// `row`: the start-distance feature before the first hop, the distance
/// edge channel afterwards.
fn hop_distance(inst: &Instance, row: usize, prev: Option<usize>, j: usize) -> f64 {
    match prev {
        None => inst.node_feat(row, j, FEAT_DIST_START),
        Some(i) => inst.edge_feat(row, i, j, 0),
    }
}

/// Shared greedy loop: at each step pick, among admissible nodes, the one
/// minimizing `key` (candidates are scanned in ascending index, so exact key
/// ties resolve to the lowest index). If a degenerate mask leaves no
/// admissible node — impossible for generated data, whose masks only ever
/// open — the lowest-index unvisited target node is taken instead.
fn greedy_route<K: PartialOrd>(
    inst: &Instance,
    key: impl Fn(usize, Option<usize>, usize) -> K,
) -> Vec<usize> {
    let mut in_target = vec![false; inst.n];
    for &v in &inst.label_route {
        in_target[v] = true;
    }
    let mut visited = vec![false; inst.n];
    let mut prev = None;
    let mut route = Vec::with_capacity(inst.label_route.len());
    for step in 0..inst.label_route.len() {
        let row = step.min(inst.t - 1);
        let mask = inst.decode_mask_row(step);
        let mut best: Option<(usize, K)> = None;
        for j in (0..inst.n).filter(|&j| in_target[j] && !visited[j] && mask[j] == 1) {
            let k = key(row, prev, j);
            if best.as_ref().map_or(true, |(_, bk)| k < *bk) {
                best = Some((j, k));
            }
        }
        let chosen = best.map(|(j, _)| j).unwrap_or_else(|| {
            (0..inst.n)
                .find(|&j| in_target[j] && !visited[j])
                .expect("route shorter than target set")
        });
        visited[chosen] = true;
        route.push(chosen);
        prev = Some(chosen);
    }
    route
}

/// Nearest-available-first route.
pub fn distance_greedy(inst: &Instance) -> Vec<usize> {
    greedy_route(inst, |row, prev, j| hop_distance(inst, row, prev, j))
}

/// Earliest-promised-first route; promised-time ties fall back to distance,
/// then to lowest index.
pub fn time_greedy(inst: &Instance) -> Vec<usize> {
    let promised = inst.promised_times();
    greedy_route(inst, |row, prev, j| {
        (promised[j], hop_distance(inst, row, prev, j))
    })
}
