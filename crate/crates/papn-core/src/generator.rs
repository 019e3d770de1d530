//! Seeded synthetic episode generator.
//!
//! Episodes mimic a courier picking up parcels inside a small city box:
//! uniform node coordinates, haversine edge distances with an asymmetric
//! travel-time channel, accept times that open reachability masks in a
//! sliding window, and a label route built by nearest-neighbor greediness
//! perturbed by seeded adjacent swaps. The swap noise makes labels learnable
//! (accept times reveal the true order) but not trivially greedy (a distance
//! heuristic pays for every swap).

use crate::instance::{haversine_km, Instance, MAX_NODES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// How reachability masks advance over decode steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimestepRule {
    /// One mask row per decode step; a node opens `window - 1` steps before
    /// its label position and stays open.
    PerStep,
    /// A single mask row with every node open from the start.
    AllAvailable,
}

impl std::str::FromStr for TimestepRule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "per-step" => Ok(TimestepRule::PerStep),
            "all-available" => Ok(TimestepRule::AllAvailable),
            other => Err(format!(
                "unknown timestep rule \"{other}\" (expected per-step or all-available)"
            )),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GenError {
    #[error("node range {min}..={max} is empty")]
    EmptyRange { min: usize, max: usize },
    #[error("node range {min}..={max} must lie within 2..={limit}")]
    RangeOutOfBounds {
        min: usize,
        max: usize,
        limit: usize,
    },
    #[error("p_noise {0} must be within [0, 1]")]
    BadNoise(f64),
    #[error("window must be at least 1")]
    BadWindow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub count: usize,
    pub n_min: usize,
    pub n_max: usize,
    /// Probability of swapping each adjacent pair of the greedy route.
    pub p_noise: f64,
    /// Number of upcoming route positions open at once under
    /// [`TimestepRule::PerStep`].
    pub window: usize,
    pub t_rule: TimestepRule,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            count: 100,
            n_min: 6,
            n_max: 10,
            p_noise: 0.15,
            window: 4,
            t_rule: TimestepRule::PerStep,
        }
    }
}

impl GenConfig {
    fn check(&self) -> Result<(), GenError> {
        if self.n_min > self.n_max {
            return Err(GenError::EmptyRange {
                min: self.n_min,
                max: self.n_max,
            });
        }
        if self.n_min < 2 || self.n_max > MAX_NODES {
            return Err(GenError::RangeOutOfBounds {
                min: self.n_min,
                max: self.n_max,
                limit: MAX_NODES,
            });
        }
        if !(0.0..=1.0).contains(&self.p_noise) {
            return Err(GenError::BadNoise(self.p_noise));
        }
        if self.window == 0 {
            return Err(GenError::BadWindow);
        }
        Ok(())
    }
}

/// Node feature count the generator emits; see column constants in
/// [`crate::instance`] for the named ones.
pub const GEN_NF: usize = 9;
/// Edge channels: haversine distance and an asymmetric travel time.
pub const GEN_EF: usize = 2;

const BOX_DEG: f64 = 0.1;
const AOI_GRID: usize = 4;
/// Minutes between consecutive task accepts.
const ACCEPT_SPACING_MIN: f64 = 5.0;
/// Assumed courier speed for the travel-time channel, km per minute.
const SPEED_KM_PER_MIN: f64 = 0.5;

/// Generates `cfg.count` validated instances, bit-identical for a given
/// config.
pub fn generate(cfg: &GenConfig) -> Result<Vec<Instance>, GenError> {
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..cfg.count).map(|_| gen_one(cfg, &mut rng)).collect())
}

fn gen_one(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.gen_range(cfg.n_min..=cfg.n_max);
    // episode box: 0.1 x 0.1 degrees, jittered around a mid-latitude city
    let lon0 = 7.2 + rng.gen_range(0.0..0.4);
    let lat0 = 45.0 + rng.gen_range(0.0..0.4);
    let point = |rng: &mut ChaCha8Rng| {
        [
            lon0 + rng.gen_range(0.0..BOX_DEG),
            lat0 + rng.gen_range(0.0..BOX_DEG),
        ]
    };
    let start = point(rng);
    let coords: Vec<[f64; 2]> = (0..n).map(|_| point(rng)).collect();
    let daily_avg_km = rng.gen_range(3.0..8.0);

    // label route: nearest-neighbor greedy, then seeded adjacent swaps
    let mut route = nearest_neighbor_route(start, &coords);
    for s in 0..n - 1 {
        if rng.gen_bool(cfg.p_noise) {
            route.swap(s, s + 1);
        }
    }
    let mut pos = vec![0usize; n];
    for (p, &node) in route.iter().enumerate() {
        pos[node] = p;
    }

    // accept times strictly ordered by label position; promised-time gaps
    // independent
    let accept: Vec<f64> = (0..n)
        .map(|i| pos[i] as f64 * ACCEPT_SPACING_MIN + rng.gen_range(0.0..ACCEPT_SPACING_MIN / 2.0))
        .collect();
    let gaps: Vec<f64> = (0..n).map(|_| rng.gen_range(30.0..120.0)).collect();

    // static per-node features, repeated across timesteps
    let mut feat = vec![0.0; n * GEN_NF];
    for i in 0..n {
        let d_start = haversine_km(start, coords[i]);
        let (aoi_id, aoi_type, aoi_dist) = aoi_of(coords[i], lon0, lat0);
        let f = &mut feat[i * GEN_NF..(i + 1) * GEN_NF];
        f[0] = accept[i];
        f[1] = coords[i][0];
        f[2] = coords[i][1];
        f[3] = d_start;
        f[4] = d_start / daily_avg_km;
        f[5] = gaps[i];
        f[6] = aoi_id as f64;
        f[7] = aoi_type as f64;
        f[8] = aoi_dist;
    }

    // static edge tensor: symmetric haversine channel plus an asymmetric
    // travel-time channel
    let mut edge = vec![0.0; n * n * GEN_EF];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = haversine_km(coords[i], coords[j]);
            let jitter = rng.gen_range(0.8..1.2);
            edge[(i * n + j) * GEN_EF] = d;
            edge[(i * n + j) * GEN_EF + 1] = d / SPEED_KM_PER_MIN * jitter;
        }
    }

    let (t, masks) = match cfg.t_rule {
        TimestepRule::AllAvailable => (1, vec![1u8; n]),
        TimestepRule::PerStep => {
            let mut m = vec![0u8; n * n];
            for s in 0..n {
                for i in 0..n {
                    if pos[i] <= s + cfg.window - 1 {
                        m[s * n + i] = 1;
                    }
                }
            }
            (n, m)
        }
    };

    let node_features = (0..t).flat_map(|_| feat.iter().copied()).collect();
    let edge_features = (0..t).flat_map(|_| edge.iter().copied()).collect();

    let inst = Instance {
        n,
        t,
        nf: GEN_NF,
        ef: GEN_EF,
        coords,
        node_features,
        edge_features,
        masks,
        label_route: route,
    };
    debug_assert!(inst.validate().is_ok());
    inst
}

/// Greedy route: first hop from the courier start, later hops from the
/// current node, always to the nearest unvisited node, ties to the lowest
/// index.
fn nearest_neighbor_route(start: [f64; 2], coords: &[[f64; 2]]) -> Vec<usize> {
    let n = coords.len();
    let mut visited = vec![false; n];
    let mut route = Vec::with_capacity(n);
    let mut current: Option<usize> = None;
    for _ in 0..n {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for (j, &c) in coords.iter().enumerate() {
            if visited[j] {
                continue;
            }
            let d = match current {
                None => haversine_km(start, c),
                Some(i) => haversine_km(coords[i], c),
            };
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        visited[best] = true;
        route.push(best);
        current = Some(best);
    }
    route
}

/// Area-of-interest assignment: the episode box is a 4x4 grid of cells; a
/// node belongs to the cell containing it. Returns (cell id, cell type, km
/// from the node to the cell centre).
fn aoi_of(coord: [f64; 2], lon0: f64, lat0: f64) -> (usize, usize, f64) {
    let cell = |v: f64, origin: f64| {
        (((v - origin) / BOX_DEG * AOI_GRID as f64) as usize).min(AOI_GRID - 1)
    };
    let gx = cell(coord[0], lon0);
    let gy = cell(coord[1], lat0);
    let id = gx * AOI_GRID + gy;
    let cell_deg = BOX_DEG / AOI_GRID as f64;
    let center = [
        lon0 + (gx as f64 + 0.5) * cell_deg,
        lat0 + (gy as f64 + 0.5) * cell_deg,
    ];
    (id, id % 3, haversine_km(coord, center))
}
