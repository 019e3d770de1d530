//! Canonical data model for pickup episodes.
//!
//! An [`Instance`] is one courier episode: per-timestep node features, an
//! asymmetric edge-feature tensor, per-timestep reachability masks, and the
//! label route actually taken. Instances travel as NDJSON (one JSON object
//! per line) with every array dimension explicit; loading validates shapes
//! and the feasibility invariants the decoder depends on.

use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

/// Hard ceiling on nodes per episode; desk-scale instances stay small.
pub const MAX_NODES: usize = 25;

/// Mean Earth radius in kilometres, used by [`haversine_km`].
pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("failed to read {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {source}")]
    InvalidLine {
        line: usize,
        #[source]
        source: ValidationError,
    },
    #[error(transparent)]
    Invalid(#[from] ValidationError),
}

#[derive(Debug, Error, PartialEq)]
pub enum ValidationError {
    #[error("node count {n} outside 1..={max}")]
    NodeCount { n: usize, max: usize },
    #[error("timestep count must be at least 1")]
    NoTimesteps,
    #[error("field \"{field}\" has wrong shape: expected {expected}, got {got}")]
    Shape {
        field: &'static str,
        expected: String,
        got: String,
    },
    #[error("mask bit at step {step}, node {node} is {value}, expected 0 or 1")]
    MaskBit { step: usize, node: usize, value: u8 },
    #[error("label_route[{index}] = {node} is out of range for n = {n}")]
    LabelRange { index: usize, node: usize, n: usize },
    #[error("label_route visits node {node} twice")]
    LabelDuplicate { node: usize },
    #[error("label node {node} is unavailable at decode step {step}")]
    LabelUnavailable { step: usize, node: usize },
    #[error("decode step {step} has no available, unvisited node")]
    DeadStep { step: usize },
}

/// One pickup episode.
///
/// Tensors are stored flat in row-major order; use the accessor methods for
/// indexed reads. `node_features` is `t x n x nf`, `edge_features` is
/// `t x n x n x ef` (and may be asymmetric: the entry for `(i, j)` need not
/// equal `(j, i)`), `masks` is `t x n` with 1 meaning "visitable".
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub n: usize,
    pub t: usize,
    pub nf: usize,
    pub ef: usize,
    /// `n` pairs of (longitude, latitude) in degrees.
    pub coords: Vec<[f64; 2]>,
    pub node_features: Vec<f64>,
    pub edge_features: Vec<f64>,
    pub masks: Vec<u8>,
    pub label_route: Vec<usize>,
}

/// Feature column holding the task accept time (minutes since episode start).
pub const FEAT_ACCEPT: usize = 0;
/// Feature column holding the haversine distance from the courier's start.
pub const FEAT_DIST_START: usize = 3;
/// Feature column holding the promised-minus-accept time gap.
pub const FEAT_TIME_GAP: usize = 5;

impl Instance {
    pub fn node_feat(&self, step: usize, node: usize, f: usize) -> f64 {
        self.node_features[(step * self.n + node) * self.nf + f]
    }

    pub fn edge_feat(&self, step: usize, i: usize, j: usize, k: usize) -> f64 {
        self.edge_features[((step * self.n + i) * self.n + j) * self.ef + k]
    }

    /// Mask row for decode step `s`; steps past the last recorded row reuse
    /// the final row.
    pub fn decode_mask_row(&self, s: usize) -> &[u8] {
        let row = s.min(self.t - 1);
        &self.masks[row * self.n..(row + 1) * self.n]
    }

    pub fn available(&self, step: usize, node: usize) -> bool {
        self.decode_mask_row(step)[node] == 1
    }

    /// Accept time per node, read from the canonical feature layout (column
    /// [`FEAT_ACCEPT`] at step 0); zero when the instance carries no node
    /// features.
    pub fn accept_times(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                if self.nf > FEAT_ACCEPT {
                    self.node_feat(0, i, FEAT_ACCEPT)
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Promised completion time per node: accept time plus the gap column
    /// ([`FEAT_TIME_GAP`]) when present, otherwise equal to the accept time.
    pub fn promised_times(&self) -> Vec<f64> {
        let accept = self.accept_times();
        (0..self.n)
            .map(|i| {
                if self.nf > FEAT_TIME_GAP {
                    accept[i] + self.node_feat(0, i, FEAT_TIME_GAP)
                } else {
                    accept[i]
                }
            })
            .collect()
    }

    /// Checks every structural invariant. Shapes are verified first so the
    /// feasibility checks can index freely.
    pub fn validate(&self) -> Result<(), ValidationError> {
        self.validate_with_max(MAX_NODES)
    }

    pub fn validate_with_max(&self, max_nodes: usize) -> Result<(), ValidationError> {
        if self.n < 1 || self.n > max_nodes {
            return Err(ValidationError::NodeCount {
                n: self.n,
                max: max_nodes,
            });
        }
        if self.t < 1 {
            return Err(ValidationError::NoTimesteps);
        }
        let shape = |field, expected: usize, got: usize| {
            if expected == got {
                Ok(())
            } else {
                Err(ValidationError::Shape {
                    field,
                    expected: format!("{expected} elements"),
                    got: format!("{got} elements"),
                })
            }
        };
        shape("coords", self.n, self.coords.len())?;
        shape(
            "node_features",
            self.t * self.n * self.nf,
            self.node_features.len(),
        )?;
        shape(
            "edge_features",
            self.t * self.n * self.n * self.ef,
            self.edge_features.len(),
        )?;
        shape("masks", self.t * self.n, self.masks.len())?;
        for step in 0..self.t {
            for node in 0..self.n {
                let value = self.masks[step * self.n + node];
                if value > 1 {
                    return Err(ValidationError::MaskBit { step, node, value });
                }
            }
        }
        if self.label_route.len() > self.n {
            return Err(ValidationError::Shape {
                field: "label_route",
                expected: format!("at most {} entries", self.n),
                got: format!("{} entries", self.label_route.len()),
            });
        }
        let mut seen = vec![false; self.n];
        for (index, &node) in self.label_route.iter().enumerate() {
            if node >= self.n {
                return Err(ValidationError::LabelRange {
                    index,
                    node,
                    n: self.n,
                });
            }
            if seen[node] {
                return Err(ValidationError::LabelDuplicate { node });
            }
            seen[node] = true;
            if !self.available(index, node) {
                return Err(ValidationError::LabelUnavailable { step: index, node });
            }
        }
        // Every decode step must leave at least one feasible choice.
        let mut visited = vec![false; self.n];
        for step in 0..self.label_route.len() {
            let row = self.decode_mask_row(step);
            let feasible = (0..self.n).any(|i| !visited[i] && row[i] == 1);
            if !feasible {
                return Err(ValidationError::DeadStep { step });
            }
            visited[self.label_route[step]] = true;
        }
        Ok(())
    }
}

/// Wire format: nested arrays with every dimension explicit.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInstance {
    n: usize,
    t: usize,
    nf: usize,
    ef: usize,
    coords: Vec<Vec<f64>>,
    node_features: Vec<Vec<Vec<f64>>>,
    edge_features: Vec<Vec<Vec<Vec<f64>>>>,
    masks: Vec<Vec<u8>>,
    label_route: Vec<usize>,
}

fn shape_err(field: &'static str, expected: String, got: String) -> ValidationError {
    ValidationError::Shape {
        field,
        expected,
        got,
    }
}

impl TryFrom<RawInstance> for Instance {
    type Error = ValidationError;

    fn try_from(raw: RawInstance) -> Result<Self, ValidationError> {
        let RawInstance {
            n,
            t,
            nf,
            ef,
            coords,
            node_features,
            edge_features,
            masks,
            label_route,
        } = raw;

        if coords.len() != n {
            return Err(shape_err(
                "coords",
                format!("{n} rows"),
                format!("{} rows", coords.len()),
            ));
        }
        let mut flat_coords = Vec::with_capacity(n);
        for (i, pair) in coords.iter().enumerate() {
            if pair.len() != 2 {
                return Err(shape_err(
                    "coords",
                    format!("row {i} of length 2"),
                    format!("length {}", pair.len()),
                ));
            }
            flat_coords.push([pair[0], pair[1]]);
        }

        if node_features.len() != t {
            return Err(shape_err(
                "node_features",
                format!("{t} timesteps"),
                format!("{} timesteps", node_features.len()),
            ));
        }
        let mut flat_nodes = Vec::with_capacity(t * n * nf);
        for (s, per_step) in node_features.iter().enumerate() {
            if per_step.len() != n {
                return Err(shape_err(
                    "node_features",
                    format!("step {s} with {n} nodes"),
                    format!("{} nodes", per_step.len()),
                ));
            }
            for (i, feats) in per_step.iter().enumerate() {
                if feats.len() != nf {
                    return Err(shape_err(
                        "node_features",
                        format!("step {s}, node {i} with {nf} features"),
                        format!("{} features", feats.len()),
                    ));
                }
                flat_nodes.extend_from_slice(feats);
            }
        }

        if edge_features.len() != t {
            return Err(shape_err(
                "edge_features",
                format!("{t} timesteps"),
                format!("{} timesteps", edge_features.len()),
            ));
        }
        let mut flat_edges = Vec::with_capacity(t * n * n * ef);
        for (s, per_step) in edge_features.iter().enumerate() {
            if per_step.len() != n {
                return Err(shape_err(
                    "edge_features",
                    format!("step {s} with {n} rows"),
                    format!("{} rows", per_step.len()),
                ));
            }
            for (i, row) in per_step.iter().enumerate() {
                if row.len() != n {
                    return Err(shape_err(
                        "edge_features",
                        format!("step {s}, row {i} with {n} columns"),
                        format!("{} columns", row.len()),
                    ));
                }
                for (j, feats) in row.iter().enumerate() {
                    if feats.len() != ef {
                        return Err(shape_err(
                            "edge_features",
                            format!("step {s}, edge ({i},{j}) with {ef} features"),
                            format!("{} features", feats.len()),
                        ));
                    }
                    flat_edges.extend_from_slice(feats);
                }
            }
        }

        if masks.len() != t {
            return Err(shape_err(
                "masks",
                format!("{t} rows"),
                format!("{} rows", masks.len()),
            ));
        }
        let mut flat_masks = Vec::with_capacity(t * n);
        for (s, row) in masks.iter().enumerate() {
            if row.len() != n {
                return Err(shape_err(
                    "masks",
                    format!("row {s} of length {n}"),
                    format!("length {}", row.len()),
                ));
            }
            flat_masks.extend_from_slice(row);
        }

        let instance = Instance {
            n,
            t,
            nf,
            ef,
            coords: flat_coords,
            node_features: flat_nodes,
            edge_features: flat_edges,
            masks: flat_masks,
            label_route,
        };
        instance.validate()?;
        Ok(instance)
    }
}

impl From<&Instance> for RawInstance {
    fn from(inst: &Instance) -> Self {
        let (n, t, nf, ef) = (inst.n, inst.t, inst.nf, inst.ef);
        RawInstance {
            n,
            t,
            nf,
            ef,
            coords: inst.coords.iter().map(|c| c.to_vec()).collect(),
            node_features: (0..t)
                .map(|s| {
                    (0..n)
                        .map(|i| (0..nf).map(|f| inst.node_feat(s, i, f)).collect())
                        .collect()
                })
                .collect(),
            edge_features: (0..t)
                .map(|s| {
                    (0..n)
                        .map(|i| {
                            (0..n)
                                .map(|j| (0..ef).map(|k| inst.edge_feat(s, i, j, k)).collect())
                                .collect()
                        })
                        .collect()
                })
                .collect(),
            masks: (0..t)
                .map(|s| inst.masks[s * n..(s + 1) * n].to_vec())
                .collect(),
            label_route: inst.label_route.clone(),
        }
    }
}

/// Parses one NDJSON line into a validated [`Instance`]. `line` is 1-based
/// and only used for error reporting.
pub fn parse_line(text: &str, line: usize) -> Result<Instance, InstanceError> {
    let raw: RawInstance =
        serde_json::from_str(text).map_err(|e| InstanceError::Parse {
            line,
            message: e.to_string(),
        })?;
    Instance::try_from(raw).map_err(|source| InstanceError::InvalidLine { line, source })
}

/// Loads every instance from an NDJSON file, reporting the first bad line.
pub fn load_ndjson(path: impl AsRef<Path>) -> Result<Vec<Instance>, InstanceError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| InstanceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = line.map_err(|source| InstanceError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if text.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&text, line_no)?);
    }
    Ok(out)
}

/// Serializes one instance to its NDJSON line (no trailing newline).
pub fn to_line(inst: &Instance) -> String {
    serde_json::to_string(&RawInstance::from(inst)).expect("instance serialization cannot fail")
}

/// Writes instances as NDJSON, one per line.
pub fn save_ndjson(path: impl AsRef<Path>, instances: &[Instance]) -> Result<(), InstanceError> {
    let path = path.as_ref();
    let io_err = |source| InstanceError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut writer = BufWriter::new(file);
    for inst in instances {
        writeln!(writer, "{}", to_line(inst)).map_err(io_err)?;
    }
    writer.flush().map_err(io_err)?;
    Ok(())
}

/// Great-circle distance in kilometres between two (longitude, latitude)
/// points given in degrees.
pub fn haversine_km(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (lon1, lat1) = (a[0].to_radians(), a[1].to_radians());
    let (lon2, lat2) = (b[0].to_radians(), b[1].to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().asin()
}

/// Instances padded to a common node and timestep count.
///
/// Padded node slots have zero features, zero coordinates, and are
/// mask-unavailable at every step, so a mask-respecting decoder can never
/// select them; labels are untouched. `real_n`/`real_t` record each
/// instance's original sizes and `pad_mask[b][i]` is true for real nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub instances: Vec<Instance>,
    pub real_n: Vec<usize>,
    pub real_t: Vec<usize>,
    pub pad_mask: Vec<Vec<bool>>,
}

/// Pads a non-empty list of instances to common `n` and `t`.
pub fn pad_batch(instances: &[Instance]) -> Result<Batch, ValidationError> {
    if instances.is_empty() {
        return Err(ValidationError::Shape {
            field: "batch",
            expected: "at least one instance".to_string(),
            got: "0 instances".to_string(),
        });
    }
    let n_max = instances.iter().map(|i| i.n).max().unwrap();
    let t_max = instances.iter().map(|i| i.t).max().unwrap();
    let mut padded = Vec::with_capacity(instances.len());
    let mut real_n = Vec::with_capacity(instances.len());
    let mut real_t = Vec::with_capacity(instances.len());
    let mut pad_mask = Vec::with_capacity(instances.len());
    for inst in instances {
        real_n.push(inst.n);
        real_t.push(inst.t);
        pad_mask.push((0..n_max).map(|i| i < inst.n).collect());
        padded.push(pad_instance(inst, n_max, t_max));
    }
    Ok(Batch {
        instances: padded,
        real_n,
        real_t,
        pad_mask,
    })
}

fn pad_instance(inst: &Instance, n_max: usize, t_max: usize) -> Instance {
    if inst.n == n_max && inst.t == t_max {
        return inst.clone();
    }
    let (nf, ef) = (inst.nf, inst.ef);
    let mut coords = inst.coords.clone();
    coords.resize(n_max, [0.0, 0.0]);

    let mut node_features = vec![0.0; t_max * n_max * nf];
    let mut edge_features = vec![0.0; t_max * n_max * n_max * ef];
    let mut masks = vec![0u8; t_max * n_max];
    for s in 0..t_max {
        // Timesteps past the original t reuse the final recorded row, the
        // same alignment rule the decoder applies.
        let src = s.min(inst.t - 1);
        for i in 0..inst.n {
            for f in 0..nf {
                node_features[(s * n_max + i) * nf + f] = inst.node_feat(src, i, f);
            }
            for j in 0..inst.n {
                for k in 0..ef {
                    edge_features[((s * n_max + i) * n_max + j) * ef + k] =
                        inst.edge_feat(src, i, j, k);
                }
            }
            masks[s * n_max + i] = inst.masks[src * inst.n + i];
        }
    }
    Instance {
        n: n_max,
        t: t_max,
        nf,
        ef,
        coords,
        node_features,
        edge_features,
        masks,
        label_route: inst.label_route.clone(),
    }
}
