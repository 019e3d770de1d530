//! Reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! Every network layer in this crate is composed from the primitives here, so
//! no layer carries a hand-derived backward pass. A [`Graph`] is an arena of
//! nodes recorded in topological (creation) order; [`Graph::backward`] replays
//! it in reverse exactly once, accumulating adjoints into each tracked node's
//! persistent `grad` buffer.

use thiserror::Error;

/// Sentinel written into masked positions before a softmax. Slots holding it
/// receive exactly zero probability and zero gradient.
pub const MASKED: f64 = f64::NEG_INFINITY;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("dimension mismatch in {op}: left is {lhs:?}, right is {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op}: shape {got:?} is invalid ({expected})")]
    BadShape {
        op: &'static str,
        got: (usize, usize),
        expected: String,
    },
    #[error("softmax slice {index} has every entry masked")]
    DegenerateSlice { index: usize },
    #[error("backward root must be a scalar, got {got:?}")]
    NonScalarRoot { got: (usize, usize) },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    /// `[m,n] + [1,n]`, the vector broadcast over rows.
    AddRow(Var, Var),
    /// `[m,n] * [1,n]` elementwise, the vector broadcast over rows.
    MulRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Log(Var),
    /// axis 1: each row sums to one; axis 0: each column.
    Softmax {
        x: Var,
        axis: usize,
    },
    /// Row-wise normalization without affine parameters; `xhat` and the
    /// reciprocal sigma per row are saved for the backward pass.
    NormRows {
        x: Var,
        xhat: Vec<f64>,
        inv_sigma: Vec<f64>,
    },
    Sum {
        x: Var,
        axis: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    /// `arg` holds, per output slot, the flat index of the first attaining
    /// element in row-major order.
    MaxMin {
        x: Var,
        arg: Vec<usize>,
    },
    SumAll(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    /// Positions with `keep == false` were overwritten by a constant and pass
    /// no gradient.
    MaskedFill {
        x: Var,
        keep: Vec<bool>,
    },
    Reshape(Var),
    Transpose(Var),
    SliceCols {
        x: Var,
        from: usize,
    },
    SliceRows {
        x: Var,
        from: usize,
    },
    /// `[1,n]` stacked into `[reps,n]`.
    TileRows(Var),
    /// `[m,1]` stacked into `[m,reps]`.
    TileCols(Var),
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    /// Persistent accumulator; `None` for untracked constants.
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Arena of recorded operations. Creation order is topological order: an op
/// only ever references earlier nodes, so backward walks indices in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, track: bool, op: Op) -> Var {
        debug_assert_eq!(rows * cols, data.len());
        let grad = track.then(|| vec![0.0; data.len()]);
        self.nodes.push(Node {
            rows,
            cols,
            data,
            grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradient-tracked leaf (parameters and anything else differentiated).
    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(AutodiffError::BadShape {
                op: "leaf",
                got: (rows, cols),
                expected: format!("shape product {} to match data length {}", rows * cols, data.len()),
            });
        }
        Ok(self.push(rows, cols, data, true, Op::Leaf))
    }

    /// Untracked input (instance features, masks); receives no grad buffer.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(AutodiffError::BadShape {
                op: "constant",
                got: (rows, cols),
                expected: format!("shape product {} to match data length {}", rows * cols, data.len()),
            });
        }
        Ok(self.push(rows, cols, data, false, Op::Leaf))
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Value of a 1x1 node.
    pub fn value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.shape(v), (1, 1));
        self.nodes[v.0].data[0]
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = &mut n.grad {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    // ── primitive ops ────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(AutodiffError::Dimension {
                op: "matmul",
                lhs: (m, k),
                rhs: (k2, n),
            });
        }
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        Ok(self.push(m, n, out, true, Op::Matmul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(AutodiffError::Dimension {
                op: "add",
                lhs: sa,
                rhs: sb,
            });
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(sa.0, sa.1, out, true, Op::Add(a, b)))
    }

    /// `a[m,n] + v[1,n]` with `v` added to every row.
    pub fn add_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let sv = self.shape(v);
        if sv != (1, n) {
            return Err(AutodiffError::Dimension {
                op: "add_row",
                lhs: (m, n),
                rhs: sv,
            });
        }
        let vd = self.data(v).to_vec();
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + vd[i % n])
            .collect();
        Ok(self.push(m, n, out, true, Op::AddRow(a, v)))
    }

    /// `a[m,n] * v[1,n]` elementwise with `v` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let sv = self.shape(v);
        if sv != (1, n) {
            return Err(AutodiffError::Dimension {
                op: "mul_row",
                lhs: (m, n),
                rhs: sv,
            });
        }
        let vd = self.data(v).to_vec();
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x * vd[i % n])
            .collect();
        Ok(self.push(m, n, out, true, Op::MulRow(a, v)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(AutodiffError::Dimension {
                op: "mul",
                lhs: sa,
                rhs: sb,
            });
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(sa.0, sa.1, out, true, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let (m, n) = self.shape(x);
        let out: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        self.push(m, n, out, true, Op::Scale(x, c))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let out: Vec<f64> = self.data(x).iter().map(|v| v.tanh()).collect();
        self.push(m, n, out, true, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        self.push(m, n, out, true, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let out: Vec<f64> = self.data(x).iter().map(|v| v.max(0.0)).collect();
        self.push(m, n, out, true, Op::Relu(x))
    }

    /// Negative branch has gradient `slope`; the subgradient at zero is also
    /// `slope`.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let (m, n) = self.shape(x);
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        self.push(m, n, out, true, Op::LeakyRelu(x, slope))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let out: Vec<f64> = self.data(x).iter().map(|v| v.exp()).collect();
        self.push(m, n, out, true, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let out: Vec<f64> = self.data(x).iter().map(|v| v.ln()).collect();
        self.push(m, n, out, true, Op::Log(x))
    }

    /// Numerically stabilized softmax along `axis` (1 = per row, 0 = per
    /// column). Entries equal to [`MASKED`] come out exactly zero. A slice
    /// with every entry masked is an error: callers must guarantee at least
    /// one live entry.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if axis > 1 {
            return Err(AutodiffError::BadShape {
                op: "softmax",
                got: (m, n),
                expected: format!("axis 0 or 1, got {axis}"),
            });
        }
        let xd = self.data(x);
        let mut out = vec![0.0; m * n];
        let (slices, len, stride_slice, stride_elem) = if axis == 1 {
            (m, n, n, 1)
        } else {
            (n, m, 1, n)
        };
        for s in 0..slices {
            let idx = |e: usize| s * stride_slice + e * stride_elem;
            let mut mx = MASKED;
            for e in 0..len {
                let v = xd[idx(e)];
                if v > mx {
                    mx = v;
                }
            }
            if mx == MASKED {
                return Err(AutodiffError::DegenerateSlice { index: s });
            }
            let mut sum = 0.0;
            for e in 0..len {
                let v = xd[idx(e)];
                let ev = if v == MASKED { 0.0 } else { (v - mx).exp() };
                out[idx(e)] = ev;
                sum += ev;
            }
            for e in 0..len {
                out[idx(e)] /= sum;
            }
        }
        Ok(self.push(m, n, out, true, Op::Softmax { x, axis }))
    }

    /// Row-wise normalization `(x - mu) / sqrt(var + 1e-5)` without affine
    /// parameters; compose with [`Graph::mul_row`] / [`Graph::add_row`] for
    /// gamma and beta, or use [`Graph::layer_norm`].
    pub fn norm_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let xd = self.data(x);
        let mut out = vec![0.0; m * n];
        let mut inv_sigma = vec![0.0; m];
        for r in 0..m {
            let row = &xd[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_sigma[r] = is;
            for c in 0..n {
                out[r * n + c] = (row[c] - mu) * is;
            }
        }
        let xhat = out.clone();
        self.push(
            m,
            n,
            out,
            true,
            Op::NormRows {
                x,
                xhat,
                inv_sigma,
            },
        )
    }

    /// Layer normalization with learnable `gamma`/`beta` (both `[1,D]`).
    /// `axis = 1` normalizes each row over the feature axis; `axis = 0`
    /// normalizes each feature over the rows (the batch-wise reading),
    /// scaling by gamma per feature in both cases.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        let sg = self.shape(gamma);
        if sg != (1, n) || self.shape(beta) != (1, n) {
            return Err(AutodiffError::Dimension {
                op: "layer_norm",
                lhs: (m, n),
                rhs: sg,
            });
        }
        let xhat = if axis == 1 {
            self.norm_rows(x)
        } else {
            let xt = self.transpose(x);
            let nt = self.norm_rows(xt);
            self.transpose(nt)
        };
        let scaled = self.mul_row(xhat, gamma)?;
        self.add_row(scaled, beta)
    }

    /// Sum along `axis`: axis 0 collapses rows (`[m,n] -> [1,n]`), axis 1
    /// collapses columns (`[m,n] -> [m,1]`).
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        let xd = self.data(x);
        let (out, rows, cols) = reduce(xd, m, n, axis, "sum")?;
        Ok(self.push(rows, cols, out, true, Op::Sum { x, axis }))
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        let denom = if axis == 0 { m } else { n } as f64;
        let xd = self.data(x);
        let (mut out, rows, cols) = reduce(xd, m, n, axis, "mean")?;
        out.iter_mut().for_each(|v| *v /= denom);
        Ok(self.push(rows, cols, out, true, Op::Mean { x, axis }))
    }

    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.extremum(x, axis, true)
    }

    pub fn min(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.extremum(x, axis, false)
    }

    /// Gradient is routed to the first attaining index in row-major order.
    fn extremum(&mut self, x: Var, axis: usize, want_max: bool) -> Result<Var> {
        let (m, n) = self.shape(x);
        if axis > 1 {
            return Err(AutodiffError::BadShape {
                op: "max/min",
                got: (m, n),
                expected: format!("axis 0 or 1, got {axis}"),
            });
        }
        let xd = self.data(x);
        let (slices, len, rows, cols) = if axis == 0 {
            (n, m, 1, n)
        } else {
            (m, n, m, 1)
        };
        let mut out = vec![0.0; slices];
        let mut arg = vec![0usize; slices];
        for s in 0..slices {
            let idx = |e: usize| {
                if axis == 0 {
                    e * n + s
                } else {
                    s * n + e
                }
            };
            let mut best = xd[idx(0)];
            let mut best_i = idx(0);
            for e in 1..len {
                let v = xd[idx(e)];
                let better = if want_max { v > best } else { v < best };
                if better {
                    best = v;
                    best_i = idx(e);
                }
            }
            out[s] = best;
            arg[s] = best_i;
        }
        Ok(self.push(rows, cols, out, true, Op::MaxMin { x, arg }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total: f64 = self.data(x).iter().sum();
        self.push(1, 1, vec![total], true, Op::SumAll(x))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(AutodiffError::BadShape {
                op: "concat",
                got: (0, 0),
                expected: "at least one part and axis 0 or 1".to_string(),
            });
        }
        let (r0, c0) = self.shape(parts[0]);
        if axis == 0 {
            let mut rows = 0;
            for &p in parts {
                let (r, c) = self.shape(p);
                if c != c0 {
                    return Err(AutodiffError::Dimension {
                        op: "concat",
                        lhs: (r0, c0),
                        rhs: (r, c),
                    });
                }
                rows += r;
            }
            let mut out = Vec::with_capacity(rows * c0);
            for &p in parts {
                out.extend_from_slice(self.data(p));
            }
            Ok(self.push(
                rows,
                c0,
                out,
                true,
                Op::Concat {
                    parts: parts.to_vec(),
                    axis,
                },
            ))
        } else {
            let mut cols = 0;
            for &p in parts {
                let (r, c) = self.shape(p);
                if r != r0 {
                    return Err(AutodiffError::Dimension {
                        op: "concat",
                        lhs: (r0, c0),
                        rhs: (r, c),
                    });
                }
                cols += c;
            }
            let mut out = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for &p in parts {
                    let (_, c) = self.shape(p);
                    let pd = self.data(p);
                    out.extend_from_slice(&pd[r * c..(r + 1) * c]);
                }
            }
            Ok(self.push(
                r0,
                cols,
                out,
                true,
                Op::Concat {
                    parts: parts.to_vec(),
                    axis,
                },
            ))
        }
    }

    /// Writes `value` wherever `keep` is false; those slots pass no gradient.
    pub fn masked_fill(&mut self, x: Var, keep: &[bool], value: f64) -> Result<Var> {
        let (m, n) = self.shape(x);
        if keep.len() != m * n {
            return Err(AutodiffError::BadShape {
                op: "masked_fill",
                got: (m, n),
                expected: format!("mask length {} to equal element count {}", keep.len(), m * n),
            });
        }
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .zip(keep)
            .map(|(&v, &k)| if k { v } else { value })
            .collect();
        Ok(self.push(
            m,
            n,
            out,
            true,
            Op::MaskedFill {
                x,
                keep: keep.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if m * n != rows * cols {
            return Err(AutodiffError::BadShape {
                op: "reshape",
                got: (rows, cols),
                expected: format!("element count {} to match input {}", rows * cols, m * n),
            });
        }
        let out = self.data(x).to_vec();
        Ok(self.push(rows, cols, out, true, Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let xd = self.data(x);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = xd[r * n + c];
            }
        }
        self.push(n, m, out, true, Op::Transpose(x))
    }

    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if from >= to || to > n {
            return Err(AutodiffError::BadShape {
                op: "slice_cols",
                got: (m, n),
                expected: format!("0 <= {from} < {to} <= {n}"),
            });
        }
        let w = to - from;
        let xd = self.data(x);
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&xd[r * n + from..r * n + to]);
        }
        Ok(self.push(m, w, out, true, Op::SliceCols { x, from }))
    }

    pub fn slice_rows(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if from >= to || to > m {
            return Err(AutodiffError::BadShape {
                op: "slice_rows",
                got: (m, n),
                expected: format!("0 <= {from} < {to} <= {m}"),
            });
        }
        let out = self.data(x)[from * n..to * n].to_vec();
        Ok(self.push(to - from, n, out, true, Op::SliceRows { x, from }))
    }

    /// Single row `i` of a matrix as `[1,n]`.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.slice_rows(x, i, i + 1)
    }

    /// `[1,n]` repeated into `reps` rows.
    pub fn tile_rows(&mut self, x: Var, reps: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if m != 1 {
            return Err(AutodiffError::BadShape {
                op: "tile_rows",
                got: (m, n),
                expected: "a [1,n] row vector".to_string(),
            });
        }
        let mut out = Vec::with_capacity(reps * n);
        for _ in 0..reps {
            out.extend_from_slice(self.data(x));
        }
        Ok(self.push(reps, n, out, true, Op::TileRows(x)))
    }

    /// `[m,1]` repeated into `reps` columns.
    pub fn tile_cols(&mut self, x: Var, reps: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if n != 1 {
            return Err(AutodiffError::BadShape {
                op: "tile_cols",
                got: (m, n),
                expected: "a [m,1] column vector".to_string(),
            });
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(m * reps);
        for r in 0..m {
            for _ in 0..reps {
                out.push(xd[r]);
            }
        }
        Ok(self.push(m, reps, out, true, Op::TileCols(x)))
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Adjoints are computed in a scratch
    /// buffer seeded with 1.0 at the root and added into each tracked node's
    /// persistent `grad` at the end, so calling twice without zeroing doubles
    /// every gradient and the root's grad is exactly 1.0 after one call.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.shape(root) != (1, 1) {
            return Err(AutodiffError::NonScalarRoot {
                got: self.shape(root),
            });
        }
        let n_nodes = self.nodes.len();
        let mut adj: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.data.len()])
            .collect();
        adj[root.0][0] = 1.0;

        for i in (0..=root.0).rev() {
            let g = std::mem::take(&mut adj[i]);
            if g.iter().all(|&v| v == 0.0) {
                adj[i] = g;
                continue;
            }
            let (rows, cols) = (self.nodes[i].rows, self.nodes[i].cols);
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let (_, n) = self.shape(*b);
                    // a.grad += g . b^T ; b.grad += a^T . g
                    let bd = &self.nodes[b.0].data;
                    let ad = &self.nodes[a.0].data;
                    let (ai, bi) = (a.0, b.0);
                    let mut ga = vec![0.0; m * k];
                    let mut gb = vec![0.0; k * n];
                    for r in 0..m {
                        for c in 0..n {
                            let gv = g[r * n + c];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                ga[r * k + p] += gv * bd[p * n + c];
                                gb[p * n + c] += gv * ad[r * k + p];
                            }
                        }
                    }
                    add_into(&mut adj[ai], &ga);
                    add_into(&mut adj[bi], &gb);
                }
                Op::Add(a, b) => {
                    let (a, b) = (a.0, b.0);
                    add_into(&mut adj[a], &g);
                    add_into(&mut adj[b], &g);
                }
                Op::AddRow(a, v) => {
                    let (a, v) = (a.0, v.0);
                    add_into(&mut adj[a], &g);
                    let n = cols;
                    for (j, gv) in g.iter().enumerate() {
                        adj[v][j % n] += gv;
                    }
                }
                Op::MulRow(a, v) => {
                    let n = cols;
                    let vd = self.nodes[v.0].data.clone();
                    let ad = self.nodes[a.0].data.clone();
                    let (a, v) = (a.0, v.0);
                    for (j, gv) in g.iter().enumerate() {
                        adj[a][j] += gv * vd[j % n];
                        adj[v][j % n] += gv * ad[j];
                    }
                }
                Op::Mul(a, b) => {
                    let bd = self.nodes[b.0].data.clone();
                    let ad = self.nodes[a.0].data.clone();
                    let (a, b) = (a.0, b.0);
                    for j in 0..g.len() {
                        adj[a][j] += g[j] * bd[j];
                        adj[b][j] += g[j] * ad[j];
                    }
                }
                Op::Scale(x, c) => {
                    let (x, c) = (x.0, *c);
                    for j in 0..g.len() {
                        adj[x][j] += g[j] * c;
                    }
                }
                Op::Tanh(x) => {
                    let y = &self.nodes[i].data;
                    let x = x.0;
                    for j in 0..g.len() {
                        adj[x][j] += g[j] * (1.0 - y[j] * y[j]);
                    }
                }
                Op::Sigmoid(x) => {
                    let y = &self.nodes[i].data;
                    let x = x.0;
                    for j in 0..g.len() {
                        adj[x][j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                }
                Op::Relu(x) => {
                    let xd = &self.nodes[x.0].data;
                    let x = x.0;
                    for j in 0..g.len() {
                        if self.nodes[x].data[j] > 0.0 {
                            adj[x][j] += g[j];
                        }
                    }
                    let _ = xd;
                }
                Op::LeakyRelu(x, slope) => {
                    let slope = *slope;
                    let x = x.0;
                    for j in 0..g.len() {
                        let d = if self.nodes[x].data[j] > 0.0 { 1.0 } else { slope };
                        adj[x][j] += g[j] * d;
                    }
                }
                Op::Exp(x) => {
                    let y = &self.nodes[i].data;
                    let x = x.0;
                    for j in 0..g.len() {
                        adj[x][j] += g[j] * y[j];
                    }
                }
                Op::Log(x) => {
                    let x = x.0;
                    for j in 0..g.len() {
                        adj[x][j] += g[j] / self.nodes[x].data[j];
                    }
                }
                Op::Softmax { x, axis } => {
                    let y = &self.nodes[i].data;
                    let axis = *axis;
                    let (slices, len, ss, se) = if axis == 1 {
                        (rows, cols, cols, 1)
                    } else {
                        (cols, rows, 1, cols)
                    };
                    let x = x.0;
                    for s in 0..slices {
                        let idx = |e: usize| s * ss + e * se;
                        let mut dot = 0.0;
                        for e in 0..len {
                            dot += g[idx(e)] * y[idx(e)];
                        }
                        for e in 0..len {
                            let j = idx(e);
                            adj[x][j] += y[j] * (g[j] - dot);
                        }
                    }
                }
                Op::NormRows { x, xhat, inv_sigma } => {
                    let n = cols as f64;
                    let x = x.0;
                    for r in 0..rows {
                        let base = r * cols;
                        let gr = &g[base..base + cols];
                        let xh = &xhat[base..base + cols];
                        let is = inv_sigma[r];
                        let g_mean = gr.iter().sum::<f64>() / n;
                        let gx_mean = gr.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
                        for c in 0..cols {
                            adj[x][base + c] += is * (gr[c] - g_mean - xh[c] * gx_mean);
                        }
                    }
                }
                Op::Sum { x, axis } => {
                    let (xr, xc) = self.shape(*x);
                    let axis = *axis;
                    let x = x.0;
                    for r in 0..xr {
                        for c in 0..xc {
                            let gi = if axis == 0 { c } else { r };
                            adj[x][r * xc + c] += g[gi];
                        }
                    }
                }
                Op::Mean { x, axis } => {
                    let (xr, xc) = self.shape(*x);
                    let axis = *axis;
                    let denom = if axis == 0 { xr } else { xc } as f64;
                    let x = x.0;
                    for r in 0..xr {
                        for c in 0..xc {
                            let gi = if axis == 0 { c } else { r };
                            adj[x][r * xc + c] += g[gi] / denom;
                        }
                    }
                }
                Op::MaxMin { x, arg } => {
                    let x = x.0;
                    for (s, &src) in arg.iter().enumerate() {
                        adj[x][src] += g[s];
                    }
                }
                Op::SumAll(x) => {
                    let x = x.0;
                    for j in 0..self.nodes[x].data.len() {
                        adj[x][j] += g[0];
                    }
                }
                Op::Concat { parts, axis } => {
                    if *axis == 0 {
                        let mut offset = 0;
                        let parts = parts.clone();
                        for p in parts {
                            let len = self.nodes[p.0].data.len();
                            add_into(&mut adj[p.0], &g[offset..offset + len]);
                            offset += len;
                        }
                    } else {
                        let parts = parts.clone();
                        for r in 0..rows {
                            let mut col = 0;
                            for &p in &parts {
                                let (_, pc) = self.shape(p);
                                for c in 0..pc {
                                    adj[p.0][r * pc + c] += g[r * cols + col + c];
                                }
                                col += pc;
                            }
                        }
                    }
                }
                Op::MaskedFill { x, keep } => {
                    let x = x.0;
                    for j in 0..g.len() {
                        if keep[j] {
                            adj[x][j] += g[j];
                        }
                    }
                }
                Op::Reshape(x) => {
                    add_into(&mut adj[x.0], &g);
                }
                Op::Transpose(x) => {
                    // out is [n,m] for x [m,n]
                    let (xm, xn) = self.shape(*x);
                    let x = x.0;
                    for r in 0..rows {
                        for c in 0..cols {
                            adj[x][c * xn + r] += g[r * cols + c];
                        }
                    }
                    let _ = xm;
                }
                Op::SliceCols { x, from } => {
                    let (_, xn) = self.shape(*x);
                    let from = *from;
                    let x = x.0;
                    for r in 0..rows {
                        for c in 0..cols {
                            adj[x][r * xn + from + c] += g[r * cols + c];
                        }
                    }
                }
                Op::SliceRows { x, from } => {
                    let (_, xn) = self.shape(*x);
                    let from = *from;
                    let x = x.0;
                    add_into(&mut adj[x][from * xn..from * xn + rows * cols], &g);
                }
                Op::TileRows(x) => {
                    let x = x.0;
                    for r in 0..rows {
                        for c in 0..cols {
                            adj[x][c] += g[r * cols + c];
                        }
                    }
                }
                Op::TileCols(x) => {
                    let x = x.0;
                    for r in 0..rows {
                        for c in 0..cols {
                            adj[x][r] += g[r * cols + c];
                        }
                    }
                }
            }
            adj[i] = g;
        }

        for i in 0..n_nodes {
            if let Some(grad) = &mut self.nodes[i].grad {
                add_into(grad, &adj[i]);
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for p in 0..k {
            let av = a[r * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[r * n..(r + 1) * n];
            for c in 0..n {
                orow[c] += av * brow[c];
            }
        }
    }
    out
}

fn reduce(
    xd: &[f64],
    m: usize,
    n: usize,
    axis: usize,
    op: &'static str,
) -> Result<(Vec<f64>, usize, usize)> {
    match axis {
        0 => {
            let mut out = vec![0.0; n];
            for r in 0..m {
                for c in 0..n {
                    out[c] += xd[r * n + c];
                }
            }
            Ok((out, 1, n))
        }
        1 => {
            let mut out = vec![0.0; m];
            for r in 0..m {
                out[r] = xd[r * n..(r + 1) * n].iter().sum();
            }
            Ok((out, m, 1))
        }
        _ => Err(AutodiffError::BadShape {
            op,
            got: (m, n),
            expected: format!("axis 0 or 1, got {axis}"),
        }),
    }
}
