//! Named parameter tensors with Adam optimizer state.
//!
//! A [`ParamSet`] owns every learnable tensor in a model plus its Adam first
//! and second moments. Each forward pass binds the set into a fresh
//! [`crate::Graph`] as tracked leaves; after `backward`, [`ParamSet::adam_step`]
//! reads the accumulated gradients back out and updates the tensors in place.

use crate::autodiff::{Graph, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Stable handle to one tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    /// Adam first moment.
    pub m: Vec<f64>,
    /// Adam second moment.
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub tensors: Vec<ParamTensor>,
    /// Adam timestep (number of optimizer steps taken).
    pub adam_t: u64,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            tensors: Vec::new(),
            adam_t: 0,
        }
    }

    fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, data: Vec<f64>) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.tensors.iter().all(|t| t.name != name),
            "duplicate parameter name {name}"
        );
        debug_assert_eq!(rows * cols, data.len());
        let len = data.len();
        self.tensors.push(ParamTensor {
            name,
            rows,
            cols,
            data,
            m: vec![0.0; len],
            v: vec![0.0; len],
        });
        ParamId(self.tensors.len() - 1)
    }

    /// Xavier-uniform initialized weight: entries drawn from
    /// `U(-b, b)` with `b = sqrt(6 / (rows + cols))`.
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.add(name, rows, cols, data)
    }

    /// Zero-initialized tensor (biases, norm shifts).
    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, rows, cols, vec![0.0; rows * cols])
    }

    /// One-initialized tensor (norm gains).
    pub fn add_ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, rows, cols, vec![1.0; rows * cols])
    }

    pub fn tensor(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.tensors
            .iter()
            .position(|t| t.name == name)
            .map(ParamId)
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Binds every tensor into `g` as a tracked leaf; index-aligned with
    /// `tensors`.
    pub fn bind(&self, g: &mut Graph) -> Bindings {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                g.leaf(t.rows, t.cols, t.data.clone())
                    .expect("parameter shapes are constructed consistent")
            })
            .collect();
        Bindings { vars }
    }

    /// One Adam update from the gradients accumulated in `g` for `binding`.
    /// When `clip_norm` is set, gradients are globally rescaled so their
    /// joint L2 norm does not exceed it. Returns the pre-clip global norm.
    pub fn adam_step(
        &mut self,
        g: &Graph,
        binding: &Bindings,
        lr: f64,
        clip_norm: Option<f64>,
    ) -> f64 {
        assert_eq!(binding.vars.len(), self.tensors.len());
        let mut sq_norm = 0.0;
        for &var in &binding.vars {
            let grad = g.grad(var).expect("parameters are tracked leaves");
            sq_norm += grad.iter().map(|x| x * x).sum::<f64>();
        }
        let norm = sq_norm.sqrt();
        let scale = match clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.adam_t += 1;
        let t = self.adam_t as i32;
        let bias1 = 1.0 - BETA1.powi(t);
        let bias2 = 1.0 - BETA2.powi(t);
        for (tensor, &var) in self.tensors.iter_mut().zip(&binding.vars) {
            let grad = g.grad(var).expect("parameters are tracked leaves");
            for j in 0..tensor.data.len() {
                let gj = grad[j] * scale;
                tensor.m[j] = BETA1 * tensor.m[j] + (1.0 - BETA1) * gj;
                tensor.v[j] = BETA2 * tensor.v[j] + (1.0 - BETA2) * gj * gj;
                let m_hat = tensor.m[j] / bias1;
                let v_hat = tensor.v[j] / bias2;
                tensor.data[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        norm
    }
}

/// Graph leaves for one forward pass, index-aligned with
/// [`ParamSet::tensors`].
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
