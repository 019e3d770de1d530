//! The assembled route-prediction model.
//!
//! Per decode step: the proximity branch re-encodes the nodes under that
//! step's availability mask, its node-axis aggregate is mixed with the
//! global transformer context (or, under the `opapn` ablation, with the
//! local embedding itself, leaving the transformer untouched), and the
//! pointer decoder emits a distribution over the admissible nodes. Training
//! minimizes the teacher-forced negative log-likelihood of the labeled
//! route; prediction decodes greedily.

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::config::{Ablation, ConfigError, TrainConfig};
use crate::decoder::{DecodeError, Decoder, StepError};
use crate::encoder::{Encoder, LocalOut};
use crate::instance::Instance;
use crate::mixer::Mixer;
use crate::params::{Bindings, ParamSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("instance has {got} {what} features, model expects {expected}")]
    FeatureMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("empty batch")]
    EmptyBatch,
}

impl From<StepError> for ModelError {
    fn from(e: StepError) -> Self {
        match e {
            StepError::Autodiff(e) => ModelError::Autodiff(e),
            StepError::Decode(e) => ModelError::Decode(e),
        }
    }
}

/// Encoder + mixer + pointer decoder with their shared parameter set.
pub struct PapnModel {
    pub params: ParamSet,
    pub cfg: TrainConfig,
    encoder: Encoder,
    mixer: Mixer,
    decoder: Decoder,
}

impl PapnModel {
    /// Builds a model with parameters drawn from a generator seeded by
    /// `cfg.seed`; the same config always yields bit-identical weights.
    pub fn new(cfg: TrainConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        let encoder = Encoder::new(&mut params, &cfg, &mut rng);
        let mixer = Mixer::new(&mut params, &cfg);
        let decoder = Decoder::new(&mut params, &cfg, &mut rng);
        Ok(PapnModel {
            params,
            cfg,
            encoder,
            mixer,
            decoder,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    fn check_features(&self, inst: &Instance) -> Result<(), ModelError> {
        if inst.nf != self.cfg.nf {
            return Err(ModelError::FeatureMismatch {
                what: "node",
                expected: self.cfg.nf,
                got: inst.nf,
            });
        }
        if inst.ef != self.cfg.ef {
            return Err(ModelError::FeatureMismatch {
                what: "edge",
                expected: self.cfg.ef,
                got: inst.ef,
            });
        }
        Ok(())
    }

    /// Per-step node context: the mixed embedding the decoder points into,
    /// plus the filtered mask attention.
    fn step_context(
        &self,
        g: &mut Graph,
        b: &Bindings,
        inst: &Instance,
        step: usize,
        global_ctx: Option<Var>,
        local_cache: &mut [Option<LocalOut>],
    ) -> Result<(Var, Var), ModelError> {
        let row = step.min(inst.t - 1);
        if local_cache[row].is_none() {
            local_cache[row] = Some(self.encoder.local(g, b, inst, step)?);
        }
        let local = local_cache[row].clone().expect("just filled");
        let agg = self.mixer.aggregate(g, local.nodes)?;
        let ctx_nodes = match self.cfg.ablation {
            Ablation::None => global_ctx.expect("global context built for full model"),
            Ablation::Opapn => local.nodes,
        };
        let mix = self.mixer.mix(g, b, agg, ctx_nodes, step)?;
        Ok((mix.mixed, local.matt))
    }

    fn global_context(
        &self,
        g: &mut Graph,
        b: &Bindings,
        inst: &Instance,
    ) -> Result<Option<Var>, ModelError> {
        Ok(match self.cfg.ablation {
            Ablation::None => Some(self.encoder.global(g, b, inst)?.0),
            Ablation::Opapn => None,
        })
    }

    fn live_row(in_target: &[bool], visited: &[bool], mask_row: &[u8]) -> Vec<bool> {
        (0..in_target.len())
            .map(|i| in_target[i] && !visited[i] && mask_row[i] == 1)
            .collect()
    }

    fn target_set(inst: &Instance) -> Vec<bool> {
        let mut in_target = vec![false; inst.n];
        for &v in &inst.label_route {
            in_target[v] = true;
        }
        in_target
    }

    /// Teacher-forced negative log-likelihood of the labeled route, summed
    /// over decode steps, as a differentiable scalar.
    pub fn forward_nll(
        &self,
        g: &mut Graph,
        b: &Bindings,
        inst: &Instance,
    ) -> Result<Var, ModelError> {
        self.check_features(inst)?;
        if inst.label_route.is_empty() {
            return Ok(g.constant(1, 1, vec![0.0])?);
        }
        let global_ctx = self.global_context(g, b, inst)?;
        let mut local_cache = vec![None; inst.t];
        let in_target = Self::target_set(inst);
        let mut state = self.decoder.init_state(g, inst.n)?;
        let mut z = self.decoder.start_token(b);
        let mut log_terms = Vec::with_capacity(inst.label_route.len());
        for (step, &label) in inst.label_route.iter().enumerate() {
            let (mixed, matt) =
                self.step_context(g, b, inst, step, global_ctx, &mut local_cache)?;
            let live = Self::live_row(&in_target, &state.visited, inst.decode_mask_row(step));
            let out = self.decoder.step(g, b, state, mixed, matt, &live, z)?;
            let p_label = g.slice_cols(out.probs, label, label + 1)?;
            log_terms.push(g.log(p_label));
            state = out.state;
            Decoder::advance(&mut state, label);
            z = g.row(mixed, label)?;
        }
        let stacked = g.concat(&log_terms, 1)?;
        let total = g.sum_all(stacked);
        Ok(g.scale(total, -1.0))
    }

    /// Mean of the per-instance losses, on one shared graph.
    pub fn batch_nll(
        &self,
        g: &mut Graph,
        b: &Bindings,
        batch: &[&Instance],
    ) -> Result<Var, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let losses = batch
            .iter()
            .map(|inst| self.forward_nll(g, b, inst))
            .collect::<Result<Vec<_>, _>>()?;
        let stacked = g.concat(&losses, 1)?;
        let total = g.sum_all(stacked);
        Ok(g.scale(total, 1.0 / batch.len() as f64))
    }

    /// Loss value without gradients, on a throwaway graph.
    pub fn nll_value(&self, inst: &Instance) -> Result<f64, ModelError> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let loss = self.forward_nll(&mut g, &b, inst)?;
        Ok(g.value(loss))
    }

    /// Greedy decode: at each step pick the highest-probability admissible
    /// node (ties to the lowest index). The result visits exactly the
    /// labeled set, in the model's predicted order.
    pub fn predict(&self, inst: &Instance) -> Result<Vec<usize>, ModelError> {
        Ok(self.predict_with_probs(inst)?.route)
    }

    /// Greedy decode that also reports, per step, the probability the model
    /// assigned to the node it chose.
    pub fn predict_with_probs(&self, inst: &Instance) -> Result<Prediction, ModelError> {
        self.check_features(inst)?;
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let global_ctx = self.global_context(&mut g, &b, inst)?;
        let mut local_cache = vec![None; inst.t];
        let in_target = Self::target_set(inst);
        let mut state = self.decoder.init_state(&mut g, inst.n)?;
        let mut z = self.decoder.start_token(&b);
        let mut route = Vec::with_capacity(inst.label_route.len());
        let mut stepwise_probs = Vec::with_capacity(inst.label_route.len());
        for step in 0..inst.label_route.len() {
            let (mixed, matt) =
                self.step_context(&mut g, &b, inst, step, global_ctx, &mut local_cache)?;
            let live = Self::live_row(&in_target, &state.visited, inst.decode_mask_row(step));
            let out = self.decoder.step(&mut g, &b, state, mixed, matt, &live, z)?;
            // strictly-greater scan: ties resolve to the lowest index, and
            // non-finite garbage (e.g. after a diverged training run) still
            // yields a deterministic admissible pick instead of a panic
            let probs = g.data(out.probs);
            let mut chosen = live
                .iter()
                .position(|&l| l)
                .expect("step already checked the live set is non-empty");
            let mut best = f64::NEG_INFINITY;
            for (i, &p) in probs.iter().enumerate() {
                if live[i] && p > best {
                    chosen = i;
                    best = p;
                }
            }
            route.push(chosen);
            stepwise_probs.push(probs[chosen]);
            state = out.state;
            Decoder::advance(&mut state, chosen);
            z = g.row(mixed, chosen)?;
        }
        Ok(Prediction {
            route,
            stepwise_probs,
        })
    }
}

/// A greedy decode with the chosen node's probability at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub route: Vec<usize>,
    pub stepwise_probs: Vec<f64>,
}
