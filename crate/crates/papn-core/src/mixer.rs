//! Attention mixing: reduce the local node embeddings over the node axis and
//! combine the result with the global context.
//!
//! The aggregate supports sum/mean/max/min reductions; mixing either adds the
//! broadcast aggregate to the context or randomly selects, element by
//! element, which of the two sources survives. Selection masks are frozen
//! per (seed, step) so forward passes are reproducible and gradients flow
//! only to the selected source. The mixed embedding is layer-normalized with
//! learnable gain and shift.

use crate::autodiff::{Graph, Result, Var};
use crate::config::{Aggregation, MeanDenominator, Mixing, NormAxis, TrainConfig};
use crate::params::{Bindings, ParamId, ParamSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mixing stage with its post-norm parameters.
pub struct Mixer {
    gamma: ParamId,
    beta: ParamId,
    aggregation: Aggregation,
    mixing: Mixing,
    mixer_seed: u64,
    norm_axis: NormAxis,
    mean_denominator: MeanDenominator,
}

/// Forward results of [`Mixer::mix`].
pub struct MixOut {
    /// Normalized mixed embedding `[n,D]`.
    pub mixed: Var,
    /// Pre-normalization combination `[n,D]`.
    pub pre_norm: Var,
    /// For `random_select`: true where the local source was taken.
    pub took_local: Option<Vec<bool>>,
}

impl Mixer {
    pub fn new(params: &mut ParamSet, cfg: &TrainConfig) -> Self {
        Mixer {
            gamma: params.add_ones("mix.gamma", 1, cfg.hidden),
            beta: params.add_zeros("mix.beta", 1, cfg.hidden),
            aggregation: cfg.aggregation,
            mixing: cfg.mixing,
            mixer_seed: cfg.mixer_seed,
            norm_axis: cfg.norm_axis,
            mean_denominator: cfg.mean_denominator,
        }
    }

    /// Reduces local node embeddings `[n,D]` over the node axis to `[1,D]`.
    pub fn aggregate(&self, g: &mut Graph, local: Var) -> Result<Var> {
        let (n, d) = g.shape(local);
        match self.aggregation {
            Aggregation::Sum => g.sum(local, 0),
            Aggregation::Mean => match self.mean_denominator {
                MeanDenominator::Nodes => g.mean(local, 0),
                MeanDenominator::Hidden => {
                    let _ = n;
                    let s = g.sum(local, 0)?;
                    Ok(g.scale(s, 1.0 / d as f64))
                }
            },
            Aggregation::Max => g.max(local, 0),
            Aggregation::Min => g.min(local, 0),
        }
    }

    /// Combines the `[1,D]` aggregate with the `[n,D]` context at decode
    /// step `step` and layer-normalizes the result.
    pub fn mix(
        &self,
        g: &mut Graph,
        b: &Bindings,
        local_agg: Var,
        global_ctx: Var,
        step: usize,
    ) -> Result<MixOut> {
        let (n, d) = g.shape(global_ctx);
        let local = g.tile_rows(local_agg, n)?;
        let (pre_norm, took_local) = match self.mixing {
            Mixing::Sum => (g.add(local, global_ctx)?, None),
            Mixing::RandomSelect => {
                // selection mask frozen per (seed, step): straight-through,
                // gradient flows only to the chosen source
                let mut rng = ChaCha8Rng::seed_from_u64(self.mixer_seed);
                rng.set_stream(step as u64 + 1);
                let take_local: Vec<bool> = (0..n * d).map(|_| rng.gen_bool(0.5)).collect();
                let keep_global: Vec<bool> = take_local.iter().map(|&t| !t).collect();
                let local_part = g.masked_fill(local, &take_local, 0.0)?;
                let global_part = g.masked_fill(global_ctx, &keep_global, 0.0)?;
                (g.add(local_part, global_part)?, Some(take_local))
            }
        };
        let axis = match self.norm_axis {
            NormAxis::Feature => 1,
            NormAxis::Batch => 0,
        };
        let mixed = g.layer_norm(pre_norm, b.var(self.gamma), b.var(self.beta), axis)?;
        Ok(MixOut {
            mixed,
            pre_norm,
            took_local,
        })
    }
}
