//! Autoregressive pointer-network decoder.
//!
//! Each decode step advances an LSTM on the embedding of the previously
//! chosen node (a learned start token at step 0), optionally refines the
//! query through attention glimpses, then points: additive attention logits
//! over candidate nodes, with visited or unavailable nodes pinned to negative
//! infinity, plus a scalarized mask-attention skew. The softmax over those
//! logits IS the output distribution, so excluded nodes get exactly zero
//! probability.

use crate::autodiff::{Graph, Result as AdResult, Var, MASKED};
use crate::config::TrainConfig;
use crate::params::{Bindings, ParamId, ParamSet};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("decode step {step}: no available, unvisited candidate")]
    Exhausted { step: usize },
}

/// Pointer decoder parameters.
pub struct Decoder {
    lstm_wx: ParamId,
    lstm_wh: ParamId,
    lstm_b: ParamId,
    start_token: ParamId,
    glimpse_w: Vec<ParamId>,
    glimpse_v: Vec<ParamId>,
    pointer_w: ParamId,
    pointer_v: ParamId,
    /// Scalarizes the `[n,D]` mask attention into per-node logit skews.
    skew_w: ParamId,
    hidden: usize,
}

/// Recurrent state threaded through a route decode.
#[derive(Debug)]
pub struct DecoderState {
    pub h: Var,
    pub c: Var,
    pub visited: Vec<bool>,
    pub step: usize,
}

/// One decode step's outputs.
#[derive(Debug)]
pub struct StepOut {
    /// Probability row `[1,n]`; zero exactly on excluded nodes.
    pub probs: Var,
    pub state: DecoderState,
}

impl Decoder {
    pub fn new(params: &mut ParamSet, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.hidden;
        Decoder {
            lstm_wx: params.add_xavier("dec.lstm.wx", d, 4 * d, rng),
            lstm_wh: params.add_xavier("dec.lstm.wh", d, 4 * d, rng),
            lstm_b: params.add_zeros("dec.lstm.b", 1, 4 * d),
            start_token: params.add_xavier("dec.start", 1, d, rng),
            glimpse_w: (0..cfg.glimpses)
                .map(|l| params.add_xavier(format!("dec.glimpse{l}.w"), 2 * d, d, rng))
                .collect(),
            glimpse_v: (0..cfg.glimpses)
                .map(|l| params.add_xavier(format!("dec.glimpse{l}.v"), d, 1, rng))
                .collect(),
            pointer_w: params.add_xavier("dec.pointer.w", 2 * d, d, rng),
            pointer_v: params.add_xavier("dec.pointer.v", d, 1, rng),
            skew_w: params.add_xavier("dec.skew.w", d, 1, rng),
            hidden: d,
        }
    }

    /// Fresh state for an `n`-node route: zero hidden and cell vectors,
    /// nothing visited.
    pub fn init_state(&self, g: &mut Graph, n: usize) -> AdResult<DecoderState> {
        let h = g.constant(1, self.hidden, vec![0.0; self.hidden])?;
        let c = g.constant(1, self.hidden, vec![0.0; self.hidden])?;
        Ok(DecoderState {
            h,
            c,
            visited: vec![false; n],
            step: 0,
        })
    }

    /// The learned step-0 input.
    pub fn start_token(&self, b: &Bindings) -> Var {
        b.var(self.start_token)
    }

    /// Additive attention logits `v^T tanh([q; V] W)` for every node row of
    /// `ctx`, as a `[1,n]` row.
    fn attention_logits(
        &self,
        g: &mut Graph,
        q: Var,
        ctx: Var,
        w: Var,
        v: Var,
    ) -> AdResult<Var> {
        let (n, _) = g.shape(ctx);
        let q_tiled = g.tile_rows(q, n)?;
        let joint = g.concat(&[q_tiled, ctx], 1)?;
        let hidden = g.matmul(joint, w)?;
        let act = g.tanh(hidden);
        let scores = g.matmul(act, v)?;
        Ok(g.transpose(scores))
    }

    /// One pointer step. `ctx` is the `[n,D]` node context, `matt` the
    /// `[n,D]` filtered mask attention, `live[i]` whether node `i` is an
    /// admissible choice this step (available, unvisited, in the to-visit
    /// set), and `z` the `[1,D]` input embedding.
    pub fn step(
        &self,
        g: &mut Graph,
        b: &Bindings,
        state: DecoderState,
        ctx: Var,
        matt: Var,
        live: &[bool],
        z: Var,
    ) -> Result<StepOut, StepError> {
        let (n, _) = g.shape(ctx);
        debug_assert_eq!(live.len(), n);
        debug_assert_eq!(state.visited.len(), n);
        if !live.iter().any(|&l| l) {
            return Err(StepError::Decode(DecodeError::Exhausted { step: state.step }));
        }
        let d = self.hidden;

        // LSTM cell: gates in i, f, g, o order
        let zx = g.matmul(z, b.var(self.lstm_wx))?;
        let hh = g.matmul(state.h, b.var(self.lstm_wh))?;
        let gates = g.add(zx, hh)?;
        let gates = g.add_row(gates, b.var(self.lstm_b))?;
        let i_gate = g.slice_cols(gates, 0, d)?;
        let f_gate = g.slice_cols(gates, d, 2 * d)?;
        let g_gate = g.slice_cols(gates, 2 * d, 3 * d)?;
        let o_gate = g.slice_cols(gates, 3 * d, 4 * d)?;
        let i_gate = g.sigmoid(i_gate);
        let f_gate = g.sigmoid(f_gate);
        let g_gate = g.tanh(g_gate);
        let o_gate = g.sigmoid(o_gate);
        let keep_c = g.mul(f_gate, state.c)?;
        let write_c = g.mul(i_gate, g_gate)?;
        let c_next = g.add(keep_c, write_c)?;
        let c_act = g.tanh(c_next);
        let h_next = g.mul(o_gate, c_act)?;

        // glimpse refinements of the query, masked to live candidates
        let mut q = h_next;
        for (w, v) in self.glimpse_w.iter().zip(&self.glimpse_v) {
            let logits = self.attention_logits(g, q, ctx, b.var(*w), b.var(*v))?;
            let masked = g.masked_fill(logits, live, MASKED)?;
            let alpha = g.softmax(masked, 1)?;
            q = g.matmul(alpha, ctx)?;
        }

        // pointer logits plus mask-attention skew, excluded nodes at -inf
        let logits =
            self.attention_logits(g, q, ctx, b.var(self.pointer_w), b.var(self.pointer_v))?;
        let skew_col = g.matmul(matt, b.var(self.skew_w))?;
        let skew = g.transpose(skew_col);
        let skewed = g.add(logits, skew)?;
        let masked = g.masked_fill(skewed, live, MASKED)?;
        let probs = g.softmax(masked, 1)?;

        Ok(StepOut {
            probs,
            state: DecoderState {
                h: h_next,
                c: c_next,
                visited: state.visited,
                step: state.step,
            },
        })
    }

    /// Marks `node` chosen and advances the step counter.
    pub fn advance(state: &mut DecoderState, node: usize) {
        debug_assert!(!state.visited[node]);
        state.visited[node] = true;
        state.step += 1;
    }
}

/// Errors a decode step can raise: graph-level shape problems or route
/// exhaustion.
#[derive(Debug, Error, PartialEq)]
pub enum StepError {
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}
