//! The two caption decoders under comparison: a vanilla LSTM conditioned on
//! the pooled global feature, and a Bahdanau-attention LSTM that re-weights
//! the annotation grid at every step. Both share the embedding/LSTM/output
//! stack; greedy decoding and the doubly-stochastic regularizer live here too.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{END_ID, START_ID};
use crate::encoder::{EncoderConfig, EncoderParams, EncoderVars, FeatureGrid};
use crate::error::{Error, Result};
use crate::nn::{
    lstm_step, DenseLayer, DenseVars, EmbeddingTable, EmbeddingVars, LstmCell, LstmVars,
};
use crate::tensor::{Tape, Tensor, Var};

// ----- attention ------------------------------------------------------------

/// Additive-attention parameters: scores e_i = v . tanh(W_h h_i + W_s s).
#[derive(Debug, Clone)]
pub struct AttentionParams {
    /// Annotation projection [A x D].
    pub w_h: Tensor,
    /// Decoder-state projection [A x hidden].
    pub w_s: Tensor,
    /// Score vector [A].
    pub v: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_h: Var,
    pub w_s: Var,
    pub v: Var,
}

impl AttentionParams {
    pub fn init(
        feature_dim: usize,
        hidden_dim: usize,
        attn_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(AttentionParams {
            w_h: crate::nn::xavier_shaped(vec![attn_dim, feature_dim], feature_dim, attn_dim, rng)?,
            w_s: crate::nn::xavier_shaped(vec![attn_dim, hidden_dim], hidden_dim, attn_dim, rng)?,
            v: crate::nn::xavier_shaped(vec![attn_dim], attn_dim, 1, rng)?,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            w_h: tape.leaf(self.w_h.clone()),
            w_s: tape.leaf(self.w_s.clone()),
            v: tape.leaf(self.v.clone()),
        }
    }
}

/// Per-example cache: the annotation projection W_h h_i is identical at every
/// step, so it is computed once and shared.
#[derive(Debug, Clone, Copy)]
pub struct AttnCache {
    /// [n x A]
    proj_h: Var,
}

impl AttnCache {
    pub fn new(tape: &mut Tape, p: &AttentionVars, grid: &FeatureGrid) -> Result<Self> {
        let wt = tape.transpose(p.w_h)?;
        let proj_h = tape.matmul(grid.annotations, wt)?;
        Ok(AttnCache { proj_h })
    }
}

/// Raw (pre-softmax) alignment scores e_i = v . tanh(W_h h_i + W_s s_prev).
pub fn bahdanau_alignment(
    tape: &mut Tape,
    p: &AttentionVars,
    s_prev: Var,
    grid: &FeatureGrid,
) -> Result<Var> {
    let cache = AttnCache::new(tape, p, grid)?;
    alignment_scores(tape, p, &cache, s_prev)
}

fn alignment_scores(
    tape: &mut Tape,
    p: &AttentionVars,
    cache: &AttnCache,
    s_prev: Var,
) -> Result<Var> {
    let ws = tape.matvec(p.w_s, s_prev)?;
    let summed = tape.add_rows(cache.proj_h, ws)?;
    let activated = tape.tanh(summed)?;
    tape.matvec(activated, p.v)
}

/// Softmax over alignment scores; nonnegative, sums to 1.
pub fn attention_weights(tape: &mut Tape, scores: Var) -> Result<Var> {
    tape.softmax(scores)
}

/// Context vector c = sum_i alpha_i h_i.
pub fn context_vector(tape: &mut Tape, weights: Var, grid: &FeatureGrid) -> Result<Var> {
    let n = tape.shape(weights).first().copied().unwrap_or(0);
    let row = tape.reshape(weights, vec![1, n])?;
    let ctx = tape.matmul(row, grid.annotations)?;
    let d = tape.shape(ctx)[1];
    tape.reshape(ctx, vec![d])
}

// ----- attention traces and the coverage regularizer -------------------------

/// Recorded attention weights, one vector per emitted token.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub steps: Vec<Vec<f64>>,
}

impl AttentionTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Every step must be nonnegative and sum to 1 within `tol`.
    pub fn check_normalized(&self, tol: f64) -> Result<()> {
        for (t, step) in self.steps.iter().enumerate() {
            if let Some(v) = step.iter().find(|v| **v < 0.0) {
                return Err(Error::contract(format!(
                    "attention step {t} has negative weight {v}"
                )));
            }
            let sum: f64 = step.iter().sum();
            if (sum - 1.0).abs() > tol {
                return Err(Error::contract(format!(
                    "attention step {t} sums to {sum}, outside 1 +/- {tol}"
                )));
            }
        }
        Ok(())
    }

    /// Value-level penalty sum_p (1 - sum_t alpha_{p,t})^2 over n regions.
    pub fn doubly_stochastic_penalty(&self, n: usize) -> Result<f64> {
        if self.steps.is_empty() {
            return Err(Error::contract("doubly_stochastic_penalty: empty trace"));
        }
        let mut totals = vec![0.0; n];
        for step in &self.steps {
            if step.len() != n {
                return Err(Error::contract(format!(
                    "trace step has {} weights, expected {n}",
                    step.len()
                )));
            }
            for (total, a) in totals.iter_mut().zip(step) {
                *total += a;
            }
        }
        Ok(totals.iter().map(|s| (1.0 - s) * (1.0 - s)).sum())
    }
}

/// Differentiable penalty sum_p (1 - sum_t alpha_{p,t})^2 over the recorded
/// per-step weight variables.
pub fn doubly_stochastic_penalty(tape: &mut Tape, alphas: &[Var]) -> Result<Var> {
    if alphas.is_empty() {
        return Err(Error::contract("doubly_stochastic_penalty: empty trace"));
    }
    let mut total = alphas[0];
    for &a in &alphas[1..] {
        total = tape.add(total, a)?;
    }
    let negated = tape.scale(total, -1.0)?;
    let residual = tape.add_const(negated, 1.0)?;
    let squared = tape.mul(residual, residual)?;
    tape.sum_all(squared)
}

// ----- decoder state and steps ------------------------------------------------

/// Recurrent decoder state between steps.
#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub h: Var,
    pub c: Var,
    pub last_token: usize,
}

/// h0 = init-projection(global), c0 = 0, last token = START.
pub fn init_state(
    tape: &mut Tape,
    init: DenseVars,
    global: Var,
    hidden_dim: usize,
) -> Result<DecoderState> {
    let h = init.forward(tape, global)?;
    let c = tape.constant(Tensor::zeros(vec![hidden_dim]));
    Ok(DecoderState {
        h,
        c,
        last_token: START_ID,
    })
}

// ----- the two models ----------------------------------------------------------

/// Baseline model: the global feature is projected and added to the word
/// embedding at every step (the "merge by addition" reading).
#[derive(Debug, Clone)]
pub struct VanillaModel {
    pub encoder: EncoderParams,
    pub encoder_config: EncoderConfig,
    pub embedding: EmbeddingTable,
    /// [embed x D]: global feature into embedding space.
    pub merge: DenseLayer,
    /// [hidden x D]: global feature into the initial hidden state.
    pub init: DenseLayer,
    pub lstm: LstmCell,
    /// [V x hidden]: logits head.
    pub output: DenseLayer,
}

#[derive(Debug, Clone)]
pub struct VanillaVars {
    pub encoder: EncoderVars,
    pub embedding: EmbeddingVars,
    pub merge: DenseVars,
    pub init: DenseVars,
    pub lstm: LstmVars,
    pub output: DenseVars,
}

/// Attention model: the context vector is concatenated with the embedding.
#[derive(Debug, Clone)]
pub struct AttentionModel {
    pub encoder: EncoderParams,
    pub encoder_config: EncoderConfig,
    pub embedding: EmbeddingTable,
    pub attention: AttentionParams,
    pub init: DenseLayer,
    pub lstm: LstmCell,
    pub output: DenseLayer,
}

#[derive(Debug, Clone)]
pub struct AttentionModelVars {
    pub encoder: EncoderVars,
    pub embedding: EmbeddingVars,
    pub attention: AttentionVars,
    pub init: DenseVars,
    pub lstm: LstmVars,
    pub output: DenseVars,
}

impl VanillaModel {
    pub fn init(
        encoder_config: EncoderConfig,
        vocab: usize,
        embed_dim: usize,
        hidden_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = encoder_config.feature_dim;
        Ok(VanillaModel {
            encoder: EncoderParams::init(&encoder_config, rng)?,
            encoder_config,
            embedding: EmbeddingTable::init(vocab, embed_dim, rng)?,
            merge: DenseLayer::init(d, embed_dim, rng)?,
            init: DenseLayer::init(d, hidden_dim, rng)?,
            lstm: LstmCell::init(embed_dim, hidden_dim, rng)?,
            output: DenseLayer::init(hidden_dim, vocab, rng)?,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.lstm.hidden_dim()
    }

    pub fn bind(&self, tape: &mut Tape) -> VanillaVars {
        VanillaVars {
            encoder: self.encoder.bind(tape),
            embedding: self.embedding.bind(tape),
            merge: self.merge.bind(tape),
            init: self.init.bind(tape),
            lstm: self.lstm.bind(tape),
            output: self.output.bind(tape),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.named_params();
        out.push(("embedding.table".into(), &self.embedding.table));
        out.push(("merge.weight".into(), &self.merge.weight));
        out.push(("merge.bias".into(), &self.merge.bias));
        push_common(&mut out, &self.init, &self.lstm, &self.output);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.encoder.named_params_mut();
        out.push(("embedding.table".into(), &mut self.embedding.table));
        out.push(("merge.weight".into(), &mut self.merge.weight));
        out.push(("merge.bias".into(), &mut self.merge.bias));
        push_common_mut(&mut out, &mut self.init, &mut self.lstm, &mut self.output);
        out
    }
}

impl VanillaVars {
    /// Var handles in the same order as `VanillaModel::named_params`.
    pub fn param_vars(&self) -> Vec<Var> {
        let mut out = encoder_vars(&self.encoder);
        out.push(self.embedding.table);
        out.push(self.merge.weight);
        out.push(self.merge.bias);
        push_common_vars(&mut out, self.init, &self.lstm, self.output);
        out
    }
}

impl AttentionModel {
    pub fn init(
        encoder_config: EncoderConfig,
        vocab: usize,
        embed_dim: usize,
        hidden_dim: usize,
        attn_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = encoder_config.feature_dim;
        Ok(AttentionModel {
            encoder: EncoderParams::init(&encoder_config, rng)?,
            encoder_config,
            embedding: EmbeddingTable::init(vocab, embed_dim, rng)?,
            attention: AttentionParams::init(d, hidden_dim, attn_dim, rng)?,
            init: DenseLayer::init(d, hidden_dim, rng)?,
            lstm: LstmCell::init(embed_dim + d, hidden_dim, rng)?,
            output: DenseLayer::init(hidden_dim, vocab, rng)?,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.lstm.hidden_dim()
    }

    pub fn bind(&self, tape: &mut Tape) -> AttentionModelVars {
        AttentionModelVars {
            encoder: self.encoder.bind(tape),
            embedding: self.embedding.bind(tape),
            attention: self.attention.bind(tape),
            init: self.init.bind(tape),
            lstm: self.lstm.bind(tape),
            output: self.output.bind(tape),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.named_params();
        out.push(("embedding.table".into(), &self.embedding.table));
        out.push(("attention.w_h".into(), &self.attention.w_h));
        out.push(("attention.w_s".into(), &self.attention.w_s));
        out.push(("attention.v".into(), &self.attention.v));
        push_common(&mut out, &self.init, &self.lstm, &self.output);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.encoder.named_params_mut();
        out.push(("embedding.table".into(), &mut self.embedding.table));
        out.push(("attention.w_h".into(), &mut self.attention.w_h));
        out.push(("attention.w_s".into(), &mut self.attention.w_s));
        out.push(("attention.v".into(), &mut self.attention.v));
        push_common_mut(&mut out, &mut self.init, &mut self.lstm, &mut self.output);
        out
    }
}

impl AttentionModelVars {
    /// Var handles in the same order as `AttentionModel::named_params`.
    pub fn param_vars(&self) -> Vec<Var> {
        let mut out = encoder_vars(&self.encoder);
        out.push(self.embedding.table);
        out.push(self.attention.w_h);
        out.push(self.attention.w_s);
        out.push(self.attention.v);
        push_common_vars(&mut out, self.init, &self.lstm, self.output);
        out
    }
}

fn push_common<'a>(
    out: &mut Vec<(String, &'a Tensor)>,
    init: &'a DenseLayer,
    lstm: &'a LstmCell,
    output: &'a DenseLayer,
) {
    out.push(("init.weight".into(), &init.weight));
    out.push(("init.bias".into(), &init.bias));
    out.push(("lstm.w_i".into(), &lstm.w_i));
    out.push(("lstm.w_f".into(), &lstm.w_f));
    out.push(("lstm.w_o".into(), &lstm.w_o));
    out.push(("lstm.w_g".into(), &lstm.w_g));
    out.push(("lstm.b_i".into(), &lstm.b_i));
    out.push(("lstm.b_f".into(), &lstm.b_f));
    out.push(("lstm.b_o".into(), &lstm.b_o));
    out.push(("lstm.b_g".into(), &lstm.b_g));
    out.push(("output.weight".into(), &output.weight));
    out.push(("output.bias".into(), &output.bias));
}

fn push_common_mut<'a>(
    out: &mut Vec<(String, &'a mut Tensor)>,
    init: &'a mut DenseLayer,
    lstm: &'a mut LstmCell,
    output: &'a mut DenseLayer,
) {
    out.push(("init.weight".into(), &mut init.weight));
    out.push(("init.bias".into(), &mut init.bias));
    out.push(("lstm.w_i".into(), &mut lstm.w_i));
    out.push(("lstm.w_f".into(), &mut lstm.w_f));
    out.push(("lstm.w_o".into(), &mut lstm.w_o));
    out.push(("lstm.w_g".into(), &mut lstm.w_g));
    out.push(("lstm.b_i".into(), &mut lstm.b_i));
    out.push(("lstm.b_f".into(), &mut lstm.b_f));
    out.push(("lstm.b_o".into(), &mut lstm.b_o));
    out.push(("lstm.b_g".into(), &mut lstm.b_g));
    out.push(("output.weight".into(), &mut output.weight));
    out.push(("output.bias".into(), &mut output.bias));
}

fn encoder_vars(e: &EncoderVars) -> Vec<Var> {
    let mut out = Vec::new();
    for stage in &e.stages {
        out.push(stage.kernels);
        out.push(stage.bias);
    }
    out.push(e.projection.kernels);
    out.push(e.projection.bias);
    out
}

fn push_common_vars(out: &mut Vec<Var>, init: DenseVars, lstm: &LstmVars, output: DenseVars) {
    out.push(init.weight);
    out.push(init.bias);
    out.push(lstm.w_i);
    out.push(lstm.w_f);
    out.push(lstm.w_o);
    out.push(lstm.w_g);
    out.push(lstm.b_i);
    out.push(lstm.b_f);
    out.push(lstm.b_o);
    out.push(lstm.b_g);
    out.push(output.weight);
    out.push(output.bias);
}

// ----- steps --------------------------------------------------------------------

/// One attention-decoder step; returns (logits [V], new state, alpha [n]).
pub fn attention_step(
    tape: &mut Tape,
    m: &AttentionModelVars,
    state: &DecoderState,
    grid: &FeatureGrid,
) -> Result<(Var, DecoderState, Var)> {
    let cache = AttnCache::new(tape, &m.attention, grid)?;
    attention_step_cached(tape, m, state, grid, &cache)
}

/// Step with the per-example annotation projection precomputed.
pub fn attention_step_cached(
    tape: &mut Tape,
    m: &AttentionModelVars,
    state: &DecoderState,
    grid: &FeatureGrid,
    cache: &AttnCache,
) -> Result<(Var, DecoderState, Var)> {
    let scores = alignment_scores(tape, &m.attention, cache, state.h)?;
    let alpha = attention_weights(tape, scores)?;
    let ctx = context_vector(tape, alpha, grid)?;
    let emb_row = m.embedding.lookup(tape, &[state.last_token])?;
    let e = tape.shape(emb_row)[1];
    let emb = tape.reshape(emb_row, vec![e])?;
    let input = tape.concat(&[emb, ctx])?;
    let (h, c) = lstm_step(tape, &m.lstm, input, state.h, state.c)?;
    let logits = m.output.forward(tape, h)?;
    let new_state = DecoderState {
        h,
        c,
        last_token: state.last_token,
    };
    Ok((logits, new_state, alpha))
}

/// One vanilla-decoder step; returns (logits [V], new state).
pub fn vanilla_step(
    tape: &mut Tape,
    m: &VanillaVars,
    state: &DecoderState,
    global: Var,
) -> Result<(Var, DecoderState)> {
    let projected = m.merge.forward(tape, global)?;
    let emb_row = m.embedding.lookup(tape, &[state.last_token])?;
    let e = tape.shape(emb_row)[1];
    let emb = tape.reshape(emb_row, vec![e])?;
    let input = tape.add(projected, emb)?;
    let (h, c) = lstm_step(tape, &m.lstm, input, state.h, state.c)?;
    let logits = m.output.forward(tape, h)?;
    let new_state = DecoderState {
        h,
        c,
        last_token: state.last_token,
    };
    Ok((logits, new_state))
}

// ----- greedy decoding ------------------------------------------------------------

/// Argmax with ties broken toward the lowest token id.
pub fn argmax_token(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate().skip(1) {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

/// Greedy decode for the attention model: emits until END or `max_len`
/// tokens; the returned sequence excludes START/END, with one recorded alpha
/// per emitted token.
pub fn greedy_decode_attention(
    tape: &mut Tape,
    m: &AttentionModelVars,
    grid: &FeatureGrid,
    hidden_dim: usize,
    max_len: usize,
) -> Result<(Vec<usize>, AttentionTrace)> {
    if max_len == 0 {
        return Err(Error::contract("greedy_decode: max_len must be >= 1"));
    }
    let cache = AttnCache::new(tape, &m.attention, grid)?;
    let mut state = init_state(tape, m.init, grid.global, hidden_dim)?;
    let mut tokens = Vec::new();
    let mut trace = AttentionTrace::default();
    for _ in 0..max_len {
        let (logits, mut next, alpha) = attention_step_cached(tape, m, &state, grid, &cache)?;
        let token = argmax_token(tape.value(logits).values());
        if token == END_ID {
            break;
        }
        tokens.push(token);
        trace.steps.push(tape.value(alpha).values().to_vec());
        next.last_token = token;
        state = next;
    }
    Ok((tokens, trace))
}

/// Greedy decode for the vanilla model.
pub fn greedy_decode_vanilla(
    tape: &mut Tape,
    m: &VanillaVars,
    global: Var,
    hidden_dim: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::contract("greedy_decode: max_len must be >= 1"));
    }
    let mut state = init_state(tape, m.init, global, hidden_dim)?;
    let mut tokens = Vec::new();
    for _ in 0..max_len {
        let (logits, mut next) = vanilla_step(tape, m, &state, global)?;
        let token = argmax_token(tape.value(logits).values());
        if token == END_ID {
            break;
        }
        tokens.push(token);
        next.last_token = token;
        state = next;
    }
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::encode;
    use crate::nn::cross_entropy_masked;
    use crate::tensor::gradient_check;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn grid_from(tape: &mut Tape, annotations: Tensor) -> FeatureGrid {
        let shape = annotations.shape().to_vec();
        let ann = tape.leaf(annotations);
        let global = tape.mean_axis(ann, 0).unwrap();
        FeatureGrid {
            annotations: ann,
            global,
            regions: shape[0],
            feature_dim: shape[1],
        }
    }

    fn tiny_encoder_config() -> EncoderConfig {
        EncoderConfig {
            channels: vec![4],
            feature_dim: 3,
            grid_side: 2,
        }
    }

    #[test]
    fn alignment_zero_score_vector() {
        let mut tape = Tape::new();
        let grid = grid_from(&mut tape, Tensor::new(vec![3, 2], vec![0.5; 6]).unwrap());
        let p = AttentionParams {
            w_h: Tensor::new(vec![2, 2], vec![0.3, -0.1, 0.7, 0.2]).unwrap(),
            w_s: Tensor::new(vec![2, 2], vec![0.4, 0.0, -0.3, 0.6]).unwrap(),
            v: Tensor::zeros(vec![2]),
        };
        let vars = p.bind(&mut tape);
        let s = tape.leaf(Tensor::vector(vec![1.0, -1.0]));
        let scores = bahdanau_alignment(&mut tape, &vars, s, &grid).unwrap();
        assert_eq!(tape.value(scores).values(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn alignment_ignores_state_when_ws_zero() {
        let mut tape = Tape::new();
        let grid = grid_from(
            &mut tape,
            Tensor::new(vec![2, 2], vec![0.2, -0.6, 1.1, 0.4]).unwrap(),
        );
        let p = AttentionParams {
            w_h: Tensor::new(vec![2, 2], vec![0.9, -0.2, 0.1, 0.5]).unwrap(),
            w_s: Tensor::zeros(vec![2, 2]),
            v: Tensor::vector(vec![1.0, -2.0]),
        };
        let vars = p.bind(&mut tape);
        let s1 = tape.leaf(Tensor::vector(vec![5.0, -3.0]));
        let s2 = tape.leaf(Tensor::vector(vec![-7.0, 2.0]));
        let a = bahdanau_alignment(&mut tape, &vars, s1, &grid).unwrap();
        let b = bahdanau_alignment(&mut tape, &vars, s2, &grid).unwrap();
        assert_eq!(tape.value(a).values(), tape.value(b).values());
    }

    #[test]
    fn alignment_hand_example() {
        // n=2, A=1, W_h=[[1]], W_s=[[0]], v=[1], h rows [0] and [10].
        let mut tape = Tape::new();
        let grid = grid_from(&mut tape, Tensor::new(vec![2, 1], vec![0.0, 10.0]).unwrap());
        let p = AttentionParams {
            w_h: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            w_s: Tensor::new(vec![1, 1], vec![0.0]).unwrap(),
            v: Tensor::vector(vec![1.0]),
        };
        let vars = p.bind(&mut tape);
        let s = tape.leaf(Tensor::vector(vec![0.0]));
        let scores = bahdanau_alignment(&mut tape, &vars, s, &grid).unwrap();
        let v = tape.value(scores).values();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - (10.0f64).tanh()).abs() < 1e-15);
        assert!(v[1] > 0.99999);
    }

    #[test]
    fn attention_weight_contracts() {
        let mut tape = Tape::new();
        let uniform = tape.leaf(Tensor::vector(vec![2.5; 4]));
        let w = attention_weights(&mut tape, uniform).unwrap();
        for v in tape.value(w).iter() {
            assert!((v - 0.25).abs() < 1e-15);
        }

        let peaked = tape.leaf(Tensor::vector(vec![1000.0, 0.0, 0.0]));
        let wp = attention_weights(&mut tape, peaked).unwrap();
        assert!(tape.value(wp).values()[0] > 0.999);

        let log_scores = tape.leaf(Tensor::vector(vec![1.0f64.ln(), 3.0f64.ln()]));
        let wl = attention_weights(&mut tape, log_scores).unwrap();
        let v = tape.value(wl).values();
        assert!((v[0] - 0.25).abs() < 1e-12 && (v[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn context_vector_examples() {
        let mut tape = Tape::new();
        let grid = grid_from(
            &mut tape,
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        );

        // One-hot recovers a row exactly.
        let onehot = tape.leaf(Tensor::vector(vec![0.0, 1.0]));
        let c = context_vector(&mut tape, onehot, &grid).unwrap();
        assert_eq!(tape.value(c).values(), &[0.0, 1.0]);

        // Uniform weights equal the global mean feature.
        let uniform = tape.leaf(Tensor::vector(vec![0.5, 0.5]));
        let cu = context_vector(&mut tape, uniform, &grid).unwrap();
        assert_eq!(
            tape.value(cu).values(),
            tape.value(grid.global).values()
        );

        // Hand-weighted mix.
        let mixed = tape.leaf(Tensor::vector(vec![0.25, 0.75]));
        let cm = context_vector(&mut tape, mixed, &grid).unwrap();
        assert_eq!(tape.value(cm).values(), &[0.25, 0.75]);
    }

    fn tiny_attention_model(vocab: usize) -> AttentionModel {
        let mut r = rng(21);
        AttentionModel::init(tiny_encoder_config(), vocab, 2, 2, 2, &mut r).unwrap()
    }

    fn tiny_vanilla_model(vocab: usize) -> VanillaModel {
        let mut r = rng(22);
        VanillaModel::init(tiny_encoder_config(), vocab, 2, 2, &mut r).unwrap()
    }

    #[test]
    fn zero_parameter_attention_step_gives_uniform_distribution() {
        let mut model = tiny_attention_model(5);
        for (_, t) in model.named_params_mut() {
            let zero = vec![0.0; t.len()];
            t.values_mut().copy_from_slice(&zero);
        }
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let grid = grid_from(
            &mut tape,
            Tensor::new(vec![4, 3], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap(),
        );
        let state = init_state(&mut tape, vars.init, grid.global, 2).unwrap();
        let (logits, _, alpha) = attention_step(&mut tape, &vars, &state, &grid).unwrap();
        assert!(tape.value(logits).iter().all(|v| *v == 0.0));
        let sm = tape.softmax(logits).unwrap();
        assert!(tape.value(sm).iter().all(|v| (v - 0.2).abs() < 1e-15));
        let alpha_sum: f64 = tape.value(alpha).iter().sum();
        assert!((alpha_sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_region_attention_is_exactly_one() {
        let model = tiny_attention_model(5);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let grid = grid_from(&mut tape, Tensor::new(vec![1, 3], vec![0.4, -0.2, 0.9]).unwrap());
        let state = init_state(&mut tape, vars.init, grid.global, 2).unwrap();
        let (_, _, alpha) = attention_step(&mut tape, &vars, &state, &grid).unwrap();
        assert_eq!(tape.value(alpha).values(), &[1.0]);
        let ctx = context_vector(&mut tape, alpha, &grid).unwrap();
        assert_eq!(tape.value(ctx).values(), &[0.4, -0.2, 0.9]);
    }

    #[test]
    fn attention_step_gradient_check() {
        // Cross-entropy through one step at n=4, D=3, h=2, V=5.
        let model = tiny_attention_model(5);
        let annotations =
            Tensor::new(vec![4, 3], (0..12).map(|i| ((i * 7) % 5) as f64 * 0.2 - 0.4).collect())
                .unwrap();

        let probe = |which: &'static str| {
            let model = model.clone();
            let annotations = annotations.clone();
            move |t: &mut Tape, leaf: Var| -> crate::error::Result<Var> {
                let reg = |t: &mut Tape, name: &str, tensor: &Tensor| -> Var {
                    if name == which {
                        leaf
                    } else {
                        t.constant(tensor.clone())
                    }
                };
                let vars = AttentionModelVars {
                    encoder: model.encoder.bind(t),
                    embedding: EmbeddingVars {
                        table: reg(t, "embedding", &model.embedding.table),
                    },
                    attention: AttentionVars {
                        w_h: reg(t, "w_h", &model.attention.w_h),
                        w_s: reg(t, "w_s", &model.attention.w_s),
                        v: reg(t, "v", &model.attention.v),
                    },
                    init: DenseVars {
                        weight: reg(t, "init.w", &model.init.weight),
                        bias: t.constant(model.init.bias.clone()),
                    },
                    lstm: model.lstm.bind(t),
                    output: DenseVars {
                        weight: reg(t, "out.w", &model.output.weight),
                        bias: t.constant(model.output.bias.clone()),
                    },
                };
                let ann = reg(t, "annotations", &annotations);
                let global = t.mean_axis(ann, 0)?;
                let grid = FeatureGrid {
                    annotations: ann,
                    global,
                    regions: 4,
                    feature_dim: 3,
                };
                let state = init_state(t, vars.init, grid.global, 2)?;
                let (logits, _, _) = attention_step(t, &vars, &state, &grid)?;
                let rows = t.reshape(logits, vec![1, 5])?;
                cross_entropy_masked(t, rows, &[3], 0)
            }
        };
        for (which, tensor) in [
            ("w_h", &model.attention.w_h),
            ("w_s", &model.attention.w_s),
            ("v", &model.attention.v),
            ("embedding", &model.embedding.table),
            ("init.w", &model.init.weight),
            ("out.w", &model.output.weight),
            ("annotations", &annotations),
        ] {
            let err = gradient_check(probe(which), tensor, 1e-5).unwrap();
            assert!(err <= 1e-4, "attention step {which}: gradient error {err}");
        }
    }

    #[test]
    fn vanilla_step_reduces_to_language_model_with_zero_merge() {
        let mut model = tiny_vanilla_model(5);
        let zero = vec![0.0; model.merge.weight.len()];
        model.merge.weight.values_mut().copy_from_slice(&zero);
        let zero_b = vec![0.0; model.merge.bias.len()];
        model.merge.bias.values_mut().copy_from_slice(&zero_b);

        let run = |global: Tensor| -> Vec<f64> {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let g = tape.leaf(global);
            let h = tape.leaf(Tensor::vector(vec![0.1, -0.2]));
            let c = tape.leaf(Tensor::zeros(vec![2]));
            let state = DecoderState {
                h,
                c,
                last_token: START_ID,
            };
            let (logits, _) = vanilla_step(&mut tape, &vars, &state, g).unwrap();
            tape.value(logits).values().to_vec()
        };
        // With a zeroed merge projection, the image vector cannot matter.
        let a = run(Tensor::vector(vec![3.0, -1.0, 0.5]));
        let b = run(Tensor::vector(vec![-2.0, 9.0, 4.0]));
        assert_eq!(a, b);
    }

    #[test]
    fn vanilla_step_is_pure() {
        let model = tiny_vanilla_model(5);
        let run = || -> Vec<f64> {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let g = tape.leaf(Tensor::vector(vec![0.3, 0.1, -0.4]));
            let state = init_state(&mut tape, vars.init, g, 2).unwrap();
            let (logits, _) = vanilla_step(&mut tape, &vars, &state, g).unwrap();
            tape.value(logits).values().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn vanilla_step_gradient_check() {
        let model = tiny_vanilla_model(5);
        let global = Tensor::vector(vec![0.25, -0.5, 0.75]);

        let probe = |which: &'static str| {
            let model = model.clone();
            let global = global.clone();
            move |t: &mut Tape, leaf: Var| -> crate::error::Result<Var> {
                let reg = |t: &mut Tape, name: &str, tensor: &Tensor| -> Var {
                    if name == which {
                        leaf
                    } else {
                        t.constant(tensor.clone())
                    }
                };
                let vars = VanillaVars {
                    encoder: model.encoder.bind(t),
                    embedding: EmbeddingVars {
                        table: reg(t, "embedding", &model.embedding.table),
                    },
                    merge: DenseVars {
                        weight: reg(t, "merge.w", &model.merge.weight),
                        bias: t.constant(model.merge.bias.clone()),
                    },
                    init: DenseVars {
                        weight: reg(t, "init.w", &model.init.weight),
                        bias: t.constant(model.init.bias.clone()),
                    },
                    lstm: model.lstm.bind(t),
                    output: DenseVars {
                        weight: reg(t, "out.w", &model.output.weight),
                        bias: t.constant(model.output.bias.clone()),
                    },
                };
                let g = reg(t, "global", &global);
                let state = init_state(t, vars.init, g, 2)?;
                let (logits, _) = vanilla_step(t, &vars, &state, g)?;
                let rows = t.reshape(logits, vec![1, 5])?;
                cross_entropy_masked(t, rows, &[4], 0)
            }
        };
        for (which, tensor) in [
            ("merge.w", &model.merge.weight),
            ("embedding", &model.embedding.table),
            ("init.w", &model.init.weight),
            ("out.w", &model.output.weight),
            ("global", &global),
        ] {
            let err = gradient_check(probe(which), tensor, 1e-5).unwrap();
            assert!(err <= 1e-4, "vanilla step {which}: gradient error {err}");
        }
    }

    #[test]
    fn penalty_exact_satisfaction_is_zero() {
        // T = n with one-hot alphas on distinct regions.
        let trace = AttentionTrace {
            steps: vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
        };
        assert_eq!(trace.doubly_stochastic_penalty(3).unwrap(), 0.0);
    }

    #[test]
    fn penalty_single_uniform_step() {
        // n = 4, one uniform step: 4 * (1 - 1/4)^2 = 2.25.
        let trace = AttentionTrace {
            steps: vec![vec![0.25; 4]],
        };
        let value = trace.doubly_stochastic_penalty(4).unwrap();
        assert!((value - 2.25).abs() < 1e-15);

        let mut tape = Tape::new();
        let alpha = tape.leaf(Tensor::vector(vec![0.25; 4]));
        let p = doubly_stochastic_penalty(&mut tape, &[alpha]).unwrap();
        assert!((tape.value(p).item() - 2.25).abs() < 1e-15);
    }

    #[test]
    fn penalty_is_nonnegative_and_rejects_empty() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![0.7, 0.3]));
        let b = tape.leaf(Tensor::vector(vec![0.6, 0.4]));
        let p = doubly_stochastic_penalty(&mut tape, &[a, b]).unwrap();
        assert!(tape.value(p).item() >= 0.0);

        assert!(doubly_stochastic_penalty(&mut tape, &[]).is_err());
        assert!(AttentionTrace::default().doubly_stochastic_penalty(2).is_err());
    }

    #[test]
    fn penalty_gradient_check() {
        let alpha = Tensor::vector(vec![0.4, 0.35, 0.25]);
        let err = gradient_check(
            |t, a| {
                let sm = t.softmax(a)?;
                doubly_stochastic_penalty(t, &[sm])
            },
            &alpha,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4);
    }

    fn end_forcing(mut model: AttentionModel) -> AttentionModel {
        for (name, t) in model.named_params_mut() {
            let mut values = vec![0.0; t.len()];
            if name == "output.bias" {
                values[END_ID] = 50.0;
            }
            t.values_mut().copy_from_slice(&values);
        }
        model
    }

    #[test]
    fn decode_end_forcing_model_is_empty() {
        let model = end_forcing(tiny_attention_model(5));
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let grid = grid_from(&mut tape, Tensor::new(vec![4, 3], vec![0.1; 12]).unwrap());
        let (tokens, trace) =
            greedy_decode_attention(&mut tape, &vars, &grid, 2, 10).unwrap();
        assert!(tokens.is_empty());
        assert!(trace.is_empty());
    }

    #[test]
    fn decode_token_forcing_model_hits_cap() {
        let mut model = tiny_vanilla_model(6);
        for (name, t) in model.named_params_mut() {
            let mut values = vec![0.0; t.len()];
            if name == "output.bias" {
                values[4] = 50.0;
            }
            t.values_mut().copy_from_slice(&values);
        }
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let g = tape.leaf(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let tokens = greedy_decode_vanilla(&mut tape, &vars, g, 2, 7).unwrap();
        assert_eq!(tokens, vec![4; 7]);
    }

    #[test]
    fn decode_is_deterministic_and_traces_normalize() {
        let config = tiny_encoder_config();
        let mut r = rng(33);
        let model = AttentionModel::init(config.clone(), 9, 3, 4, 2, &mut r).unwrap();
        let image = Tensor::new(
            vec![3, 4, 4],
            (0..48).map(|i| ((i * 31) % 17) as f64 / 17.0).collect(),
        )
        .unwrap();

        let run = || -> (Vec<usize>, AttentionTrace) {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let img = tape.leaf(image.clone());
            let grid = encode(&config, &vars.encoder, &mut tape, img).unwrap();
            greedy_decode_attention(&mut tape, &vars, &grid, 4, 12).unwrap()
        };
        let (tokens_a, trace_a) = run();
        let (tokens_b, trace_b) = run();
        assert_eq!(tokens_a, tokens_b);
        assert_eq!(trace_a, trace_b);
        assert_eq!(trace_a.len(), tokens_a.len());
        trace_a.check_normalized(1e-9).unwrap();
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_id() {
        assert_eq!(argmax_token(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_token(&[5.0]), 0);
        assert_eq!(argmax_token(&[2.0, 2.0, 2.0]), 0);
    }

    #[test]
    fn param_vars_align_with_named_params() {
        // Fill every parameter with a distinct constant, bind, and confirm
        // position i on the tape carries the tensor named at position i.
        let mut attention = tiny_attention_model(7);
        for (i, (_, t)) in attention.named_params_mut().into_iter().enumerate() {
            let fill = vec![i as f64 + 1.0; t.len()];
            t.values_mut().copy_from_slice(&fill);
        }
        let mut tape = Tape::new();
        let vars = attention.bind(&mut tape);
        let var_list = vars.param_vars();
        let named = attention.named_params();
        assert_eq!(var_list.len(), named.len());
        for (i, ((name, tensor), var)) in named.iter().zip(&var_list).enumerate() {
            assert_eq!(
                tape.value(*var).values(),
                tensor.values(),
                "slot {i} ({name}) misaligned"
            );
        }

        let mut vanilla = tiny_vanilla_model(7);
        for (i, (_, t)) in vanilla.named_params_mut().into_iter().enumerate() {
            let fill = vec![-(i as f64) - 1.0; t.len()];
            t.values_mut().copy_from_slice(&fill);
        }
        let mut tape = Tape::new();
        let vars = vanilla.bind(&mut tape);
        let var_list = vars.param_vars();
        let named = vanilla.named_params();
        assert_eq!(var_list.len(), named.len());
        for ((name, tensor), var) in named.iter().zip(&var_list) {
            assert_eq!(tape.value(*var).values(), tensor.values(), "{name} misaligned");
        }
    }
}
