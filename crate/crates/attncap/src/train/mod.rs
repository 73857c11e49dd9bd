//! Teacher-forced training loop: Adam or SGD with global-norm clipping, a
//! divergence guard, per-epoch checkpoints, and a deterministic run log.

pub mod checkpoint;
pub mod harness;

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, Batch, LoadedCorpus, Vocabulary, PAD_ID};
use crate::decoder::{
    attention_step_cached, doubly_stochastic_penalty, init_state, vanilla_step, AttentionModel,
    AttentionModelVars, AttnCache, VanillaModel, VanillaVars,
};
use crate::encoder::{encode, EncoderConfig, FeatureGrid};
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{softmax, Tape, Tensor, Var};

// ----- configuration ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Vanilla,
    Attention,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Vanilla => "vanilla",
            ModelKind::Attention => "attention",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(ModelKind::Vanilla),
            "attention" => Ok(ModelKind::Attention),
            other => Err(Error::Config(format!(
                "unknown model kind {other:?} (expected vanilla or attention)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config(format!(
                "unknown optimizer {other:?} (expected adam or sgd)"
            ))),
        }
    }
}

/// Everything that determines a training run besides the corpus bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub attn_dim: usize,
    pub vocab_cap: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub optimizer: OptimizerKind,
    pub param_seed: u64,
    pub shuffle_seed: u64,
    pub t_max: usize,
    pub channels: Vec<usize>,
    pub grid_side: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::Attention,
            embed_dim: 256,
            hidden_dim: 256,
            feature_dim: 128,
            attn_dim: 64,
            vocab_cap: 200,
            learning_rate: 4e-4,
            batch_size: 64,
            epochs: 10,
            lambda: 0.0,
            optimizer: OptimizerKind::Adam,
            param_seed: 1,
            shuffle_seed: 2,
            t_max: 16,
            channels: vec![8, 16, 32],
            grid_side: 6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positives: [(&str, usize); 8] = [
            ("embed-dim", self.embed_dim),
            ("hidden-dim", self.hidden_dim),
            ("feature-dim", self.feature_dim),
            ("attn-dim", self.attn_dim),
            ("vocab-cap", self.vocab_cap),
            ("batch-size", self.batch_size),
            ("epochs", self.epochs),
            ("grid-side", self.grid_side),
        ];
        for (name, value) in positives {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning-rate must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be nonnegative".into()));
        }
        if self.t_max < 3 {
            return Err(Error::Config("t-max must be at least 3".into()));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("channels must be a nonempty positive list".into()));
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            channels: self.channels.clone(),
            feature_dim: self.feature_dim,
            grid_side: self.grid_side,
        }
    }

    /// Image side the encoder expects: grid side doubled once per stage.
    pub fn input_side(&self) -> usize {
        self.encoder_config().input_side()
    }

    /// Set one field from its flag-style key; values use the flag syntax
    /// (channels as a comma list).
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "model" => self.model = value.parse()?,
            "embed-dim" => self.embed_dim = num(key, value)?,
            "hidden-dim" => self.hidden_dim = num(key, value)?,
            "feature-dim" => self.feature_dim = num(key, value)?,
            "attn-dim" => self.attn_dim = num(key, value)?,
            "vocab-cap" => self.vocab_cap = num(key, value)?,
            "learning-rate" => self.learning_rate = num(key, value)?,
            "batch-size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "param-seed" => self.param_seed = num(key, value)?,
            "shuffle-seed" => self.shuffle_seed = num(key, value)?,
            "t-max" => self.t_max = num(key, value)?,
            "channels" => {
                self.channels = value
                    .split(',')
                    .map(|part| num("channels", part.trim()))
                    .collect::<Result<_>>()?;
            }
            "grid-side" => self.grid_side = num(key, value)?,
            other => return Err(Error::Config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Parse a `key = value` configuration file (one pair per line, `#`
    /// comments) and apply it over the current values.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}: line {}: expected key = value",
                    path.display(),
                    line_no + 1
                ))
            })?;
            self.set_key(key.trim(), value.trim())?;
        }
        Ok(())
    }
}

// ----- model wrapper -------------------------------------------------------------

/// Either architecture behind one training/checkpoint surface.
#[derive(Debug, Clone)]
pub enum Model {
    Vanilla(VanillaModel),
    Attention(AttentionModel),
}

/// Tape bindings for either architecture.
pub enum ModelVars {
    Vanilla(VanillaVars),
    Attention(AttentionModelVars),
}

impl Model {
    /// Initialize from the parameter seed; every weight draw happens in a
    /// fixed order so the result is a pure function of (config, vocab size).
    pub fn init(config: &TrainConfig, vocab_size: usize) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.param_seed);
        Ok(match config.model {
            ModelKind::Vanilla => Model::Vanilla(VanillaModel::init(
                config.encoder_config(),
                vocab_size,
                config.embed_dim,
                config.hidden_dim,
                &mut rng,
            )?),
            ModelKind::Attention => Model::Attention(AttentionModel::init(
                config.encoder_config(),
                vocab_size,
                config.embed_dim,
                config.hidden_dim,
                config.attn_dim,
                &mut rng,
            )?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Vanilla(_) => ModelKind::Vanilla,
            Model::Attention(_) => ModelKind::Attention,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        match self {
            Model::Vanilla(m) => m.hidden_dim(),
            Model::Attention(m) => m.hidden_dim(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Model::Vanilla(m) => m.embedding.table.shape()[0],
            Model::Attention(m) => m.embedding.table.shape()[0],
        }
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        match self {
            Model::Vanilla(m) => &m.encoder_config,
            Model::Attention(m) => &m.encoder_config,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        match self {
            Model::Vanilla(m) => ModelVars::Vanilla(m.bind(tape)),
            Model::Attention(m) => ModelVars::Attention(m.bind(tape)),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        match self {
            Model::Vanilla(m) => m.named_params(),
            Model::Attention(m) => m.named_params(),
        }
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match self {
            Model::Vanilla(m) => m.named_params_mut(),
            Model::Attention(m) => m.named_params_mut(),
        }
    }
}

impl ModelVars {
    /// Parameter handles in the same order as `Model::named_params`.
    pub fn param_vars(&self) -> Vec<Var> {
        match self {
            ModelVars::Vanilla(v) => v.param_vars(),
            ModelVars::Attention(v) => v.param_vars(),
        }
    }

    fn encoder(&self) -> &crate::encoder::EncoderVars {
        match self {
            ModelVars::Vanilla(v) => &v.encoder,
            ModelVars::Attention(v) => &v.encoder,
        }
    }
}

// ----- forward pass ---------------------------------------------------------------

/// One teacher-forced example on its own tape.
pub struct ExampleForward {
    /// Scalar loss: masked cross-entropy plus λ times the doubly-stochastic
    /// penalty (attention model only).
    pub loss: Var,
    /// Per-step logits, one [V] vector per prediction step.
    pub step_logits: Vec<Var>,
    /// Per-step attention weights (empty for the vanilla model).
    pub alphas: Vec<Var>,
}

/// Teacher-forced forward pass: a caption of effective length L induces
/// exactly L−1 prediction steps, the input at step t being ground-truth
/// token t.
pub fn forward_example(
    tape: &mut Tape,
    model: &Model,
    vars: &ModelVars,
    image: &Tensor,
    row: &[usize],
    length: usize,
    lambda: f64,
) -> Result<ExampleForward> {
    if length < 2 || length > row.len() {
        return Err(Error::contract(
            "forward_example: effective length must cover START and END",
        ));
    }
    let image_var = tape.constant(image.clone());
    let grid = encode(model.encoder_config(), vars.encoder(), tape, image_var)?;
    let mut state = init_state_for(tape, vars, &grid, model.hidden_dim())?;
    let cache = match vars {
        ModelVars::Attention(v) => Some(AttnCache::new(tape, &v.attention, &grid)?),
        ModelVars::Vanilla(_) => None,
    };

    let steps = length - 1;
    let mut step_logits = Vec::with_capacity(steps);
    let mut alphas = Vec::new();
    for t in 0..steps {
        state.last_token = row[t];
        let logits = match vars {
            ModelVars::Attention(v) => {
                let (logits, next, alpha) =
                    attention_step_cached(tape, v, &state, &grid, cache.as_ref().unwrap())?;
                state = next;
                alphas.push(alpha);
                logits
            }
            ModelVars::Vanilla(v) => {
                let (logits, next) = vanilla_step(tape, v, &state, grid.global)?;
                state = next;
                logits
            }
        };
        step_logits.push(logits);
    }

    let vocab = tape.shape(step_logits[0])[0];
    let stacked = tape.concat(&step_logits)?;
    let logits2d = tape.reshape(stacked, vec![steps, vocab])?;
    let targets = &row[1..length];
    let ce = tape.cross_entropy_masked(logits2d, targets, PAD_ID)?;
    let loss = if lambda != 0.0 && !alphas.is_empty() {
        let penalty = doubly_stochastic_penalty(tape, &alphas)?;
        let scaled = tape.scale(penalty, lambda)?;
        tape.add(ce, scaled)?
    } else {
        ce
    };
    Ok(ExampleForward {
        loss,
        step_logits,
        alphas,
    })
}

fn init_state_for(
    tape: &mut Tape,
    vars: &ModelVars,
    grid: &FeatureGrid,
    hidden_dim: usize,
) -> Result<crate::decoder::DecoderState> {
    match vars {
        ModelVars::Vanilla(v) => init_state(tape, v.init, grid.global, hidden_dim),
        ModelVars::Attention(v) => init_state(tape, v.init, grid.global, hidden_dim),
    }
}

/// Per-step cross-entropy values (−ln softmax probability of each target),
/// read off the finished tape.
pub fn per_step_losses(tape: &Tape, fwd: &ExampleForward, row: &[usize], length: usize) -> Vec<f64> {
    (0..length - 1)
        .map(|t| {
            let probs = softmax(tape.value(fwd.step_logits[t]).values());
            -probs[row[t + 1]].ln()
        })
        .collect()
}

// ----- attention-weight instrumentation --------------------------------------------

/// Running summary of every attention vector seen: count, worst deviation
/// of the per-step sum from 1, and the most negative weight observed.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AlphaStats {
    pub vectors_checked: usize,
    pub max_sum_error: f64,
    pub min_weight: f64,
}

impl Default for AlphaStats {
    fn default() -> Self {
        AlphaStats {
            vectors_checked: 0,
            max_sum_error: 0.0,
            min_weight: f64::INFINITY,
        }
    }
}

impl AlphaStats {
    pub fn absorb(&mut self, alpha: &[f64]) {
        let sum: f64 = alpha.iter().sum();
        self.max_sum_error = self.max_sum_error.max((sum - 1.0).abs());
        for &w in alpha {
            self.min_weight = self.min_weight.min(w);
        }
        self.vectors_checked += 1;
    }

    pub fn merge(&mut self, other: &AlphaStats) {
        self.vectors_checked += other.vectors_checked;
        self.max_sum_error = self.max_sum_error.max(other.max_sum_error);
        self.min_weight = self.min_weight.min(other.min_weight);
    }

    /// All recorded vectors nonnegative and summing to 1 within `tol`.
    pub fn within(&self, tol: f64) -> bool {
        self.max_sum_error <= tol && (self.vectors_checked == 0 || self.min_weight >= 0.0)
    }
}

// ----- optimizer --------------------------------------------------------------------

/// Global gradient-norm ceiling applied before every update.
pub const CLIP_NORM: f64 = 5.0;

/// Adam (β₁=0.9, β₂=0.999, ε=1e-8) or plain SGD over a fixed parameter
/// ordering.
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, param_sizes: &[usize]) -> Optimizer {
        Optimizer {
            kind,
            learning_rate,
            step: 0,
            first: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Clip the full gradient to `CLIP_NORM` and apply one update.
    pub fn apply(&mut self, params: &mut [(String, &mut Tensor)], grads: &mut [Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::contract("optimizer: gradient/parameter mismatch"));
        }
        let mut sq_sum = 0.0;
        for g in grads.iter() {
            for v in g {
                sq_sum += v * v;
            }
        }
        let norm = sq_sum.sqrt();
        if !norm.is_finite() {
            return Err(Error::Divergence(format!(
                "gradient norm is not finite ({norm})"
            )));
        }
        if norm > CLIP_NORM {
            let scale = CLIP_NORM / norm;
            for g in grads.iter_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
        }

        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for ((_, tensor), g) in params.iter_mut().zip(grads.iter()) {
                    for (w, &dv) in tensor.values_mut().iter_mut().zip(g) {
                        *w -= self.learning_rate * dv;
                    }
                }
            }
            OptimizerKind::Adam => {
                const BETA1: f64 = 0.9;
                const BETA2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                let bc1 = 1.0 - BETA1.powi(self.step as i32);
                let bc2 = 1.0 - BETA2.powi(self.step as i32);
                for (i, ((_, tensor), g)) in params.iter_mut().zip(grads.iter()).enumerate() {
                    let m = &mut self.first[i];
                    let v = &mut self.second[i];
                    for (j, (w, &dv)) in tensor.values_mut().iter_mut().zip(g).enumerate() {
                        m[j] = BETA1 * m[j] + (1.0 - BETA1) * dv;
                        v[j] = BETA2 * v[j] + (1.0 - BETA2) * dv * dv;
                        let m_hat = m[j] / bc1;
                        let v_hat = v[j] / bc2;
                        *w -= self.learning_rate * m_hat / (v_hat.sqrt() + EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

// ----- run log -----------------------------------------------------------------------

/// One epoch of bookkeeping; the serialized row omits wall time so the log
/// file is a pure function of (config, seeds, corpus).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_bleu4: Option<f64>,
}

/// Per-epoch rows plus wall times; rows go to `runlog.jsonl` (deterministic)
/// and wall times to `timings.jsonl` (informational).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub rows: Vec<RunLogRow>,
    pub wall_times_s: Vec<f64>,
}

impl RunLog {
    fn append(&mut self, out_dir: &Path, row: RunLogRow, wall_time_s: f64) -> Result<()> {
        let log_path = out_dir.join("runlog.jsonl");
        let mut line = serde_json::to_string(&row).map_err(|e| Error::Format {
            path: log_path.display().to_string(),
            detail: e.to_string(),
        })?;
        line.push('\n');
        append_line(&log_path, &line)?;
        let timing_path = out_dir.join("timings.jsonl");
        append_line(
            &timing_path,
            &format!(
                "{}\n",
                serde_json::json!({"epoch": row.epoch, "wall_time_s": wall_time_s})
            ),
        )?;
        self.rows.push(row);
        self.wall_times_s.push(wall_time_s);
        Ok(())
    }

    pub fn load_rows(path: &Path) -> Result<Vec<RunLogRow>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .map(|line| {
                serde_json::from_str(line).map_err(|e| Error::Format {
                    path: path.display().to_string(),
                    detail: e.to_string(),
                })
            })
            .collect()
    }
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    file.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

// ----- training loop ----------------------------------------------------------------

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub run_log: RunLog,
    pub alpha_stats: AlphaStats,
    pub checkpoint_paths: Vec<PathBuf>,
}

struct ChunkResult {
    grads: Vec<Vec<f64>>,
    loss_sum: f64,
    alpha: AlphaStats,
}

/// Forward/backward one example and return its parameter gradients in
/// `named_params` order.
#[cfg(test)]
fn example_gradients(
    model: &Model,
    image: &Tensor,
    row: &[usize],
    length: usize,
    lambda: f64,
) -> Result<(Vec<Vec<f64>>, f64, AlphaStats)> {
    let mut acc = None;
    let (loss, alpha) = accumulate_example_gradients(model, image, row, length, lambda, &mut acc)?;
    Ok((acc.expect("accumulator was filled"), loss, alpha))
}

/// Forward/backward one example; move its gradients into an empty
/// accumulator or add them to a filled one, avoiding per-example copies.
fn accumulate_example_gradients(
    model: &Model,
    image: &Tensor,
    row: &[usize],
    length: usize,
    lambda: f64,
    acc: &mut Option<Vec<Vec<f64>>>,
) -> Result<(f64, AlphaStats)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let fwd = forward_example(&mut tape, model, &vars, image, row, length, lambda)?;
    let loss = tape.value(fwd.loss).item();
    tape.backward(fwd.loss)?;
    let params = vars.param_vars();
    match acc {
        None => {
            let mut grads = Vec::with_capacity(params.len());
            for &p in &params {
                grads.push(
                    tape.take_grad(p)
                        .ok_or_else(|| Error::contract("parameter missing a gradient"))?,
                );
            }
            *acc = Some(grads);
        }
        Some(sum) => {
            for (slot, &p) in sum.iter_mut().zip(&params) {
                let g = tape
                    .grad(p)
                    .ok_or_else(|| Error::contract("parameter missing a gradient"))?;
                for (x, y) in slot.iter_mut().zip(g) {
                    *x += y;
                }
            }
        }
    }
    let mut alpha = AlphaStats::default();
    for &a in &fwd.alphas {
        alpha.absorb(tape.value(a).values());
    }
    Ok((loss, alpha))
}

/// Average gradients over one batch: examples fan out in fixed-size chunks
/// (sequential within a chunk, chunk results merged in index order), so the
/// result is bit-identical however many workers run.
fn batch_gradients(model: &Model, batch: &Batch, lambda: f64) -> Result<(Vec<Vec<f64>>, f64, AlphaStats)> {
    let indices: Vec<usize> = (0..batch.len()).collect();
    let chunk_results: Vec<Result<ChunkResult>> =
        parallel::map_chunks(&indices, parallel::CHUNK, |chunk| {
            let mut grads: Option<Vec<Vec<f64>>> = None;
            let mut loss_sum = 0.0;
            let mut alpha = AlphaStats::default();
            for &i in chunk {
                let image = batch.example_image(i);
                let (loss, a) = accumulate_example_gradients(
                    model,
                    &image,
                    &batch.tokens[i],
                    batch.lengths[i],
                    lambda,
                    &mut grads,
                )?;
                loss_sum += loss;
                alpha.merge(&a);
            }
            Ok(ChunkResult {
                grads: grads.expect("chunks are nonempty"),
                loss_sum,
                alpha,
            })
        });

    let mut total: Option<Vec<Vec<f64>>> = None;
    let mut loss_sum = 0.0;
    let mut alpha = AlphaStats::default();
    for result in chunk_results {
        let part = result?;
        loss_sum += part.loss_sum;
        alpha.merge(&part.alpha);
        match &mut total {
            None => total = Some(part.grads),
            Some(sum) => {
                for (acc, add) in sum.iter_mut().zip(&part.grads) {
                    for (x, y) in acc.iter_mut().zip(add) {
                        *x += y;
                    }
                }
            }
        }
    }
    let mut grads = total.ok_or_else(|| Error::contract("batch_gradients: empty batch"))?;
    let scale = 1.0 / batch.len() as f64;
    for g in &mut grads {
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    Ok((grads, loss_sum, alpha))
}

/// Train on `train_corpus`, checkpointing each epoch into `out_dir` and
/// appending the run log; `val_corpus` adds per-epoch greedy-decode BLEU-4.
pub fn train(
    config: &TrainConfig,
    train_corpus: &LoadedCorpus,
    val_corpus: Option<&LoadedCorpus>,
    vocab: &Vocabulary,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.input_side() != train_corpus.side {
        return Err(Error::Config(format!(
            "encoder expects {}x{} images but the corpus is {}x{}",
            config.input_side(),
            config.input_side(),
            train_corpus.side,
            train_corpus.side
        )));
    }
    if train_corpus.t_max != config.t_max {
        return Err(Error::contract("corpus was encoded with a different t-max"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut model = Model::init(config, vocab.size())?;
    let sizes: Vec<usize> = model.named_params().iter().map(|(_, t)| t.len()).collect();
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, &sizes);
    let mut run_log = RunLog::default();
    let mut alpha_stats = AlphaStats::default();
    let mut checkpoint_paths = Vec::new();

    for epoch_idx in 0..config.epochs {
        let started = Instant::now();
        let shuffle = config.shuffle_seed.wrapping_add(epoch_idx as u64);
        let batches = data::make_batches(train_corpus, config.batch_size, shuffle)?;
        let mut loss_sum = 0.0;
        let mut examples = 0usize;
        for (batch_idx, batch) in batches.iter().enumerate() {
            let (mut grads, batch_loss_sum, alpha) = batch_gradients(&model, batch, config.lambda)?;
            let batch_loss = batch_loss_sum / batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "loss became non-finite at epoch {}, batch {} (loss {batch_loss})",
                    epoch_idx + 1,
                    batch_idx
                )));
            }
            alpha_stats.merge(&alpha);
            let mut params = model.named_params_mut();
            optimizer.apply(&mut params, &mut grads)?;
            loss_sum += batch_loss_sum;
            examples += batch.len();
        }
        let train_loss = loss_sum / examples as f64;

        let val_bleu4 = match val_corpus {
            Some(val) => {
                let (decoded, alpha) = harness::decode_corpus(&model, val)?;
                alpha_stats.merge(&alpha);
                let pairs: Vec<(Vec<String>, Vec<Vec<String>>)> = decoded
                    .into_iter()
                    .zip(&val.references)
                    .map(|(ids, refs)| {
                        data::ids_to_tokens(vocab, &ids).map(|tokens| (tokens, refs.clone()))
                    })
                    .collect::<Result<_>>()?;
                Some(crate::metrics::corpus_bleu(&pairs, 4)?)
            }
            None => None,
        };

        let epoch = epoch_idx + 1;
        let path = out_dir.join(format!("epoch_{epoch:03}.atnc"));
        checkpoint::save(&path, config, epoch, vocab.size(), &model)?;
        checkpoint_paths.push(path);
        run_log.append(
            out_dir,
            RunLogRow {
                epoch,
                train_loss,
                val_bleu4,
            },
            started.elapsed().as_secs_f64(),
        )?;
    }

    Ok(TrainOutcome {
        model,
        run_log,
        alpha_stats,
        checkpoint_paths,
    })
}
