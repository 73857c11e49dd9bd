//! Parameterized layers: dense, embedding, LSTM cell, convolution, pooling,
//! Xavier initialization, and the masked cross-entropy loss.
//!
//! Each layer is a plain record of parameter tensors. `bind` registers the
//! parameters on a tape and returns a mirror struct of `Var` handles; the
//! forward methods live on the bound mirror so one parameter set can serve
//! many tapes (one per example) concurrently.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Uniform Xavier/Glorot entries on [-b, b], b = sqrt(6/(fan_in+fan_out)).
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> Result<f64> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::contract("xavier_init: zero fan"));
    }
    Ok((6.0 / (fan_in + fan_out) as f64).sqrt())
}

/// Xavier-initialized [fan_out x fan_in] weight matrix, deterministic per seed.
pub fn xavier_init(fan_in: usize, fan_out: usize, rng_seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    xavier_shaped(vec![fan_out, fan_in], fan_in, fan_out, &mut rng)
}

/// Xavier entries in an arbitrary shape (convolution kernels and the like),
/// drawing from a caller-owned stream so a whole model can share one rng.
pub fn xavier_shaped(
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let bound = xavier_bound(fan_in, fan_out)?;
    let count: usize = shape.iter().product();
    let values: Vec<f64> = (0..count).map(|_| rng.random_range(-bound..=bound)).collect();
    Ok(Tensor::new(shape, values)?.with_requires_grad(true))
}

// ----- dense ---------------------------------------------------------------

/// Affine layer y = W.x + b with weight [out x in].
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct DenseVars {
    pub weight: Var,
    pub bias: Var,
}

impl DenseLayer {
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(DenseLayer {
            weight: xavier_shaped(vec![out_dim, in_dim], in_dim, out_dim, rng)?,
            bias: Tensor::zeros(vec![out_dim]).with_requires_grad(true),
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> DenseVars {
        DenseVars {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }
}

impl DenseVars {
    /// Forward for a single vector [in] -> [out] or a row batch
    /// [T x in] -> [T x out].
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match tape.shape(x).len() {
            1 => {
                let wx = tape.matvec(self.weight, x)?;
                tape.add(wx, self.bias)
            }
            2 => {
                let wt = tape.transpose(self.weight)?;
                let xw = tape.matmul(x, wt)?;
                tape.add_rows(xw, self.bias)
            }
            _ => Err(Error::ShapeMismatch {
                op: "dense_forward",
                lhs: tape.shape(x).to_vec(),
                rhs: tape.shape(self.weight).to_vec(),
            }),
        }
    }
}

/// Free-function form of the dense forward pass.
pub fn dense_forward(tape: &mut Tape, layer: DenseVars, x: Var) -> Result<Var> {
    layer.forward(tape, x)
}

// ----- embedding -----------------------------------------------------------

/// Token-id to vector table [V x d].
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub table: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct EmbeddingVars {
    pub table: Var,
}

impl EmbeddingTable {
    pub fn init(vocab: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(EmbeddingTable {
            table: xavier_shaped(vec![vocab, dim], dim, dim, rng)?,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> EmbeddingVars {
        EmbeddingVars {
            table: tape.leaf(self.table.clone()),
        }
    }
}

impl EmbeddingVars {
    /// Row gather: ids -> [len x d]. Backward scatters additively.
    pub fn lookup(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        tape.embed_rows(self.table, ids)
    }
}

/// Free-function form of the embedding gather.
pub fn embedding_lookup(tape: &mut Tape, table: EmbeddingVars, ids: &[usize]) -> Result<Var> {
    table.lookup(tape, ids)
}

// ----- LSTM ----------------------------------------------------------------

/// Four-gate LSTM cell over concat(x, h_prev); weights are [h x (d+h)].
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w_i: Tensor,
    pub w_f: Tensor,
    pub w_o: Tensor,
    pub w_g: Tensor,
    pub b_i: Tensor,
    pub b_f: Tensor,
    pub b_o: Tensor,
    pub b_g: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_i: Var,
    pub w_f: Var,
    pub w_o: Var,
    pub w_g: Var,
    pub b_i: Var,
    pub b_f: Var,
    pub b_o: Var,
    pub b_g: Var,
}

impl LstmCell {
    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let gate = |rng: &mut ChaCha8Rng| {
            xavier_shaped(
                vec![hidden_dim, input_dim + hidden_dim],
                input_dim + hidden_dim,
                hidden_dim,
                rng,
            )
        };
        let zero = || Tensor::zeros(vec![hidden_dim]).with_requires_grad(true);
        // Forget bias starts at 1 so early cell state survives long enough
        // for the gates to learn; the other biases start at zero.
        let ones = Tensor::new(vec![hidden_dim], vec![1.0; hidden_dim])?.with_requires_grad(true);
        Ok(LstmCell {
            w_i: gate(rng)?,
            w_f: gate(rng)?,
            w_o: gate(rng)?,
            w_g: gate(rng)?,
            b_i: zero(),
            b_f: ones,
            b_o: zero(),
            b_g: zero(),
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_i.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape) -> LstmVars {
        LstmVars {
            w_i: tape.leaf(self.w_i.clone()),
            w_f: tape.leaf(self.w_f.clone()),
            w_o: tape.leaf(self.w_o.clone()),
            w_g: tape.leaf(self.w_g.clone()),
            b_i: tape.leaf(self.b_i.clone()),
            b_f: tape.leaf(self.b_f.clone()),
            b_o: tape.leaf(self.b_o.clone()),
            b_g: tape.leaf(self.b_g.clone()),
        }
    }
}

/// One LSTM step: i,f,o = sigmoid and g = tanh of gate preactivations over
/// concat(x, h_prev); c = f.c_prev + i.g; h = o.tanh(c).
pub fn lstm_step(
    tape: &mut Tape,
    cell: &LstmVars,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let z = tape.concat(&[x, h_prev])?;
    let gate = |tape: &mut Tape, w: Var, b: Var| -> Result<Var> {
        let wz = tape.matvec(w, z)?;
        tape.add(wz, b)
    };
    let pre_i = gate(tape, cell.w_i, cell.b_i)?;
    let pre_f = gate(tape, cell.w_f, cell.b_f)?;
    let pre_o = gate(tape, cell.w_o, cell.b_o)?;
    let pre_g = gate(tape, cell.w_g, cell.b_g)?;
    let i = tape.sigmoid(pre_i)?;
    let f = tape.sigmoid(pre_f)?;
    let o = tape.sigmoid(pre_o)?;
    let g = tape.tanh(pre_g)?;
    let fc = tape.mul(f, c_prev)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

// ----- convolution and pooling ----------------------------------------------

/// 2-D convolution layer; kernels [outC x inC x kH x kW], per-channel bias.
#[derive(Debug, Clone)]
pub struct Conv2D {
    pub kernels: Tensor,
    pub bias: Tensor,
    pub pad: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2DVars {
    pub kernels: Var,
    pub bias: Var,
    pub pad: usize,
    pub stride: usize,
}

impl Conv2D {
    pub fn init(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        pad: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let fan_out = out_channels * kernel * kernel;
        Ok(Conv2D {
            kernels: xavier_shaped(
                vec![out_channels, in_channels, kernel, kernel],
                fan_in,
                fan_out,
                rng,
            )?,
            bias: Tensor::zeros(vec![out_channels]).with_requires_grad(true),
            pad,
            stride,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> Conv2DVars {
        Conv2DVars {
            kernels: tape.leaf(self.kernels.clone()),
            bias: tape.leaf(self.bias.clone()),
            pad: self.pad,
            stride: self.stride,
        }
    }
}

impl Conv2DVars {
    pub fn forward(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        tape.conv2d(image, self.kernels, self.bias, self.pad, self.stride)
    }
}

/// Free-function form of the convolution forward pass.
pub fn conv2d_forward(tape: &mut Tape, conv: Conv2DVars, image: Var) -> Result<Var> {
    conv.forward(tape, image)
}

/// 2x2/stride-2 max pooling; gradient goes to the first argmax per window.
pub fn maxpool2d(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.maxpool2x2(x)
}

// ----- loss ------------------------------------------------------------------

/// Mean over non-pad positions of -ln softmax(logits_t)[target_t].
pub fn cross_entropy_masked(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
    pad_id: usize,
) -> Result<Var> {
    tape.cross_entropy_masked(logits, targets, pad_id)
}
