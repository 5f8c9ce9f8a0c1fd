//! Temporal transformer encoder.
//!
//! Tokens are laid out `(N, T, D)`. Self-attention runs only along `T`, once
//! per (head, patch) pair, so no term ever mixes two patch positions.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Param, Rng, Tape, Tensor, Var};
use crate::params::Parameters;

/// Attention weights `(A, N, T, T)` of one block; row `(a, p, t)` is the
/// distribution over key frames for query frame `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub weights: Tensor,
}

impl AttentionRecord {
    /// Largest deviation of any row sum from one.
    pub fn max_row_error(&self) -> f64 {
        let t = *self.weights.shape().last().unwrap();
        self.weights
            .data()
            .chunks_exact(t)
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: Param,
    pub beta: Param,
}

impl LayerNormParams {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::ones(&[dim])),
            beta: Param::new(Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, eps: f64) -> Result<Var> {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        tape.layer_norm(x, g, b, eps)
    }
}

/// Parameters of one encoder block. Per-head projections are stacked
/// row-wise: rows `a·D_h .. (a+1)·D_h` of `w_q` belong to head `a`.
#[derive(Clone, Debug)]
pub struct TFormerBlock {
    pub heads: usize,
    pub eps: f64,
    pub norm1: LayerNormParams,
    pub w_q: Param,
    pub w_k: Param,
    pub w_v: Param,
    /// `(D, A·D_h)`
    pub w_o: Param,
    pub norm2: LayerNormParams,
    pub fc1: Param,
    pub fc1_bias: Param,
    pub fc2: Param,
    pub fc2_bias: Param,
}

const WEIGHT_STD: f64 = 0.02;

impl TFormerBlock {
    pub fn new(dim: usize, heads: usize, mlp_dim: usize, eps: f64, rng: &mut Rng) -> Self {
        let mut w = |rows: usize, cols: usize| Param::new(rng.normal_tensor(&[rows, cols], WEIGHT_STD));
        Self {
            heads,
            eps,
            norm1: LayerNormParams::new(dim),
            w_q: w(dim, dim),
            w_k: w(dim, dim),
            w_v: w(dim, dim),
            w_o: w(dim, dim),
            norm2: LayerNormParams::new(dim),
            fc1: w(mlp_dim, dim),
            fc1_bias: Param::new(Tensor::zeros(&[mlp_dim])),
            fc2: w(dim, mlp_dim),
            fc2_bias: Param::new(Tensor::zeros(&[dim])),
        }
    }

    pub fn from_config(config: &ModelConfig, rng: &mut Rng) -> Self {
        Self::new(config.dim, config.heads, config.mlp_dim, config.ln_eps, rng)
    }

    pub fn dim(&self) -> usize {
        self.w_o.value().shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    /// Zeroes the attention output projection and the MLP output layer,
    /// turning the block into the identity map.
    pub fn make_identity(&mut self) {
        for p in [&mut self.w_o, &mut self.fc2, &mut self.fc2_bias] {
            p.value_mut().data_mut().fill(0.0);
        }
    }

    fn check_tokens(&self, tape: &Tape, z: Var) -> Result<(usize, usize)> {
        let shape = tape.shape(z);
        if shape.len() != 3 || shape[2] != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "tformer tokens",
                lhs: shape.to_vec(),
                rhs: vec![0, 0, self.dim()],
            });
        }
        Ok((shape[0], shape[1]))
    }

    /// Per-head queries, keys and values `(A, N, T, D_h)` from one shared
    /// LayerNorm of the input tokens.
    pub fn qkv_project(&self, tape: &mut Tape, z: Var) -> Result<(Var, Var, Var)> {
        let (n, t) = self.check_tokens(tape, z)?;
        let normed = self.norm1.forward(tape, z, self.eps)?;
        let (a, dh) = (self.heads, self.head_dim());
        let mut project = |w: &Param| -> Result<Var> {
            let w = tape.param(w);
            let y = tape.linear(normed, w)?;
            let y = tape.reshape(y, &[n, t, a, dh])?;
            tape.permute(y, &[2, 0, 1, 3])
        };
        Ok((project(&self.w_q)?, project(&self.w_k)?, project(&self.w_v)?))
    }

    /// Block output and the attention weights `(A, N, T, T)` as a tape node.
    pub fn forward(&self, tape: &mut Tape, z: Var) -> Result<(Var, Var)> {
        let (n, t) = self.check_tokens(tape, z)?;
        let (q, k, v) = self.qkv_project(tape, z)?;
        let (s, alpha) = temporal_attention(tape, q, k, v)?;

        let s = tape.permute(s, &[1, 2, 0, 3])?;
        let s = tape.reshape(s, &[n, t, self.dim()])?;
        let w_o = tape.param(&self.w_o);
        let attended = tape.linear(s, w_o)?;
        let hidden = tape.add(attended, z)?;

        let normed = self.norm2.forward(tape, hidden, self.eps)?;
        let (fc1, b1) = (tape.param(&self.fc1), tape.param(&self.fc1_bias));
        let m = tape.linear(normed, fc1)?;
        let m = tape.add_bias(m, b1)?;
        let m = tape.gelu(m);
        let (fc2, b2) = (tape.param(&self.fc2), tape.param(&self.fc2_bias));
        let m = tape.linear(m, fc2)?;
        let m = tape.add_bias(m, b2)?;
        let out = tape.add(m, hidden)?;
        Ok((out, alpha))
    }
}

impl Parameters for TFormerBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(format!("{prefix}.norm1.gamma"), &self.norm1.gamma);
        f(format!("{prefix}.norm1.beta"), &self.norm1.beta);
        f(format!("{prefix}.w_q"), &self.w_q);
        f(format!("{prefix}.w_k"), &self.w_k);
        f(format!("{prefix}.w_v"), &self.w_v);
        f(format!("{prefix}.w_o"), &self.w_o);
        f(format!("{prefix}.norm2.gamma"), &self.norm2.gamma);
        f(format!("{prefix}.norm2.beta"), &self.norm2.beta);
        f(format!("{prefix}.fc1"), &self.fc1);
        f(format!("{prefix}.fc1_bias"), &self.fc1_bias);
        f(format!("{prefix}.fc2"), &self.fc2);
        f(format!("{prefix}.fc2_bias"), &self.fc2_bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.norm1.gamma"), &mut self.norm1.gamma);
        f(format!("{prefix}.norm1.beta"), &mut self.norm1.beta);
        f(format!("{prefix}.w_q"), &mut self.w_q);
        f(format!("{prefix}.w_k"), &mut self.w_k);
        f(format!("{prefix}.w_v"), &mut self.w_v);
        f(format!("{prefix}.w_o"), &mut self.w_o);
        f(format!("{prefix}.norm2.gamma"), &mut self.norm2.gamma);
        f(format!("{prefix}.norm2.beta"), &mut self.norm2.beta);
        f(format!("{prefix}.fc1"), &mut self.fc1);
        f(format!("{prefix}.fc1_bias"), &mut self.fc1_bias);
        f(format!("{prefix}.fc2"), &mut self.fc2);
        f(format!("{prefix}.fc2_bias"), &mut self.fc2_bias);
    }
}

/// Softmax attention along the frame axis.
///
/// Inputs are `(A, N, T, D_h)`; returns the mixed values `(A, N, T, D_h)` and
/// the weights `(A, N, T, T)`. Queries are scaled by `1/√D_h` before the dot
/// product.
pub fn temporal_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let shape = tape.shape(q).to_vec();
    if shape.len() != 4 || tape.shape(k) != shape.as_slice() || tape.shape(v) != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "temporal_attention",
            lhs: shape,
            rhs: tape.shape(k).to_vec(),
        });
    }
    let (a, n, t, dh) = (shape[0], shape[1], shape[2], shape[3]);
    let q = tape.scale(q, 1.0 / (dh as f64).sqrt());
    let q = tape.reshape(q, &[a * n, t, dh])?;
    let k = tape.reshape(k, &[a * n, t, dh])?;
    let v = tape.reshape(v, &[a * n, t, dh])?;
    let scores = tape.bmm_nt(q, k)?;
    let alpha = tape.softmax_lastdim(scores)?;
    let s = tape.bmm(alpha, v)?;
    let s = tape.reshape(s, &[a, n, t, dh])?;
    let alpha = tape.reshape(alpha, &[a, n, t, t])?;
    Ok((s, alpha))
}

/// Runs the blocks in order. Attention records are collected only when
/// `capture` is set.
pub fn tformer_forward(
    tape: &mut Tape,
    z: Var,
    blocks: &[TFormerBlock],
    capture: bool,
) -> Result<(Var, Vec<AttentionRecord>)> {
    if blocks.is_empty() {
        return Err(Error::EmptyInput("transformer needs at least one block"));
    }
    let mut records = Vec::new();
    let mut z = z;
    for block in blocks {
        let (out, alpha) = block.forward(tape, z)?;
        if capture {
            records.push(AttentionRecord {
                weights: tape.value(alpha).clone(),
            });
        }
        z = out;
    }
    Ok((z, records))
}
