//! Full network: backbone → per-scale embedding → per-stage temporal
//! transformers fused by element-wise addition → (patch, frame) mean → FC.

use crate::backbone::{Backbone, FeaturePyramid};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::melayer::{MELayer, TokenGrid};
use crate::numerics::{softmax_lastdim, Param, Rng, Tape, Tensor, Var};
use crate::params::Parameters;
use crate::tformer::{tformer_forward, AttentionRecord, LayerNormParams, TFormerBlock};

/// Intermediate values captured during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct Diagnostics {
    /// Attention records per stage, block order within a stage. Empty for
    /// disabled stages.
    pub attention: Vec<Vec<AttentionRecord>>,
    /// Fused tokens entering each stage, `(N, T, D)`.
    pub stage_inputs: Vec<Tensor>,
    /// Tokens leaving each stage, `(N, T, D)`.
    pub stage_outputs: Vec<Tensor>,
    /// Pooled representation `z̄` of length `D`.
    pub pooled: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Msstnet {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub melayer: MELayer,
    /// Encoder blocks per stage; empty for a disabled stage.
    pub stages: Vec<Vec<TFormerBlock>>,
    pub final_norm: Option<LayerNormParams>,
    /// `(C, D)`
    pub head_weight: Param,
    pub head_bias: Param,
}

impl Msstnet {
    /// Builds and initializes a network from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let backbone = Backbone::new(config.backbone.clone(), &mut rng.fork());
        let melayer = MELayer::new(&config, &mut rng.fork());
        let mut block_rng = rng.fork();
        let stages = config
            .stage_enabled
            .iter()
            .map(|&enabled| {
                if enabled {
                    (0..config.blocks)
                        .map(|_| TFormerBlock::from_config(&config, &mut block_rng))
                        .collect()
                } else {
                    Vec::new()
                }
            })
            .collect();
        let final_norm = config.final_norm.then(|| LayerNormParams::new(config.dim));
        let head_weight = Param::new(rng.normal_tensor(&[config.classes, config.dim], 0.02));
        let head_bias = Param::new(Tensor::zeros(&[config.classes]));
        Ok(Self {
            config,
            backbone,
            melayer,
            stages,
            final_norm,
            head_weight,
            head_bias,
        })
    }

    /// Zeroes every block's output projections so each block is the identity.
    pub fn make_blocks_identity(&mut self) {
        self.stages.iter_mut().flatten().for_each(TFormerBlock::make_identity);
    }

    /// Sets every temporal embedding row to the same value.
    pub fn neutralize_positions(&mut self) {
        for table in &mut self.melayer.pos {
            let t = table.value_mut();
            let d = t.shape()[1];
            let first = t.data()[..d].to_vec();
            for row in t.data_mut().chunks_exact_mut(d) {
                row.copy_from_slice(&first);
            }
        }
    }

    fn check_clip(&self, shape: &[usize]) -> Result<()> {
        let (h, w) = self.config.backbone.input_size;
        let want = [self.config.frames, self.config.backbone.in_channels, h, w];
        if shape != want {
            return Err(Error::ShapeMismatch {
                op: "clip",
                lhs: shape.to_vec(),
                rhs: want.to_vec(),
            });
        }
        Ok(())
    }

    /// Embedded tokens `(N, T, D)` for every scale, before fusion.
    pub fn embed(&self, tape: &mut Tape, clip: Var) -> Result<Vec<Var>> {
        self.check_clip(tape.shape(clip))?;
        let maps = self.backbone.forward(tape, clip)?;
        self.embed_maps(tape, &maps)
    }

    /// Embedded tokens from already pooled feature maps `(T, d_s, H_s, W_s)`.
    pub fn embed_maps(&self, tape: &mut Tape, maps: &[Var]) -> Result<Vec<Var>> {
        if maps.len() != self.config.scales() {
            return Err(Error::LengthMismatch {
                what: "feature maps and scales",
                left: maps.len(),
                right: self.config.scales(),
            });
        }
        maps.iter()
            .enumerate()
            .map(|(s, &fmap)| self.melayer.forward(tape, fmap, s))
            .collect()
    }

    /// Logits from a precomputed feature pyramid; the backbone is not
    /// recorded on `tape`.
    pub fn forward_pyramid(&self, tape: &mut Tape, pyramid: &FeaturePyramid, capture: bool) -> Result<(Var, Diagnostics)> {
        let maps: Vec<Var> = pyramid.scales.iter().map(|m| tape.constant(m.clone())).collect();
        let tokens = self.embed_maps(tape, &maps)?;
        self.forward_tokens(tape, &tokens, capture)
    }

    /// Runs the fusion chain and head on already-embedded tokens.
    pub fn forward_tokens(&self, tape: &mut Tape, tokens: &[Var], capture: bool) -> Result<(Var, Diagnostics)> {
        if tokens.len() != self.stages.len() {
            return Err(Error::LengthMismatch {
                what: "token scales and stages",
                left: tokens.len(),
                right: self.stages.len(),
            });
        }
        let mut diag = Diagnostics::default();
        let mut carried: Option<Var> = None;
        for (&embedded, blocks) in tokens.iter().zip(&self.stages) {
            let input = match carried {
                Some(prev) => integrate_scales(tape, prev, embedded)?,
                None => embedded,
            };
            let (output, records) = if blocks.is_empty() {
                (input, Vec::new())
            } else {
                tformer_forward(tape, input, blocks, capture)?
            };
            if capture {
                diag.stage_inputs.push(tape.value(input).clone());
                diag.stage_outputs.push(tape.value(output).clone());
                diag.attention.push(records);
            }
            carried = Some(output);
        }
        let mut z = carried.expect("at least one stage");
        if let Some(norm) = &self.final_norm {
            z = norm.forward(tape, z, self.config.ln_eps)?;
        }
        let pooled = tape.mean_rows(z)?;
        if capture {
            diag.pooled = Some(tape.value(pooled).clone());
        }
        let (w, b) = (tape.param(&self.head_weight), tape.param(&self.head_bias));
        let logits = tape.linear(pooled, w)?;
        let logits = tape.add_bias(logits, b)?;
        Ok((logits, diag))
    }

    /// Logits `(C)` for one clip `(T, 3, H, W)` recorded on `tape`.
    pub fn forward(&self, tape: &mut Tape, clip: Var, capture: bool) -> Result<(Var, Diagnostics)> {
        let tokens = self.embed(tape, clip)?;
        self.forward_tokens(tape, &tokens, capture)
    }

    /// Untracked forward pass for inference.
    pub fn predict(&self, clip: &Tensor, capture: bool) -> Result<(Tensor, Diagnostics)> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(clip.clone());
        let (logits, diag) = self.forward(&mut tape, x, capture)?;
        Ok((tape.value(logits).clone(), diag))
    }

    /// All named parameters in optimizer order.
    pub fn named(&self) -> Vec<(String, Param)> {
        self.named_params("model")
    }

    /// Replaces parameter values by name; every name and shape must match.
    pub fn load_named(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        let mut by_name: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
        let mut problem = None;
        self.visit_mut("model", &mut |name, p| {
            if problem.is_some() {
                return;
            }
            match by_name.remove(&name) {
                Some(t) if t.shape() == p.value().shape() => p.set(t),
                Some(t) => problem = Some(format!("{name}: shape {:?}, expected {:?}", t.shape(), p.value().shape())),
                None => problem = Some(format!("{name}: missing")),
            }
        });
        if let Some(reason) = problem {
            return Err(Error::Config(format!("checkpoint mismatch: {reason}")));
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Config(format!("checkpoint mismatch: unexpected tensor {extra}")));
        }
        Ok(())
    }
}

impl Parameters for Msstnet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.backbone.visit(&format!("{prefix}.backbone"), f);
        self.melayer.visit(&format!("{prefix}.melayer"), f);
        for (s, blocks) in self.stages.iter().enumerate() {
            for (l, block) in blocks.iter().enumerate() {
                block.visit(&format!("{prefix}.stage{s}.block{l}"), f);
            }
        }
        if let Some(norm) = &self.final_norm {
            f(format!("{prefix}.final_norm.gamma"), &norm.gamma);
            f(format!("{prefix}.final_norm.beta"), &norm.beta);
        }
        f(format!("{prefix}.head.weight"), &self.head_weight);
        f(format!("{prefix}.head.bias"), &self.head_bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.backbone.visit_mut(&format!("{prefix}.backbone"), f);
        self.melayer.visit_mut(&format!("{prefix}.melayer"), f);
        for (s, blocks) in self.stages.iter_mut().enumerate() {
            for (l, block) in blocks.iter_mut().enumerate() {
                block.visit_mut(&format!("{prefix}.stage{s}.block{l}"), f);
            }
        }
        if let Some(norm) = &mut self.final_norm {
            f(format!("{prefix}.final_norm.gamma"), &mut norm.gamma);
            f(format!("{prefix}.final_norm.beta"), &mut norm.beta);
        }
        f(format!("{prefix}.head.weight"), &mut self.head_weight);
        f(format!("{prefix}.head.bias"), &mut self.head_bias);
    }
}

/// Element-wise sum fusing one stage's output into the next stage's tokens.
pub fn integrate_scales(tape: &mut Tape, prev: Var, next: Var) -> Result<Var> {
    tape.add(prev, next)
}

/// Untracked [`integrate_scales`] on token grids; the result keeps `next`'s scale index.
pub fn integrate_grids(prev: &TokenGrid, next: &TokenGrid) -> Result<TokenGrid> {
    if prev.tokens.shape() != next.tokens.shape() {
        return Err(Error::ShapeMismatch {
            op: "integrate_scales",
            lhs: prev.tokens.shape().to_vec(),
            rhs: next.tokens.shape().to_vec(),
        });
    }
    let data = prev
        .tokens
        .data()
        .iter()
        .zip(next.tokens.data())
        .map(|(a, b)| a + b)
        .collect();
    Ok(TokenGrid {
        tokens: Tensor::new(next.tokens.shape().to_vec(), data)?,
        scale_index: next.scale_index,
    })
}

/// Class probabilities from logits.
pub fn predict_distribution(logits: &Tensor) -> Result<Tensor> {
    softmax_lastdim(logits)
}
