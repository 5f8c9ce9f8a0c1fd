//! Closed-form FLOPs accounting and feature/attention dumps.
//!
//! One multiply-accumulate counts as 2 FLOPs. Biases, normalizations,
//! activations, pooling and softmax are not counted. The terms are:
//!
//! | component        | FLOPs                                         |
//! |------------------|-----------------------------------------------|
//! | conv layer       | `2·k²·c_in·c_out·H_out·W_out·T`               |
//! | patch embedding  | `2·(P²·d_s)·D·N·T` per scale                  |
//! | q, k, v          | `3·2·D·D·N·T` per block                       |
//! | attention        | `2·2·N·T²·D` per block (scores and mixing)    |
//! | output projection| `2·D·D·N·T` per block                         |
//! | MLP              | `2·2·D·D_mlp·N·T` per block                   |
//! | head             | `2·D·C`                                       |
//!
//! Only backbone stages up to the deepest tap are evaluated, so only those
//! are counted.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Msstnet;
use crate::numerics::Tensor;

/// FLOPs of one transformer stage, summed over its blocks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TFormerFlops {
    pub qkv: u64,
    pub attention: u64,
    pub projection: u64,
    pub mlp: u64,
}

impl TFormerFlops {
    pub fn total(&self) -> u64 {
        self.qkv + self.attention + self.projection + self.mlp
    }
}

/// Per-component FLOPs of one forward pass over a single clip.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopsReport {
    pub frames: usize,
    pub backbone: u64,
    pub melayer: u64,
    /// One entry per stage; all zero for a disabled stage.
    pub stages: Vec<TFormerFlops>,
    pub head: u64,
}

impl FlopsReport {
    pub fn total(&self) -> u64 {
        self.backbone + self.melayer + self.stages.iter().map(TFormerFlops::total).sum::<u64>() + self.head
    }

    /// `(name, FLOPs)` for every leaf term, in forward order.
    pub fn components(&self) -> Vec<(String, u64)> {
        let mut out = vec![("backbone".to_string(), self.backbone), ("melayer".to_string(), self.melayer)];
        for (s, st) in self.stages.iter().enumerate() {
            out.push((format!("stage{s}.qkv"), st.qkv));
            out.push((format!("stage{s}.attention"), st.attention));
            out.push((format!("stage{s}.projection"), st.projection));
            out.push((format!("stage{s}.mlp"), st.mlp));
        }
        out.push(("head".to_string(), self.head));
        out
    }

    /// Aligned text table with a GFLOPs column and a total row.
    pub fn to_table(&self) -> String {
        let mut rows = self.components();
        rows.push(("total".to_string(), self.total()));
        let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("component".len());
        let mut out = format!("{:<width$}  {:>16}  {:>10}\n", "component", "FLOPs", "GFLOPs");
        for (name, flops) in rows {
            writeln!(out, "{name:<width$}  {flops:>16}  {:>10.4}", flops as f64 / 1e9).unwrap();
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,flops\n");
        for (name, flops) in self.components() {
            writeln!(out, "{name},{flops}").unwrap();
        }
        writeln!(out, "total,{}", self.total()).unwrap();
        out
    }
}

/// FLOPs of a linear map applied to `tokens` rows.
pub fn linear_flops(d_in: usize, d_out: usize, tokens: usize) -> u64 {
    2 * (d_in * d_out * tokens) as u64
}

/// Closed-form FLOPs of one forward pass.
pub fn count_flops(config: &ModelConfig) -> Result<FlopsReport> {
    config.validate()?;
    let t = config.frames;
    let bb = &config.backbone;

    let last_tap = bb.taps.iter().copied().max().unwrap_or(0);
    let mut backbone = 0u64;
    let (mut h, mut w) = bb.input_size;
    let mut c_in = bb.in_channels;
    for spec in &bb.stages[..=last_tap] {
        let pad = spec.kernel / 2;
        let oh = (h + 2 * pad - spec.kernel) / spec.stride + 1;
        let ow = (w + 2 * pad - spec.kernel) / spec.stride + 1;
        let k2 = spec.kernel * spec.kernel;
        let conv = |cin: usize| 2 * (k2 * cin * spec.out_channels * oh * ow * t) as u64;
        backbone += conv(c_in) + 2 * spec.depth as u64 * conv(spec.out_channels);
        (h, w, c_in) = (oh, ow, spec.out_channels);
    }

    let (n, d) = (config.patches, config.dim);
    let tokens = n * t;
    let melayer = config.patch_lens().iter().map(|&len| linear_flops(len, d, tokens)).sum();

    let per_block = TFormerFlops {
        qkv: 3 * linear_flops(d, d, tokens),
        attention: 2 * 2 * (n * t * t * d) as u64,
        projection: linear_flops(d, d, tokens),
        mlp: linear_flops(d, config.mlp_dim, tokens) + linear_flops(config.mlp_dim, d, tokens),
    };
    let blocks = config.blocks as u64;
    let stages = config
        .stage_enabled
        .iter()
        .map(|&enabled| {
            if enabled {
                TFormerFlops {
                    qkv: blocks * per_block.qkv,
                    attention: blocks * per_block.attention,
                    projection: blocks * per_block.projection,
                    mlp: blocks * per_block.mlp,
                }
            } else {
                TFormerFlops::default()
            }
        })
        .collect();

    Ok(FlopsReport {
        frames: t,
        backbone,
        melayer,
        stages,
        head: linear_flops(d, config.classes, 1),
    })
}

/// One row of a frame-count sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalingRow {
    pub frames: usize,
    pub flops: u64,
    pub flops_per_frame: f64,
}

/// Total FLOPs for each frame count, all other settings fixed.
pub fn flops_scaling(config: &ModelConfig, frames: &[usize]) -> Result<Vec<ScalingRow>> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("frame list"));
    }
    frames
        .iter()
        .map(|&t| {
            let flops = count_flops(&ModelConfig {
                frames: t,
                ..config.clone()
            })?
            .total();
            Ok(ScalingRow {
                frames: t,
                flops,
                flops_per_frame: flops as f64 / t as f64,
            })
        })
        .collect()
}

/// Aligned table; `ratio` is FLOPs relative to the first row.
pub fn scaling_table(rows: &[ScalingRow]) -> String {
    let base = rows.first().map_or(1.0, |r| r.flops as f64);
    let mut out = format!("{:>6}  {:>16}  {:>10}  {:>16}  {:>8}\n", "T", "FLOPs", "GFLOPs", "FLOPs/T", "ratio");
    for r in rows {
        writeln!(
            out,
            "{:>6}  {:>16}  {:>10.4}  {:>16.1}  {:>8.4}",
            r.frames,
            r.flops,
            r.flops as f64 / 1e9,
            r.flops_per_frame,
            r.flops as f64 / base
        )
        .unwrap();
    }
    out
}

pub fn scaling_csv(rows: &[ScalingRow]) -> String {
    let base = rows.first().map_or(1.0, |r| r.flops as f64);
    let mut out = String::from("frames,flops,flops_per_frame,ratio\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.frames, r.flops, r.flops_per_frame, r.flops as f64 / base).unwrap();
    }
    out
}

/// Token L2 norms of one frame arranged on the `√N × √N` patch grid.
pub fn magnitude_grid(tokens: &Tensor, frame: usize) -> Result<Vec<Vec<f64>>> {
    let shape = tokens.shape();
    if shape.len() != 3 || frame >= shape[1] {
        return Err(Error::InvalidShape {
            op: "magnitude_grid",
            shape: shape.to_vec(),
            reason: format!("expected (N, T, D) with T > {frame}"),
        });
    }
    let (n, t, d) = (shape[0], shape[1], shape[2]);
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(Error::PatchDivisibility {
            height: n,
            width: 1,
            patches: n,
        });
    }
    let norm = |p: usize| {
        let off = (p * t + frame) * d;
        tokens.data()[off..off + d].iter().map(|v| v * v).sum::<f64>().sqrt()
    };
    Ok((0..side).map(|r| (0..side).map(|c| norm(r * side + c)).collect()).collect())
}

fn grid_text(grid: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for row in grid {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
        writeln!(out, "{}", cells.join(" ")).unwrap();
    }
    out
}

/// Parses a grid written by [`dump_maps`].
pub fn read_grid(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            line.split_whitespace()
                .map(|v| v.parse().map_err(|_| Error::format(path, format!("bad number {v:?}"))))
                .collect()
        })
        .collect()
}

/// Files written by [`dump_maps`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DumpFiles {
    /// `stage{s}_t{t}_pre.txt` and `_post.txt` grids.
    pub grids: Vec<PathBuf>,
    /// `attention_stage{s}.csv`, one per enabled stage.
    pub attention: Vec<PathBuf>,
}

/// Writes per-(stage, frame) token-magnitude grids before and after each
/// stage's transformer, and every attention weight as CSV with columns
/// `block,head,patch,t_query,t_key,weight`.
pub fn dump_maps(model: &Msstnet, clip: &Tensor, out_dir: &Path, capture: bool) -> Result<DumpFiles> {
    if !capture {
        return Err(Error::Config("dumping maps requires capture to be enabled".into()));
    }
    let (_, diag) = model.predict(clip, true)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let write = |name: String, text: String| -> Result<PathBuf> {
        let path = out_dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    };

    let mut files = DumpFiles::default();
    for (s, (pre, post)) in diag.stage_inputs.iter().zip(&diag.stage_outputs).enumerate() {
        for t in 0..model.config.frames {
            for (tag, tokens) in [("pre", pre), ("post", post)] {
                let grid = magnitude_grid(tokens, t)?;
                files.grids.push(write(format!("stage{s}_t{t}_{tag}.txt"), grid_text(&grid))?);
            }
        }
    }
    for (s, records) in diag.attention.iter().enumerate() {
        if records.is_empty() {
            continue;
        }
        let mut csv = String::from("block,head,patch,t_query,t_key,weight\n");
        for (block, record) in records.iter().enumerate() {
            let shape = record.weights.shape();
            let (heads, patches, frames) = (shape[0], shape[1], shape[2]);
            let mut values = record.weights.data().iter();
            for head in 0..heads {
                for patch in 0..patches {
                    for tq in 0..frames {
                        for tk in 0..frames {
                            let w = values.next().expect("weights match their shape");
                            writeln!(csv, "{block},{head},{patch},{tq},{tk},{w:.17e}").unwrap();
                        }
                    }
                }
            }
        }
        files.attention.push(write(format!("attention_stage{s}.csv"), csv)?);
    }
    Ok(files)
}
