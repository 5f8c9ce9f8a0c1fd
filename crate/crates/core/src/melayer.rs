//! Multi-scale embedding: split every scale's feature maps into `N` patches,
//! project each flattened patch to `D`, and add a per-frame positional code.
//!
//! Patches are numbered in raster order over the `√N × √N` patch grid and
//! flattened in (channel, row, column) order. No spatial position term exists.

use std::sync::Arc;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Param, Rng, Tape, Tensor, Var};
use crate::params::Parameters;

/// Embedded tokens `(N, T, D)` of one clip at one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub scale_index: usize,
}

/// Geometry of a patch decomposition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchLayout {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patches: usize,
}

impl PatchLayout {
    pub fn from_shape(shape: &[usize], patches: usize) -> Result<Self> {
        if shape.len() != 4 {
            return Err(Error::InvalidShape {
                op: "patchify",
                shape: shape.to_vec(),
                reason: "expected (T, d, H, W)".into(),
            });
        }
        let layout = Self {
            frames: shape[0],
            channels: shape[1],
            height: shape[2],
            width: shape[3],
            patches,
        };
        let side = layout.grid_side();
        if side == 0 || side * side != patches || !layout.height.is_multiple_of(side) || !layout.width.is_multiple_of(side) {
            return Err(Error::PatchDivisibility {
                height: layout.height,
                width: layout.width,
                patches,
            });
        }
        Ok(layout)
    }

    pub fn grid_side(&self) -> usize {
        (self.patches as f64).sqrt().round() as usize
    }

    /// Patch extent `(P_h, P_w)`.
    pub fn patch_size(&self) -> (usize, usize) {
        let side = self.grid_side();
        (self.height / side, self.width / side)
    }

    pub fn patch_len(&self) -> usize {
        let (ph, pw) = self.patch_size();
        ph * pw * self.channels
    }

    pub fn patch_shape(&self) -> [usize; 3] {
        [self.patches, self.frames, self.patch_len()]
    }

    /// Source offset in the `(T, d, H, W)` map for every element of the
    /// `(N, T, P²·d)` patch tensor.
    pub fn gather_index(&self) -> Vec<usize> {
        let side = self.grid_side();
        let (ph, pw) = self.patch_size();
        let mut index = Vec::with_capacity(self.patches * self.frames * self.patch_len());
        for p in 0..self.patches {
            let (gy, gx) = (p / side, p % side);
            for t in 0..self.frames {
                for c in 0..self.channels {
                    for y in 0..ph {
                        for x in 0..pw {
                            let row = gy * ph + y;
                            let col = gx * pw + x;
                            index.push(((t * self.channels + c) * self.height + row) * self.width + col);
                        }
                    }
                }
            }
        }
        index
    }
}

/// Splits `(T, d, H', W')` into `(N, T, P²·d)`.
pub fn patchify(fmap: &Tensor, patches: usize) -> Result<Tensor> {
    let layout = PatchLayout::from_shape(fmap.shape(), patches)?;
    let data = layout.gather_index().iter().map(|&i| fmap.data()[i]).collect();
    Tensor::new(layout.patch_shape().to_vec(), data)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, layout: &PatchLayout) -> Result<Tensor> {
    if patches.shape() != layout.patch_shape() {
        return Err(Error::ShapeMismatch {
            op: "unpatchify",
            lhs: patches.shape().to_vec(),
            rhs: layout.patch_shape().to_vec(),
        });
    }
    let mut out = vec![0.0; patches.numel()];
    for (&dst, &v) in layout.gather_index().iter().zip(patches.data()) {
        out[dst] = v;
    }
    Tensor::new(vec![layout.frames, layout.channels, layout.height, layout.width], out)
}

#[derive(Clone, Debug)]
pub struct MELayer {
    /// One projection `(D, P²·d_s)` per scale.
    pub embed: Vec<Param>,
    /// Temporal embedding tables `(rows, D)`: one shared table, or one per scale.
    pub pos: Vec<Param>,
    pub patches: usize,
    pub tied: bool,
}

impl MELayer {
    pub fn new(config: &ModelConfig, rng: &mut Rng) -> Self {
        let embed = config
            .patch_lens()
            .into_iter()
            .map(|len| Param::new(rng.normal_tensor(&[config.dim, len], 1.0 / (len as f64).sqrt())))
            .collect();
        let tables = if config.shared_epos { 1 } else { config.scales() };
        let rows = if config.tie_epos { 1 } else { config.frames };
        let pos = (0..tables)
            .map(|_| Param::new(rng.normal_tensor(&[rows, config.dim], config.epos_std)))
            .collect();
        Self {
            embed,
            pos,
            patches: config.patches,
            tied: config.tie_epos,
        }
    }

    pub fn dim(&self) -> usize {
        self.embed[0].value().shape()[0]
    }

    pub fn pos_table(&self, scale: usize) -> &Param {
        &self.pos[scale.min(self.pos.len() - 1)]
    }

    /// Projects patches `(N, T, P²·d)` and adds the temporal embedding.
    pub fn embed_patches(&self, tape: &mut Tape, patches: Var, scale: usize) -> Result<Var> {
        let shape = tape.shape(patches).to_vec();
        let e = tape.param(&self.embed[scale]);
        if shape.len() != 3 || tape.shape(e)[1] != shape[2] {
            return Err(Error::ShapeMismatch {
                op: "embed",
                lhs: shape,
                rhs: tape.shape(e).to_vec(),
            });
        }
        let (n, t, d) = (shape[0], shape[1], self.dim());
        let rows = self.pos_table(scale).value().shape()[0];
        if !self.tied && t > rows {
            return Err(Error::Config(format!("{t} frames but only {rows} positional rows")));
        }
        let projected = tape.linear(patches, e)?;
        let table = tape.param(self.pos_table(scale));
        let index: Vec<usize> = (0..n)
            .flat_map(|_| (0..t).flat_map(move |ti| (0..d).map(move |j| if rows == 1 { j } else { ti * d + j })))
            .collect();
        let pos = tape.gather(table, Arc::new(index), &[n, t, d])?;
        tape.add(projected, pos)
    }

    /// Patchifies a feature map `(T, d, H', W')` and embeds it.
    pub fn forward(&self, tape: &mut Tape, fmap: Var, scale: usize) -> Result<Var> {
        let layout = PatchLayout::from_shape(tape.shape(fmap), self.patches)?;
        let patches = tape.gather(fmap, Arc::new(layout.gather_index()), &layout.patch_shape())?;
        self.embed_patches(tape, patches, scale)
    }
}

impl Parameters for MELayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        for (s, e) in self.embed.iter().enumerate() {
            f(format!("{prefix}.embed{s}"), e);
        }
        for (s, p) in self.pos.iter().enumerate() {
            f(format!("{prefix}.pos{s}"), p);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (s, e) in self.embed.iter_mut().enumerate() {
            f(format!("{prefix}.embed{s}"), e);
        }
        for (s, p) in self.pos.iter_mut().enumerate() {
            f(format!("{prefix}.pos{s}"), p);
        }
    }
}
