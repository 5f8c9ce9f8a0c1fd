//! Model and training configuration, with a flat `key = value` text format.
//!
//! Every field is written on save and every key is validated on load;
//! unknown keys are rejected. A `preset` key (`paper`, `desk`, `tiny`)
//! selects the base values the remaining keys override.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// One convolutional stage of the backbone: a strided stem convolution
/// followed by `depth` two-convolution residual units.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub out_channels: usize,
    pub stride: usize,
    pub kernel: usize,
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Input frame size `(H, W)`.
    pub input_size: (usize, usize),
    pub stages: Vec<StageSpec>,
    /// Which stages feed the transformer, in fusion order.
    pub taps: Vec<usize>,
    /// Pooled grid `(H', W')` for every tap.
    pub target_grids: Vec<(usize, usize)>,
}

impl BackboneConfig {
    /// The default three-stage residual CNN (16/32/64 channels, stride 2 each).
    pub fn tiny_residual(input_size: (usize, usize), taps: Vec<usize>, target_grids: Vec<(usize, usize)>) -> Self {
        let stage = |c| StageSpec {
            out_channels: c,
            stride: 2,
            kernel: 3,
            depth: 1,
        };
        Self {
            in_channels: 3,
            input_size,
            stages: vec![stage(16), stage(32), stage(64)],
            taps,
            target_grids,
        }
    }

    /// Spatial size of every stage's native output map.
    pub fn stage_sizes(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = self.input_size;
        self.stages
            .iter()
            .map(|s| {
                let pad = s.kernel / 2;
                h = (h + 2 * pad - s.kernel) / s.stride + 1;
                w = (w + 2 * pad - s.kernel) / s.stride + 1;
                (h, w)
            })
            .collect()
    }

    /// Channel count `d_s` of every tapped scale.
    pub fn tap_channels(&self) -> Vec<usize> {
        self.taps.iter().map(|&t| self.stages[t].out_channels).collect()
    }

    pub fn validate(&self, patches: usize) -> Result<()> {
        let side = exact_sqrt(patches)
            .ok_or_else(|| Error::Config(format!("patches = {patches} is not a perfect square")))?;
        if self.in_channels == 0 || self.stages.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if self.stages.iter().any(|s| s.out_channels == 0 || s.stride == 0 || s.kernel == 0) {
            return Err(Error::Config("stage channels, stride and kernel must be positive".into()));
        }
        if self.taps.is_empty() {
            return Err(Error::Config("taps must name at least one stage".into()));
        }
        if self.taps.len() != self.target_grids.len() {
            return Err(Error::Config(format!(
                "{} taps but {} target grids",
                self.taps.len(),
                self.target_grids.len()
            )));
        }
        let sizes = self.stage_sizes();
        for (&tap, &(gh, gw)) in self.taps.iter().zip(&self.target_grids) {
            let &(h, w) = sizes
                .get(tap)
                .ok_or_else(|| Error::Config(format!("tap {tap} names a missing stage")))?;
            if gh == 0 || gw == 0 || gh % side != 0 || gw % side != 0 {
                return Err(Error::PatchDivisibility {
                    height: gh,
                    width: gw,
                    patches,
                });
            }
            if gh > h || gw > w {
                return Err(Error::Config(format!(
                    "target grid {gh}x{gw} larger than stage {tap} map {h}x{w}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Frames per clip, `T`.
    pub frames: usize,
    /// Patches per scale, `N`.
    pub patches: usize,
    /// Token width, `D`.
    pub dim: usize,
    /// Attention heads, `A`.
    pub heads: usize,
    /// Encoder blocks per stage, `L`.
    pub blocks: usize,
    /// Output classes, `C`.
    pub classes: usize,
    pub mlp_dim: usize,
    /// Per-stage transformer switch; a disabled stage passes its fused tokens through.
    pub stage_enabled: Vec<bool>,
    pub backbone: BackboneConfig,
    pub seed: u64,
    pub ln_eps: f64,
    pub epos_std: f64,
    /// One temporal embedding table for all scales (otherwise one per scale).
    pub shared_epos: bool,
    /// Single temporal embedding row reused for every frame.
    pub tie_epos: bool,
    /// Extra LayerNorm after the last block of the last stage.
    pub final_norm: bool,
}

impl ModelConfig {
    /// Dimensions reported for the full-size network.
    pub fn paper() -> Self {
        Self {
            frames: 16,
            patches: 16,
            dim: 768,
            heads: 8,
            blocks: 2,
            classes: 7,
            mlp_dim: 4 * 768,
            stage_enabled: vec![true; 3],
            backbone: BackboneConfig::tiny_residual((32, 32), vec![0, 1, 2], vec![(8, 8), (4, 4), (4, 4)]),
            seed: 0,
            ln_eps: 1e-5,
            epos_std: 0.02,
            shared_epos: true,
            tie_epos: false,
            final_norm: false,
        }
    }

    /// Small configuration that trains in minutes on one core.
    pub fn desk() -> Self {
        Self {
            frames: 4,
            dim: 64,
            heads: 4,
            blocks: 1,
            classes: 4,
            mlp_dim: 4 * 64,
            stage_enabled: vec![true; 2],
            backbone: BackboneConfig::tiny_residual((32, 32), vec![1, 2], vec![(8, 8), (4, 4)]),
            ..Self::paper()
        }
    }

    /// Minimal configuration for exhaustive gradient checks.
    pub fn tiny() -> Self {
        Self {
            frames: 2,
            patches: 4,
            dim: 8,
            heads: 2,
            blocks: 1,
            classes: 3,
            mlp_dim: 4 * 8,
            stage_enabled: vec![true],
            backbone: BackboneConfig {
                in_channels: 3,
                input_size: (8, 8),
                stages: vec![StageSpec {
                    out_channels: 3,
                    stride: 2,
                    kernel: 3,
                    depth: 1,
                }],
                taps: vec![0],
                target_grids: vec![(4, 4)],
            },
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    /// Number of scales, `S`.
    pub fn scales(&self) -> usize {
        self.backbone.taps.len()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn grid_side(&self) -> usize {
        exact_sqrt(self.patches).unwrap_or(0)
    }

    /// Patch side `P_s` for every scale.
    pub fn patch_sides(&self) -> Vec<(usize, usize)> {
        let side = self.grid_side().max(1);
        self.backbone
            .target_grids
            .iter()
            .map(|&(h, w)| (h / side, w / side))
            .collect()
    }

    /// Flattened patch length `P²·d_s` for every scale.
    pub fn patch_lens(&self) -> Vec<usize> {
        self.patch_sides()
            .iter()
            .zip(self.backbone.tap_channels())
            .map(|(&(ph, pw), c)| ph * pw * c)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("patches", self.patches),
            ("dim", self.dim),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("classes", self.classes),
            ("mlp_dim", self.mlp_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.stage_enabled.len() != self.scales() {
            return Err(Error::Config(format!(
                "stage_enabled has {} entries for {} scales",
                self.stage_enabled.len(),
                self.scales()
            )));
        }
        if !self.stage_enabled.iter().any(|&e| e) {
            return Err(Error::Config("at least one stage must be enabled".into()));
        }
        if !(self.ln_eps > 0.0) || !(self.epos_std >= 0.0) {
            return Err(Error::Config("ln_eps must be positive and epos_std nonnegative".into()));
        }
        self.backbone.validate(self.patches)
    }
}

/// Piecewise-constant learning-rate schedule plus optimizer settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub base_lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Keep backbone weights fixed and reuse each clip's feature pyramid.
    pub freeze_backbone: bool,
    /// Rescale each averaged batch gradient to at most this global L2 norm;
    /// 0 disables clipping.
    pub max_grad_norm: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 40,
            base_lr: 0.1,
            decay_epochs: vec![20, 35],
            decay_factor: 10.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 8,
            freeze_backbone: false,
            max_grad_norm: 0.0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !self.decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("decay_epochs must be strictly increasing".into()));
        }
        if self.decay_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return Err(Error::Config("decay_epochs must lie before the last epoch".into()));
        }
        if !(self.max_grad_norm >= 0.0) {
            return Err(Error::Config("max_grad_norm must be >= 0".into()));
        }
        if !(self.base_lr >= 0.0) || !(self.decay_factor > 0.0) {
            return Err(Error::Config("base_lr must be >= 0 and decay_factor > 0".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.epochs {
            return Err(Error::EpochOutOfRange {
                epoch,
                epochs: self.epochs,
            });
        }
        let decays = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        Ok(self.base_lr / self.decay_factor.powi(decays as i32))
    }
}

/// Everything a run needs: architecture plus training schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
}

impl RunConfig {
    /// Named architecture with the default schedule; the desk preset trains
    /// with a frozen backbone and gradients clipped to unit norm.
    pub fn preset(name: &str) -> Result<Self> {
        Ok(Self {
            model: ModelConfig::preset(name)?,
            schedule: TrainSchedule {
                freeze_backbone: name == "desk",
                max_grad_norm: if name == "desk" { 1.0 } else { 0.0 },
                ..TrainSchedule::default()
            },
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let b = &m.backbone;
        let s = &self.schedule;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        kv("frames", m.frames.to_string());
        kv("patches", m.patches.to_string());
        kv("dim", m.dim.to_string());
        kv("heads", m.heads.to_string());
        kv("blocks", m.blocks.to_string());
        kv("classes", m.classes.to_string());
        kv("mlp_dim", m.mlp_dim.to_string());
        kv("stage_enabled", join(m.stage_enabled.iter()));
        kv("seed", m.seed.to_string());
        kv("ln_eps", format!("{:e}", m.ln_eps));
        kv("epos_std", m.epos_std.to_string());
        kv("shared_epos", m.shared_epos.to_string());
        kv("tie_epos", m.tie_epos.to_string());
        kv("final_norm", m.final_norm.to_string());
        kv("in_channels", b.in_channels.to_string());
        kv("input_size", format!("{}x{}", b.input_size.0, b.input_size.1));
        kv(
            "stages",
            b.stages
                .iter()
                .map(|s| format!("{}/{}/{}/{}", s.out_channels, s.stride, s.kernel, s.depth))
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("taps", join(b.taps.iter()));
        kv(
            "target_grids",
            b.target_grids
                .iter()
                .map(|(h, w)| format!("{h}x{w}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("epochs", s.epochs.to_string());
        kv("base_lr", s.base_lr.to_string());
        kv("decay_epochs", join(s.decay_epochs.iter()));
        kv("decay_factor", s.decay_factor.to_string());
        kv("momentum", s.momentum.to_string());
        kv("weight_decay", s.weight_decay.to_string());
        kv("batch_size", s.batch_size.to_string());
        kv("freeze_backbone", s.freeze_backbone.to_string());
        kv("max_grad_norm", s.max_grad_norm.to_string());
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let key = k.trim().to_string();
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key {key:?}")));
            }
        }

        let preset = entries.remove("preset").unwrap_or_else(|| "desk".into());
        let mut cfg = Self::preset(&preset)?;
        for (key, value) in &entries {
            cfg.apply(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field from its textual value.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let s = &mut self.schedule;
        match key {
            "frames" => m.frames = num(key, value)?,
            "patches" => m.patches = num(key, value)?,
            "dim" => m.dim = num(key, value)?,
            "heads" => m.heads = num(key, value)?,
            "blocks" => m.blocks = num(key, value)?,
            "classes" => m.classes = num(key, value)?,
            "mlp_dim" => m.mlp_dim = num(key, value)?,
            "stage_enabled" => m.stage_enabled = list(key, value)?,
            "seed" => m.seed = num(key, value)?,
            "ln_eps" => m.ln_eps = num(key, value)?,
            "epos_std" => m.epos_std = num(key, value)?,
            "shared_epos" => m.shared_epos = num(key, value)?,
            "tie_epos" => m.tie_epos = num(key, value)?,
            "final_norm" => m.final_norm = num(key, value)?,
            "in_channels" => m.backbone.in_channels = num(key, value)?,
            "input_size" => m.backbone.input_size = size(key, value)?,
            "stages" => {
                m.backbone.stages = value
                    .split(',')
                    .map(|part| {
                        let f: Vec<usize> = part
                            .split('/')
                            .map(|x| num(key, x))
                            .collect::<Result<_>>()?;
                        match f[..] {
                            [out_channels, stride, kernel, depth] => Ok(StageSpec {
                                out_channels,
                                stride,
                                kernel,
                                depth,
                            }),
                            _ => Err(Error::Config(format!(
                                "stages: expected out/stride/kernel/depth, got {part:?}"
                            ))),
                        }
                    })
                    .collect::<Result<_>>()?
            }
            "taps" => m.backbone.taps = list(key, value)?,
            "target_grids" => {
                m.backbone.target_grids = value
                    .split(',')
                    .map(|p| size(key, p))
                    .collect::<Result<_>>()?
            }
            "epochs" => s.epochs = num(key, value)?,
            "base_lr" => s.base_lr = num(key, value)?,
            "decay_epochs" => {
                s.decay_epochs = if value.trim().is_empty() {
                    Vec::new()
                } else {
                    list(key, value)?
                }
            }
            "decay_factor" => s.decay_factor = num(key, value)?,
            "momentum" => s.momentum = num(key, value)?,
            "weight_decay" => s.weight_decay = num(key, value)?,
            "batch_size" => s.batch_size = num(key, value)?,
            "freeze_backbone" => s.freeze_backbone = num(key, value)?,
            "max_grad_norm" => s.max_grad_norm = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn exact_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

fn join<T: ToString>(items: impl Iterator<Item = T>) -> String {
    items.map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| num(key, v)).collect()
}

fn size(key: &str, value: &str) -> Result<(usize, usize)> {
    let (h, w) = value
        .trim()
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("{key}: expected HxW, got {value:?}")))?;
    Ok((num(key, h)?, num(key, w)?))
}
