//! Per-frame multi-scale convolutional feature extractor.
//!
//! Frames are processed as a batch of independent images; no operation mixes
//! the temporal axis. Each tapped stage is average-pooled to its target grid
//! and passed through a per-channel affine map, which starts as the identity
//! and can be calibrated to standardize the features of a data set.

use std::sync::Arc;

use crate::config::{BackboneConfig, StageSpec};
use crate::error::{Error, Result};
use crate::numerics::{Param, Rng, Tape, Tensor, Var};
use crate::params::Parameters;

/// Per-scale feature maps for one clip; scale `s` has shape `(T, d_s, H'_s, W'_s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub scales: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    /// Kaiming fan-in initialization, zero bias.
    pub fn new(rng: &mut Rng, in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        Self {
            weight: Param::new(rng.normal_tensor(
                &[out_channels, in_channels, kernel, kernel],
                (2.0 / fan_in).sqrt(),
            )),
            bias: Param::new(Tensor::zeros(&[out_channels])),
            stride,
            padding: kernel / 2,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

impl Parameters for ConvLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

/// `relu(x + conv2(relu(conv1(x))))`
#[derive(Clone, Debug)]
pub struct ResidualUnit {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub stem: ConvLayer,
    pub units: Vec<ResidualUnit>,
}

impl Stage {
    fn new(rng: &mut Rng, in_channels: usize, spec: &StageSpec) -> Self {
        let c = spec.out_channels;
        Self {
            stem: ConvLayer::new(rng, in_channels, c, spec.kernel, spec.stride),
            units: (0..spec.depth)
                .map(|_| ResidualUnit {
                    conv1: ConvLayer::new(rng, c, c, spec.kernel, 1),
                    conv2: ConvLayer::new(rng, c, c, spec.kernel, 1),
                })
                .collect(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.stem.forward(tape, x)?;
        let mut h = tape.relu(h);
        for unit in &self.units {
            let u = unit.conv1.forward(tape, h)?;
            let u = tape.relu(u);
            let u = unit.conv2.forward(tape, u)?;
            let sum = tape.add(h, u)?;
            h = tape.relu(sum);
        }
        Ok(h)
    }
}

/// `y[:, c] = x[:, c] · scale[c] + shift[c]` on `(T, d, H, W)` maps.
const CALIBRATION_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct ChannelAffine {
    pub scale: Param,
    pub shift: Param,
}

impl ChannelAffine {
    pub fn identity(channels: usize) -> Self {
        Self {
            scale: Param::new(Tensor::ones(&[channels])),
            shift: Param::new(Tensor::zeros(&[channels])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let channels = self.scale.value().numel();
        if shape.len() != 4 || shape[1] != channels {
            return Err(Error::ShapeMismatch {
                op: "channel affine",
                lhs: shape,
                rhs: vec![0, channels, 0, 0],
            });
        }
        let plane = shape[2] * shape[3];
        let index: Arc<Vec<usize>> = Arc::new((0..shape.iter().product()).map(|i| (i / plane) % channels).collect());
        let scale = tape.param(&self.scale);
        let scale = tape.gather(scale, index.clone(), &shape)?;
        let shift = tape.param(&self.shift);
        let shift = tape.gather(shift, index, &shape)?;
        let y = tape.mul(x, scale)?;
        tape.add(y, shift)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stages: Vec<Stage>,
    /// One affine map per tap.
    pub norms: Vec<ChannelAffine>,
}

impl Backbone {
    pub fn new(config: BackboneConfig, rng: &mut Rng) -> Self {
        let mut in_channels = config.in_channels;
        let stages = config
            .stages
            .iter()
            .map(|spec| {
                let stage = Stage::new(rng, in_channels, spec);
                in_channels = spec.out_channels;
                stage
            })
            .collect();
        let norms = config.tap_channels().into_iter().map(ChannelAffine::identity).collect();
        Self { config, stages, norms }
    }

    /// Three-stage 16/32/64-channel residual CNN on 32×32 frames, pooled to
    /// 8×8, 4×4 and 4×4 grids.
    pub fn default_tiny(seed: u64) -> Self {
        let config = BackboneConfig::tiny_residual((32, 32), vec![0, 1, 2], vec![(8, 8), (4, 4), (4, 4)]);
        Self::new(config, &mut Rng::new(seed))
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (h, w) = self.config.input_size;
        if shape.len() != 4 || shape[1] != self.config.in_channels || shape[2] != h || shape[3] != w {
            return Err(Error::ShapeMismatch {
                op: "backbone input",
                lhs: shape.to_vec(),
                rhs: vec![0, self.config.in_channels, h, w],
            });
        }
        Ok(())
    }

    /// Native output of every stage for frames `(T, C, H, W)`.
    pub fn stage_outputs(&self, tape: &mut Tape, frames: Var) -> Result<Vec<Var>> {
        self.run_stages(tape, frames, self.stages.len())
    }

    fn run_stages(&self, tape: &mut Tape, frames: Var, count: usize) -> Result<Vec<Var>> {
        self.check_input(tape.shape(frames))?;
        let mut x = frames;
        let mut outputs = Vec::with_capacity(count);
        for stage in &self.stages[..count.min(self.stages.len())] {
            x = stage.forward(tape, x)?;
            outputs.push(x);
        }
        Ok(outputs)
    }

    /// Tapped stages pooled to their target grids, in tap order.
    pub fn forward(&self, tape: &mut Tape, frames: Var) -> Result<Vec<Var>> {
        let last_tap = self.config.taps.iter().copied().max().unwrap_or(0);
        let outputs = self.run_stages(tape, frames, last_tap + 1)?;
        if last_tap >= outputs.len() {
            return Err(Error::Config(format!("tap {last_tap} names a missing stage")));
        }
        self.config
            .taps
            .iter()
            .zip(&self.config.target_grids)
            .zip(&self.norms)
            .map(|((&tap, &(gh, gw)), norm)| {
                let shape = tape.shape(outputs[tap]);
                let pooled = if (shape[2], shape[3]) == (gh, gw) {
                    outputs[tap]
                } else {
                    tape.adaptive_avg_pool2d(outputs[tap], gh, gw)?
                };
                norm.forward(tape, pooled)
            })
            .collect()
    }

    /// Sets every tap's affine map so that its output channels have zero mean
    /// and unit variance over `clips`.
    pub fn calibrate<'a>(&mut self, clips: impl IntoIterator<Item = &'a Tensor>) -> Result<()> {
        let channels = self.config.tap_channels();
        self.norms = channels.iter().map(|&c| ChannelAffine::identity(c)).collect();
        let mut sums: Vec<Vec<(f64, f64)>> = channels.iter().map(|&c| vec![(0.0, 0.0); c]).collect();
        let mut counts = vec![0usize; channels.len()];
        for clip in clips {
            let pyramid = self.extract_pyramid(clip)?;
            for (s, map) in pyramid.scales.iter().enumerate() {
                let (c, plane) = (map.shape()[1], map.shape()[2] * map.shape()[3]);
                for (i, chunk) in map.data().chunks_exact(plane).enumerate() {
                    let acc = &mut sums[s][i % c];
                    acc.0 += chunk.iter().sum::<f64>();
                    acc.1 += chunk.iter().map(|v| v * v).sum::<f64>();
                }
                counts[s] += map.numel() / c;
            }
        }
        if counts.contains(&0) {
            return Err(Error::EmptyInput("calibration needs at least one clip"));
        }
        for ((norm, acc), &n) in self.norms.iter_mut().zip(&sums).zip(&counts) {
            let stats: Vec<(f64, f64)> = acc
                .iter()
                .map(|&(sum, sq)| {
                    let mean = sum / n as f64;
                    let std = (sq / n as f64 - mean * mean).max(0.0).sqrt() + CALIBRATION_EPS;
                    (1.0 / std, -mean / std)
                })
                .collect();
            norm.scale.set(Tensor::new(vec![stats.len()], stats.iter().map(|s| s.0).collect())?);
            norm.shift.set(Tensor::new(vec![stats.len()], stats.iter().map(|s| s.1).collect())?);
        }
        Ok(())
    }

    /// Untracked pyramid for one clip `(T, C, H, W)`.
    pub fn extract_pyramid(&self, clip: &Tensor) -> Result<FeaturePyramid> {
        let mut tape = Tape::no_grad();
        let frames = tape.constant(clip.clone());
        let scales = self.forward(&mut tape, frames)?;
        Ok(FeaturePyramid {
            scales: scales.into_iter().map(|v| tape.value(v).clone()).collect(),
        })
    }
}

impl Parameters for Backbone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        for (s, stage) in self.stages.iter().enumerate() {
            stage.stem.visit(&format!("{prefix}.stage{s}.stem"), f);
            for (u, unit) in stage.units.iter().enumerate() {
                unit.conv1.visit(&format!("{prefix}.stage{s}.unit{u}.conv1"), f);
                unit.conv2.visit(&format!("{prefix}.stage{s}.unit{u}.conv2"), f);
            }
        }
        for (k, norm) in self.norms.iter().enumerate() {
            f(format!("{prefix}.norm{k}.scale"), &norm.scale);
            f(format!("{prefix}.norm{k}.shift"), &norm.shift);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (s, stage) in self.stages.iter_mut().enumerate() {
            stage.stem.visit_mut(&format!("{prefix}.stage{s}.stem"), f);
            for (u, unit) in stage.units.iter_mut().enumerate() {
                unit.conv1.visit_mut(&format!("{prefix}.stage{s}.unit{u}.conv1"), f);
                unit.conv2.visit_mut(&format!("{prefix}.stage{s}.unit{u}.conv2"), f);
            }
        }
        for (k, norm) in self.norms.iter_mut().enumerate() {
            f(format!("{prefix}.norm{k}.scale"), &mut norm.scale);
            f(format!("{prefix}.norm{k}.shift"), &mut norm.shift);
        }
    }
}
