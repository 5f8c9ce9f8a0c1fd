//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological sort and the backward pass is a single reverse sweep.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::param::{Param, ParamId};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a 2-D convolution over a batch of images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Multiply-accumulates of one forward evaluation.
    pub fn macs(&self) -> u64 {
        (self.batch * self.out_channels * self.patch_len() * self.out_height() * self.out_width())
            as u64
    }
}

#[derive(Clone, Copy, Debug)]
struct PoolGeom {
    planes: usize,
    height: usize,
    width: usize,
    out_height: usize,
    out_width: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, m: usize, k: usize, n: usize },
    Bmm { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    BmmNt { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Scale { x: Var, factor: f64 },
    Relu { x: Var },
    Gelu { x: Var },
    Sum { x: Var },
    MeanRows { x: Var, rows: usize, cols: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    Softmax { x: Var },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Gather { x: Var, index: Arc<Vec<usize>> },
    Conv2d { x: Var, w: Var, bias: Var, geom: ConvGeom },
    AvgPool { x: Var, geom: PoolGeom },
    CrossEntropy { logits: Var, label: usize },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records tensor operations and replays them backwards.
///
/// A tape is confined to one thread; concurrent evaluations each use their
/// own tape and share parameters through [`Param`].
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
    track_params: bool,
    backward_done: bool,
    macs: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape on which bound parameters receive gradients.
    pub fn new() -> Self {
        Self::with_tracking(true)
    }

    /// A tape for pure inference: parameters are bound as constants.
    pub fn no_grad() -> Self {
        Self::with_tracking(false)
    }

    fn with_tracking(track_params: bool) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            track_params,
            backward_done: false,
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by forward ops since construction.
    pub fn mac_count(&self) -> u64 {
        self.macs
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Arc::new(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a parameter; binding the same parameter twice returns the same node.
    pub fn param(&mut self, param: &Param) -> Var {
        if let Some(&var) = self.params.get(&param.id()) {
            return var;
        }
        let var = self.push(param.shared(), Op::Leaf, self.track_params);
        self.params.insert(param.id(), var);
        var
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to a tracked leaf.
    pub fn grad(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn param_grad(&self, param: &Param) -> Option<&Tensor> {
        self.params.get(&param.id()).and_then(|&v| self.grad(v))
    }

    /// Clears gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Arc::new(value), op, requires_grad)
    }

    fn data(&self, var: Var) -> &[f64] {
        self.nodes[var.0].value.data()
    }

    // ---------------------------------------------------------------- linear algebra

    /// Matrix product of `(m,k)` and `(k,n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        self.macs += (m * k * n) as u64;
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// `x · wᵀ` for rows of `x` with trailing size `k` and `w` of shape `(n,k)`.
    ///
    /// Leading dimensions of `x` are preserved; the last becomes `n`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 2 || sx.last() != Some(&sw[1]) {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        let (n, k) = (sw[0], sw[1]);
        let m = self.value(x).numel() / k;
        let mut out = vec![0.0; m * n];
        gemm_nt(self.data(x), self.data(w), &mut out, m, k, n);
        self.macs += (m * k * n) as u64;
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(value, Op::Linear { x, w, m, k, n }, &[x, w]))
    }

    /// Batched product `(B,m,k) · (B,k,n)`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        {
            let (da, db) = (self.data(a), self.data(b));
            for i in 0..batch {
                gemm_nn(
                    &da[i * m * k..(i + 1) * m * k],
                    &db[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        self.macs += (batch * m * k * n) as u64;
        let value = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push_op(value, Op::Bmm { a, b, batch, m, k, n }, &[a, b]))
    }

    /// Batched product `(B,m,k) · (B,n,k)ᵀ`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::ShapeMismatch {
                op: "bmm_nt",
                lhs: sa,
                rhs: sb,
            });
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![0.0; batch * m * n];
        {
            let (da, db) = (self.data(a), self.data(b));
            for i in 0..batch {
                gemm_nt(
                    &da[i * m * k..(i + 1) * m * k],
                    &db[i * n * k..(i + 1) * n * k],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        self.macs += (batch * m * k * n) as u64;
        let value = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push_op(value, Op::BmmNt { a, b, batch, m, k, n }, &[a, b]))
    }

    // ---------------------------------------------------------------- elementwise

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("shape checked")
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        self.value(x).map(f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push_op(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push_op(value, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push_op(value, Op::Mul { a, b }, &[a, b]))
    }

    /// Adds a vector along the last dimension.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        let n = self.value(bias).numel();
        if sb.len() != 1 || sx.last() != Some(&n) {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let value = Tensor::new(sx, data)?;
        Ok(self.push_op(value, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.map(x, |v| v * factor);
        self.push_op(value, Op::Scale { x, factor }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.map(x, |v| v.max(0.0));
        self.push_op(value, Op::Relu { x }, &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.map(x, gelu);
        self.push_op(value, Op::Gelu { x }, &[x])
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().sum();
        self.push_op(Tensor::scalar(total), Op::Sum { x }, &[x])
    }

    /// Mean over all leading dimensions: `(..., n) -> (n)`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::InvalidShape {
                op: "mean_rows",
                shape,
                reason: "need at least two dimensions".into(),
            });
        }
        let cols = *shape.last().unwrap();
        let rows = self.value(x).numel() / cols;
        let mut out = vec![0.0; cols];
        for row in self.data(x).chunks_exact(cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        let value = Tensor::new(vec![cols], out)?;
        Ok(self.push_op(value, Op::MeanRows { x, rows, cols }, &[x]))
    }

    // ---------------------------------------------------------------- normalization

    /// LayerNorm over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(Error::EmptyTensor { op: "layer_norm" })?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.data(x).chunks_exact(d) {
            let (mean, inv_std) = row_stats(row, eps);
            out.extend(
                row.iter()
                    .zip(g.iter().zip(b))
                    .map(|(v, (gg, bb))| gg * (v - mean) * inv_std + bb),
            );
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(value, Op::LayerNorm { x, gamma, beta, eps }, &[x, gamma, beta]))
    }

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let value = softmax_lastdim(self.value(x))?;
        Ok(self.push_op(value, Op::Softmax { x }, &[x]))
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push_op(value, Op::Reshape { x }, &[x]))
    }

    /// Reorders dimensions: output dimension `i` is input dimension `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = axes.len() == shape.len()
            && axes.iter().all(|&a| a < shape.len() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(Error::InvalidShape {
                op: "permute",
                shape,
                reason: format!("bad axes {axes:?}"),
            });
        }
        let (data, out_shape) = permute_data(self.data(x), &shape, axes);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push_op(
            value,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        ))
    }

    /// `out[i] = x.flat[index[i]]`, shaped as `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidShape {
                op: "gather",
                shape: self.shape(x).to_vec(),
                reason: format!("index {bad} out of bounds"),
            });
        }
        let src = self.data(x);
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push_op(value, Op::Gather { x, index }, &[x]))
    }

    // ---------------------------------------------------------------- vision

    /// 2-D convolution, `x (B,C,H,W)`, `w (O,C,k,k)`, `bias (O)`, zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let ok = sx.len() == 4
            && sw.len() == 4
            && sx[1] == sw[1]
            && sw[2] == sw[3]
            && stride > 0
            && sx[2] + 2 * padding >= sw[2]
            && sx[3] + 2 * padding >= sw[3]
            && self.shape(bias) == [sw[0]];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_channels: sx[1],
            height: sx[2],
            width: sx[3],
            out_channels: sw[0],
            kernel: sw[2],
            stride,
            padding,
        };
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let plane = ho * wo;
        let in_size = geom.in_channels * geom.height * geom.width;
        let mut out = vec![0.0; geom.batch * geom.out_channels * plane];
        let mut cols = vec![0.0; geom.patch_len() * plane];
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(bias));
        for b in 0..geom.batch {
            im2col(&xd[b * in_size..(b + 1) * in_size], &geom, &mut cols);
            let dst = &mut out[b * geom.out_channels * plane..(b + 1) * geom.out_channels * plane];
            for (o, chunk) in dst.chunks_exact_mut(plane).enumerate() {
                chunk.fill(bd[o]);
            }
            gemm_nn(wd, &cols, dst, geom.out_channels, geom.patch_len(), plane);
        }
        self.macs += geom.macs();
        let value = Tensor::new(vec![geom.batch, geom.out_channels, ho, wo], out)?;
        Ok(self.push_op(value, Op::Conv2d { x, w, bias, geom }, &[x, w, bias]))
    }

    /// Adaptive average pooling of `(B,C,H,W)` to `(B,C,out_h,out_w)`.
    ///
    /// Bin `i` spans `[floor(i·H/out_h), ceil((i+1)·H/out_h))`.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || out_h == 0 || out_w == 0 || out_h > shape[2] || out_w > shape[3] {
            return Err(Error::InvalidShape {
                op: "adaptive_avg_pool2d",
                shape,
                reason: format!("cannot pool to {out_h}x{out_w}"),
            });
        }
        let geom = PoolGeom {
            planes: shape[0] * shape[1],
            height: shape[2],
            width: shape[3],
            out_height: out_h,
            out_width: out_w,
        };
        let src = self.data(x);
        let mut out = vec![0.0; geom.planes * out_h * out_w];
        for p in 0..geom.planes {
            let plane = &src[p * geom.height * geom.width..(p + 1) * geom.height * geom.width];
            for oy in 0..out_h {
                let (y0, y1) = bin(oy, geom.height, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = bin(ox, geom.width, out_w);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        acc += plane[y * geom.width + x0..y * geom.width + x1].iter().sum::<f64>();
                    }
                    out[(p * out_h + oy) * out_w + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        let value = Tensor::new(vec![shape[0], shape[1], out_h, out_w], out)?;
        Ok(self.push_op(value, Op::AvgPool { x, geom }, &[x]))
    }

    // ---------------------------------------------------------------- loss

    /// `-log softmax(logits)[label]` over a flat logit vector.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let classes = self.value(logits).numel();
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let z = self.data(logits);
        let loss = log_sum_exp(z) - z[label];
        Ok(self.push_op(Tensor::scalar(loss), Op::CrossEntropy { logits, label }, &[logits]))
    }

    // ---------------------------------------------------------------- backward

    /// Accumulates `d loss / d leaf` into every tracked leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::UntrackedGraph);
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(&shape));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, delta: Vec<f64>) {
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot @ None => {
                let shape = self.shape(var).to_vec();
                *slot = Some(Tensor::new(shape, delta).expect("gradient shape"));
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let out = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(gd, self.data(b), &mut da, m, n, k);
                    self.accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(self.data(a), gd, &mut db, k, m, n);
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Linear { x, w, m, k, n } => {
                if self.wants(x) {
                    let mut dx = vec![0.0; m * k];
                    gemm_nn(gd, self.data(w), &mut dx, m, n, k);
                    self.accumulate(grads, x, dx);
                }
                if self.wants(w) {
                    let mut dw = vec![0.0; n * k];
                    gemm_tn(gd, self.data(x), &mut dw, n, m, k);
                    self.accumulate(grads, w, dw);
                }
            }
            &Op::Bmm { a, b, batch, m, k, n } => {
                let (ad, bd) = (self.data(a), self.data(b));
                if self.wants(a) {
                    let mut da = vec![0.0; batch * m * k];
                    for s in 0..batch {
                        gemm_nt(
                            &gd[s * m * n..(s + 1) * m * n],
                            &bd[s * k * n..(s + 1) * k * n],
                            &mut da[s * m * k..(s + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; batch * k * n];
                    for s in 0..batch {
                        gemm_tn(
                            &ad[s * m * k..(s + 1) * m * k],
                            &gd[s * m * n..(s + 1) * m * n],
                            &mut db[s * k * n..(s + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    self.accumulate(grads, b, db);
                }
            }
            &Op::BmmNt { a, b, batch, m, k, n } => {
                let (ad, bd) = (self.data(a), self.data(b));
                if self.wants(a) {
                    let mut da = vec![0.0; batch * m * k];
                    for s in 0..batch {
                        gemm_nn(
                            &gd[s * m * n..(s + 1) * m * n],
                            &bd[s * n * k..(s + 1) * n * k],
                            &mut da[s * m * k..(s + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; batch * n * k];
                    for s in 0..batch {
                        gemm_tn(
                            &gd[s * m * n..(s + 1) * m * n],
                            &ad[s * m * k..(s + 1) * m * k],
                            &mut db[s * n * k..(s + 1) * n * k],
                            n,
                            m,
                            k,
                        );
                    }
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Add { a, b } => {
                if self.wants(a) {
                    self.accumulate(grads, a, gd.to_vec());
                }
                if self.wants(b) {
                    self.accumulate(grads, b, gd.to_vec());
                }
            }
            &Op::Sub { a, b } => {
                if self.wants(a) {
                    self.accumulate(grads, a, gd.to_vec());
                }
                if self.wants(b) {
                    self.accumulate(grads, b, gd.iter().map(|v| -v).collect());
                }
            }
            &Op::Mul { a, b } => {
                if self.wants(a) {
                    let da = gd.iter().zip(self.data(b)).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let db = gd.iter().zip(self.data(a)).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, b, db);
                }
            }
            &Op::AddBias { x, bias } => {
                if self.wants(x) {
                    self.accumulate(grads, x, gd.to_vec());
                }
                if self.wants(bias) {
                    let n = self.value(bias).numel();
                    let mut db = vec![0.0; n];
                    for row in gd.chunks_exact(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, bias, db);
                }
            }
            &Op::Scale { x, factor } => {
                self.accumulate(grads, x, gd.iter().map(|v| v * factor).collect());
            }
            &Op::Relu { x } => {
                let dx = gd
                    .iter()
                    .zip(self.data(x))
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Gelu { x } => {
                let dx = gd
                    .iter()
                    .zip(self.data(x))
                    .map(|(g, &v)| g * gelu_grad(v))
                    .collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Sum { x } => {
                let n = self.value(x).numel();
                self.accumulate(grads, x, vec![gd[0]; n]);
            }
            &Op::MeanRows { x, rows, cols } => {
                let scale = 1.0 / rows as f64;
                let mut dx = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    dx.extend(gd.iter().map(|v| v * scale));
                }
                self.accumulate(grads, x, dx);
            }
            &Op::LayerNorm { x, gamma, beta, eps } => {
                let d = self.value(gamma).numel();
                let gam = self.data(gamma);
                let xd = self.data(x);
                let mut dx = vec![0.0; xd.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for ((row, grow), dxrow) in xd
                    .chunks_exact(d)
                    .zip(gd.chunks_exact(d))
                    .zip(dx.chunks_exact_mut(d))
                {
                    let (mean, inv_std) = row_stats(row, eps);
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv_std;
                        let dxhat = grow[j] * gam[j];
                        dgamma[j] += grow[j] * xhat;
                        dbeta[j] += grow[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    let (mean_dxhat, mean_dxhat_xhat) = (sum_dxhat / d as f64, sum_dxhat_xhat / d as f64);
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv_std;
                        let dxhat = grow[j] * gam[j];
                        dxrow[j] = inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                if self.wants(x) {
                    self.accumulate(grads, x, dx);
                }
                if self.wants(gamma) {
                    self.accumulate(grads, gamma, dgamma);
                }
                if self.wants(beta) {
                    self.accumulate(grads, beta, dbeta);
                }
            }
            &Op::Softmax { x } => {
                let d = *self.shape(x).last().unwrap();
                let mut dx = Vec::with_capacity(gd.len());
                for (yrow, grow) in out.chunks_exact(d).zip(gd.chunks_exact(d)) {
                    let inner: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    dx.extend(yrow.iter().zip(grow).map(|(y, g)| y * (g - inner)));
                }
                self.accumulate(grads, x, dx);
            }
            &Op::Reshape { x } => {
                self.accumulate(grads, x, gd.to_vec());
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (dx, _) = permute_data(gd, g.shape(), &inverse);
                self.accumulate(grads, *x, dx);
            }
            Op::Gather { x, index } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (&src, v) in index.iter().zip(gd) {
                    dx[src] += v;
                }
                self.accumulate(grads, *x, dx);
            }
            &Op::Conv2d { x, w, bias, geom } => {
                let plane = geom.out_height() * geom.out_width();
                let out_size = geom.out_channels * plane;
                let in_size = geom.in_channels * geom.height * geom.width;
                let patch = geom.patch_len();
                let (xd, wd) = (self.data(x), self.data(w));
                let mut cols = vec![0.0; patch * plane];
                let mut dcols = vec![0.0; patch * plane];
                let mut dw = vec![0.0; geom.out_channels * patch];
                let mut dx = vec![0.0; geom.batch * in_size];
                let mut db = vec![0.0; geom.out_channels];
                for b in 0..geom.batch {
                    let gb = &gd[b * out_size..(b + 1) * out_size];
                    if self.wants(w) {
                        im2col(&xd[b * in_size..(b + 1) * in_size], &geom, &mut cols);
                        gemm_nt(gb, &cols, &mut dw, geom.out_channels, plane, patch);
                    }
                    if self.wants(x) {
                        dcols.fill(0.0);
                        gemm_tn(wd, gb, &mut dcols, patch, geom.out_channels, plane);
                        col2im(&dcols, &geom, &mut dx[b * in_size..(b + 1) * in_size]);
                    }
                    for (o, chunk) in gb.chunks_exact(plane).enumerate() {
                        db[o] += chunk.iter().sum::<f64>();
                    }
                }
                if self.wants(x) {
                    self.accumulate(grads, x, dx);
                }
                if self.wants(w) {
                    self.accumulate(grads, w, dw);
                }
                if self.wants(bias) {
                    self.accumulate(grads, bias, db);
                }
            }
            &Op::AvgPool { x, geom } => {
                let mut dx = vec![0.0; geom.planes * geom.height * geom.width];
                for p in 0..geom.planes {
                    let plane = &mut dx[p * geom.height * geom.width..(p + 1) * geom.height * geom.width];
                    for oy in 0..geom.out_height {
                        let (y0, y1) = bin(oy, geom.height, geom.out_height);
                        for ox in 0..geom.out_width {
                            let (x0, x1) = bin(ox, geom.width, geom.out_width);
                            let share = gd[(p * geom.out_height + oy) * geom.out_width + ox]
                                / ((y1 - y0) * (x1 - x0)) as f64;
                            for y in y0..y1 {
                                for v in &mut plane[y * geom.width + x0..y * geom.width + x1] {
                                    *v += share;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, x, dx);
            }
            &Op::CrossEntropy { logits, label } => {
                let z = self.data(logits);
                let lse = log_sum_exp(z);
                let dz = z
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| gd[0] * ((v - lse).exp() - if j == label { 1.0 } else { 0.0 }))
                    .collect();
                self.accumulate(grads, logits, dz);
            }
        }
    }
}

// -------------------------------------------------------------------- helpers

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Mean and `1/sqrt(var + eps)` with the biased two-pass variance.
fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax over the last dimension of a tensor.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let d = *x.shape().last().ok_or(Error::EmptyTensor { op: "softmax" })?;
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(d) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|v| (v - max).exp()));
        let total: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= total);
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn bin(i: usize, size: usize, bins: usize) -> (usize, usize) {
    let start = i * size / bins;
    let end = ((i + 1) * size).div_ceil(bins);
    (start, end)
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = Tensor::strides(shape);
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    if rank == 0 {
        return (data.to_vec(), out_shape);
    }
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    let inner = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    loop {
        for j in 0..inner {
            out.push(data[offset + j * inner_stride]);
        }
        // advance the odometer over all but the last dimension
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return (out, out_shape);
            }
            d -= 1;
            index[d] += 1;
            offset += strides[d];
            if index[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            index[d] = 0;
        }
    }
}

fn im2col(image: &[f64], geom: &ConvGeom, cols: &mut [f64]) {
    let (ho, wo) = (geom.out_height(), geom.out_width());
    let k = geom.kernel;
    for c in 0..geom.in_channels {
        let src = &image[c * geom.height * geom.width..(c + 1) * geom.height * geom.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let y = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    for ox in 0..wo {
                        let xx = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        dst[oy * wo + ox] = if y >= 0
                            && (y as usize) < geom.height
                            && xx >= 0
                            && (xx as usize) < geom.width
                        {
                            src[y as usize * geom.width + xx as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], geom: &ConvGeom, image: &mut [f64]) {
    let (ho, wo) = (geom.out_height(), geom.out_width());
    let k = geom.kernel;
    for c in 0..geom.in_channels {
        let dst = &mut image[c * geom.height * geom.width..(c + 1) * geom.height * geom.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let y = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    if y < 0 || y as usize >= geom.height {
                        continue;
                    }
                    for ox in 0..wo {
                        let xx = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        if xx >= 0 && (xx as usize) < geom.width {
                            dst[y as usize * geom.width + xx as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}
