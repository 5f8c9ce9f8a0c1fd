use super::{Param, Tensor};
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum and L2 weight decay.
///
/// `v ← momentum·v + (g + weight_decay·p)`, then `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Applies one update. `grads[i]` belongs to `params[i]`; the pairing must
    /// stay stable across calls since velocities are kept by position.
    pub fn step(&mut self, params: &mut [&mut Param], grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::LengthMismatch {
                what: "parameters and gradients",
                left: params.len(),
                right: grads.len(),
            });
        }
        if let Some(i) = grads.iter().position(Option::is_none) {
            return Err(Error::MissingGradient(format!("#{i}")));
        }
        if self.velocity.len() != params.len() {
            self.velocity = vec![None; params.len()];
        }
        for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            self.update(i, param, grad.as_ref().expect("checked above"), lr)?;
        }
        Ok(())
    }

    /// Updates the parameter at optimizer slot `index`.
    pub fn update(&mut self, index: usize, param: &mut Param, grad: &Tensor, lr: f64) -> Result<()> {
        if grad.shape() != param.value().shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                lhs: param.value().shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        if self.velocity.len() <= index {
            self.velocity.resize(index + 1, None);
        }
        let v = self.velocity[index].get_or_insert_with(|| vec![0.0; grad.numel()]);
        let p = param.value_mut().data_mut();
        for ((pv, vv), &gv) in p.iter_mut().zip(v.iter_mut()).zip(grad.data()) {
            *vv = self.momentum * *vv + gv + self.weight_decay * *pv;
            *pv -= lr * *vv;
        }
        Ok(())
    }
}
