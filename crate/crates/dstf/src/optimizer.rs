//! SGD with momentum, weight decay, a stepwise learning-rate schedule,
//! and an optional prune mask that pins coordinates to exactly zero.

use crate::error::{Error, Result};
use crate::layers::{LayerParams, ParamStore};
use crate::pruning::PruneMask;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// (epoch, multiplier) pairs; the multiplier applies from that epoch on.
    pub lr_schedule: Vec<(usize, f64)>,
    pub seed: u64,
}

impl TrainConfig {
    /// Conventional LeNet5/MNIST recipe.
    /// Baseline recipe. The two low-lr warmup epochs keep momentum from
    /// killing filters before the loss surface settles; the effective rate
    /// afterwards is lr*10/(1-momentum).
    pub fn lenet5_default(seed: u64) -> Self {
        TrainConfig {
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 256,
            epochs: 25,
            lr_schedule: vec![(2, 10.0), (20, 0.1)],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let mut prev: Option<usize> = None;
        for &(e, m) in &self.lr_schedule {
            if e >= self.epochs.max(1) {
                return Err(Error::Config(format!(
                    "schedule epoch {e} outside [0, {})",
                    self.epochs
                )));
            }
            if let Some(p) = prev {
                if e <= p {
                    return Err(Error::Config("schedule epochs must strictly increase".into()));
                }
            }
            if !(m > 0.0) {
                return Err(Error::Config(format!("schedule multiplier must be positive, got {m}")));
            }
            prev = Some(e);
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch`: base lr times every
    /// multiplier whose schedule epoch has been reached.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let mut lr = self.lr;
        for &(e, m) in &self.lr_schedule {
            if epoch >= e {
                lr *= m;
            }
        }
        lr
    }
}

/// One SGD step over every parameterized layer:
/// v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.
/// Where the mask is 0 the weight and its velocity are forced to exactly 0
/// after the update. Biases are never masked or decayed by the mask path.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    velocity: &mut ParamStore,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    mask: Option<&PruneMask>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Precondition(format!(
            "param store sizes differ: {} / {} / {}",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for l in 0..params.len() {
        let (Some(p), Some(g), Some(v)) = (&mut params[l], &grads[l], &mut velocity[l]) else {
            if params[l].is_some() || grads[l].is_some() || velocity[l].is_some() {
                return Err(Error::Precondition(format!(
                    "param/grad/velocity layout disagrees at layer {l}"
                )));
            }
            continue;
        };
        update_pair(p, g, v, lr, momentum, weight_decay)?;
        if let Some(m) = mask {
            if let Some(mt) = m.layer_mask(l) {
                if mt.shape() != p.weight.shape() {
                    return Err(Error::ShapeMismatch {
                        left: mt.shape().to_vec(),
                        right: p.weight.shape().to_vec(),
                    });
                }
                let md = mt.data();
                for (i, (w, vel)) in p
                    .weight
                    .data_mut()
                    .iter_mut()
                    .zip(v.weight.data_mut())
                    .enumerate()
                {
                    if md[i] == 0.0 {
                        *w = 0.0;
                        *vel = 0.0;
                    }
                }
            }
        }
    }
    Ok(())
}

fn update_pair(
    p: &mut LayerParams,
    g: &LayerParams,
    v: &mut LayerParams,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if p.weight.shape() != g.weight.shape() || p.weight.shape() != v.weight.shape() {
        return Err(Error::ShapeMismatch {
            left: p.weight.shape().to_vec(),
            right: g.weight.shape().to_vec(),
        });
    }
    let (lr, mo, wd) = (lr as f32, momentum as f32, weight_decay as f32);
    for ((w, &gw), vw) in p
        .weight
        .data_mut()
        .iter_mut()
        .zip(g.weight.data())
        .zip(v.weight.data_mut())
    {
        *vw = mo * *vw + gw + wd * *w;
        *w -= lr * *vw;
    }
    // Biases are exempt from weight decay.
    for ((b, &gb), vb) in p
        .bias
        .data_mut()
        .iter_mut()
        .zip(g.bias.data())
        .zip(v.bias.data_mut())
    {
        *vb = mo * *vb + gb;
        *b -= lr * *vb;
    }
    Ok(())
}
