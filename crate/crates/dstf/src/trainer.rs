//! Shared epoch/batch training driver used by every pipeline stage.
//!
//! One substream per (tag, epoch) keys the shuffle order, so a run resumed
//! at epoch k sees exactly the batches of an uninterrupted run.

use crate::data::{batch_iterator, Dataset};
use crate::error::{Error, Result};
use crate::layers::{predictions, LayerSpec, Network, ParamStore};
use crate::optimizer::{sgd_step, TrainConfig};
use crate::pruning::{add_weight_l1_grad, PruneMask};
use crate::regularizers::RegularizerSpec;
use crate::rng::substream;

/// Knobs that vary between pipeline stages.
pub struct TrainHooks<'a> {
    pub reg: &'a RegularizerSpec,
    pub weight_l1_alpha: f64,
    pub mask: Option<&'a PruneMask>,
    /// Namespace for the per-epoch shuffle substreams.
    pub stream_tag: &'a str,
}

/// Running measurements over one training epoch, taken on each batch
/// before its update step.
#[derive(Debug, Clone, Default)]
pub struct EpochStats {
    pub samples: usize,
    pub correct: usize,
    /// Sum over samples of the regularized objective.
    pub loss_sum: f64,
    /// Sum over samples of the activation penalty alone.
    pub reg_sum: f64,
    pub act_zeros: u64,
    pub act_elems: u64,
}

impl EpochStats {
    pub fn top1(&self) -> f64 {
        self.correct as f64 / self.samples.max(1) as f64
    }
    pub fn loss(&self) -> f64 {
        self.loss_sum / self.samples.max(1) as f64
    }
    pub fn reg_value(&self) -> f64 {
        self.reg_sum / self.samples.max(1) as f64
    }
    pub fn act_sparsity(&self) -> f64 {
        self.act_zeros as f64 / self.act_elems.max(1) as f64
    }
}

/// Trains epochs `start_epoch..cfg.epochs`, invoking `on_epoch` with the
/// epoch index and its running stats after each one. The mask, when
/// present, is enforced after every optimizer step.
pub fn run_epochs(
    net: &mut Network,
    velocity: &mut ParamStore,
    data: &Dataset,
    cfg: &TrainConfig,
    start_epoch: usize,
    hooks: &TrainHooks<'_>,
    on_epoch: &mut dyn FnMut(usize, &Network, &EpochStats) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if let Some(m) = hooks.mask {
        m.validate_against(net)?;
    }
    let relu_slots: Vec<usize> = net
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, s)| matches!(s, LayerSpec::Relu { .. }))
        .map(|(l, _)| l + 1)
        .collect();

    for epoch in start_epoch..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        let rng = substream(cfg.seed, &format!("{}.shuffle.epoch{epoch}", hooks.stream_tag));
        let mut stats = EpochStats::default();
        for (xb, yb) in batch_iterator(data, cfg.batch_size, Some(rng)) {
            let cache = net.forward(&xb)?;
            let (loss, penalty) = net.objective(&cache, &yb, hooks.reg)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("training objective"));
            }
            let preds = predictions(cache.logits());
            stats.samples += yb.len();
            stats.correct += preds.iter().zip(&yb).filter(|(p, y)| p == y).count();
            stats.loss_sum += loss * yb.len() as f64;
            stats.reg_sum += penalty * yb.len() as f64;
            for &slot in &relu_slots {
                let act = &cache.acts[slot];
                stats.act_elems += act.numel() as u64;
                stats.act_zeros += act.data().iter().filter(|&&v| v == 0.0).count() as u64;
            }

            let mut grads = net.backward(&cache, &yb, hooks.reg)?;
            if hooks.weight_l1_alpha > 0.0 {
                add_weight_l1_grad(net, &mut grads, hooks.weight_l1_alpha);
            }
            sgd_step(
                net.params_mut(),
                &grads,
                velocity,
                lr,
                cfg.momentum,
                cfg.weight_decay,
                hooks.mask,
            )?;
        }
        on_epoch(epoch, net, &stats)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_dataset;
    use crate::layers::LayerSpec;

    fn tiny_net(seed: u64, classes: usize) -> Network {
        let mut net = Network::new(
            vec![1, 8, 8],
            vec![
                LayerSpec::flatten(),
                LayerSpec::dense(16),
                LayerSpec::relu(true),
                LayerSpec::dense(classes),
                LayerSpec::softmax_xent(),
            ],
        )
        .unwrap();
        net.init_params(seed);
        net
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 16,
            epochs,
            lr_schedule: vec![],
            seed: 1,
        }
    }

    #[test]
    fn reaches_full_train_accuracy_on_blobs() {
        let data = synthetic_dataset(1, 64, 2).unwrap();
        let mut net = tiny_net(2, 2);
        let mut vel = net.zero_param_store();
        let hooks = TrainHooks {
            reg: &RegularizerSpec::none(),
            weight_l1_alpha: 0.0,
            mask: None,
            stream_tag: "smoke",
        };
        let mut last_top1 = 0.0;
        run_epochs(&mut net, &mut vel, &data, &cfg(50), 0, &hooks, &mut |_, _, s| {
            last_top1 = s.top1();
            Ok(())
        })
        .unwrap();
        assert_eq!(last_top1, 1.0, "tiny net must fit 64 blobs within 50 epochs");
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let data = synthetic_dataset(3, 48, 3).unwrap();
        let run = || {
            let mut net = tiny_net(7, 3);
            let mut vel = net.zero_param_store();
            let hooks = TrainHooks {
                reg: &RegularizerSpec::none(),
                weight_l1_alpha: 0.0,
                mask: None,
                stream_tag: "det",
            };
            run_epochs(&mut net, &mut vel, &data, &cfg(4), 0, &hooks, &mut |_, _, _| Ok(()))
                .unwrap();
            net.flat_params().iter().map(|v| v.to_bits()).collect::<Vec<u32>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = synthetic_dataset(5, 48, 2).unwrap();
        let hooks = TrainHooks {
            reg: &RegularizerSpec::none(),
            weight_l1_alpha: 0.0,
            mask: None,
            stream_tag: "resume",
        };
        let mut full = tiny_net(9, 2);
        let mut vel_full = full.zero_param_store();
        run_epochs(&mut full, &mut vel_full, &data, &cfg(6), 0, &hooks, &mut |_, _, _| Ok(()))
            .unwrap();

        let mut part = tiny_net(9, 2);
        let mut vel_part = part.zero_param_store();
        run_epochs(&mut part, &mut vel_part, &data, &cfg(3), 0, &hooks, &mut |_, _, _| Ok(()))
            .unwrap();
        // continue epochs 3..6 from the midpoint state
        run_epochs(&mut part, &mut vel_part, &data, &cfg(6), 3, &hooks, &mut |_, _, _| Ok(()))
            .unwrap();

        let a: Vec<u32> = full.flat_params().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = part.flat_params().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }
}
