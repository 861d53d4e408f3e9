//! Weight sparsification: magnitude-threshold pruning to an exact target
//! rate, with an l1 induction phase before the cut and mask-preserving
//! fine-tuning after it.
//!
//! Biases are never pruned. The achieved zero count per scope unit is
//! exactly floor(target_rate * numel); ties at the threshold magnitude are
//! broken by flat index ascending so the count never overshoots.

use crate::error::{Error, Result};
use crate::layers::{Network, ParamStore};
use crate::optimizer::TrainConfig;
use crate::regularizers::RegularizerSpec;
use crate::tensor::Tensor;
use crate::trainer::{self, EpochStats, TrainHooks};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneScope {
    PerLayer,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Desired fraction of zero weights, in [0, 1).
    pub target_rate: f64,
    pub scope: PruneScope,
    /// Strength of the weight-l1 term during the induction phase.
    pub weight_l1_alpha: f64,
    /// (induce, finetune) epoch budget for the two training phases.
    pub phase_epochs: (usize, usize),
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.target_rate) {
            return Err(Error::Config(format!(
                "target_rate must be in [0, 1), got {}",
                self.target_rate
            )));
        }
        if self.weight_l1_alpha < 0.0 {
            return Err(Error::Config(format!(
                "weight_l1_alpha must be non-negative, got {}",
                self.weight_l1_alpha
            )));
        }
        Ok(())
    }
}

/// Binary keep/drop masks per prunable layer, aligned with the weight
/// tensors; 1.0 keeps a weight, 0.0 pins it to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    masks: BTreeMap<usize, Tensor>,
}

impl PruneMask {
    pub fn from_layer_masks(pairs: Vec<(usize, Tensor)>) -> Self {
        PruneMask { masks: pairs.into_iter().collect() }
    }

    pub fn layer_mask(&self, layer: usize) -> Option<&Tensor> {
        self.masks.get(&layer)
    }

    /// (layer, mask) pairs in ascending layer order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.masks.iter().map(|(&l, t)| (l, t))
    }

    pub fn validate_against(&self, net: &Network) -> Result<()> {
        for (l, m) in self.iter() {
            let p = net.layer_params(l).ok_or_else(|| {
                Error::Precondition(format!("mask targets layer {l} without weights"))
            })?;
            if m.shape() != p.weight.shape() {
                return Err(Error::ShapeMismatch {
                    left: m.shape().to_vec(),
                    right: p.weight.shape().to_vec(),
                });
            }
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Precondition(format!(
                    "mask for layer {l} has entries other than 0 and 1"
                )));
            }
        }
        Ok(())
    }

    /// Zeroes every masked weight in place.
    pub fn apply(&self, net: &mut Network) -> Result<()> {
        self.validate_against(net)?;
        for (l, m) in &self.masks {
            let p = net.layer_params_mut(*l).expect("validated above");
            for (w, &keep) in p.weight.data_mut().iter_mut().zip(m.data()) {
                if keep == 0.0 {
                    *w = 0.0;
                }
            }
        }
        Ok(())
    }

    /// True when every masked weight is exactly zero.
    pub fn holds_on(&self, net: &Network) -> bool {
        self.masks.iter().all(|(&l, m)| {
            let p = net.layer_params(l).expect("mask validated against net");
            p.weight
                .data()
                .iter()
                .zip(m.data())
                .all(|(&w, &keep)| keep != 0.0 || w == 0.0)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Thresholds {
    /// (layer, threshold) pairs: the largest pruned magnitude per layer.
    PerLayer(Vec<(usize, f32)>),
    Global(f32),
}

/// Indices of the k smallest entries of `mags` by (magnitude, flat index)
/// ascending.
fn k_smallest(mags: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..mags.len()).collect();
    idx.sort_unstable_by(|&a, &b| mags[a].total_cmp(&mags[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn prune_count(rate: f64, numel: usize) -> usize {
    (rate * numel as f64).floor() as usize
}

/// Magnitude at the floor(rate * numel)-th ascending order statistic per
/// scope unit (0 when nothing is pruned).
pub fn compute_threshold(
    weights: &[(usize, &Tensor)],
    target_rate: f64,
    scope: PruneScope,
) -> Result<Thresholds> {
    if weights.is_empty() {
        return Err(Error::EmptyWeightSet);
    }
    if !(0.0..1.0).contains(&target_rate) {
        return Err(Error::Precondition(format!(
            "target_rate must be in [0, 1), got {target_rate}"
        )));
    }
    let order_stat = |mags: &mut Vec<f32>, k: usize| -> f32 {
        if k == 0 {
            return 0.0;
        }
        mags.sort_unstable_by(f32::total_cmp);
        mags[k - 1]
    };
    match scope {
        PruneScope::PerLayer => {
            let mut out = Vec::with_capacity(weights.len());
            for &(l, w) in weights {
                let mut mags: Vec<f32> = w.data().iter().map(|v| v.abs()).collect();
                let k = prune_count(target_rate, mags.len());
                out.push((l, order_stat(&mut mags, k)));
            }
            Ok(Thresholds::PerLayer(out))
        }
        PruneScope::Global => {
            let mut mags: Vec<f32> = weights
                .iter()
                .flat_map(|(_, w)| w.data().iter().map(|v| v.abs()))
                .collect();
            let k = prune_count(target_rate, mags.len());
            Ok(Thresholds::Global(order_stat(&mut mags, k)))
        }
    }
}

/// Builds the exact-count mask for the network's prunable weights.
pub fn build_mask(net: &Network, target_rate: f64, scope: PruneScope) -> Result<PruneMask> {
    let layers = net.param_layer_indices();
    if layers.is_empty() {
        return Err(Error::EmptyWeightSet);
    }
    if !(0.0..1.0).contains(&target_rate) {
        return Err(Error::Precondition(format!(
            "target_rate must be in [0, 1), got {target_rate}"
        )));
    }
    let mut masks: Vec<(usize, Tensor)> = layers
        .iter()
        .map(|&l| {
            let w = &net.layer_params(l).unwrap().weight;
            (l, Tensor::filled(w.shape().to_vec(), 1.0))
        })
        .collect();

    match scope {
        PruneScope::PerLayer => {
            for (l, m) in &mut masks {
                let w = &net.layer_params(*l).unwrap().weight;
                let mags: Vec<f32> = w.data().iter().map(|v| v.abs()).collect();
                let k = prune_count(target_rate, mags.len());
                for i in k_smallest(&mags, k) {
                    m.data_mut()[i] = 0.0;
                }
            }
        }
        PruneScope::Global => {
            // global flat index: layers ascending, then position
            let mut mags = Vec::new();
            let mut offsets = Vec::with_capacity(masks.len());
            for (l, _) in &masks {
                offsets.push(mags.len());
                let w = &net.layer_params(*l).unwrap().weight;
                mags.extend(w.data().iter().map(|v| v.abs()));
            }
            let k = prune_count(target_rate, mags.len());
            for flat in k_smallest(&mags, k) {
                let slot = offsets.partition_point(|&o| o <= flat) - 1;
                masks[slot].1.data_mut()[flat - offsets[slot]] = 0.0;
            }
        }
    }
    Ok(PruneMask::from_layer_masks(masks))
}

/// Adds alpha * sign(w) to the weight gradients of every prunable layer;
/// biases are left alone, as is the sign of exact zeros.
pub fn add_weight_l1_grad(net: &Network, grads: &mut ParamStore, alpha: f64) {
    if alpha == 0.0 {
        return;
    }
    let a = alpha as f32;
    for l in net.param_layer_indices() {
        let w = &net.layer_params(l).unwrap().weight;
        let g = grads[l].as_mut().expect("grad store aligned");
        for (gv, &wv) in g.weight.data_mut().iter_mut().zip(w.data()) {
            if wv > 0.0 {
                *gv += a;
            } else if wv < 0.0 {
                *gv -= a;
            }
        }
    }
}

/// Induction phase: plain training plus the weight-l1 pull for
/// `cfg.phase_epochs.0` epochs.
pub fn induce_weight_sparsity(
    net: &mut Network,
    velocity: &mut ParamStore,
    data: &crate::data::Dataset,
    prune_cfg: &PruneConfig,
    train_cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &Network, &EpochStats) -> Result<()>,
) -> Result<()> {
    let mut cfg = train_cfg.clone();
    cfg.epochs = prune_cfg.phase_epochs.0;
    let hooks = TrainHooks {
        reg: &RegularizerSpec::none(),
        weight_l1_alpha: prune_cfg.weight_l1_alpha,
        mask: None,
        stream_tag: "stage2.induce",
    };
    trainer::run_epochs(net, velocity, data, &cfg, 0, &hooks, &mut on_epoch)
}

/// Cuts weights under `mask` and fine-tunes for `cfg.phase_epochs.1`
/// epochs with the mask enforced after every step.
pub fn apply_mask_and_finetune(
    net: &mut Network,
    velocity: &mut ParamStore,
    mask: &PruneMask,
    data: &crate::data::Dataset,
    prune_cfg: &PruneConfig,
    train_cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &Network, &EpochStats) -> Result<()>,
) -> Result<()> {
    mask.apply(net)?;
    let mut cfg = train_cfg.clone();
    cfg.epochs = prune_cfg.phase_epochs.1;
    let hooks = TrainHooks {
        reg: &RegularizerSpec::none(),
        weight_l1_alpha: 0.0,
        mask: Some(mask),
        stream_tag: "stage2.finetune",
    };
    trainer::run_epochs(net, velocity, data, &cfg, 0, &hooks, &mut on_epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LayerSpec;

    fn dense_net(weights: Vec<f32>) -> Network {
        let fin = weights.len() / 2;
        let mut net = Network::new(
            vec![fin],
            vec![LayerSpec::dense(2), LayerSpec::softmax_xent()],
        )
        .unwrap();
        net.layer_params_mut(0).unwrap().weight = Tensor::new(vec![2, fin], weights).unwrap();
        net
    }

    #[test]
    fn hand_example_prunes_smallest_two() {
        let net = dense_net(vec![0.1, -0.5, 0.3, -0.05]);
        let mask = build_mask(&net, 0.5, PruneScope::PerLayer).unwrap();
        let m = mask.layer_mask(0).unwrap().data();
        assert_eq!(m, &[0.0, 1.0, 1.0, 0.0]);
        let w = [(0usize, &net.layer_params(0).unwrap().weight)];
        match compute_threshold(&w, 0.5, PruneScope::PerLayer).unwrap() {
            Thresholds::PerLayer(t) => assert_eq!(t, vec![(0, 0.1)]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rate_zero_prunes_nothing() {
        let net = dense_net(vec![0.1, -0.5, 0.3, -0.05]);
        let mask = build_mask(&net, 0.0, PruneScope::PerLayer).unwrap();
        assert!(mask.layer_mask(0).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn equal_magnitudes_tie_break_by_flat_index() {
        let net = dense_net(vec![0.2, -0.2, 0.2, -0.2]);
        let mask = build_mask(&net, 0.5, PruneScope::PerLayer).unwrap();
        assert_eq!(mask.layer_mask(0).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn exact_count_per_layer() {
        let mut net = Network::new(
            vec![1, 6, 6],
            vec![
                LayerSpec::conv2d(2, (3, 3), 1, 0),
                LayerSpec::relu(false),
                LayerSpec::maxpool2x2(),
                LayerSpec::flatten(),
                LayerSpec::dense(3),
                LayerSpec::softmax_xent(),
            ],
        )
        .unwrap();
        net.init_params(5);
        for rate in [0.3, 0.6, 0.9] {
            let mask = build_mask(&net, rate, PruneScope::PerLayer).unwrap();
            for (l, m) in mask.iter() {
                let zeros = m.data().iter().filter(|&&v| v == 0.0).count();
                let numel = m.numel();
                assert_eq!(
                    zeros,
                    (rate * numel as f64).floor() as usize,
                    "layer {l} rate {rate}"
                );
            }
        }
    }

    #[test]
    fn global_scope_exact_total_count() {
        let mut net = Network::new(
            vec![4],
            vec![
                LayerSpec::dense(5),
                LayerSpec::relu(false),
                LayerSpec::dense(3),
                LayerSpec::softmax_xent(),
            ],
        )
        .unwrap();
        net.init_params(8);
        let mask = build_mask(&net, 0.6, PruneScope::Global).unwrap();
        let (mut zeros, mut total) = (0usize, 0usize);
        for (_, m) in mask.iter() {
            zeros += m.data().iter().filter(|&&v| v == 0.0).count();
            total += m.numel();
        }
        assert_eq!(zeros, (0.6 * total as f64).floor() as usize);
    }

    #[test]
    fn pruning_is_idempotent() {
        let net0 = dense_net(vec![0.4, 0.0, -0.3, 0.0, 0.1, 0.9]);
        let mut net = net0.clone();
        let m1 = build_mask(&net, 0.5, PruneScope::PerLayer).unwrap();
        m1.apply(&mut net).unwrap();
        let after1: Vec<u32> = net.layer_params(0).unwrap().weight.data().iter().map(|v| v.to_bits()).collect();
        let m2 = build_mask(&net, 0.5, PruneScope::PerLayer).unwrap();
        assert_eq!(m1, m2);
        m2.apply(&mut net).unwrap();
        let after2: Vec<u32> = net.layer_params(0).unwrap().weight.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(after1, after2);
    }

    #[test]
    fn weight_l1_hand_update() {
        // one step, w = 0.5, lr = 0.1, alpha = 0.1, zero data gradient -> 0.49
        let mut net = dense_net(vec![0.5, 0.5, 0.5, 0.5]);
        let mut grads = net.zero_param_store();
        add_weight_l1_grad(&net, &mut grads, 0.1);
        let mut vel = net.zero_param_store();
        crate::optimizer::sgd_step(net.params_mut(), &grads, &mut vel, 0.1, 0.0, 0.0, None)
            .unwrap();
        for &w in net.layer_params(0).unwrap().weight.data() {
            assert!((w - 0.49).abs() < 1e-7, "{w}");
        }
    }

    #[test]
    fn weight_l1_leaves_zeros_alone() {
        let net = dense_net(vec![0.0, -0.0, 1.0, -1.0]);
        let mut grads = net.zero_param_store();
        add_weight_l1_grad(&net, &mut grads, 0.1);
        let g = grads[0].as_ref().unwrap().weight.data();
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 0.0);
        assert!((g[2] - 0.1).abs() < 1e-7);
        assert!((g[3] + 0.1).abs() < 1e-7);
    }

    #[test]
    fn empty_weight_set_rejected() {
        assert!(matches!(
            compute_threshold(&[], 0.5, PruneScope::Global),
            Err(Error::EmptyWeightSet)
        ));
    }
}
