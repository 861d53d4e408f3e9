//! Measurement: activation/weight sparsity, zero-skip multiply accounting,
//! accuracy, and parameter-distance diagnostics.
//!
//! A multiply in the conv/dense inner loop is skipped when either operand
//! is exactly zero; out-of-window padded taps count as zero activations.
//! Bias additions and pooling are never counted.

use crate::data::{batch_iterator, Dataset};
use crate::error::{Error, Result};
use crate::layers::{predictions, softmax_xent_loss, LayerSpec, Network};
use crate::regularizers::RegularizerSpec;
use crate::tensor::Tensor;

/// Evaluation batch size; measurement only, no effect on results.
pub const EVAL_BATCH: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCount {
    pub layer: usize,
    pub kind: &'static str,
    pub zeros: u64,
    pub elements: u64,
}

impl LayerCount {
    pub fn fraction(&self) -> f64 {
        self.zeros as f64 / self.elements.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityStats {
    pub per_layer: Vec<LayerCount>,
    pub total_fraction: f64,
}

fn finish_sparsity(per_layer: Vec<LayerCount>) -> SparsityStats {
    let zeros: u64 = per_layer.iter().map(|c| c.zeros).sum();
    let elems: u64 = per_layer.iter().map(|c| c.elements).sum();
    SparsityStats {
        per_layer,
        total_fraction: zeros as f64 / elems.max(1) as f64,
    }
}

/// Exact-zero fraction of every relu output over the full dataset,
/// element-weighted across batches and layers.
pub fn activation_sparsity(net: &Network, ds: &Dataset) -> Result<SparsityStats> {
    if ds.is_empty() {
        return Err(Error::Precondition("empty dataset".into()));
    }
    let relu_layers: Vec<usize> = net
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, s)| matches!(s, LayerSpec::Relu { .. }))
        .map(|(l, _)| l)
        .collect();
    let mut per_layer: Vec<LayerCount> = relu_layers
        .iter()
        .map(|&l| LayerCount { layer: l, kind: "relu", zeros: 0, elements: 0 })
        .collect();
    for (xb, _) in batch_iterator(ds, EVAL_BATCH, None) {
        let cache = net.forward(&xb)?;
        for (slot, &l) in relu_layers.iter().enumerate() {
            let act = &cache.acts[l + 1];
            per_layer[slot].zeros += act.data().iter().filter(|&&v| v == 0.0).count() as u64;
            per_layer[slot].elements += act.numel() as u64;
        }
    }
    Ok(finish_sparsity(per_layer))
}

/// Exact-zero fraction of prunable weights (conv/dense weights, biases
/// excluded).
pub fn weight_sparsity(net: &Network) -> SparsityStats {
    let per_layer = net
        .param_layer_indices()
        .into_iter()
        .map(|l| {
            let w = &net.layer_params(l).unwrap().weight;
            LayerCount {
                layer: l,
                kind: net.layers()[l].kind_name(),
                zeros: w.data().iter().filter(|&&v| v == 0.0).count() as u64,
                elements: w.numel() as u64,
            }
        })
        .collect();
    finish_sparsity(per_layer)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerFlops {
    pub layer: usize,
    pub kind: &'static str,
    pub total_mults: u64,
    pub skipped_mults: u64,
}

impl LayerFlops {
    pub fn fraction(&self) -> f64 {
        self.skipped_mults as f64 / self.total_mults.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopsReport {
    pub per_layer: Vec<LayerFlops>,
    pub drop_fraction: f64,
}

/// Multiplies whose product is structurally zero, over the full dataset.
/// Conv totals are N*Co*Ho*Wo*Ci*Kh*Kw (padded taps included), dense
/// totals N*out*in; a multiply is skipped when the activation operand or
/// the weight operand is exactly zero.
pub fn flops_drop(net: &Network, ds: &Dataset) -> Result<FlopsReport> {
    if ds.is_empty() {
        return Err(Error::Precondition("empty dataset".into()));
    }
    let counted: Vec<usize> = net.param_layer_indices();
    let mut per_layer: Vec<LayerFlops> = counted
        .iter()
        .map(|&l| LayerFlops {
            layer: l,
            kind: net.layers()[l].kind_name(),
            total_mults: 0,
            skipped_mults: 0,
        })
        .collect();
    for (xb, _) in batch_iterator(ds, EVAL_BATCH, None) {
        let cache = net.forward(&xb)?;
        for (slot, &l) in counted.iter().enumerate() {
            let input = &cache.acts[l];
            let p = net.layer_params(l).unwrap();
            let (total, kept) = match net.layers()[l] {
                LayerSpec::Conv2d { stride, padding, .. } => {
                    conv_mult_counts(input, &p.weight, stride, padding)
                }
                LayerSpec::Dense { .. } => dense_mult_counts(input, &p.weight),
                _ => unreachable!("only conv/dense own params"),
            };
            per_layer[slot].total_mults += total;
            per_layer[slot].skipped_mults += total - kept;
        }
    }
    let total: u64 = per_layer.iter().map(|c| c.total_mults).sum();
    let skipped: u64 = per_layer.iter().map(|c| c.skipped_mults).sum();
    Ok(FlopsReport {
        per_layer,
        drop_fraction: skipped as f64 / total.max(1) as f64,
    })
}

/// (total, kept) multiply counts for one conv application. kept counts
/// pairs with both operands nonzero; the loop enumerates in-bounds taps
/// with a nonzero activation and adds the per-tap nonzero-weight count.
fn conv_mult_counts(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> (u64, u64) {
    let (n, ci, h, w) = {
        let s = input.shape();
        (s[0], s[1], s[2], s[3])
    };
    let (co, kh, kw) = {
        let s = weight.shape();
        (s[0], s[2], s[3])
    };
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let total = (n * co * ho * wo * ci * kh * kw) as u64;

    // nzw[(ci, kh, kw)] = number of output channels with a nonzero weight
    // at that tap
    let mut nzw = vec![0u64; ci * kh * kw];
    let wd = weight.data();
    for coi in 0..co {
        let base = coi * ci * kh * kw;
        for (t, cnt) in nzw.iter_mut().enumerate() {
            if wd[base + t] != 0.0 {
                *cnt += 1;
            }
        }
    }

    let x = input.data();
    let mut kept = 0u64;
    for ni in 0..n {
        for cii in 0..ci {
            let plane = &x[(ni * ci + cii) * h * w..][..h * w];
            for hoi in 0..ho {
                for khi in 0..kh {
                    let ih = (hoi * stride + khi) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let row = &plane[ih as usize * w..][..w];
                    let t_base = (cii * kh + khi) * kw;
                    for kwi in 0..kw {
                        let c = nzw[t_base + kwi];
                        if c == 0 {
                            continue;
                        }
                        let (lo, hi) = crate::layers::tap_range(wo, w, stride, kwi, pad);
                        for woi in lo..hi {
                            if row[woi * stride + kwi - pad] != 0.0 {
                                kept += c;
                            }
                        }
                    }
                }
            }
        }
    }
    (total, kept)
}

/// (total, kept) multiply counts for one dense application.
fn dense_mult_counts(input: &Tensor, weight: &Tensor) -> (u64, u64) {
    let (n, fin) = (input.shape()[0], input.shape()[1]);
    let fout = weight.shape()[0];
    let total = (n * fout * fin) as u64;

    // nonzero weights per input column
    let mut nzw = vec![0u64; fin];
    for row in weight.data().chunks_exact(fin) {
        for (c, &v) in nzw.iter_mut().zip(row) {
            if v != 0.0 {
                *c += 1;
            }
        }
    }
    let mut kept = 0u64;
    for xrow in input.data().chunks_exact(fin) {
        for (&c, &v) in nzw.iter().zip(xrow) {
            if v != 0.0 {
                kept += c;
            }
        }
    }
    (total, kept)
}

/// Normalized parameter distance between two identically shaped networks:
/// euclidean distance scaled by the norm of `base`, and cosine similarity,
/// both over all parameters flattened.
pub fn param_distance(net: &Network, base: &Network) -> Result<(f64, f64)> {
    if net.layers() != base.layers() {
        return Err(Error::Precondition("architectures differ".into()));
    }
    let u = net.flat_params();
    let v = base.flat_params();
    let mut diff2 = 0.0f64;
    let mut dot = 0.0f64;
    let mut nu = 0.0f64;
    let mut nv = 0.0f64;
    for (&a, &b) in u.iter().zip(&v) {
        let (a, b) = (a as f64, b as f64);
        diff2 += (a - b) * (a - b);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    let euclidean = diff2.sqrt() / nv.sqrt().max(f64::MIN_POSITIVE);
    let cosine = dot / (nu.sqrt() * nv.sqrt()).max(f64::MIN_POSITIVE);
    Ok((euclidean, cosine))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub top1: f64,
    pub loss: f64,
}

/// Top-1 accuracy and mean cross-entropy over the full dataset.
pub fn evaluate(net: &Network, ds: &Dataset) -> Result<EvalStats> {
    if ds.is_empty() {
        return Err(Error::Precondition("empty dataset".into()));
    }
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    for (xb, yb) in batch_iterator(ds, EVAL_BATCH, None) {
        let cache = net.forward(&xb)?;
        let preds = predictions(cache.logits());
        correct += preds.iter().zip(&yb).filter(|(p, y)| p == y).count();
        loss_sum += softmax_xent_loss(cache.logits(), &yb)? * yb.len() as f64;
    }
    Ok(EvalStats {
        top1: correct as f64 / ds.len() as f64,
        loss: loss_sum / ds.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FullEval {
    pub top1: f64,
    /// Mean cross-entropy, penalty excluded.
    pub loss: f64,
    pub act_sparsity: f64,
    /// Mean per-sample activation penalty under `reg`.
    pub reg_value: f64,
}

/// Accuracy, loss, activation sparsity, and penalty in one pass.
pub fn full_eval(net: &Network, ds: &Dataset, reg: &RegularizerSpec) -> Result<FullEval> {
    if ds.is_empty() {
        return Err(Error::Precondition("empty dataset".into()));
    }
    let relu_slots: Vec<usize> = net
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, s)| matches!(s, LayerSpec::Relu { .. }))
        .map(|(l, _)| l + 1)
        .collect();
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    let mut reg_sum = 0.0f64;
    let mut zeros = 0u64;
    let mut elems = 0u64;
    for (xb, yb) in batch_iterator(ds, EVAL_BATCH, None) {
        let cache = net.forward(&xb)?;
        let preds = predictions(cache.logits());
        correct += preds.iter().zip(&yb).filter(|(p, y)| p == y).count();
        loss_sum += softmax_xent_loss(cache.logits(), &yb)? * yb.len() as f64;
        reg_sum += net.regularizer_penalty(&cache, reg)? * yb.len() as f64;
        for &slot in &relu_slots {
            let t = &cache.acts[slot];
            zeros += t.count_zeros(0.0) as u64;
            elems += t.numel() as u64;
        }
    }
    let n = ds.len() as f64;
    Ok(FullEval {
        top1: correct as f64 / n,
        loss: loss_sum / n,
        act_sparsity: zeros as f64 / elems.max(1) as f64,
        reg_value: reg_sum / n,
    })
}
