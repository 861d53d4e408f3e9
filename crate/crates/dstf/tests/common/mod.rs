//! Independent f64 reference implementation of the forward pass, loss, and
//! activation penalties, written as plain loops straight from the math.
//! Tests freeze this as the oracle; it shares no code with the library's
//! compute path.

#![allow(dead_code)]

use dstf::layers::{LayerSpec, Network};
use dstf::regularizers::{AlphaSpec, RegKind, RegularizerSpec};
use dstf::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum ParamSel {
    Weight,
    Bias,
}

/// One additive nudge to a single parameter coordinate, applied after the
/// f32 -> f64 widening so finite differences run in full f64.
#[derive(Clone, Copy)]
pub struct Perturbation {
    pub layer: usize,
    pub sel: ParamSel,
    pub index: usize,
    pub delta: f64,
}

/// Discrete choices taken during a forward pass: one bit per relu entry,
/// one window argmax per pooling window. Two evaluations whose signatures
/// match stayed on the same smooth piece of the objective.
#[derive(Clone, PartialEq, Eq)]
pub struct DecisionSig(Vec<u32>);

struct Act {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn param_f64(net: &Network, layer: usize, sel: ParamSel, p: Option<Perturbation>) -> Vec<f64> {
    let lp = net.layer_params(layer).expect("parameterized layer");
    let t = match sel {
        ParamSel::Weight => &lp.weight,
        ParamSel::Bias => &lp.bias,
    };
    let mut out: Vec<f64> = t.data().iter().map(|&v| v as f64).collect();
    if let Some(q) = p {
        if q.layer == layer && q.sel == sel {
            out[q.index] += q.delta;
        }
    }
    out
}

fn ref_conv(
    x: &Act,
    w: &[f64],
    b: &[f64],
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Act {
    let (n, ci, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0f64; n * co * ho * wo];
    for in_ in 0..n {
        for oc in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0f64;
                    for ic in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= wd {
                                    continue;
                                }
                                let xi = ((in_ * ci + ic) * h + iy as usize) * wd + ix as usize;
                                let wi = ((oc * ci + ic) * kh + ky) * kw + kx;
                                acc += x.data[xi] * w[wi];
                            }
                        }
                    }
                    out[((in_ * co + oc) * ho + oy) * wo + ox] = acc + b[oc];
                }
            }
        }
    }
    Act { shape: vec![n, co, ho, wo], data: out }
}

fn ref_dense(x: &Act, w: &[f64], b: &[f64], of: usize) -> Act {
    let n = x.shape[0];
    let inf: usize = x.shape[1..].iter().product();
    let mut out = vec![0.0f64; n * of];
    for i in 0..n {
        for o in 0..of {
            let mut acc = 0.0f64;
            for f in 0..inf {
                acc += x.data[i * inf + f] * w[o * inf + f];
            }
            out[i * of + o] = acc + b[o];
        }
    }
    Act { shape: vec![n, of], data: out }
}

fn ref_relu(x: &Act, sig: &mut Vec<u32>) -> Act {
    let data: Vec<f64> = x
        .data
        .iter()
        .map(|&v| {
            sig.push((v > 0.0) as u32);
            if v > 0.0 {
                v
            } else {
                0.0
            }
        })
        .collect();
    Act { shape: x.shape.clone(), data }
}

fn ref_maxpool2x2(x: &Act, sig: &mut Vec<u32>) -> Act {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0f64; n * c * ho * wo];
    for i in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = 0u32;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = x.data[((i * c + ch) * h + oy * 2 + dy) * w + ox * 2 + dx];
                            if v > best {
                                best = v;
                                arg = (dy * 2 + dx) as u32;
                            }
                        }
                    }
                    sig.push(arg);
                    out[((i * c + ch) * ho + oy) * wo + ox] = best;
                }
            }
        }
    }
    Act { shape: vec![n, c, ho, wo], data: out }
}

fn ref_penalty(kind: RegKind, xs: &[f64], beta: f64, eps: f64) -> f64 {
    match kind {
        RegKind::None => 0.0,
        RegKind::L1 => xs.iter().map(|v| v.abs()).sum(),
        RegKind::Tl1 => xs
            .iter()
            .map(|v| (1.0 + beta) * v.abs() / (beta + v.abs()))
            .sum(),
        RegKind::HoyerSq => {
            let l1: f64 = xs.iter().map(|v| v.abs()).sum();
            let sq: f64 = xs.iter().map(|v| v * v).sum();
            l1 * l1 / sq.max(eps)
        }
    }
}

fn resolve_alphas(reg: &RegularizerSpec, slots: usize) -> Vec<f64> {
    match &reg.alpha {
        AlphaSpec::Uniform(a) => vec![*a; slots],
        AlphaSpec::PerLayer(v) => {
            assert_eq!(v.len(), slots, "per-layer alpha count");
            v.clone()
        }
    }
}

/// Regularized objective of one batch, straight from the definition:
/// mean cross-entropy plus the batch-mean of per-sample penalties over the
/// regularized activation maps.
pub fn ref_objective(
    net: &Network,
    input: &Tensor,
    labels: &[u8],
    reg: &RegularizerSpec,
    perturb: Option<Perturbation>,
) -> (f64, DecisionSig) {
    let n = input.shape()[0];
    assert_eq!(labels.len(), n);
    let mut cur = Act {
        shape: input.shape().to_vec(),
        data: input.data().iter().map(|&v| v as f64).collect(),
    };
    let mut sig = Vec::new();
    let reg_slots = net.regularized_layer_indices();
    let alphas = resolve_alphas(reg, reg_slots.len());
    let mut penalty = 0.0f64;

    for (l, spec) in net.layers().iter().enumerate() {
        cur = match *spec {
            LayerSpec::Conv2d { out_channels, kernel: (kh, kw), stride, padding } => {
                let w = param_f64(net, l, ParamSel::Weight, perturb);
                let b = param_f64(net, l, ParamSel::Bias, perturb);
                ref_conv(&cur, &w, &b, out_channels, kh, kw, stride, padding)
            }
            LayerSpec::Dense { out_features } => {
                let w = param_f64(net, l, ParamSel::Weight, perturb);
                let b = param_f64(net, l, ParamSel::Bias, perturb);
                ref_dense(&cur, &w, &b, out_features)
            }
            LayerSpec::Relu { regularized } => {
                let y = ref_relu(&cur, &mut sig);
                if regularized {
                    let slot = reg_slots.iter().position(|&r| r == l).unwrap();
                    let alpha = alphas[slot];
                    if reg.kind != RegKind::None && alpha > 0.0 {
                        let per = y.data.len() / n;
                        for s in 0..n {
                            penalty += alpha
                                * ref_penalty(
                                    reg.kind,
                                    &y.data[s * per..(s + 1) * per],
                                    reg.beta,
                                    reg.hoyer_eps,
                                );
                        }
                    }
                }
                y
            }
            LayerSpec::Maxpool2x2 => ref_maxpool2x2(&cur, &mut sig),
            LayerSpec::Flatten => Act {
                shape: vec![n, cur.data.len() / n],
                data: cur.data,
            },
            LayerSpec::SoftmaxXent => break,
        };
    }

    let k = cur.shape[1];
    let mut loss = 0.0f64;
    for i in 0..n {
        let row = &cur.data[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
        loss += lse - row[labels[i] as usize];
    }
    (loss / n as f64 + penalty / n as f64, DecisionSig(sig))
}

pub const GRADCHECK_H: f64 = 1e-4;
pub const GRADCHECK_REL_TOL: f64 = 1e-4;
const GRADCHECK_MIN_GRAD: f64 = 1e-6;

/// Exercises every layer kind: conv, relu (regularized twice), maxpool,
/// flatten, dense, softmax head.
pub fn gradcheck_net(seed: u64) -> (Network, Tensor, Vec<u8>) {
    use rand::Rng;
    let mut net = Network::new(
        vec![1, 6, 6],
        vec![
            LayerSpec::conv2d(2, (3, 3), 1, 1),
            LayerSpec::relu(true),
            LayerSpec::maxpool2x2(),
            LayerSpec::flatten(),
            LayerSpec::dense(5),
            LayerSpec::relu(true),
            LayerSpec::dense(4),
            LayerSpec::softmax_xent(),
        ],
    )
    .unwrap();
    net.init_params(seed);

    let mut rng = dstf::rng::substream(seed, "gradcheck.data");
    let n = 4;
    let data: Vec<f32> = (0..n * 36).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
    let input = Tensor::new(vec![n, 1, 6, 6], data).unwrap();
    let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..4u8)).collect();
    (net, input, labels)
}

/// Compares analytic gradients against central finite differences of the
/// f64 reference at `points` random parameter coordinates, skipping points
/// whose two evaluations straddle a relu or pooling decision boundary.
/// Panics on any relative error above `GRADCHECK_REL_TOL`; returns the
/// worst error seen.
pub fn gradcheck_points(reg: &RegularizerSpec, points: usize, seed: u64) -> f64 {
    use rand::Rng;
    let (net, input, labels) = gradcheck_net(seed);
    let cache = net.forward(&input).unwrap();
    let analytic = net.backward(&cache, &labels, reg).unwrap();
    let param_layers = net.param_layer_indices();

    let mut rng = dstf::rng::substream(seed, "gradcheck.points");
    let mut accepted = 0usize;
    let mut tries = 0usize;
    let mut worst = 0.0f64;
    while accepted < points {
        tries += 1;
        assert!(tries < points * 60, "too many resamples near kinks");
        let layer = param_layers[rng.random_range(0..param_layers.len())];
        let lp = net.layer_params(layer).unwrap();
        let sel = if rng.random_range(0..4u8) == 0 { ParamSel::Bias } else { ParamSel::Weight };
        let numel = match sel {
            ParamSel::Weight => lp.weight.numel(),
            ParamSel::Bias => lp.bias.numel(),
        };
        let index = rng.random_range(0..numel);

        let mk = |delta: f64| Perturbation { layer, sel, index, delta };
        let (fp, sp) = ref_objective(&net, &input, &labels, reg, Some(mk(GRADCHECK_H)));
        let (fm, sm) = ref_objective(&net, &input, &labels, reg, Some(mk(-GRADCHECK_H)));
        if sp != sm {
            continue;
        }
        let fd = (fp - fm) / (2.0 * GRADCHECK_H);
        let a = {
            let g = analytic[layer].as_ref().unwrap();
            let t = match sel {
                ParamSel::Weight => &g.weight,
                ParamSel::Bias => &g.bias,
            };
            t.data()[index] as f64
        };
        let scale = a.abs().max(fd.abs());
        if scale < GRADCHECK_MIN_GRAD {
            continue;
        }
        let rel = (a - fd).abs() / scale;
        assert!(
            rel <= GRADCHECK_REL_TOL,
            "gradient mismatch: layer {layer} idx {index} analytic {a} fd {fd} rel {rel}"
        );
        worst = worst.max(rel);
        accepted += 1;
    }
    worst
}

/// The standard gradient suite: every layer kind under every penalty kind,
/// 30 points each. Returns (points checked, worst relative error).
pub fn gradcheck_suite() -> (usize, f64) {
    let specs = [
        RegularizerSpec::none(),
        RegularizerSpec::uniform(RegKind::L1, 0.05, 1.0).unwrap(),
        RegularizerSpec::uniform(RegKind::HoyerSq, 0.05, 1.0).unwrap(),
        RegularizerSpec::uniform(RegKind::Tl1, 0.05, 0.5).unwrap(),
        RegularizerSpec::uniform(RegKind::Tl1, 0.02, 0.05).unwrap(),
    ];
    let mut total = 0usize;
    let mut worst = 0.0f64;
    for (i, reg) in specs.iter().enumerate() {
        worst = worst.max(gradcheck_points(reg, 30, 1000 + i as u64));
        total += 30;
    }
    (total, worst)
}
