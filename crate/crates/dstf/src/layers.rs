//! Layer zoo for LeNet5-class networks: direct convolution, dense, relu,
//! 2x2 max pooling, flatten, and a softmax cross-entropy head, plus the
//! backward passes and the activation-penalty gradient hook.
//!
//! Forward is pure and bit-reproducible. Convolution accumulates each
//! output element in f32 over (ci, kh, kw) ascending, the same order as a
//! naive seven-loop implementation, so the two agree bit for bit.

use crate::error::{Error, Result};
use crate::regularizers::{self, RegularizerSpec};
use crate::rng::substream;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    },
    Dense {
        out_features: usize,
    },
    Relu {
        regularized: bool,
    },
    Maxpool2x2,
    Flatten,
    SoftmaxXent,
}

impl LayerSpec {
    pub fn conv2d(out_channels: usize, kernel: (usize, usize), stride: usize, padding: usize) -> Self {
        LayerSpec::Conv2d { out_channels, kernel, stride, padding }
    }
    pub fn dense(out_features: usize) -> Self {
        LayerSpec::Dense { out_features }
    }
    pub fn relu(regularized: bool) -> Self {
        LayerSpec::Relu { regularized }
    }
    pub fn maxpool2x2() -> Self {
        LayerSpec::Maxpool2x2
    }
    pub fn flatten() -> Self {
        LayerSpec::Flatten
    }
    pub fn softmax_xent() -> Self {
        LayerSpec::SoftmaxXent
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu { .. } => "relu",
            LayerSpec::Maxpool2x2 => "maxpool2x2",
            LayerSpec::Flatten => "flatten",
            LayerSpec::SoftmaxXent => "softmax_xent",
        }
    }
}

/// Weight and bias of one parameterized layer. Used for parameters,
/// gradients, and velocity alike.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// One slot per layer, `Some` only for conv/dense layers.
pub type ParamStore = Vec<Option<LayerParams>>;

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<LayerSpec>,
    params: ParamStore,
    /// sample_shapes[l] is the per-sample input shape of layer l;
    /// the last entry is the logits shape.
    sample_shapes: Vec<Vec<usize>>,
}

/// Every intermediate activation of one forward pass. `acts[0]` is the
/// batch input; `acts[l + 1]` is the output of layer `l`. The last entry
/// is the logits handed to the softmax cross-entropy head.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub acts: Vec<Tensor>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Tensor {
        self.acts.last().expect("cache never empty")
    }

    pub fn batch_size(&self) -> usize {
        self.acts[0].shape()[0]
    }
}

impl Network {
    /// Builds a network for per-sample inputs of `input_shape` ([C, H, W]
    /// for image inputs, [F] for flat inputs), validating that consecutive
    /// layer shapes compose and allocating zeroed parameters.
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidNetwork("no layers".into()));
        }
        if !matches!(layers.last(), Some(LayerSpec::SoftmaxXent)) {
            return Err(Error::InvalidNetwork("final layer must be softmax_xent".into()));
        }
        if layers.iter().filter(|l| matches!(l, LayerSpec::SoftmaxXent)).count() != 1 {
            return Err(Error::InvalidNetwork("exactly one softmax_xent head".into()));
        }
        if !matches!(input_shape.len(), 1 | 3) {
            return Err(Error::InvalidNetwork(format!(
                "input shape must be [C, H, W] or [F], got {input_shape:?}"
            )));
        }

        let mut sample_shapes = vec![input_shape];
        let mut params: ParamStore = Vec::with_capacity(layers.len());
        for (l, spec) in layers.iter().enumerate() {
            let cur = sample_shapes.last().unwrap().clone();
            let bad = |reason: String| Error::InvalidLayer { layer: l, reason };
            let (next, p) = match *spec {
                LayerSpec::Conv2d { out_channels, kernel: (kh, kw), stride, padding } => {
                    if cur.len() != 3 {
                        return Err(bad(format!("conv2d needs [C, H, W] input, got {cur:?}")));
                    }
                    if out_channels == 0 || kh == 0 || kw == 0 || stride == 0 {
                        return Err(bad("conv2d extents and stride must be positive".into()));
                    }
                    let (ci, h, w) = (cur[0], cur[1], cur[2]);
                    if h + 2 * padding < kh || w + 2 * padding < kw {
                        return Err(bad(format!(
                            "kernel {kh}x{kw} exceeds padded input {h}x{w} (pad {padding})"
                        )));
                    }
                    let ho = (h + 2 * padding - kh) / stride + 1;
                    let wo = (w + 2 * padding - kw) / stride + 1;
                    let p = LayerParams {
                        weight: Tensor::zeros(vec![out_channels, ci, kh, kw]),
                        bias: Tensor::zeros(vec![out_channels]),
                    };
                    (vec![out_channels, ho, wo], Some(p))
                }
                LayerSpec::Dense { out_features } => {
                    if cur.len() != 1 {
                        return Err(bad(format!("dense needs flat [F] input, got {cur:?}")));
                    }
                    if out_features == 0 {
                        return Err(bad("dense out_features must be positive".into()));
                    }
                    let p = LayerParams {
                        weight: Tensor::zeros(vec![out_features, cur[0]]),
                        bias: Tensor::zeros(vec![out_features]),
                    };
                    (vec![out_features], Some(p))
                }
                LayerSpec::Relu { .. } => (cur, None),
                LayerSpec::Maxpool2x2 => {
                    if cur.len() != 3 {
                        return Err(bad(format!("maxpool2x2 needs [C, H, W] input, got {cur:?}")));
                    }
                    let (c, h, w) = (cur[0], cur[1], cur[2]);
                    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
                        return Err(bad(format!("maxpool2x2 needs even extents, got {h}x{w}")));
                    }
                    (vec![c, h / 2, w / 2], None)
                }
                LayerSpec::Flatten => {
                    if cur.len() != 3 {
                        return Err(bad(format!("flatten needs [C, H, W] input, got {cur:?}")));
                    }
                    (vec![cur[0] * cur[1] * cur[2]], None)
                }
                LayerSpec::SoftmaxXent => {
                    if cur.len() != 1 {
                        return Err(bad(format!("softmax_xent needs flat logits, got {cur:?}")));
                    }
                    if cur[0] < 2 {
                        return Err(bad("need at least 2 classes".into()));
                    }
                    (cur, None)
                }
            };
            params.push(p);
            sample_shapes.push(next);
        }
        Ok(Network { layers, params, sample_shapes })
    }

    /// He-uniform weight init (bound sqrt(6 / fan_in)); one RNG substream
    /// per layer so layer count changes elsewhere never reshuffle. Biases
    /// start at a small positive constant so no relu begins dead.
    pub fn init_params(&mut self, seed: u64) {
        use rand::Rng;
        for (l, slot) in self.params.iter_mut().enumerate() {
            let Some(p) = slot else { continue };
            let fan_in = match self.layers[l] {
                LayerSpec::Conv2d { kernel: (kh, kw), .. } => p.weight.shape()[1] * kh * kw,
                LayerSpec::Dense { .. } => p.weight.shape()[1],
                _ => unreachable!(),
            };
            let bound = (6.0 / fan_in as f64).sqrt() as f32;
            let mut rng = substream(seed, &format!("init.layer{l}"));
            for w in p.weight.data_mut() {
                *w = (2.0 * rng.random::<f32>() - 1.0) * bound;
            }
            for b in p.bias.data_mut() {
                *b = 0.01;
            }
        }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_sample_shape(&self) -> &[usize] {
        &self.sample_shapes[0]
    }

    pub fn logit_dim(&self) -> usize {
        self.sample_shapes.last().unwrap()[0]
    }

    /// Per-sample output shape of layer `l`.
    pub fn output_sample_shape(&self, l: usize) -> &[usize] {
        &self.sample_shapes[l + 1]
    }

    pub fn layer_params(&self, l: usize) -> Option<&LayerParams> {
        self.params.get(l).and_then(|p| p.as_ref())
    }

    pub fn layer_params_mut(&mut self, l: usize) -> Option<&mut LayerParams> {
        self.params.get_mut(l).and_then(|p| p.as_mut())
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Indices of layers owning weight/bias tensors, ascending.
    pub fn param_layer_indices(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&l| self.params[l].is_some()).collect()
    }

    /// Indices of relu layers with the regularized flag, ascending.
    pub fn regularized_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, LayerSpec::Relu { regularized: true }))
            .map(|(l, _)| l)
            .collect()
    }

    /// Zeroed gradient/velocity store matching this network's parameters.
    pub fn zero_param_store(&self) -> ParamStore {
        self.params
            .iter()
            .map(|slot| {
                slot.as_ref().map(|p| LayerParams {
                    weight: Tensor::zeros(p.weight.shape().to_vec()),
                    bias: Tensor::zeros(p.bias.shape().to_vec()),
                })
            })
            .collect()
    }

    /// All parameters flattened in declaration order (per layer ascending,
    /// weight then bias).
    pub fn flat_params(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for slot in &self.params {
            if let Some(p) = slot {
                out.extend_from_slice(p.weight.data());
                out.extend_from_slice(p.bias.data());
            }
        }
        out
    }

    fn batch_shape(&self, n: usize, sample: &[usize]) -> Vec<usize> {
        let mut s = Vec::with_capacity(sample.len() + 1);
        s.push(n);
        s.extend_from_slice(sample);
        s
    }

    /// Runs the batch through every layer, retaining all intermediate
    /// activations for backward and sparsity measurement.
    pub fn forward(&self, input: &Tensor) -> Result<ForwardCache> {
        let expected = self.batch_shape(input.shape()[0], &self.sample_shapes[0]);
        if input.shape() != expected.as_slice() || input.shape()[0] == 0 {
            return Err(Error::LayerShapeMismatch {
                layer: 0,
                expected,
                actual: input.shape().to_vec(),
            });
        }
        let n = input.shape()[0];
        let mut acts = Vec::with_capacity(self.layers.len());
        acts.push(input.clone());
        for (l, spec) in self.layers.iter().enumerate() {
            let cur = acts.last().unwrap();
            let out = match *spec {
                LayerSpec::Conv2d { stride, padding, .. } => {
                    let p = self.params[l].as_ref().unwrap();
                    conv2d_direct(cur, &p.weight, &p.bias, stride, padding)?
                }
                LayerSpec::Dense { .. } => {
                    let p = self.params[l].as_ref().unwrap();
                    dense_forward(cur, &p.weight, &p.bias)?
                }
                LayerSpec::Relu { .. } => relu_forward(cur),
                LayerSpec::Maxpool2x2 => maxpool2x2_forward(cur),
                LayerSpec::Flatten => {
                    cur.reshape(self.batch_shape(n, &self.sample_shapes[l + 1]))?
                }
                LayerSpec::SoftmaxXent => break,
            };
            acts.push(out);
        }
        Ok(ForwardCache { acts })
    }

    /// Mean cross-entropy of cached logits against `labels`, plus the mean
    /// per-sample activation penalty (the regularized objective value).
    pub fn objective(
        &self,
        cache: &ForwardCache,
        labels: &[u8],
        reg: &RegularizerSpec,
    ) -> Result<(f64, f64)> {
        let data_loss = softmax_xent_loss(cache.logits(), labels)?;
        let penalty = self.regularizer_penalty(cache, reg)?;
        Ok((data_loss + penalty, penalty))
    }

    /// Mean over the batch of the per-sample, per-layer activation
    /// penalties, weighted by the per-layer strengths.
    pub fn regularizer_penalty(&self, cache: &ForwardCache, reg: &RegularizerSpec) -> Result<f64> {
        if !reg.is_active() {
            return Ok(0.0);
        }
        let reg_layers = self.regularized_layer_indices();
        let alphas = reg.alphas(reg_layers.len())?;
        let n = cache.batch_size();
        let mut total = 0.0f64;
        for (slot, &l) in reg_layers.iter().enumerate() {
            if alphas[slot] == 0.0 {
                continue;
            }
            let act = cache
                .acts
                .get(l + 1)
                .ok_or(Error::MissingCacheEntry { layer: l })?;
            let sample = act.numel() / n;
            for xs in act.data().chunks_exact(sample) {
                total += alphas[slot]
                    * regularizers::value_slice(reg.kind, xs, reg.beta, reg.hoyer_eps);
            }
        }
        Ok(total / n as f64)
    }

    /// Gradient of the regularized objective with respect to every
    /// parameter, averaged over the batch. At each regularized relu the
    /// scaled penalty gradient joins the incoming activation gradient
    /// before further propagation.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        labels: &[u8],
        reg: &RegularizerSpec,
    ) -> Result<ParamStore> {
        if cache.acts.len() != self.layers.len() {
            return Err(Error::MissingCacheEntry { layer: cache.acts.len() });
        }
        let n = cache.batch_size();
        if labels.len() != n {
            return Err(Error::Precondition(format!(
                "{} labels for batch of {n}",
                labels.len()
            )));
        }
        let reg_layers = self.regularized_layer_indices();
        let alphas = reg.alphas(reg_layers.len())?;
        let reg_active = reg.is_active();

        let mut grads = self.zero_param_store();
        let mut dcur = softmax_xent_grad(cache.logits(), labels)?;
        // layers.len() - 1 skips the loss head, handled by the seed above.
        for l in (0..self.layers.len() - 1).rev() {
            let x = &cache.acts[l];
            let y = &cache.acts[l + 1];
            if let LayerSpec::Relu { regularized: true } = self.layers[l] {
                let slot = reg_layers.iter().position(|&r| r == l).unwrap();
                if reg_active && alphas[slot] > 0.0 {
                    let sample = y.numel() / n;
                    let scale = alphas[slot] / n as f64;
                    for (xs, gs) in y
                        .data()
                        .chunks_exact(sample)
                        .zip(dcur.data_mut().chunks_exact_mut(sample))
                    {
                        regularizers::grad_into(reg.kind, xs, reg.beta, reg.hoyer_eps, scale, gs);
                    }
                }
            }
            dcur = match self.layers[l] {
                LayerSpec::Conv2d { stride, padding, .. } => {
                    let p = self.params[l].as_ref().unwrap();
                    let g = grads[l].as_mut().unwrap();
                    conv2d_backward(x, &p.weight, &dcur, stride, padding, g)?
                }
                LayerSpec::Dense { .. } => {
                    let p = self.params[l].as_ref().unwrap();
                    let g = grads[l].as_mut().unwrap();
                    dense_backward(x, &p.weight, &dcur, g)
                }
                LayerSpec::Relu { .. } => relu_backward(x, &dcur),
                LayerSpec::Maxpool2x2 => maxpool2x2_backward(x, &dcur),
                LayerSpec::Flatten => dcur.reshape(x.shape().to_vec())?,
                LayerSpec::SoftmaxXent => unreachable!("head excluded from walk"),
            };
        }
        Ok(grads)
    }
}

/// Textbook direct convolution, cross-correlation convention. Output
/// element (n, co, ho, wo) accumulates x[n, ci, ho*s + kh - pad, wo*s + kw
/// - pad] * w[co, ci, kh, kw] over (ci, kh, kw) ascending in f32, bias
/// added last; out-of-bounds taps contribute nothing.
pub fn conv2d_direct(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (n, ci, h, w) = conv_input_dims(input)?;
    let (co, wci, kh, kw) = conv_weight_dims(weight, bias)?;
    if wci != ci {
        return Err(Error::ShapeMismatch {
            left: input.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::InvalidTensor("conv stride must be positive".into()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::InvalidTensor(format!(
            "conv output extent < 1 for input {h}x{w}, kernel {kh}x{kw}, pad {pad}"
        )));
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;

    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    let mut out = vec![0.0f32; n * co * ho * wo];

    for ni in 0..n {
        for coi in 0..co {
            let w_base = coi * ci * kh * kw;
            for hoi in 0..ho {
                let orow = &mut out[((ni * co + coi) * ho + hoi) * wo..][..wo];
                for cii in 0..ci {
                    for khi in 0..kh {
                        let ih = (hoi * stride + khi) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let xrow = &x[((ni * ci + cii) * h + ih as usize) * w..][..w];
                        let wrow = &wt[w_base + (cii * kh + khi) * kw..][..kw];
                        for (kwi, &wv) in wrow.iter().enumerate() {
                            // valid wo range: 0 <= wo*stride + kwi - pad < w
                            let (lo, hi) = tap_range(wo, w, stride, kwi, pad);
                            for woi in lo..hi {
                                orow[woi] += wv * xrow[woi * stride + kwi - pad];
                            }
                        }
                    }
                }
                for v in orow.iter_mut() {
                    *v += b[coi];
                }
            }
        }
    }
    Tensor::new(vec![n, co, ho, wo], out)
}

/// Output positions wo in [lo, hi) whose input column wo*stride + kwi - pad
/// falls inside [0, w).
pub(crate) fn tap_range(wo: usize, w: usize, stride: usize, kwi: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kwi).div_ceil(stride);
    let hi = if w + pad > kwi {
        (((w + pad - kwi - 1) / stride) + 1).min(wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn conv_input_dims(input: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::InvalidTensor(format!(
            "conv input must be rank 4, got {s:?}"
        )));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

fn conv_weight_dims(weight: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let s = weight.shape();
    if s.len() != 4 {
        return Err(Error::InvalidTensor(format!(
            "conv weight must be rank 4, got {s:?}"
        )));
    }
    if bias.shape() != [s[0]] {
        return Err(Error::ShapeMismatch {
            left: weight.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Gradients of conv2d_direct: fills `g` with parameter gradients and
/// returns the input gradient.
fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    dout: &Tensor,
    stride: usize,
    pad: usize,
    g: &mut LayerParams,
) -> Result<Tensor> {
    let (n, ci, h, w) = conv_input_dims(input)?;
    let (co, _, kh, kw) = conv_weight_dims(weight, &g.bias)?;
    let (ho, wo) = (dout.shape()[2], dout.shape()[3]);

    let x = input.data();
    let wt = weight.data();
    let dy = dout.data();
    let mut dx = vec![0.0f32; input.numel()];
    let dw = g.weight.data_mut();
    let db = g.bias.data_mut();

    for ni in 0..n {
        for coi in 0..co {
            let w_base = coi * ci * kh * kw;
            for hoi in 0..ho {
                let gr = &dy[((ni * co + coi) * ho + hoi) * wo..][..wo];
                for &gv in gr {
                    db[coi] += gv;
                }
                for cii in 0..ci {
                    for khi in 0..kh {
                        let ih = (hoi * stride + khi) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let row = ((ni * ci + cii) * h + ih as usize) * w;
                        let wrow_base = w_base + (cii * kh + khi) * kw;
                        for kwi in 0..kw {
                            let (lo, hi) = tap_range(wo, w, stride, kwi, pad);
                            let wv = wt[wrow_base + kwi];
                            let mut acc = 0.0f32;
                            for woi in lo..hi {
                                let iw = woi * stride + kwi - pad;
                                dx[row + iw] += gr[woi] * wv;
                                acc += gr[woi] * x[row + iw];
                            }
                            dw[wrow_base + kwi] += acc;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input.shape().to_vec(), dx)
}

fn dense_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, fin) = (input.shape()[0], input.shape()[1]);
    let fout = weight.shape()[0];
    if weight.shape()[1] != fin {
        return Err(Error::ShapeMismatch {
            left: input.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    let mut out = vec![0.0f32; n * fout];
    for ni in 0..n {
        let xrow = &x[ni * fin..][..fin];
        let orow = &mut out[ni * fout..][..fout];
        for (oi, o) in orow.iter_mut().enumerate() {
            let wrow = &wt[oi * fin..][..fin];
            let mut acc = 0.0f32;
            for (xv, wv) in xrow.iter().zip(wrow) {
                acc += xv * wv;
            }
            *o = acc + b[oi];
        }
    }
    Tensor::new(vec![n, fout], out)
}

fn dense_backward(input: &Tensor, weight: &Tensor, dout: &Tensor, g: &mut LayerParams) -> Tensor {
    let (n, fin) = (input.shape()[0], input.shape()[1]);
    let fout = weight.shape()[0];
    let x = input.data();
    let wt = weight.data();
    let dy = dout.data();
    let mut dx = vec![0.0f32; n * fin];
    let dw = g.weight.data_mut();
    let db = g.bias.data_mut();
    for ni in 0..n {
        let xrow = &x[ni * fin..][..fin];
        let dxrow = &mut dx[ni * fin..][..fin];
        let dyrow = &dy[ni * fout..][..fout];
        for (oi, &gv) in dyrow.iter().enumerate() {
            db[oi] += gv;
            let wrow = &wt[oi * fin..][..fin];
            let dwrow = &mut dw[oi * fin..][..fin];
            for i in 0..fin {
                dxrow[i] += gv * wrow[i];
                dwrow[i] += gv * xrow[i];
            }
        }
    }
    Tensor::new(vec![n, fin], dx).expect("shape by construction")
}

fn relu_forward(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(input.shape().to_vec(), data).expect("shape unchanged")
}

/// Subgradient at 0 is 0: gradient flows only where the input was
/// strictly positive.
fn relu_backward(input: &Tensor, dout: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(dout.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("shape unchanged")
}

fn maxpool2x2_forward(input: &Tensor) -> Tensor {
    let s = input.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h / 2, w / 2);
    let x = input.data();
    let mut out = vec![0.0f32; n * c * ho * wo];
    for nc in 0..n * c {
        let plane = &x[nc * h * w..][..h * w];
        let oplane = &mut out[nc * ho * wo..][..ho * wo];
        for oh in 0..ho {
            for ow in 0..wo {
                let base = (oh * 2) * w + ow * 2;
                let mut best = plane[base];
                for &v in &[plane[base + 1], plane[base + w], plane[base + w + 1]] {
                    if v > best {
                        best = v;
                    }
                }
                oplane[oh * wo + ow] = best;
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out).expect("shape by construction")
}

/// Routes each output gradient to the first-in-scan-order argmax of its
/// 2x2 window; windows are disjoint so routed mass equals incoming mass.
fn maxpool2x2_backward(input: &Tensor, dout: &Tensor) -> Tensor {
    let s = input.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h / 2, w / 2);
    let x = input.data();
    let dy = dout.data();
    let mut dx = vec![0.0f32; input.numel()];
    for nc in 0..n * c {
        let plane = &x[nc * h * w..][..h * w];
        let dplane = &mut dx[nc * h * w..][..h * w];
        let gplane = &dy[nc * ho * wo..][..ho * wo];
        for oh in 0..ho {
            for ow in 0..wo {
                let base = (oh * 2) * w + ow * 2;
                let mut arg = base;
                let mut best = plane[base];
                for off in [base + 1, base + w, base + w + 1] {
                    if plane[off] > best {
                        best = plane[off];
                        arg = off;
                    }
                }
                dplane[arg] += gplane[oh * wo + ow];
            }
        }
    }
    Tensor::new(input.shape().to_vec(), dx).expect("shape unchanged")
}

/// Mean cross-entropy after a numerically stable softmax, in f64.
pub fn softmax_xent_loss(logits: &Tensor, labels: &[u8]) -> Result<f64> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    check_labels(labels, n, k)?;
    let x = logits.data();
    let mut total = 0.0f64;
    for (ni, &y) in labels.iter().enumerate() {
        let row = &x[ni * k..][..k];
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let lse: f64 = row.iter().map(|&v| ((v as f64) - m).exp()).sum();
        total += m + lse.ln() - row[y as usize] as f64;
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss"));
    }
    Ok(loss)
}

/// d(mean cross-entropy)/d(logits): (softmax - onehot) / N.
pub fn softmax_xent_grad(logits: &Tensor, labels: &[u8]) -> Result<Tensor> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    check_labels(labels, n, k)?;
    let x = logits.data();
    let mut out = vec![0.0f32; n * k];
    let inv_n = 1.0 / n as f64;
    for (ni, &y) in labels.iter().enumerate() {
        let row = &x[ni * k..][..k];
        let orow = &mut out[ni * k..][..k];
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let denom: f64 = row.iter().map(|&v| ((v as f64) - m).exp()).sum();
        for (ki, o) in orow.iter_mut().enumerate() {
            let p = ((row[ki] as f64) - m).exp() / denom;
            let t = if ki == y as usize { 1.0 } else { 0.0 };
            *o = ((p - t) * inv_n) as f32;
        }
    }
    Tensor::new(vec![n, k], out)
}

fn check_labels(labels: &[u8], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Precondition(format!(
            "{} labels for batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| (y as usize) >= k) {
        return Err(Error::Precondition(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    Ok(())
}

/// Argmax per row, first maximum wins.
pub fn predictions(logits: &Tensor) -> Vec<u8> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let x = logits.data();
    (0..n)
        .map(|ni| {
            let row = &x[ni * k..][..k];
            let mut arg = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[arg] {
                    arg = i;
                }
            }
            arg as u8
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regularizers::RegKind;

    fn rng_tensor(shape: Vec<usize>, seed: u64, name: &str, scale: f32) -> Tensor {
        use rand::Rng;
        let mut r = substream(seed, name);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| (2.0 * r.random::<f32>() - 1.0) * scale).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn identity_conv_passes_input_through() {
        let x = rng_tensor(vec![2, 1, 4, 4], 3, "x", 1.0);
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(vec![1]);
        let y = conv2d_direct(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_ones_sums_window() {
        let x = Tensor::filled(vec![1, 1, 3, 3], 1.0);
        let w = Tensor::filled(vec![1, 1, 3, 3], 1.0);
        let b = Tensor::zeros(vec![1]);
        let y = conv2d_direct(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn zero_kernel_yields_bias() {
        let x = rng_tensor(vec![1, 2, 5, 5], 4, "x", 1.0);
        let w = Tensor::zeros(vec![3, 2, 3, 3]);
        let b = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = conv2d_direct(&x, &w, &b, 1, 0).unwrap();
        for coi in 0..3 {
            for &v in &y.data()[coi * 9..][..9] {
                assert_eq!(v, b.data()[coi]);
            }
        }
    }

    /// Independently coded naive seven-loop convolution, single f32
    /// accumulator per output element.
    fn conv_naive(x: &Tensor, w: &Tensor, b: &Tensor, s: usize, p: usize) -> Tensor {
        let (n, ci, h, ww) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let ho = (h + 2 * p - kh) / s + 1;
        let wo = (ww + 2 * p - kw) / s + 1;
        let mut out = vec![0.0f32; n * co * ho * wo];
        for ni in 0..n {
            for coi in 0..co {
                for hoi in 0..ho {
                    for woi in 0..wo {
                        let mut acc = 0.0f32;
                        for cii in 0..ci {
                            for khi in 0..kh {
                                for kwi in 0..kw {
                                    let ih = (hoi * s + khi) as isize - p as isize;
                                    let iw = (woi * s + kwi) as isize - p as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= ww as isize {
                                        continue;
                                    }
                                    acc += x.data()
                                        [((ni * ci + cii) * h + ih as usize) * ww + iw as usize]
                                        * w.data()[((coi * ci + cii) * kh + khi) * kw + kwi];
                                }
                            }
                        }
                        out[((ni * co + coi) * ho + hoi) * wo + woi] = acc + b.data()[coi];
                    }
                }
            }
        }
        Tensor::new(vec![n, co, ho, wo], out).unwrap()
    }

    #[test]
    fn conv_matches_naive_oracle_bitwise() {
        for (seed, s, p) in [(1u64, 1, 0), (2, 1, 1), (3, 2, 0), (4, 2, 2), (5, 1, 2)] {
            let x = rng_tensor(vec![2, 2, 5, 5], seed, "cx", 2.0);
            let w = rng_tensor(vec![3, 2, 3, 3], seed, "cw", 1.0);
            let b = rng_tensor(vec![3], seed, "cb", 0.5);
            let got = conv2d_direct(&x, &w, &b, s, p).unwrap();
            let want = conv_naive(&x, &w, &b, s, p);
            assert_eq!(got.shape(), want.shape(), "seed {seed} s {s} p {p}");
            for (i, (a, e)) in got.data().iter().zip(want.data()).enumerate() {
                assert!(
                    a.to_bits() == e.to_bits(),
                    "seed {seed} s {s} p {p} elem {i}: {a} vs {e}"
                );
            }
        }
    }

    #[test]
    fn conv_rejects_too_small_input() {
        let x = Tensor::filled(vec![1, 1, 2, 2], 1.0);
        let w = Tensor::filled(vec![1, 1, 3, 3], 1.0);
        let b = Tensor::zeros(vec![1]);
        assert!(conv2d_direct(&x, &w, &b, 1, 0).is_err());
    }

    #[test]
    fn relu_example() {
        let x = Tensor::new(vec![3], vec![-1.0, 2.0, 0.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 2.0, 0.0]);
    }

    #[test]
    fn dense_hand_example() {
        let x = Tensor::new(vec![1, 2], vec![2.0, 3.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let y = dense_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
    }

    #[test]
    fn maxpool_backward_routes_to_argmax_and_preserves_mass() {
        let x = rng_tensor(vec![2, 3, 4, 4], 9, "px", 1.0);
        let y = maxpool2x2_forward(&x);
        let dy = rng_tensor(y.shape().to_vec(), 10, "pg", 1.0);
        let dx = maxpool2x2_backward(&x, &dy);
        let routed: f64 = dx.data().iter().map(|&v| v as f64).sum();
        let incoming: f64 = dy.data().iter().map(|&v| v as f64).sum();
        assert!((routed - incoming).abs() < 1e-4, "{routed} vs {incoming}");
        // nonzero gradient only at window maxima
        for nc in 0..6 {
            let plane = &x.data()[nc * 16..][..16];
            let dplane = &dx.data()[nc * 16..][..16];
            for oh in 0..2 {
                for ow in 0..2 {
                    let base = oh * 2 * 4 + ow * 2;
                    let idx = [base, base + 1, base + 4, base + 5];
                    let max = idx.iter().map(|&i| plane[i]).fold(f32::NEG_INFINITY, f32::max);
                    for &i in &idx {
                        if dplane[i] != 0.0 {
                            assert_eq!(plane[i], max);
                        }
                    }
                }
            }
        }
    }

    fn toy_net(seed: u64) -> Network {
        let mut net = Network::new(
            vec![1, 6, 6],
            vec![
                LayerSpec::conv2d(2, (3, 3), 1, 0),
                LayerSpec::relu(true),
                LayerSpec::maxpool2x2(),
                LayerSpec::flatten(),
                LayerSpec::dense(3),
                LayerSpec::softmax_xent(),
            ],
        )
        .unwrap();
        net.init_params(seed);
        net
    }

    #[test]
    fn forward_is_pure() {
        let net = toy_net(11);
        let x = rng_tensor(vec![4, 1, 6, 6], 12, "fx", 1.0);
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        for (ta, tb) in a.acts.iter().zip(&b.acts) {
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn forward_rejects_wrong_shape_with_layer_index() {
        let net = toy_net(11);
        let x = rng_tensor(vec![4, 1, 5, 5], 12, "fx", 1.0);
        match net.forward(&x) {
            Err(Error::LayerShapeMismatch { layer: 0, .. }) => {}
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn zero_alpha_backward_bit_identical_to_unregularized() {
        let net = toy_net(21);
        let x = rng_tensor(vec![4, 1, 6, 6], 22, "zx", 1.0);
        let labels = [0u8, 1, 2, 0];
        let cache = net.forward(&x).unwrap();
        let g_none = net.backward(&cache, &labels, &RegularizerSpec::none()).unwrap();
        let zero_alpha = RegularizerSpec::uniform(RegKind::Tl1, 0.0, 1e-4).unwrap();
        let g_zero = net.backward(&cache, &labels, &zero_alpha).unwrap();
        for (a, b) in g_none.iter().zip(&g_zero) {
            let (a, b) = (a.as_ref(), b.as_ref());
            match (a, b) {
                (None, None) => {}
                (Some(pa), Some(pb)) => {
                    let wa: Vec<u32> = pa.weight.data().iter().map(|v| v.to_bits()).collect();
                    let wb: Vec<u32> = pb.weight.data().iter().map(|v| v.to_bits()).collect();
                    assert_eq!(wa, wb);
                    let ba: Vec<u32> = pa.bias.data().iter().map(|v| v.to_bits()).collect();
                    let bb: Vec<u32> = pb.bias.data().iter().map(|v| v.to_bits()).collect();
                    assert_eq!(ba, bb);
                }
                _ => panic!("param layout mismatch"),
            }
        }
    }

    #[test]
    fn network_requires_softmax_head_last() {
        let r = Network::new(vec![4], vec![LayerSpec::dense(3)]);
        assert!(r.is_err());
        let r = Network::new(
            vec![4],
            vec![LayerSpec::softmax_xent(), LayerSpec::dense(3), LayerSpec::softmax_xent()],
        );
        assert!(r.is_err());
    }

    #[test]
    fn softmax_grad_rows_sum_to_zero() {
        let logits = rng_tensor(vec![5, 4], 31, "lg", 3.0);
        let labels = [0u8, 1, 2, 3, 1];
        let g = softmax_xent_grad(&logits, &labels).unwrap();
        for row in g.data().chunks_exact(4) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!(s.abs() < 1e-7);
        }
    }

    #[test]
    fn predictions_take_first_max() {
        let logits = Tensor::new(vec![2, 3], vec![1.0, 3.0, 3.0, -1.0, -1.0, -1.0]).unwrap();
        assert_eq!(predictions(&logits), vec![1, 0]);
    }
}
