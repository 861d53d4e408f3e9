//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic "DSTF0001", a little-endian u64 byte length, a
//! JSON descriptor (architecture, metadata, and the shape of every
//! payload tensor in order), then the tensor payloads as little-endian
//! f32 in declaration order. Serialization is deterministic: the
//! descriptor's field and tensor order is fixed, so save -> load -> save
//! is byte-identical.

use crate::error::{Error, Result};
use crate::layers::{LayerParams, LayerSpec, Network, ParamStore};
use crate::pruning::PruneMask;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"DSTF0001";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Pretrained,
    WeightSparse,
    Dual,
}

impl StageTag {
    pub fn name(self) -> &'static str {
        match self {
            StageTag::Pretrained => "pretrained",
            StageTag::WeightSparse => "weight_sparse",
            StageTag::Dual => "dual",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: StageTag,
    /// Epochs completed in the stage that wrote this checkpoint.
    pub epoch: usize,
    pub seed: u64,
    pub config_digest: String,
    /// Input normalization (mean, std) the parameters were trained under.
    pub normalization: Option<(f32, f32)>,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub params: ParamStore,
    pub velocity: ParamStore,
    pub mask: Option<PruneMask>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// JSON descriptor; field order is the wire order.
#[derive(Serialize, Deserialize)]
struct Descriptor {
    stage: StageTag,
    epoch: usize,
    seed: u64,
    config_digest: String,
    normalization: Option<(f32, f32)>,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn from_network(
        net: &Network,
        velocity: ParamStore,
        mask: Option<PruneMask>,
        stage: StageTag,
        epoch: usize,
        seed: u64,
        config_digest: String,
        normalization: Option<(f32, f32)>,
    ) -> Self {
        Checkpoint {
            stage,
            epoch,
            seed,
            config_digest,
            normalization,
            input_shape: net.input_sample_shape().to_vec(),
            layers: net.layers().to_vec(),
            params: net.params().clone(),
            velocity,
            mask,
        }
    }

    /// Rebuilds the network (and velocity/mask) this checkpoint captured.
    pub fn restore(&self) -> Result<(Network, ParamStore, Option<PruneMask>)> {
        let mut net = Network::new(self.input_shape.clone(), self.layers.clone())?;
        for (l, slot) in self.params.iter().enumerate() {
            match (slot, net.layer_params(l).is_some()) {
                (Some(p), true) => {
                    let target = net.layer_params_mut(l).unwrap();
                    if p.weight.shape() != target.weight.shape()
                        || p.bias.shape() != target.bias.shape()
                    {
                        return Err(Error::CkptShape(format!(
                            "layer {l} parameter shapes do not match the architecture"
                        )));
                    }
                    *target = p.clone();
                }
                (None, false) => {}
                _ => {
                    return Err(Error::CkptShape(format!(
                        "layer {l} parameter presence does not match the architecture"
                    )));
                }
            }
        }
        if let Some(m) = &self.mask {
            m.validate_against(&net)
                .map_err(|e| Error::CkptInvariant(format!("mask does not fit network: {e}")))?;
        }
        Ok((net, self.velocity.clone(), self.mask.clone()))
    }

    fn check_invariants(&self) -> Result<()> {
        let wants_mask = matches!(self.stage, StageTag::WeightSparse | StageTag::Dual);
        match (&self.mask, wants_mask) {
            (Some(_), true) | (None, false) => {}
            (None, true) => {
                return Err(Error::CkptInvariant(format!(
                    "stage {} requires a prune mask",
                    self.stage.name()
                )))
            }
            (Some(_), false) => {
                return Err(Error::CkptInvariant(format!(
                    "stage {} must not carry a prune mask",
                    self.stage.name()
                )))
            }
        }
        if self.params.len() != self.layers.len() || self.velocity.len() != self.layers.len() {
            return Err(Error::CkptShape(
                "parameter stores must have one slot per layer".into(),
            ));
        }
        Ok(())
    }

    /// Payload tensors in wire order, with their descriptor names.
    fn tensor_seq(&self) -> Vec<(String, &Tensor)> {
        let mut seq = Vec::new();
        for (prefix, store) in [("param", &self.params), ("velocity", &self.velocity)] {
            for (l, slot) in store.iter().enumerate() {
                if let Some(p) = slot {
                    seq.push((format!("{prefix}.layer{l}.weight"), &p.weight));
                    seq.push((format!("{prefix}.layer{l}.bias"), &p.bias));
                }
            }
        }
        if let Some(mask) = &self.mask {
            for (l, m) in mask.iter() {
                seq.push((format!("mask.layer{l}"), m));
            }
        }
        seq
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check_invariants()?;
        let seq = self.tensor_seq();
        let descriptor = Descriptor {
            stage: self.stage,
            epoch: self.epoch,
            seed: self.seed,
            config_digest: self.config_digest.clone(),
            normalization: self.normalization,
            input_shape: self.input_shape.clone(),
            layers: self.layers.clone(),
            tensors: seq
                .iter()
                .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let desc_json = serde_json::to_vec(&descriptor)
            .map_err(|e| Error::CkptDescriptor(e.to_string()))?;
        let payload_len: usize = seq.iter().map(|(_, t)| t.numel() * 4).sum();
        let mut out = Vec::with_capacity(16 + desc_json.len() + payload_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(desc_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&desc_json);
        for (_, t) in &seq {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 8 {
            return Err(Error::CkptTruncated { needed: 8, available: bytes.len() });
        }
        if &bytes[..4] != &MAGIC[..4] {
            return Err(Error::CkptBadMagic);
        }
        if &bytes[4..8] != &MAGIC[4..8] {
            return Err(Error::CkptVersion {
                found: String::from_utf8_lossy(&bytes[4..8]).into_owned(),
            });
        }
        if bytes.len() < 16 {
            return Err(Error::CkptTruncated { needed: 16, available: bytes.len() });
        }
        let desc_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let desc_end = 16usize
            .checked_add(desc_len)
            .ok_or(Error::CkptDescriptor("descriptor length overflow".into()))?;
        if bytes.len() < desc_end {
            return Err(Error::CkptTruncated { needed: desc_end, available: bytes.len() });
        }
        let descriptor: Descriptor = serde_json::from_slice(&bytes[16..desc_end])
            .map_err(|e| Error::CkptDescriptor(e.to_string()))?;

        // validate architecture and derive expected parameter shapes
        let skeleton = Network::new(descriptor.input_shape.clone(), descriptor.layers.clone())
            .map_err(|e| Error::CkptDescriptor(format!("bad architecture: {e}")))?;

        let mut payload_len = 0usize;
        for entry in &descriptor.tensors {
            payload_len = payload_len
                .checked_add(entry_bytes(&entry.shape)?)
                .ok_or(Error::CkptDescriptor("payload length overflow".into()))?;
        }
        let needed = desc_end
            .checked_add(payload_len)
            .ok_or(Error::CkptDescriptor("payload length overflow".into()))?;
        if bytes.len() < needed {
            return Err(Error::CkptTruncated { needed, available: bytes.len() });
        }
        if bytes.len() > needed {
            return Err(Error::CkptShape(format!(
                "{} trailing bytes after payload",
                bytes.len() - needed
            )));
        }

        let mut params: ParamStore = vec![None; descriptor.layers.len()];
        let mut velocity: ParamStore = vec![None; descriptor.layers.len()];
        let mut mask_pairs: Vec<(usize, Tensor)> = Vec::new();
        let mut off = desc_end;
        for entry in &descriptor.tensors {
            let nbytes = entry_bytes(&entry.shape)?;
            let mut data = Vec::with_capacity(nbytes / 4);
            for chunk in bytes[off..off + nbytes].chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
            }
            off += nbytes;
            let t = Tensor::new(entry.shape.clone(), data)
                .map_err(|e| Error::CkptShape(format!("{}: {e}", entry.name)))?;
            place_tensor(&entry.name, t, &mut params, &mut velocity, &mut mask_pairs, &skeleton)?;
        }

        // all parameterized layers must have arrived
        for l in skeleton.param_layer_indices() {
            if params[l].is_none() {
                return Err(Error::CkptShape(format!("missing parameters for layer {l}")));
            }
            if velocity[l].is_none() {
                return Err(Error::CkptShape(format!("missing velocity for layer {l}")));
            }
        }

        let ckpt = Checkpoint {
            stage: descriptor.stage,
            epoch: descriptor.epoch,
            seed: descriptor.seed,
            config_digest: descriptor.config_digest,
            normalization: descriptor.normalization,
            input_shape: descriptor.input_shape,
            layers: descriptor.layers,
            params,
            velocity,
            mask: (!mask_pairs.is_empty()).then(|| PruneMask::from_layer_masks(mask_pairs)),
        };
        ckpt.check_invariants()?;
        ckpt.restore()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

/// Byte size of one payload tensor, rejecting overflowing shapes.
fn entry_bytes(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(4usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::CkptDescriptor("tensor shape overflows".into()))
}

/// Routes one named payload tensor into the right store slot.
fn place_tensor(
    name: &str,
    t: Tensor,
    params: &mut ParamStore,
    velocity: &mut ParamStore,
    mask_pairs: &mut Vec<(usize, Tensor)>,
    skeleton: &Network,
) -> Result<()> {
    let bad = || Error::CkptDescriptor(format!("unrecognized tensor name {name:?}"));
    let parse_layer = |part: &str| -> Result<usize> {
        part.strip_prefix("layer")
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(bad)
    };
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        [store @ ("param" | "velocity"), layer, role @ ("weight" | "bias")] => {
            let l = parse_layer(layer)?;
            let expected = skeleton
                .layer_params(l)
                .ok_or_else(|| Error::CkptShape(format!("layer {l} has no parameters")))?;
            let want = if *role == "weight" { expected.weight.shape() } else { expected.bias.shape() };
            if t.shape() != want {
                return Err(Error::CkptShape(format!(
                    "{name}: shape {:?} does not match architecture {:?}",
                    t.shape(),
                    want
                )));
            }
            let target = if *store == "param" { params } else { velocity };
            let slot = target
                .get_mut(l)
                .ok_or_else(|| Error::CkptShape(format!("layer {l} out of range")))?;
            let entry = slot.get_or_insert_with(|| LayerParams {
                weight: Tensor::zeros(expected.weight.shape().to_vec()),
                bias: Tensor::zeros(expected.bias.shape().to_vec()),
            });
            if *role == "weight" {
                entry.weight = t;
            } else {
                entry.bias = t;
            }
            Ok(())
        }
        ["mask", layer] => {
            let l = parse_layer(layer)?;
            let expected = skeleton
                .layer_params(l)
                .ok_or_else(|| Error::CkptShape(format!("mask for layer {l} without weights")))?;
            if t.shape() != expected.weight.shape() {
                return Err(Error::CkptShape(format!(
                    "mask.layer{l}: shape {:?} does not match weight {:?}",
                    t.shape(),
                    expected.weight.shape()
                )));
            }
            if mask_pairs.iter().any(|(ml, _)| *ml == l) {
                return Err(Error::CkptDescriptor(format!("duplicate mask for layer {l}")));
            }
            mask_pairs.push((l, t));
            Ok(())
        }
        _ => Err(bad()),
    }
}
