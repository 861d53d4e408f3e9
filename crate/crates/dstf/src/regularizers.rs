//! Sparsity penalties on activation maps: transformed-l1, plain l1, and
//! squared Hoyer, with their activation-space gradients.
//!
//! Per-entry math runs in f64 regardless of tensor storage so the
//! small-beta and large-beta regimes of the transformed-l1 penalty stay
//! accurate.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegKind {
    None,
    L1,
    HoyerSq,
    Tl1,
}

/// Per-layer penalty strengths. `Uniform` replicates one value across all
/// regularized layers, matching the grid-search convention of using the
/// same parameters for every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaSpec {
    Uniform(f64),
    PerLayer(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizerSpec {
    pub kind: RegKind,
    pub alpha: AlphaSpec,
    /// Shape parameter of the transformed-l1 penalty; must be positive.
    pub beta: f64,
    /// Guard for the squared-Hoyer denominator.
    pub hoyer_eps: f64,
}

pub const DEFAULT_HOYER_EPS: f64 = 1e-8;

impl RegularizerSpec {
    pub fn none() -> Self {
        Self {
            kind: RegKind::None,
            alpha: AlphaSpec::Uniform(0.0),
            beta: 1.0,
            hoyer_eps: DEFAULT_HOYER_EPS,
        }
    }

    pub fn uniform(kind: RegKind, alpha: f64, beta: f64) -> Result<Self> {
        let spec = Self {
            kind,
            alpha: AlphaSpec::Uniform(alpha),
            beta,
            hoyer_eps: DEFAULT_HOYER_EPS,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == RegKind::Tl1 && self.beta <= 0.0 {
            return Err(Error::InvalidRegularizer(format!(
                "tl1 requires beta > 0, got {}",
                self.beta
            )));
        }
        if self.hoyer_eps <= 0.0 {
            return Err(Error::InvalidRegularizer(format!(
                "hoyer_eps must be positive, got {}",
                self.hoyer_eps
            )));
        }
        let negative = match &self.alpha {
            AlphaSpec::Uniform(a) => *a < 0.0,
            AlphaSpec::PerLayer(v) => v.iter().any(|&a| a < 0.0),
        };
        if negative {
            return Err(Error::InvalidRegularizer(
                "alpha values must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Resolve per-layer strengths for a network with `n_layers` regularized
    /// activation maps.
    pub fn alphas(&self, n_layers: usize) -> Result<Vec<f64>> {
        match &self.alpha {
            AlphaSpec::Uniform(a) => Ok(vec![*a; n_layers]),
            AlphaSpec::PerLayer(v) => {
                if v.len() != n_layers {
                    return Err(Error::InvalidRegularizer(format!(
                        "{} per-layer alphas for {} regularized layers",
                        v.len(),
                        n_layers
                    )));
                }
                Ok(v.clone())
            }
        }
    }

    /// True when the penalty can contribute anything to loss or gradients.
    pub fn is_active(&self) -> bool {
        if self.kind == RegKind::None {
            return false;
        }
        match &self.alpha {
            AlphaSpec::Uniform(a) => *a > 0.0,
            AlphaSpec::PerLayer(v) => v.iter().any(|&a| a > 0.0),
        }
    }
}

fn check_finite(x: &Tensor) -> Result<()> {
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("regularizer input"));
    }
    Ok(())
}

fn tl1_entry(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    (1.0 + beta) * a / (beta + a)
}

/// Penalty of a flat slice; no finiteness check (hot path, inputs come from
/// our own forward pass).
pub(crate) fn value_slice(kind: RegKind, x: &[f32], beta: f64, hoyer_eps: f64) -> f64 {
    match kind {
        RegKind::None => 0.0,
        RegKind::L1 => x.iter().map(|&v| (v as f64).abs()).sum(),
        RegKind::Tl1 => x.iter().map(|&v| tl1_entry(v as f64, beta)).sum(),
        RegKind::HoyerSq => {
            let l1: f64 = x.iter().map(|&v| (v as f64).abs()).sum();
            let sq: f64 = x.iter().map(|&v| (v as f64) * (v as f64)).sum();
            l1 * l1 / sq.max(hoyer_eps)
        }
    }
}

/// Adds `scale` times the penalty gradient of `x` into `out`.
pub(crate) fn grad_into(
    kind: RegKind,
    x: &[f32],
    beta: f64,
    hoyer_eps: f64,
    scale: f64,
    out: &mut [f32],
) {
    debug_assert_eq!(x.len(), out.len());
    match kind {
        RegKind::None => {}
        RegKind::L1 => {
            for (o, &v) in out.iter_mut().zip(x) {
                *o += (scale * sign(v as f64)) as f32;
            }
        }
        RegKind::Tl1 => {
            for (o, &v) in out.iter_mut().zip(x) {
                let v = v as f64;
                if v != 0.0 {
                    let d = beta + v.abs();
                    *o += (scale * (1.0 + beta) * beta * sign(v) / (d * d)) as f32;
                }
            }
        }
        RegKind::HoyerSq => {
            let l1: f64 = x.iter().map(|&v| (v as f64).abs()).sum();
            let sq: f64 = x.iter().map(|&v| (v as f64) * (v as f64)).sum();
            if sq < hoyer_eps {
                return;
            }
            let d = sq.max(hoyer_eps);
            for (o, &v) in out.iter_mut().zip(x) {
                let v = v as f64;
                let g = (2.0 * l1 * sign(v)) / d - (2.0 * l1 * l1 * v) / (d * d);
                *o += (scale * g) as f32;
            }
        }
    }
}

/// Penalty value of `x` under the given kind.
pub fn reg_value(kind: RegKind, x: &Tensor, beta: f64, hoyer_eps: f64) -> Result<f64> {
    check_finite(x)?;
    Ok(value_slice(kind, x.data(), beta, hoyer_eps))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Elementwise gradient of `reg_value` with the subgradient at 0 fixed to 0,
/// so exact zeros stay absorbing.
pub fn reg_grad(kind: RegKind, x: &Tensor, beta: f64, hoyer_eps: f64) -> Result<Tensor> {
    check_finite(x)?;
    let mut data = vec![0.0f32; x.numel()];
    grad_into(kind, x.data(), beta, hoyer_eps, 1.0, &mut data);
    Tensor::new(x.shape().to_vec(), data)
}

/// Numeric check of the limiting behaviour of the transformed-l1 penalty:
/// beta -> 0+ recovers the zero-norm, beta -> +inf recovers the l1 norm.
///
/// Input entries must be exactly 0 or at least 0.1 in magnitude so the
/// small-beta limit is well separated from the nonzero values.
pub fn tl1_limit_check(x: &Tensor) -> Result<(f64, f64)> {
    check_finite(x)?;
    if x.data()
        .iter()
        .any(|&v| v != 0.0 && (v as f64).abs() < 0.1)
    {
        return Err(Error::Precondition(
            "tl1_limit_check requires entries exactly 0 or |x| >= 0.1".into(),
        ));
    }
    let nnz = x.data().iter().filter(|&&v| v != 0.0).count() as f64;
    let l1: f64 = x.data().iter().map(|&v| (v as f64).abs()).sum();
    let v_small = reg_value(RegKind::Tl1, x, 1e-8, DEFAULT_HOYER_EPS)?;
    let v_large = reg_value(RegKind::Tl1, x, 1e8, DEFAULT_HOYER_EPS)?;
    let l0_err = (v_small - nnz).abs();
    let l1_err = (v_large - l1).abs() / l1.max(1.0);
    Ok((l0_err, l1_err))
}
