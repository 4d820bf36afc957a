//! Learnable per-channel scale vectors and scale dropout.
//!
//! One Bernoulli bit per layer per forward pass decides whether the layer's
//! whole scale vector is applied (d = 1) or replaced (d = 0). What replaces
//! it depends on the variant: Unitary bypasses the scale (effective factor
//! 1), Average substitutes the mean of the vector, Random substitutes a
//! single value drawn from a configured uniform range.

use crate::error::{Error, Result};
use crate::rng::MaskSource;
use crate::tensor::RealTensor;
use rand::RngCore;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleVector {
    pub alpha: Vec<f64>,
}

impl ScaleVector {
    pub fn ones(channels: usize) -> Self {
        Self {
            alpha: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.alpha.len()
    }

    pub fn mean(&self) -> f64 {
        self.alpha.iter().sum::<f64>() / self.alpha.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropoutVariant {
    Unitary,
    Average,
    Random,
}

impl Default for DropoutVariant {
    fn default() -> Self {
        DropoutVariant::Unitary
    }
}

pub const DEFAULT_RANDOM_RANGE: (f64, f64) = (0.5, 1.5);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    pub variant: DropoutVariant,
    /// Keep probability p per binary layer, in order of appearance.
    pub rates: Vec<f64>,
    /// Uniform bounds for the Random variant's substitute value.
    pub random_range: (f64, f64),
}

impl DropoutConfig {
    pub fn new(variant: DropoutVariant, rates: Vec<f64>) -> Result<Self> {
        let cfg = Self {
            variant,
            rates,
            random_range: DEFAULT_RANDOM_RANGE,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn disabled(layers: usize) -> Self {
        Self {
            variant: DropoutVariant::Unitary,
            rates: vec![0.0; layers],
            random_range: DEFAULT_RANDOM_RANGE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, &p) in self.rates.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) || !p.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "dropout rate for layer {i} is {p}, must be in [0,1]"
                )));
            }
        }
        if self.random_range.0 > self.random_range.1 {
            return Err(Error::InvalidArgument(format!(
                "random scale range {:?} is inverted",
                self.random_range
            )));
        }
        Ok(())
    }
}

/// One layer's dropout mask for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutMask {
    /// d = 1 keeps the scale vector, d = 0 drops it.
    pub d: bool,
    /// Substitute value for the Random variant when d = 0.
    pub random_value: Option<f64>,
}

impl DropoutMask {
    pub fn keep() -> Self {
        Self {
            d: true,
            random_value: None,
        }
    }
}

/// d ~ Bernoulli(p): returns d = 1 (keep the scale) with probability p.
pub fn sample_mask<R: RngCore>(p: f64, rng: &mut MaskSource<R>) -> Result<DropoutMask> {
    if !(0.0..=1.0).contains(&p) || !p.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "dropout probability {p} outside [0,1]"
        )));
    }
    Ok(DropoutMask {
        d: rng.bernoulli(p),
        random_value: None,
    })
}

/// Samples one mask per layer for one forward pass; for the Random variant a
/// dropped layer also draws its substitute value.
pub fn sample_layer_masks<R: RngCore>(
    cfg: &DropoutConfig,
    rates: &[f64],
    rng: &mut MaskSource<R>,
) -> Result<Vec<DropoutMask>> {
    let mut masks = Vec::with_capacity(rates.len());
    for &p in rates {
        let mut mask = sample_mask(p, rng)?;
        if !mask.d && cfg.variant == DropoutVariant::Random {
            let (lo, hi) = cfg.random_range;
            mask.random_value = Some(if lo == hi { lo } else { rng.uniform(lo, hi) });
        }
        masks.push(mask);
    }
    Ok(masks)
}

/// The multiplicative factor a mask resolves to.
#[derive(Debug, Clone, PartialEq)]
pub enum EffectiveScale {
    /// d = 1: per-channel scale vector.
    PerChannel(Vec<f64>),
    /// d = 0, Unitary: bypass (factor 1).
    Bypass,
    /// d = 0, Average or Random: one scalar for the whole layer.
    Scalar(f64),
}

pub fn effective_scale(
    alpha: &ScaleVector,
    mask: &DropoutMask,
    cfg: &DropoutConfig,
) -> EffectiveScale {
    if mask.d {
        EffectiveScale::PerChannel(alpha.alpha.clone())
    } else {
        match cfg.variant {
            DropoutVariant::Unitary => EffectiveScale::Bypass,
            DropoutVariant::Average => EffectiveScale::Scalar(alpha.mean()),
            DropoutVariant::Random => EffectiveScale::Scalar(
                mask.random_value
                    .expect("random variant mask carries its substitute value"),
            ),
        }
    }
}

/// z ⊙ α̂ with the channel axis last.
pub fn apply_scale(
    z: &RealTensor,
    alpha: &ScaleVector,
    mask: &DropoutMask,
    cfg: &DropoutConfig,
) -> Result<RealTensor> {
    let c = z.channels();
    if alpha.channels() != c {
        return Err(Error::ShapeMismatch(format!(
            "scale vector has {} channels, activations have {}",
            alpha.channels(),
            c
        )));
    }
    let out = match effective_scale(alpha, mask, cfg) {
        EffectiveScale::Bypass => z.clone(),
        EffectiveScale::Scalar(s) => {
            let data = z.data().iter().map(|v| v * s).collect();
            RealTensor::new(z.shape().to_vec(), data)?
        }
        EffectiveScale::PerChannel(a) => {
            let data = z
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v * a[i % c])
                .collect();
            RealTensor::new(z.shape().to_vec(), data)?
        }
    };
    Ok(out)
}

/// Layer-dependent dropout rates: layers at or above the median parameter
/// count get p = 0.5, smaller layers get p = 0.2.
pub fn adaptive_rates(layer_param_counts: &[usize]) -> Result<Vec<f64>> {
    if layer_param_counts.is_empty() {
        return Err(Error::InvalidArgument(
            "adaptive rates need at least one layer".to_string(),
        ));
    }
    if layer_param_counts.iter().any(|&c| c == 0) {
        return Err(Error::InvalidArgument(
            "layer parameter counts must be positive".to_string(),
        ));
    }
    let mut sorted: Vec<usize> = layer_param_counts.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] as f64 + sorted[n / 2] as f64) / 2.0
    };
    Ok(layer_param_counts
        .iter()
        .map(|&c| if c as f64 >= median { 0.5 } else { 0.2 })
        .collect())
}
