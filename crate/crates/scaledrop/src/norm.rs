//! Weight normalization, sign binarization, and batch normalization.
//!
//! Channel-wise weight normalization: per channel the mean over the kernel
//! dimensions is subtracted, then the zero-centered weights are divided by
//! the channel standard deviation. The variance uses the one-pass form
//! `mean(W^2) - mean(W)^2`, clamped at zero before the square root because
//! rounding can push it slightly negative for near-constant channels.
//!
//! Kernel dimensions are the trailing two axes for tensors of rank >= 3 and
//! the trailing axis for rank-2 tensors (a linear layer's fan-in is treated
//! as a 1 x fan-in kernel).

use crate::error::{Error, Result};
use crate::packed::PackedBinaryTensor;
use crate::tensor::RealTensor;
use serde::{Deserialize, Serialize};

pub const NORM_EPSILON: f64 = 1e-5;
pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// sign(w): +1 where w >= 0, −1 otherwise, packed.
pub fn sign_binarize(w: &RealTensor) -> Result<PackedBinaryTensor> {
    w.ensure_finite("sign_binarize input")?;
    PackedBinaryTensor::from_signs(w.shape().to_vec(), w.data())
}

/// Number of trailing elements forming one normalization group (the kernel).
fn kernel_group_len(shape: &[usize]) -> Result<usize> {
    match shape.len() {
        0 | 1 => Err(Error::ShapeMismatch(format!(
            "channel normalization needs >= 2 dims, got {shape:?}"
        ))),
        2 => Ok(shape[1]),
        n => Ok(shape[n - 2] * shape[n - 1]),
    }
}

/// Per-channel statistics used by [`channel_normalize`] and its backward.
pub struct ChannelStats {
    pub group: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn channel_stats(w: &RealTensor) -> Result<ChannelStats> {
    w.ensure_finite("channel_normalize input")?;
    let group = kernel_group_len(w.shape())?;
    let channels = w.len() / group;
    let mut mean = vec![0.0; channels];
    let mut std = vec![0.0; channels];
    for c in 0..channels {
        let chunk = &w.data()[c * group..(c + 1) * group];
        let m: f64 = chunk.iter().sum::<f64>() / group as f64;
        let sq: f64 = chunk.iter().map(|v| v * v).sum::<f64>() / group as f64;
        mean[c] = m;
        std[c] = (sq - m * m).max(0.0).sqrt();
    }
    Ok(ChannelStats { group, mean, std })
}

/// (w − μ_c) / (σ_c + epsilon), channel by channel.
pub fn channel_normalize(w: &RealTensor, epsilon: f64) -> Result<RealTensor> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument(
            "channel_normalize epsilon must be > 0".to_string(),
        ));
    }
    let stats = channel_stats(w)?;
    let mut out = Vec::with_capacity(w.len());
    for c in 0..stats.mean.len() {
        let inv = 1.0 / (stats.std[c] + epsilon);
        for &v in &w.data()[c * stats.group..(c + 1) * stats.group] {
            out.push((v - stats.mean[c]) * inv);
        }
    }
    RealTensor::new(w.shape().to_vec(), out)
}

/// Backward of [`channel_normalize`]: given dL/dW̃, returns dL/dW.
///
/// For a group of size n with c = σ + ε:
///   dW_j = g_j/c − mean(g)/c − W̃_j · mean(g ⊙ Ŵ)/(c·σ)
/// where Ŵ are the zero-centered weights. The σ = 0 branch (clamped
/// variance) treats σ as locally constant.
pub fn channel_normalize_backward(
    w: &RealTensor,
    grad_norm: &RealTensor,
    epsilon: f64,
) -> Result<RealTensor> {
    if w.shape() != grad_norm.shape() {
        return Err(Error::ShapeMismatch(format!(
            "normalize backward: weight {:?} vs grad {:?}",
            w.shape(),
            grad_norm.shape()
        )));
    }
    let stats = channel_stats(w)?;
    let n = stats.group as f64;
    let mut out = vec![0.0; w.len()];
    for c in 0..stats.mean.len() {
        let lo = c * stats.group;
        let hi = lo + stats.group;
        let cc = stats.std[c] + epsilon;
        let g = &grad_norm.data()[lo..hi];
        let wv = &w.data()[lo..hi];
        let g_mean: f64 = g.iter().sum::<f64>() / n;
        if stats.std[c] > 0.0 {
            let mut g_dot_centered = 0.0;
            for i in 0..stats.group {
                g_dot_centered += g[i] * (wv[i] - stats.mean[c]);
            }
            let coef = g_dot_centered / (n * stats.std[c] * cc * cc);
            for i in 0..stats.group {
                out[lo + i] = (g[i] - g_mean) / cc - (wv[i] - stats.mean[c]) * coef;
            }
        } else {
            for i in 0..stats.group {
                out[lo + i] = (g[i] - g_mean) / cc;
            }
        }
    }
    RealTensor::new(w.shape().to_vec(), out)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::ShapeMismatch(
                "batch norm parameter vectors disagree on channel count".to_string(),
            ));
        }
        if self.running_var.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(
                "batch norm running variance must be >= 0".to_string(),
            ));
        }
        Ok(())
    }
}

/// Per-channel batch statistics cached by the training-mode forward.
pub struct BatchNormCache {
    pub normalized: RealTensor,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Batch normalization over the last (channel) axis.
///
/// Training mode normalizes with batch statistics and updates the running
/// statistics in place with momentum; eval mode uses the running statistics
/// and leaves them untouched. Population variance (divide by count) is used
/// both for normalization and for the running update.
pub fn batchnorm_forward(
    z: &RealTensor,
    p: &mut BatchNormParams,
    training: bool,
) -> Result<(RealTensor, Option<BatchNormCache>)> {
    p.validate()?;
    let c = p.channels();
    if z.channels() != c {
        return Err(Error::ShapeMismatch(format!(
            "batch norm channels {} vs input {:?}",
            c,
            z.shape()
        )));
    }
    let count = z.len() / c;
    if count == 0 {
        return Err(Error::ShapeMismatch("batch norm on empty tensor".to_string()));
    }

    let (mean, var) = if training {
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (i, &v) in z.data().iter().enumerate() {
            mean[i % c] += v;
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        for (i, &v) in z.data().iter().enumerate() {
            let d = v - mean[i % c];
            var[i % c] += d * d;
        }
        for v in &mut var {
            *v /= count as f64;
        }
        (mean, var)
    } else {
        (p.running_mean.clone(), p.running_var.clone())
    };

    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + p.epsilon).sqrt()).collect();
    let mut normalized = Vec::with_capacity(z.len());
    let mut out = Vec::with_capacity(z.len());
    for (i, &v) in z.data().iter().enumerate() {
        let ch = i % c;
        let xhat = (v - mean[ch]) * inv_std[ch];
        normalized.push(xhat);
        out.push(p.gamma[ch] * xhat + p.beta[ch]);
    }
    let out = RealTensor::new(z.shape().to_vec(), out)?;
    out.ensure_finite("batch norm output")?;

    if training {
        for ch in 0..c {
            p.running_mean[ch] =
                (1.0 - p.momentum) * p.running_mean[ch] + p.momentum * mean[ch];
            p.running_var[ch] = (1.0 - p.momentum) * p.running_var[ch] + p.momentum * var[ch];
        }
        let cache = BatchNormCache {
            normalized: RealTensor::new(z.shape().to_vec(), normalized)?,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        };
        Ok((out, Some(cache)))
    } else {
        Ok((out, None))
    }
}

/// Backward of training-mode batch norm. Returns (dz, dgamma, dbeta).
pub fn batchnorm_backward(
    grad_out: &RealTensor,
    p: &BatchNormParams,
    cache: &BatchNormCache,
) -> Result<(RealTensor, Vec<f64>, Vec<f64>)> {
    let c = p.channels();
    let count = (grad_out.len() / c) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (i, &g) in grad_out.data().iter().enumerate() {
        let ch = i % c;
        dgamma[ch] += g * cache.normalized.data()[i];
        dbeta[ch] += g;
    }
    let mut dz = Vec::with_capacity(grad_out.len());
    for (i, &g) in grad_out.data().iter().enumerate() {
        let ch = i % c;
        let term = g - dbeta[ch] / count - cache.normalized.data()[i] * dgamma[ch] / count;
        dz.push(p.gamma[ch] * cache.inv_std[ch] * term);
    }
    Ok((
        RealTensor::new(grad_out.shape().to_vec(), dz)?,
        dgamma,
        dbeta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn sign_binarize_zero_goes_positive() {
        let w = RealTensor::from_vec(vec![0.3, -0.2, 0.0]);
        let b = sign_binarize(&w).unwrap();
        assert_eq!(b.unpack(), vec![1.0, -1.0, 1.0]);
    }

    #[test]
    fn sign_binarize_all_positive() {
        let w = RealTensor::new(vec![2, 3], vec![0.1, 2.0, 3.5, 0.7, 9.0, 1e-9]).unwrap();
        let b = sign_binarize(&w).unwrap();
        assert!(b.unpack().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sign_binarize_matches_scalar_oracle() {
        let mut rng = StdRng::seed_from_u64(3);
        let vals: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w = RealTensor::new(vec![4, 4], vals.clone()).unwrap();
        let b = sign_binarize(&w).unwrap();
        for (i, v) in vals.iter().enumerate() {
            let want = if *v >= 0.0 { 1 } else { -1 };
            assert_eq!(b.get(i), want, "element {i}");
        }
    }

    #[test]
    fn sign_binarize_rejects_nan() {
        let w = RealTensor::from_vec(vec![0.0, f64::NAN]);
        assert!(sign_binarize(&w).is_err());
    }

    #[test]
    fn normalize_single_channel_known_values() {
        // channel [1,3,5,7]: mean 4, centered [-3,-1,1,3],
        // variance = mean(W^2) - mean^2 = 21 - 16 = 5
        let w = RealTensor::new(vec![1, 4], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let eps = 1e-5;
        let got = channel_normalize(&w, eps).unwrap();
        let sigma = 5.0f64.sqrt();
        for (g, c) in got.data().iter().zip([-3.0, -1.0, 1.0, 3.0]) {
            let want = c / (sigma + eps);
            assert!((g - want).abs() < 1e-15, "{g} vs {want}");
        }
    }

    #[test]
    fn normalize_constant_channel_is_zero() {
        let w = RealTensor::new(vec![1, 4], vec![2.0, 2.0, 2.0, 2.0]).unwrap();
        let got = channel_normalize(&w, 1e-5).unwrap();
        assert!(got.data().iter().all(|&v| v == 0.0));
        // and binarizes to all +1
        let b = sign_binarize(&got).unwrap();
        assert!(b.unpack().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn normalize_is_near_idempotent() {
        let w = RealTensor::new(vec![1, 4], vec![-1.5, -0.5, 0.5, 1.5]).unwrap();
        // already zero-mean; std = sqrt(1.25)
        let once = channel_normalize(&w, 1e-9).unwrap();
        let twice = channel_normalize(&once, 1e-9).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_rank3_groups_over_kernel_dims() {
        // shape [2, 2, 2]: two channels, each a 2x2 kernel
        let w = RealTensor::new(
            vec![2, 2, 2],
            vec![1.0, 3.0, 5.0, 7.0, -10.0, -10.0, -10.0, -10.0],
        )
        .unwrap();
        let got = channel_normalize(&w, 1e-5).unwrap();
        let sigma = 5.0f64.sqrt();
        assert!((got.data()[0] - (-3.0 / (sigma + 1e-5))).abs() < 1e-12);
        // constant channel: all zeros
        assert!(got.data()[4..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(17);
        let vals: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = RealTensor::new(vec![2, 6], vals).unwrap();
        let g: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grad = RealTensor::new(vec![2, 6], g.clone()).unwrap();
        let eps = 1e-5;
        let analytic = channel_normalize_backward(&w, &grad, eps).unwrap();
        let h = 1e-6;
        for j in 0..w.len() {
            let mut wp = w.clone();
            wp.data_mut()[j] += h;
            let mut wm = w.clone();
            wm.data_mut()[j] -= h;
            let fp: f64 = channel_normalize(&wp, eps)
                .unwrap()
                .data()
                .iter()
                .zip(&g)
                .map(|(a, b)| a * b)
                .sum();
            let fm: f64 = channel_normalize(&wm, eps)
                .unwrap()
                .data()
                .iter()
                .zip(&g)
                .map(|(a, b)| a * b)
                .sum();
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic.data()[j];
            assert!(
                (a - fd).abs() <= 1e-6 * a.abs().max(fd.abs()).max(1.0),
                "element {j}: analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn batchnorm_identity_on_standardized_batch() {
        // gamma=1, beta=0, input already standardized per channel
        let z = RealTensor::new(vec![4, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let mut p = BatchNormParams::new(1);
        let (out, _) = batchnorm_forward(&z, &mut p, true).unwrap();
        for (o, i) in out.data().iter().zip(z.data()) {
            assert!((o - i).abs() < 1e-4); // epsilon-induced bound
        }
    }

    #[test]
    fn batchnorm_gamma_zero_gives_beta() {
        let z = RealTensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut p = BatchNormParams::new(2);
        p.gamma = vec![0.0, 0.0];
        p.beta = vec![7.0, -3.0];
        let (out, _) = batchnorm_forward(&z, &mut p, true).unwrap();
        for row in 0..3 {
            assert_eq!(out.data()[row * 2], 7.0);
            assert_eq!(out.data()[row * 2 + 1], -3.0);
        }
    }

    #[test]
    fn batchnorm_matches_scalar_loop_oracle() {
        let mut rng = StdRng::seed_from_u64(21);
        let (n, c) = (6, 3);
        let vals: Vec<f64> = (0..n * c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let z = RealTensor::new(vec![n, c], vals.clone()).unwrap();
        let mut p = BatchNormParams::new(c);
        p.gamma = vec![1.5, 0.5, -1.0];
        p.beta = vec![0.1, -0.2, 0.3];
        let (out, _) = batchnorm_forward(&z, &mut p, true).unwrap();

        // oracle: naive per-element loop
        for ch in 0..c {
            let col: Vec<f64> = (0..n).map(|r| vals[r * c + ch]).collect();
            let mean: f64 = col.iter().sum::<f64>() / n as f64;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            for r in 0..n {
                let want =
                    p.gamma[ch] * (vals[r * c + ch] - mean) / (var + p.epsilon).sqrt() + p.beta[ch];
                let got = out.data()[r * c + ch];
                let rel = (got - want).abs() / want.abs().max(1.0);
                assert!(rel < 1e-6, "({r},{ch}): {got} vs {want}");
            }
        }
        // running stats moved toward batch stats with momentum 0.1
        assert!(p.running_mean.iter().zip(0..c).all(|(m, _)| m.abs() < 1.0));
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let z = RealTensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let mut p = BatchNormParams::new(1);
        p.running_mean = vec![10.0];
        p.running_var = vec![4.0];
        p.epsilon = 0.0;
        let (out, cache) = batchnorm_forward(&z, &mut p, false).unwrap();
        assert!(cache.is_none());
        assert_eq!(out.data()[0], (1.0 - 10.0) / 2.0);
        assert_eq!(out.data()[1], (3.0 - 10.0) / 2.0);
        assert_eq!(p.running_mean[0], 10.0); // untouched
    }

    #[test]
    fn batchnorm_channel_mismatch_errors() {
        let z = RealTensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        let mut p = BatchNormParams::new(2);
        assert!(batchnorm_forward(&z, &mut p, true).is_err());
    }

    proptest! {
        /// sign(normalize(w)) is invariant under per-channel affine maps
        /// a*w + b with a > 0.
        #[test]
        fn binarize_invariant_under_channel_affine(
            seed in 0u64..200,
            a in 0.05f64..20.0,
            b in -5.0f64..5.0,
        ) {
            let mut rng = StdRng::seed_from_u64(seed);
            let vals: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w = RealTensor::new(vec![3, 8], vals.clone()).unwrap();
            let mapped = RealTensor::new(
                vec![3, 8],
                vals.iter().map(|v| a * v + b).collect(),
            ).unwrap();
            let s1 = sign_binarize(&channel_normalize(&w, 1e-5).unwrap()).unwrap();
            let s2 = sign_binarize(&channel_normalize(&mapped, 1e-5).unwrap()).unwrap();
            prop_assert_eq!(s1.words(), s2.words());
        }
    }
}
