//! Physical model of the stochastic SOT-MTJ bit.
//!
//! Switching of the junction under a current pulse is thermally activated:
//!
//!   τ = τ0 · exp[ Δ · (1 − 2·(I/Ic0)·(π/2 − I/Ic0)) ]
//!   p_sw = 1 − exp(−t/τ)
//!
//! with Δ the thermal stability factor (ΔE/k_B·T). The bracket is quadratic
//! in I/Ic0 and turns at I = (π/4)·Ic0: p_sw increases with current up to
//! that point and decreases past it. Calibration therefore brackets its
//! search below the turn.
//!
//! Device-to-device variation shifts the realized dropout probability:
//! p̂ = clamp(p + ε, 0, 1) with ε ~ N(μ, σ²), drawn once per device per
//! experiment. The "1×/2×/3×" variation levels map to σ ∈ {0.0333, 0.0667,
//! 0.1}, so that 3σ at the 3× level is the ±10% probability fluctuation.

use crate::error::{Error, Result};
use crate::rng::Stream;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const SET_PULSE_S: f64 = 10e-9;
pub const RESET_PULSE_S: f64 = 5e-9;
/// One SET + RESET cycle produces one stochastic bit.
pub const SAMPLE_LATENCY_S: f64 = SET_PULSE_S + RESET_PULSE_S;

/// σ values for the 1×/2×/3× variation levels.
pub fn variation_sigma(level: u32) -> f64 {
    level as f64 * 0.1 / 3.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MtjDevice {
    /// Thermal stability factor ΔE/(k_B·T), dimensionless.
    pub delta_e_over_kt: f64,
    /// Attempt time τ0, seconds.
    pub tau0_s: f64,
    /// Critical current at 0 K, amperes.
    pub ic0_a: f64,
    /// Write pulse duration, seconds.
    pub pulse_s: f64,
}

impl Default for MtjDevice {
    fn default() -> Self {
        Self {
            delta_e_over_kt: 40.0,
            tau0_s: 1e-9,
            ic0_a: 100e-6,
            pulse_s: SET_PULSE_S,
        }
    }
}

impl MtjDevice {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.delta_e_over_kt,
            self.tau0_s,
            self.ic0_a,
            self.pulse_s,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidArgument(
                "MTJ parameters must be positive and finite".to_string(),
            ));
        }
        Ok(())
    }

    /// Current at which p_sw stops increasing: (π/4)·Ic0.
    pub fn monotone_limit_a(&self) -> f64 {
        self.ic0_a * PI / 4.0
    }
}

/// Mean switching time τ for a given drive current.
pub fn switching_tau(dev: &MtjDevice, current_a: f64) -> Result<f64> {
    dev.validate()?;
    if !(current_a.is_finite() && current_a >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "drive current {current_a} must be >= 0"
        )));
    }
    let x = current_a / dev.ic0_a;
    let bracket = 1.0 - 2.0 * x * (PI / 2.0 - x);
    Ok(dev.tau0_s * (dev.delta_e_over_kt * bracket).exp())
}

/// Switching probability for a pulse of length `t_s`, clamped to [0, 1].
pub fn switching_probability(dev: &MtjDevice, current_a: f64, t_s: f64) -> Result<f64> {
    if !(t_s.is_finite() && t_s >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "pulse duration {t_s} must be >= 0"
        )));
    }
    let tau = switching_tau(dev, current_a)?;
    Ok((1.0 - (-t_s / tau).exp()).clamp(0.0, 1.0))
}

/// Finds the drive current with `switching_probability == p_target` by
/// bisection on (0, (π/4)·Ic0], where p_sw is strictly increasing in I.
/// Residual tolerance 1e-6 on the probability.
pub fn calibrate_current(dev: &MtjDevice, p_target: f64, t_s: f64) -> Result<f64> {
    dev.validate()?;
    if !(0.0 < p_target && p_target < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "target probability {p_target} outside (0,1)"
        )));
    }
    let mut lo = 0.0f64;
    let mut hi = dev.monotone_limit_a().min(dev.ic0_a);
    let p_lo = switching_probability(dev, f64::MIN_POSITIVE, t_s)?;
    let p_hi = switching_probability(dev, hi, t_s)?;
    if p_target < p_lo || p_target > p_hi {
        return Err(Error::InvalidArgument(format!(
            "target probability {p_target} unreachable in ({p_lo:.3e}, {p_hi:.6}] over the current bracket"
        )));
    }
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let p = switching_probability(dev, mid, t_s)?;
        if (p - p_target).abs() <= 1e-9 {
            return Ok(mid);
        }
        if p < p_target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let residual = (switching_probability(dev, mid, t_s)? - p_target).abs();
    if residual <= 1e-6 {
        Ok(mid)
    } else {
        Err(Error::InvalidArgument(format!(
            "calibration did not converge: residual {residual:.3e}"
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariationModel {
    /// Mean offset of the realized dropout probability.
    pub mu: f64,
    /// Standard deviation of the Gaussian device variation.
    pub sigma: f64,
}

impl Default for VariationModel {
    fn default() -> Self {
        Self { mu: 0.0, sigma: 0.0 }
    }
}

impl VariationModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite() && self.mu.is_finite()) {
            return Err(Error::InvalidArgument(
                "variation model needs finite mu and sigma >= 0".to_string(),
            ));
        }
        Ok(())
    }
}

/// p̂ = clamp(p + ε, 0, 1) with ε ~ N(μ, σ²). One draw per device instance
/// per experiment: manufacturing variation is frozen for the run.
pub fn sample_varied_p(vm: &VariationModel, p_nominal: f64, rng: &mut Stream) -> Result<f64> {
    vm.validate()?;
    if !(0.0..=1.0).contains(&p_nominal) {
        return Err(Error::InvalidArgument(format!(
            "nominal probability {p_nominal} outside [0,1]"
        )));
    }
    let eps = vm.mu + vm.sigma * gaussian(rng);
    Ok((p_nominal + eps).clamp(0.0, 1.0))
}

/// Per-layer realized rates for one simulated dropout module.
pub fn varied_rates(vm: &VariationModel, nominal: &[f64], rng: &mut Stream) -> Result<Vec<f64>> {
    nominal.iter().map(|&p| sample_varied_p(vm, p, rng)).collect()
}

fn gaussian(rng: &mut Stream) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// A generated stochastic bit sequence plus its SET/RESET time ledger.
#[derive(Debug, Clone)]
pub struct Bitstream {
    pub bits: Vec<u8>,
    pub p: f64,
    /// SET/RESET cycles executed (one per bit).
    pub cycles: u64,
    pub set_time_s: f64,
    pub reset_time_s: f64,
}

impl Bitstream {
    pub fn ones_fraction(&self) -> f64 {
        self.bits.iter().map(|&b| b as u64).sum::<u64>() as f64 / self.bits.len() as f64
    }

    pub fn total_time_s(&self) -> f64 {
        self.set_time_s + self.reset_time_s
    }

    /// Lag-1 autocorrelation of the bit sequence.
    pub fn lag1_autocorrelation(&self) -> f64 {
        let n = self.bits.len();
        let mean = self.ones_fraction();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            let d = self.bits[i] as f64 - mean;
            den += d * d;
            if i + 1 < n {
                num += d * (self.bits[i + 1] as f64 - mean);
            }
        }
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    }
}

/// `n` independent Bernoulli(p) bits from repeated SET/RESET cycles, with
/// the per-bit timing (SET 10 ns + RESET 5 ns).
pub fn generate_bitstream(p: f64, n: usize, rng: &mut Stream) -> Result<Bitstream> {
    if !(0.0..=1.0).contains(&p) || !p.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "bit probability {p} outside [0,1]"
        )));
    }
    let bits: Vec<u8> = (0..n)
        .map(|_| if rng.random_range(0.0..1.0) < p { 1 } else { 0 })
        .collect();
    Ok(Bitstream {
        bits,
        p,
        cycles: n as u64,
        set_time_s: n as f64 * SET_PULSE_S,
        reset_time_s: n as f64 * RESET_PULSE_S,
    })
}

/// Bitstream from a calibrated device: the device is first driven at
/// `current_a` and its switching probability becomes the bit probability.
pub fn device_bitstream(
    dev: &MtjDevice,
    current_a: f64,
    n: usize,
    rng: &mut Stream,
) -> Result<Bitstream> {
    let p = switching_probability(dev, current_a, dev.pulse_s)?;
    generate_bitstream(p, n, rng)
}
