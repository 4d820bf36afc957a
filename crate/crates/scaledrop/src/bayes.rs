//! Monte-Carlo inference with scale dropout kept active.
//!
//! T stochastic forward passes, each with fresh per-layer masks, produce T
//! softmax rows per input. Predictive mean is the row average (model
//! averaging); predictive variance is the population variance over passes;
//! confidence intervals come from per-class percentiles of the T samples.
//! An input is flagged out-of-distribution when the low quantile of its
//! per-class softmax samples has a maximum below the confidence threshold.

use crate::dropout::{sample_layer_masks, DropoutConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::MaskSource;
use crate::stats::{percentile_linear, softmax_row};
use crate::tensor::RealTensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const DEFAULT_QUANTILE_LEVEL: f64 = 0.1;
pub const DEFAULT_OOD_THRESHOLD: f64 = 0.95;

/// T stochastic softmax outputs for one input, row-major `[t, class]`.
#[derive(Debug, Clone)]
pub struct McPrediction {
    samples: Vec<f64>,
    t: usize,
    classes: usize,
}

impl McPrediction {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument(
                "prediction needs at least one pass".to_string(),
            ));
        }
        let classes = rows[0].len();
        let mut samples = Vec::with_capacity(rows.len() * classes);
        for (t, row) in rows.iter().enumerate() {
            if row.len() != classes {
                return Err(Error::ShapeMismatch(format!(
                    "pass {t} has {} classes, expected {classes}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("pass {t} probabilities")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "pass {t} probabilities sum to {sum}"
                )));
            }
            samples.extend_from_slice(row);
        }
        Ok(Self {
            samples,
            t: rows.len(),
            classes,
        })
    }

    pub fn passes(&self) -> usize {
        self.t
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.samples[t * self.classes..(t + 1) * self.classes]
    }

    fn class_samples(&self, c: usize) -> Vec<f64> {
        (0..self.t).map(|t| self.row(t)[c]).collect()
    }
}

/// Arithmetic mean over the T passes, per class (Welford running mean, so
/// identical samples give back exactly that sample).
pub fn predictive_mean(pred: &McPrediction) -> Vec<f64> {
    welford(pred).0
}

/// Population variance (divide by T) about the predictive mean, per class.
/// Identical samples give exactly zero.
pub fn predictive_variance(pred: &McPrediction) -> Vec<f64> {
    welford(pred).1
}

fn welford(pred: &McPrediction) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; pred.classes];
    let mut m2 = vec![0.0; pred.classes];
    for t in 0..pred.t {
        let n = (t + 1) as f64;
        for (c, &v) in pred.row(t).iter().enumerate() {
            let d = v - mean[c];
            mean[c] += d / n;
            m2[c] += d * (v - mean[c]);
        }
    }
    for v in &mut m2 {
        *v /= pred.t as f64;
    }
    (mean, m2)
}

/// K% confidence interval per class: percentiles (100−K)/2 and (100+K)/2 of
/// the T samples, linear interpolation.
pub fn confidence_interval(pred: &McPrediction, k_percent: f64) -> Result<Vec<(f64, f64)>> {
    if !(0.0 < k_percent && k_percent <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "confidence level {k_percent} outside (0, 100]"
        )));
    }
    let lo_q = (100.0 - k_percent) / 200.0;
    let hi_q = (100.0 + k_percent) / 200.0;
    Ok((0..pred.classes)
        .map(|c| {
            let vals = pred.class_samples(c);
            (
                percentile_linear(&vals, lo_q),
                percentile_linear(&vals, hi_q),
            )
        })
        .collect())
}

/// Entropy (nats) of the predictive mean distribution; 0 ≤ H ≤ ln C.
pub fn predictive_entropy(pred: &McPrediction) -> f64 {
    entropy_of(&predictive_mean(pred))
}

pub fn entropy_of(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Id,
    Ood,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OodDecision {
    pub verdict: Verdict,
    pub quantile_level: f64,
    pub threshold: f64,
    /// max over classes of the per-class quantile of softmax samples.
    pub score: f64,
}

impl OodDecision {
    pub fn accepted(&self) -> bool {
        self.verdict == Verdict::Id
    }
}

/// The decision rule: per-class quantile at `quantile_level` over the T
/// softmax samples; the maximum over classes is compared with `threshold`.
/// OOD iff that score is below the threshold.
pub fn ood_decide(pred: &McPrediction, quantile_level: f64, threshold: f64) -> Result<OodDecision> {
    if !(0.0 < quantile_level && quantile_level < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "quantile level {quantile_level} outside (0,1)"
        )));
    }
    if !(0.0 < threshold && threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold {threshold} outside (0,1]"
        )));
    }
    let score = (0..pred.classes)
        .map(|c| percentile_linear(&pred.class_samples(c), quantile_level))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(OodDecision {
        verdict: if score < threshold {
            Verdict::Ood
        } else {
            Verdict::Id
        },
        quantile_level,
        threshold,
        score,
    })
}

/// Accept/reject statistics on in-distribution data.
///
/// `AR` is reported under both candidate readings: correct-given-accepted
/// and accepted-given-correct. Ratios with a zero denominator are `None`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteMetrics {
    pub n: usize,
    pub accuracy: f64,
    /// Fraction of inputs flagged OOD (rejected).
    pub ood_rate: f64,
    /// accepted ∧ correct / correct.
    pub tpr: Option<f64>,
    /// rejected ∧ incorrect / incorrect.
    pub tnr: Option<f64>,
    /// accepted ∧ correct / accepted.
    pub ar_correct_given_accepted: Option<f64>,
    /// accepted ∧ correct / correct (same numerator as TPR).
    pub ar_accepted_given_correct: Option<f64>,
}

pub fn metrics_suite(decisions: &[OodDecision], correctness: &[bool]) -> Result<SuiteMetrics> {
    if decisions.len() != correctness.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} decisions vs {} correctness flags",
            decisions.len(),
            correctness.len()
        )));
    }
    if decisions.is_empty() {
        return Err(Error::InvalidArgument("empty metric inputs".to_string()));
    }
    let n = decisions.len();
    let mut accepted_correct = 0usize;
    let mut rejected_incorrect = 0usize;
    let mut accepted = 0usize;
    let mut correct = 0usize;
    for (d, &ok) in decisions.iter().zip(correctness) {
        if d.accepted() {
            accepted += 1;
            if ok {
                accepted_correct += 1;
            }
        } else if !ok {
            rejected_incorrect += 1;
        }
        if ok {
            correct += 1;
        }
    }
    let incorrect = n - correct;
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            None
        } else {
            Some(num as f64 / den as f64)
        }
    };
    Ok(SuiteMetrics {
        n,
        accuracy: correct as f64 / n as f64,
        ood_rate: (n - accepted) as f64 / n as f64,
        tpr: ratio(accepted_correct, correct),
        tnr: ratio(rejected_incorrect, incorrect),
        ar_correct_given_accepted: ratio(accepted_correct, accepted),
        ar_accepted_given_correct: ratio(accepted_correct, correct),
    })
}

/// T stochastic passes over a batch. Returns one prediction per input row.
///
/// Pass `t` draws its masks from the stream `(seed, "mask", t)`, so results
/// are reproducible and independent of scheduling; passes run in parallel.
pub fn mc_forward(
    model: &Model,
    x: &RealTensor,
    t_passes: usize,
    cfg: &DropoutConfig,
    rates: &[f64],
    seed: u64,
) -> Result<Vec<McPrediction>> {
    if t_passes == 0 {
        return Err(Error::InvalidArgument(
            "Monte-Carlo inference needs T >= 1".to_string(),
        ));
    }
    let n = x.shape()[0];
    let per_pass: Vec<RealTensor> = (0..t_passes)
        .into_par_iter()
        .map(|t| -> Result<RealTensor> {
            let mut rng = MaskSource::for_pass(seed, t as u64);
            let masks = sample_layer_masks(cfg, rates, &mut rng)?;
            let logits = model.forward_eval(x, &masks, cfg)?;
            let c = logits.channels();
            let mut probs = Vec::with_capacity(logits.len());
            for row in 0..n {
                probs.extend(softmax_row(&logits.data()[row * c..(row + 1) * c]));
            }
            RealTensor::new(vec![n, c], probs)
        })
        .collect::<Result<Vec<_>>>()?;

    let classes = per_pass[0].channels();
    (0..n)
        .map(|i| {
            let rows: Vec<Vec<f64>> = per_pass
                .iter()
                .map(|p| p.data()[i * classes..(i + 1) * classes].to_vec())
                .collect();
            McPrediction::from_rows(&rows)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dropout::DropoutVariant;
    use crate::model::{LayerSpec, Model, ModelSpec};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn pred(rows: &[Vec<f64>]) -> McPrediction {
        McPrediction::from_rows(rows).unwrap()
    }

    #[test]
    fn rejects_rows_not_summing_to_one() {
        assert!(McPrediction::from_rows(&[vec![0.7, 0.7]]).is_err());
    }

    #[test]
    fn mean_of_identical_rows_is_that_row() {
        let p = pred(&[vec![0.2, 0.8], vec![0.2, 0.8]]);
        assert_eq!(predictive_mean(&p), vec![0.2, 0.8]);
    }

    #[test]
    fn mean_of_opposite_onehots() {
        let p = pred(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(predictive_mean(&p), vec![0.5, 0.5]);
    }

    #[test]
    fn mean_and_variance_match_scalar_loop_oracle() {
        let mut rng = StdRng::seed_from_u64(31);
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| {
                let raw: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            })
            .collect();
        let p = pred(&rows);
        let mean = predictive_mean(&p);
        let var = predictive_variance(&p);
        for c in 0..3 {
            let mut m = 0.0;
            for row in &rows {
                m += row[c];
            }
            m /= rows.len() as f64;
            let mut v = 0.0;
            for row in &rows {
                v += (row[c] - m) * (row[c] - m);
            }
            v /= rows.len() as f64;
            assert!((mean[c] - m).abs() < 1e-12);
            assert!((var[c] - v).abs() < 1e-12);
        }
    }

    #[test]
    fn variance_of_identical_rows_is_zero() {
        let p = pred(&vec![vec![0.3, 0.7]; 4]);
        assert_eq!(predictive_variance(&p), vec![0.0, 0.0]);
    }

    #[test]
    fn variance_of_two_opposite_onehots() {
        let p = pred(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(predictive_variance(&p), vec![0.25, 0.25]);
    }

    #[test]
    fn ci_constant_samples_degenerates() {
        let p = pred(&vec![vec![0.4, 0.6]; 10]);
        let ci = confidence_interval(&p, 95.0).unwrap();
        assert_eq!(ci[0], (0.4, 0.4));
        assert_eq!(ci[1], (0.6, 0.6));
    }

    #[test]
    fn ci_full_range_is_min_max() {
        let rows: Vec<Vec<f64>> = (1..=10)
            .map(|i| {
                let v = i as f64 / 20.0;
                vec![v, 1.0 - v]
            })
            .collect();
        let p = pred(&rows);
        let ci = confidence_interval(&p, 100.0).unwrap();
        assert_eq!(ci[0], (0.05, 0.5));
    }

    #[test]
    fn ci_percentile_oracle_on_1_to_100() {
        // Class-0 samples are 1..=100 scaled into probabilities; the
        // interval endpoints follow the linear-interpolation percentile:
        // rank 0.025*99 = 2.475 -> 3.475 (in units), rank 0.975*99 = 96.525
        // -> 97.525.
        let rows: Vec<Vec<f64>> = (1..=100)
            .map(|i| {
                let v = i as f64 / 1000.0;
                vec![v, 1.0 - v]
            })
            .collect();
        let p = pred(&rows);
        let ci = confidence_interval(&p, 95.0).unwrap();
        assert!((ci[0].0 - 3.475 / 1000.0).abs() < 1e-12);
        assert!((ci[0].1 - 97.525 / 1000.0).abs() < 1e-12);
    }

    #[test]
    fn ci_rejects_bad_level() {
        let p = pred(&[vec![0.5, 0.5]]);
        assert!(confidence_interval(&p, 0.0).is_err());
        assert!(confidence_interval(&p, 101.0).is_err());
    }

    #[test]
    fn entropy_onehot_zero_uniform_lnc() {
        let one_hot = pred(&[vec![1.0, 0.0, 0.0]]);
        assert_eq!(predictive_entropy(&one_hot), 0.0);
        let uniform = pred(&[vec![0.1; 10]]);
        assert!((predictive_entropy(&uniform) - 10.0f64.ln()).abs() < 1e-12);
        let half = pred(&[vec![0.5, 0.5]]);
        assert!((predictive_entropy(&half) - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_bounded_by_ln_c_on_random_matrices() {
        let mut rng = StdRng::seed_from_u64(19);
        for _ in 0..200 {
            let t = rng.random_range(1..20);
            let c = rng.random_range(2..12);
            let rows: Vec<Vec<f64>> = (0..t)
                .map(|_| {
                    let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.001..1.0)).collect();
                    let s: f64 = raw.iter().sum();
                    raw.iter().map(|v| v / s).collect()
                })
                .collect();
            let p = pred(&rows);
            let h = predictive_entropy(&p);
            assert!((0.0..=(c as f64).ln() + 1e-12).contains(&h), "H = {h} for C = {c}");
        }
    }

    #[test]
    fn ood_confident_stable_prediction_is_id() {
        let p = pred(&vec![vec![0.99, 0.01]; 20]);
        let d = ood_decide(&p, 0.1, 0.95).unwrap();
        assert_eq!(d.verdict, Verdict::Id);
        assert!(d.score >= 0.99);
    }

    #[test]
    fn ood_near_uniform_samples_flagged() {
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|t| {
                let bump = (t % 10) as f64 * 1e-4;
                let mut row = vec![0.1; 10];
                row[t % 10] += bump * 9.0;
                for (i, v) in row.iter_mut().enumerate() {
                    if i != t % 10 {
                        *v -= bump;
                    }
                }
                row
            })
            .collect();
        let p = pred(&rows);
        let d = ood_decide(&p, 0.1, 0.95).unwrap();
        assert_eq!(d.verdict, Verdict::Ood);
        assert!(d.score < 0.15);
    }

    #[test]
    fn ood_rate_monotone_in_threshold_and_quantile() {
        // Frozen borderline sample matrices; rate is non-decreasing as the
        // threshold rises and non-increasing as the quantile level rises.
        let mut rng = StdRng::seed_from_u64(8);
        let preds: Vec<McPrediction> = (0..40)
            .map(|_| {
                let rows: Vec<Vec<f64>> = (0..25)
                    .map(|_| {
                        let a: f64 = rng.random_range(0.5..1.0);
                        vec![a, 1.0 - a]
                    })
                    .collect();
                pred(&rows)
            })
            .collect();
        let rate = |q: f64, thr: f64| {
            preds
                .iter()
                .filter(|p| ood_decide(p, q, thr).unwrap().verdict == Verdict::Ood)
                .count()
        };
        assert!(rate(0.1, 0.99) >= rate(0.1, 0.95));
        assert!(rate(0.3, 0.95) <= rate(0.1, 0.95));
    }

    #[test]
    fn ood_rejects_invalid_levels() {
        let p = pred(&vec![vec![0.5, 0.5]; 3]);
        assert!(ood_decide(&p, 0.0, 0.95).is_err());
        assert!(ood_decide(&p, 1.0, 0.95).is_err());
        assert!(ood_decide(&p, 0.1, 0.0).is_err());
        assert!(ood_decide(&p, 0.1, 1.5).is_err());
    }

    fn decision(accept: bool) -> OodDecision {
        OodDecision {
            verdict: if accept { Verdict::Id } else { Verdict::Ood },
            quantile_level: 0.1,
            threshold: 0.95,
            score: if accept { 0.99 } else { 0.1 },
        }
    }

    #[test]
    fn metrics_all_correct_all_accepted() {
        let d = vec![decision(true); 5];
        let m = metrics_suite(&d, &[true; 5]).unwrap();
        assert_eq!(m.tpr, Some(1.0));
        assert_eq!(m.ar_correct_given_accepted, Some(1.0));
        assert_eq!(m.ood_rate, 0.0);
    }

    #[test]
    fn metrics_all_rejected() {
        let d = vec![decision(false); 4];
        let m = metrics_suite(&d, &[true, false, false, true]).unwrap();
        assert_eq!(m.tnr, Some(1.0));
        assert_eq!(m.tpr, Some(0.0));
        assert_eq!(m.ood_rate, 1.0);
        assert_eq!(m.ar_correct_given_accepted, None);
    }

    #[test]
    fn metrics_hand_counted_table() {
        // 10 samples: (accepted, correct)
        let table = [
            (true, true),
            (true, true),
            (true, false),
            (false, true),
            (false, false),
            (false, false),
            (true, true),
            (false, true),
            (true, false),
            (false, false),
        ];
        let d: Vec<OodDecision> = table.iter().map(|(a, _)| decision(*a)).collect();
        let ok: Vec<bool> = table.iter().map(|(_, c)| *c).collect();
        let m = metrics_suite(&d, &ok).unwrap();
        // correct = 5, incorrect = 5, accepted = 5
        // accepted&correct = 3, rejected&incorrect = 3
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.tpr, Some(3.0 / 5.0));
        assert_eq!(m.tnr, Some(3.0 / 5.0));
        assert_eq!(m.ar_correct_given_accepted, Some(3.0 / 5.0));
        assert_eq!(m.ar_accepted_given_correct, Some(3.0 / 5.0));
        assert_eq!(m.ood_rate, 0.5);
    }

    fn toy_model() -> (Model, DropoutConfig) {
        let spec = ModelSpec {
            input: vec![6],
            layers: vec![
                LayerSpec::BinaryLinear { out_features: 8 },
                LayerSpec::BatchNorm,
                LayerSpec::Sign,
                LayerSpec::BinaryLinear { out_features: 3 },
            ],
        };
        let model = Model::build(&spec, 5).unwrap();
        let cfg = DropoutConfig::new(DropoutVariant::Unitary, vec![0.5, 0.5]).unwrap();
        (model, cfg)
    }

    #[test]
    fn mc_forward_t0_errors() {
        let (model, cfg) = toy_model();
        let x = RealTensor::new(vec![1, 6], vec![0.5; 6]).unwrap();
        assert!(mc_forward(&model, &x, 0, &cfg, &cfg.rates.clone(), 1).is_err());
    }

    #[test]
    fn mc_forward_p0_all_rows_identical_zero_variance() {
        let (model, _) = toy_model();
        let cfg = DropoutConfig::new(DropoutVariant::Unitary, vec![0.0, 0.0]).unwrap();
        let x = RealTensor::new(vec![2, 6], vec![0.3, -0.8, 0.1, 0.9, -0.2, 0.4,
                                                 -0.5, 0.5, 0.7, -0.9, 0.2, -0.1]).unwrap();
        let preds = mc_forward(&model, &x, 16, &cfg, &cfg.rates.clone(), 9).unwrap();
        for p in &preds {
            let first = p.row(0).to_vec();
            for t in 1..p.passes() {
                assert_eq!(p.row(t), first.as_slice());
            }
            assert!(predictive_variance(p).iter().all(|&v| v == 0.0));
            // entropy equals the single-pass entropy, CI collapses
            let ci = confidence_interval(p, 95.0).unwrap();
            for (c, (lo, hi)) in ci.iter().enumerate() {
                assert_eq!(*lo, first[c]);
                assert_eq!(*hi, first[c]);
            }
        }
    }

    #[test]
    fn mc_forward_t1_mean_is_sample() {
        let (model, cfg) = toy_model();
        let x = RealTensor::new(vec![1, 6], vec![0.2; 6]).unwrap();
        let preds = mc_forward(&model, &x, 1, &cfg, &cfg.rates.clone(), 2).unwrap();
        assert_eq!(predictive_mean(&preds[0]), preds[0].row(0).to_vec());
        assert!(predictive_variance(&preds[0]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mc_forward_reproducible_and_order_independent() {
        let (model, cfg) = toy_model();
        let x = RealTensor::new(vec![3, 6], (0..18).map(|i| (i as f64) / 9.0 - 1.0).collect())
            .unwrap();
        let a = mc_forward(&model, &x, 8, &cfg, &cfg.rates.clone(), 33).unwrap();
        let b = mc_forward(&model, &x, 8, &cfg, &cfg.rates.clone(), 33).unwrap();
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.samples, pb.samples);
        }
    }

    #[test]
    fn mc_forward_single_layer_matches_mask_state_enumeration() {
        // One binary layer with p = 0.5: only two mask states exist. The
        // row mean over many passes must approach the average of the two
        // deterministic outcomes within a 3-sigma binomial bound.
        let spec = ModelSpec {
            input: vec![4],
            layers: vec![LayerSpec::BinaryLinear { out_features: 3 }],
        };
        let model = Model::build(&spec, 3).unwrap();
        let cfg = DropoutConfig::new(DropoutVariant::Unitary, vec![0.5]).unwrap();
        let x = RealTensor::new(vec![1, 4], vec![0.9, -0.4, 0.7, -0.6]).unwrap();

        let kept = model
            .forward_eval(&x, &[crate::dropout::DropoutMask::keep()], &cfg)
            .unwrap();
        let dropped = model
            .forward_eval(
                &x,
                &[crate::dropout::DropoutMask {
                    d: false,
                    random_value: None,
                }],
                &cfg,
            )
            .unwrap();
        let pk = softmax_row(kept.data());
        let pd = softmax_row(dropped.data());

        let t = 1000;
        let preds = mc_forward(&model, &x, t, &cfg, &cfg.rates.clone(), 77).unwrap();
        let mean = predictive_mean(&preds[0]);
        // 3 sigma of Bernoulli(0.5) mixing over t draws per class
        for c in 0..3 {
            let expect = 0.5 * pk[c] + 0.5 * pd[c];
            let spread = (pk[c] - pd[c]).abs();
            let bound = 3.0 * 0.5 * spread / (t as f64).sqrt() + 1e-12;
            assert!(
                (mean[c] - expect).abs() <= bound.max(1e-9),
                "class {c}: {} vs {expect} (bound {bound})",
                mean[c]
            );
        }
    }
}
