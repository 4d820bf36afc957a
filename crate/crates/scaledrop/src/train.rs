//! Loss, optimizers, and the training loop.
//!
//! The objective is cross-entropy plus two penalties: an L2 term on the real
//! proxy weights (weight decay λ) and a pull of each layer's scale-vector
//! mean toward one (strength φ). Gradients flow through the straight-through
//! estimators set up in [`crate::model`].

use crate::dropout::{sample_layer_masks, DropoutConfig};
use crate::error::{Error, Result};
use crate::model::{ForwardMode, Gradients, Layer, LayerGrads, Model};
use crate::rng::{derive_stream, MaskSource};
use crate::stats::softmax_row;
use crate::tensor::RealTensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_lambda")]
    pub lambda_weight_decay: f64,
    #[serde(default = "default_phi")]
    pub phi_scale_reg: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

fn default_lambda() -> f64 {
    1e-5
}

fn default_phi() -> f64 {
    1e-5
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        if self.lambda_weight_decay < 0.0 || self.phi_scale_reg < 0.0 {
            return Err(Error::InvalidArgument(
                "regularizer strengths must be >= 0".to_string(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be > 0".to_string()));
        }
        Ok(())
    }
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &RealTensor, labels: &[usize]) -> Result<(f64, RealTensor)> {
    let [n, c] = *logits.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "logits must be [n, classes], got {:?}",
            logits.shape()
        )));
    };
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} logits rows",
            labels.len(),
            n
        )));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * c];
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        let row = &logits.data()[i * c..(i + 1) * c];
        let p = softmax_row(row);
        loss += -(p[label].max(1e-300)).ln();
        for j in 0..c {
            grad[i * c + j] = (p[j] - if j == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, RealTensor::new(vec![n, c], grad)?))
}

/// Sum of squared proxy weights over all binary layers.
pub fn weight_l2(model: &Model) -> f64 {
    model
        .layers
        .iter()
        .map(|l| match l {
            Layer::BinaryConv(c) => c
                .proxy
                .as_ref()
                .map(|p| p.data().iter().map(|v| v * v).sum::<f64>())
                .unwrap_or(0.0),
            Layer::BinaryLinear(l) => l
                .proxy
                .as_ref()
                .map(|p| p.data().iter().map(|v| v * v).sum::<f64>())
                .unwrap_or(0.0),
            _ => 0.0,
        })
        .sum()
}

/// Sum over layers of (1 − mean(alpha))².
pub fn scale_reg(model: &Model) -> f64 {
    model
        .layers
        .iter()
        .map(|l| match l {
            Layer::BinaryConv(c) => {
                let d = 1.0 - c.scale.mean();
                d * d
            }
            Layer::BinaryLinear(l) => {
                let d = 1.0 - l.scale.mean();
                d * d
            }
            _ => 0.0,
        })
        .sum()
}

/// Full objective: cross-entropy + λ Σ‖W‖² + φ Σ(1 − μ_α)².
pub fn loss_objective(
    logits: &RealTensor,
    labels: &[usize],
    model: &Model,
    hp: &Hyperparams,
) -> Result<f64> {
    let (task, _) = cross_entropy(logits, labels)?;
    Ok(task + hp.lambda_weight_decay * weight_l2(model) + hp.phi_scale_reg * scale_reg(model))
}

/// Adds the regularizer gradients (2λW on proxy weights, the scale-mean pull
/// on alphas) into `grads`.
pub fn add_regularizer_gradients(model: &Model, hp: &Hyperparams, grads: &mut Gradients) {
    for (layer, grad) in model.layers.iter().zip(grads.layers.iter_mut()) {
        if let LayerGrads::Bin {
            weight,
            alpha,
            ..
        } = grad
        {
            let (proxy, scale) = match layer {
                Layer::BinaryConv(c) => (c.proxy.as_ref(), &c.scale),
                Layer::BinaryLinear(l) => (l.proxy.as_ref(), &l.scale),
                _ => continue,
            };
            if let Some(p) = proxy {
                for (g, w) in weight.data_mut().iter_mut().zip(p.data()) {
                    *g += 2.0 * hp.lambda_weight_decay * w;
                }
            }
            // d/dα_i [φ (1 − μ_α)²] = −2 φ (1 − μ_α) / C
            let c = scale.channels() as f64;
            let pull = -2.0 * hp.phi_scale_reg * (1.0 - scale.mean()) / c;
            for g in alpha.iter_mut() {
                *g += pull;
            }
        }
    }
}

struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamSlot {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, t: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        let bc1 = 1.0 - B1.powf(t);
        let bc2 = 1.0 - B2.powf(t);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grads[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grads[i] * grads[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + EPS);
        }
    }
}

enum LayerState {
    Bin {
        weight: AdamSlot,
        bias: AdamSlot,
        alpha: AdamSlot,
    },
    BatchNorm {
        gamma: AdamSlot,
        beta: AdamSlot,
    },
    None,
}

/// Adam with the usual defaults (β₁ 0.9, β₂ 0.999, ε 1e-8); `Sgd` falls back
/// to a plain gradient step.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: u64,
    state: Vec<LayerState>,
}

impl Optimizer {
    pub fn new(model: &Model, kind: OptimizerKind, lr: f64) -> Self {
        let state = model
            .layers
            .iter()
            .map(|l| match l {
                Layer::BinaryConv(c) => LayerState::Bin {
                    weight: AdamSlot::new(c.proxy.as_ref().map(|p| p.len()).unwrap_or(0)),
                    bias: AdamSlot::new(c.bias.len()),
                    alpha: AdamSlot::new(c.scale.channels()),
                },
                Layer::BinaryLinear(lin) => LayerState::Bin {
                    weight: AdamSlot::new(lin.proxy.as_ref().map(|p| p.len()).unwrap_or(0)),
                    bias: AdamSlot::new(lin.bias.len()),
                    alpha: AdamSlot::new(lin.scale.channels()),
                },
                Layer::BatchNorm(p) => LayerState::BatchNorm {
                    gamma: AdamSlot::new(p.channels()),
                    beta: AdamSlot::new(p.channels()),
                },
                _ => LayerState::None,
            })
            .collect();
        Self {
            kind,
            lr,
            t: 0,
            state,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients) -> Result<()> {
        self.t += 1;
        let t = self.t as f64;
        for ((layer, grad), state) in model
            .layers
            .iter_mut()
            .zip(grads.layers.iter())
            .zip(self.state.iter_mut())
        {
            match (layer, grad, state) {
                (
                    Layer::BinaryConv(c),
                    LayerGrads::Bin {
                        weight,
                        bias,
                        alpha,
                    },
                    LayerState::Bin {
                        weight: sw,
                        bias: sb,
                        alpha: sa,
                    },
                ) => {
                    let proxy = c.proxy.as_mut().expect("training model has proxy");
                    self.kind.apply(sw, proxy.data_mut(), weight.data(), self.lr, t);
                    self.kind.apply(sb, &mut c.bias, bias, self.lr, t);
                    self.kind.apply(sa, &mut c.scale.alpha, alpha, self.lr, t);
                }
                (
                    Layer::BinaryLinear(l),
                    LayerGrads::Bin {
                        weight,
                        bias,
                        alpha,
                    },
                    LayerState::Bin {
                        weight: sw,
                        bias: sb,
                        alpha: sa,
                    },
                ) => {
                    let proxy = l.proxy.as_mut().expect("training model has proxy");
                    self.kind.apply(sw, proxy.data_mut(), weight.data(), self.lr, t);
                    self.kind.apply(sb, &mut l.bias, bias, self.lr, t);
                    self.kind.apply(sa, &mut l.scale.alpha, alpha, self.lr, t);
                }
                (
                    Layer::BatchNorm(p),
                    LayerGrads::BatchNorm { gamma, beta },
                    LayerState::BatchNorm {
                        gamma: sg,
                        beta: sb,
                    },
                ) => {
                    self.kind.apply(sg, &mut p.gamma, gamma, self.lr, t);
                    self.kind.apply(sb, &mut p.beta, beta, self.lr, t);
                }
                (_, LayerGrads::None, _) => {}
                _ => {
                    return Err(Error::InvalidArgument(
                        "gradient structure does not match model".to_string(),
                    ))
                }
            }
        }
        Ok(())
    }
}

impl OptimizerKind {
    fn apply(&self, slot: &mut AdamSlot, params: &mut [f64], grads: &[f64], lr: f64, t: f64) {
        match self {
            OptimizerKind::Adam => slot.step(params, grads, lr, t),
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,test_acc\n");
        for e in &self.epochs {
            let test = e
                .test_acc
                .map(|v| v.to_string())
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch, e.train_loss, e.train_acc, test
            ));
        }
        out
    }
}

/// A labeled batch view: `x` is `[n, ...sample shape]`.
pub struct Batch<'a> {
    pub x: RealTensor,
    pub labels: &'a [usize],
}

/// Simple in-memory dataset handle used by the training loop.
pub trait BatchSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Gathers the given sample indices into one batch tensor.
    fn gather(&self, indices: &[usize]) -> (RealTensor, Vec<usize>);
}

/// Runs minibatch training. Deterministic under (seed, data): shuffling,
/// masks, and initialization all derive from labeled streams of `seed`.
pub fn train(
    model: &mut Model,
    data: &dyn BatchSource,
    test: Option<&dyn BatchSource>,
    hp: &Hyperparams,
    cfg: &DropoutConfig,
    seed: u64,
) -> Result<TrainHistory> {
    hp.validate()?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".to_string()));
    }
    let rates = resolve_rates(model, cfg)?;
    let mut opt = Optimizer::new(model, hp.optimizer, hp.learning_rate);
    let mut history = TrainHistory::default();
    let n = data.len();
    let mut step: u64 = 0;

    for epoch in 0..hp.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = derive_stream(seed, "shuffle", epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for chunk in order.chunks(hp.batch_size) {
            let (x, labels) = data.gather(chunk);
            let mut mask_rng = MaskSource::new(derive_stream(seed, "train-mask", step));
            let masks = sample_layer_masks(cfg, &rates, &mut mask_rng)?;
            let (logits, tape) = model.forward_train(&x, &masks, cfg, ForwardMode::Binary)?;
            let (task_loss, grad_logits) = cross_entropy(&logits, &labels)?;
            let loss = task_loss
                + hp.lambda_weight_decay * weight_l2(model)
                + hp.phi_scale_reg * scale_reg(model);
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: step as usize,
                    reason: format!("loss became {loss}"),
                });
            }
            loss_sum += loss * labels.len() as f64;
            correct += count_correct(&logits, &labels);
            seen += labels.len();

            let mut grads = model.backward(&tape, &grad_logits, cfg)?;
            add_regularizer_gradients(model, hp, &mut grads);
            opt.step(model, &grads)?;
            model.refresh_bits()?;
            step += 1;
        }

        let test_acc = match test {
            Some(t) => Some(evaluate_accuracy(model, t, cfg, 256)?),
            None => None,
        };
        history.epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            test_acc,
        });
    }
    Ok(history)
}

/// Per-layer dropout rates for this model: explicit when lengths match,
/// otherwise an error.
pub fn resolve_rates(model: &Model, cfg: &DropoutConfig) -> Result<Vec<f64>> {
    let need = model.binary_layer_count();
    if cfg.rates.len() != need {
        return Err(Error::Config(format!(
            "dropout config has {} rates, model has {} binary layers",
            cfg.rates.len(),
            need
        )));
    }
    Ok(cfg.rates.clone())
}

pub fn count_correct(logits: &RealTensor, labels: &[usize]) -> usize {
    let c = logits.channels();
    labels
        .iter()
        .enumerate()
        .filter(|(i, &label)| {
            let row = &logits.data()[i * c..(i + 1) * c];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
                .unwrap();
            pred == label
        })
        .count()
}

/// Point-estimate accuracy: dropout disabled, every scale applied.
pub fn evaluate_accuracy(
    model: &Model,
    data: &dyn BatchSource,
    cfg: &DropoutConfig,
    batch: usize,
) -> Result<f64> {
    let n = data.len();
    let keep = vec![crate::dropout::DropoutMask::keep(); model.binary_layer_count()];
    let mut correct = 0usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + batch).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (x, labels) = data.gather(&idx);
        let logits = model.forward_eval(&x, &keep, cfg)?;
        correct += count_correct(&logits, &labels);
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dropout::{DropoutConfig, DropoutVariant, ScaleVector};
    use crate::model::{LayerSpec, ModelSpec};

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = RealTensor::new(vec![1, 4], vec![0.0; 4]).unwrap();
        let (loss, grad) = cross_entropy(&logits, &[2]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
        assert!((grad.data()[2] - (0.25 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn objective_reduces_to_cross_entropy_when_unregularized() {
        let spec = ModelSpec {
            input: vec![4],
            layers: vec![LayerSpec::BinaryLinear { out_features: 2 }],
        };
        let model = Model::build(&spec, 0).unwrap();
        let logits = RealTensor::new(vec![2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let labels = vec![0, 1];
        let hp = Hyperparams {
            learning_rate: 0.1,
            epochs: 1,
            batch_size: 2,
            lambda_weight_decay: 0.0,
            phi_scale_reg: 0.0,
            optimizer: OptimizerKind::Adam,
        };
        let obj = loss_objective(&logits, &labels, &model, &hp).unwrap();
        let (ce, _) = cross_entropy(&logits, &labels).unwrap();
        assert_eq!(obj, ce);
    }

    #[test]
    fn scale_term_direct_arithmetic() {
        // two layers with alpha means 0.5 and 2.0, phi 1e-5:
        // contribution = 1e-5 * ((1-0.5)^2 + (1-2)^2) = 1.25e-5
        let spec = ModelSpec {
            input: vec![4],
            layers: vec![
                LayerSpec::BinaryLinear { out_features: 2 },
                LayerSpec::Sign,
                LayerSpec::BinaryLinear { out_features: 2 },
            ],
        };
        let mut model = Model::build(&spec, 0).unwrap();
        let mut it = 0;
        for layer in &mut model.layers {
            if let crate::model::Layer::BinaryLinear(l) = layer {
                l.scale = if it == 0 {
                    ScaleVector { alpha: vec![0.25, 0.75] } // mean 0.5
                } else {
                    ScaleVector { alpha: vec![1.5, 2.5] } // mean 2.0
                };
                it += 1;
            }
        }
        let got = scale_reg(&model);
        assert!((got - 1.25).abs() < 1e-12);
        assert!((1e-5 * got - 1.25e-5).abs() < 1e-18);
    }

    #[test]
    fn all_unit_scale_means_contribute_zero() {
        let spec = ModelSpec {
            input: vec![4],
            layers: vec![LayerSpec::BinaryLinear { out_features: 3 }],
        };
        let mut model = Model::build(&spec, 0).unwrap();
        if let crate::model::Layer::BinaryLinear(l) = &mut model.layers[0] {
            l.scale = ScaleVector {
                alpha: vec![0.5, 1.0, 1.5],
            };
        }
        assert_eq!(scale_reg(&model), 0.0);
    }

    struct VecData {
        x: Vec<Vec<f64>>,
        y: Vec<usize>,
    }

    impl BatchSource for VecData {
        fn len(&self) -> usize {
            self.y.len()
        }
        fn gather(&self, indices: &[usize]) -> (RealTensor, Vec<usize>) {
            let dim = self.x[0].len();
            let mut data = Vec::with_capacity(indices.len() * dim);
            let mut labels = Vec::with_capacity(indices.len());
            for &i in indices {
                data.extend_from_slice(&self.x[i]);
                labels.push(self.y[i]);
            }
            (
                RealTensor::new(vec![indices.len(), dim], data).unwrap(),
                labels,
            )
        }
    }

    fn toy_data() -> VecData {
        // Linearly separable 2-class blobs in 4 dims (pre-thermometerized
        // style ±1-ish inputs).
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..32 {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            let jitter = (i as f64 % 7.0) / 14.0 - 0.25;
            x.push(vec![s + jitter, s, -s, s * 0.5 + jitter]);
            y.push(if s > 0.0 { 0 } else { 1 });
        }
        VecData { x, y }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let spec = ModelSpec {
            input: vec![4],
            layers: vec![
                LayerSpec::BinaryLinear { out_features: 6 },
                LayerSpec::BatchNorm,
                LayerSpec::Sign,
                LayerSpec::BinaryLinear { out_features: 2 },
            ],
        };
        let mut model = Model::build(&spec, 7).unwrap();
        let before: Vec<f64> = collect_params(&model);
        let data = toy_data();
        let hp = Hyperparams {
            learning_rate: 0.0,
            epochs: 2,
            batch_size: 8,
            lambda_weight_decay: 1e-5,
            phi_scale_reg: 1e-5,
            optimizer: OptimizerKind::Adam,
        };
        let cfg = DropoutConfig::new(DropoutVariant::Unitary, vec![0.2, 0.5]).unwrap();
        train(&mut model, &data, None, &hp, &cfg, 3).unwrap();
        let after: Vec<f64> = collect_params(&model);
        // Batch norm running stats do move; learnable parameters must not.
        assert_eq!(before, after);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let spec = ModelSpec {
            input: vec![4],
            layers: vec![
                LayerSpec::BinaryLinear { out_features: 6 },
                LayerSpec::BatchNorm,
                LayerSpec::Sign,
                LayerSpec::BinaryLinear { out_features: 2 },
            ],
        };
        let data = toy_data();
        let hp = Hyperparams {
            learning_rate: 0.01,
            epochs: 3,
            batch_size: 8,
            lambda_weight_decay: 1e-5,
            phi_scale_reg: 1e-5,
            optimizer: OptimizerKind::Adam,
        };
        let cfg = DropoutConfig::new(DropoutVariant::Unitary, vec![0.2, 0.5]).unwrap();
        let mut m1 = Model::build(&spec, 7).unwrap();
        let h1 = train(&mut m1, &data, None, &hp, &cfg, 3).unwrap();
        let mut m2 = Model::build(&spec, 7).unwrap();
        let h2 = train(&mut m2, &data, None, &hp, &cfg, 3).unwrap();
        assert_eq!(collect_params(&m1), collect_params(&m2));
        assert_eq!(h1.to_csv(), h2.to_csv());
    }

    #[test]
    fn regularizer_pull_drives_scale_mean_toward_one() {
        // Data-free: gradient descent on the phi term alone moves mean(alpha)
        // toward 1 monotonically.
        let spec = ModelSpec {
            input: vec![4],
            layers: vec![LayerSpec::BinaryLinear { out_features: 4 }],
        };
        let mut model = Model::build(&spec, 1).unwrap();
        if let crate::model::Layer::BinaryLinear(l) = &mut model.layers[0] {
            l.scale = ScaleVector {
                alpha: vec![3.0, 2.0, 4.0, 3.0],
            };
        }
        let hp = Hyperparams {
            learning_rate: 0.5,
            epochs: 1,
            batch_size: 1,
            lambda_weight_decay: 0.0,
            phi_scale_reg: 1.0,
            optimizer: OptimizerKind::Sgd,
        };
        let mut prev_gap = f64::INFINITY;
        for _ in 0..50 {
            let mut grads = empty_grads(&model);
            add_regularizer_gradients(&model, &hp, &mut grads);
            let mut opt = Optimizer::new(&model, OptimizerKind::Sgd, hp.learning_rate);
            opt.step(&mut model, &grads).unwrap();
            let mean = match &model.layers[0] {
                crate::model::Layer::BinaryLinear(l) => l.scale.mean(),
                _ => unreachable!(),
            };
            let gap = (1.0 - mean).abs();
            assert!(gap <= prev_gap + 1e-12, "gap {gap} grew from {prev_gap}");
            prev_gap = gap;
        }
        assert!(prev_gap < 0.2);
    }

    fn empty_grads(model: &Model) -> Gradients {
        let layers = model
            .layers
            .iter()
            .map(|l| match l {
                Layer::BinaryConv(c) => LayerGrads::Bin {
                    weight: RealTensor::zeros(
                        c.proxy.as_ref().unwrap().shape().to_vec(),
                    ),
                    bias: vec![0.0; c.bias.len()],
                    alpha: vec![0.0; c.scale.channels()],
                },
                Layer::BinaryLinear(lin) => LayerGrads::Bin {
                    weight: RealTensor::zeros(
                        lin.proxy.as_ref().unwrap().shape().to_vec(),
                    ),
                    bias: vec![0.0; lin.bias.len()],
                    alpha: vec![0.0; lin.scale.channels()],
                },
                Layer::BatchNorm(p) => LayerGrads::BatchNorm {
                    gamma: vec![0.0; p.channels()],
                    beta: vec![0.0; p.channels()],
                },
                _ => LayerGrads::None,
            })
            .collect();
        Gradients { layers }
    }

    fn collect_params(model: &Model) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &model.layers {
            match layer {
                Layer::BinaryConv(c) => {
                    out.extend_from_slice(c.proxy.as_ref().unwrap().data());
                    out.extend_from_slice(&c.bias);
                    out.extend_from_slice(&c.scale.alpha);
                }
                Layer::BinaryLinear(l) => {
                    out.extend_from_slice(l.proxy.as_ref().unwrap().data());
                    out.extend_from_slice(&l.bias);
                    out.extend_from_slice(&l.scale.alpha);
                }
                Layer::BatchNorm(p) => {
                    out.extend_from_slice(&p.gamma);
                    out.extend_from_slice(&p.beta);
                }
                _ => {}
            }
        }
        out
    }
}
