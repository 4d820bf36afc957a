//! Model topology, parameters, and the forward/backward passes.
//!
//! A model is an ordered list of layers: binary conv / binary linear layers
//! (which own a bias, a learnable scale vector, and consume one dropout mask
//! per forward pass), batch norm, sign activation, pooling, flatten, and
//! residual adds. Activations are channels-last.
//!
//! Binary layers sign-binarize their input and their channel-normalized
//! proxy weights, so the weighted sums are exact integers computed with the
//! XNOR/popcount kernels. The last linear layer emits real logits (no sign
//! after it in the topologies used here).
//!
//! Two forward modes exist:
//! * `Binary`: the real thing, packed arithmetic.
//! * `Surrogate`: sign replaced by its straight-through surrogate
//!   (hard-tanh for activations, identity on normalized weights), float
//!   arithmetic. The backward pass computes the exact gradient of this
//!   surrogate, which is the straight-through estimate for the binary net.
//!   Gradient checks differentiate the surrogate directly.

use crate::dropout::{effective_scale, DropoutConfig, DropoutMask, EffectiveScale, ScaleVector};
use crate::error::{Error, Result};
use crate::norm::{
    batchnorm_backward, batchnorm_forward, channel_normalize, channel_normalize_backward,
    channel_stats, BatchNormCache, BatchNormParams, NORM_EPSILON,
};
use crate::packed::{conv_out_dim, xnor_matmul_rows, PackedBinaryTensor, PackedRows};
use crate::rng::derive_stream;
use crate::tensor::{matmul, matmul_nt, matmul_tn, RealTensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Serializable topology descriptor; parameters are created by [`Model::build`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Per-sample input shape, channels last for images (e.g. `[28, 28, 1]`).
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerSpec {
    BinaryConv {
        c_out: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    BinaryLinear {
        out_features: usize,
    },
    BatchNorm,
    Sign,
    MaxPool {
        size: usize,
        #[serde(default)]
        stride: Option<usize>,
    },
    AvgPool {
        size: usize,
        #[serde(default)]
        stride: Option<usize>,
    },
    Flatten,
    ResidualAdd {
        from: usize,
    },
}

fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub c_in: usize,
    pub c_out: usize,
    /// Real proxy weights `[c_out, c_in, k, k]`; present while training.
    pub proxy: Option<RealTensor>,
    /// Frozen sign bits in execution layout `[k, k, c_in, c_out]`.
    pub bits: PackedBinaryTensor,
    pub bias: Vec<f64>,
    pub scale: ScaleVector,
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub in_features: usize,
    pub out_features: usize,
    /// Real proxy weights `[out, in]`; present while training.
    pub proxy: Option<RealTensor>,
    /// Frozen sign bits, one row per output feature.
    pub bits: PackedBinaryTensor,
    pub bias: Vec<f64>,
    pub scale: ScaleVector,
}

#[derive(Debug, Clone, Copy)]
pub struct Pool {
    pub size: usize,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub enum Layer {
    BinaryConv(ConvLayer),
    BinaryLinear(LinearLayer),
    BatchNorm(BatchNormParams),
    Sign,
    MaxPool(Pool),
    AvgPool(Pool),
    Flatten,
    ResidualAdd { from: usize },
}

impl Layer {
    pub fn is_binary(&self) -> bool {
        matches!(self, Layer::BinaryConv(_) | Layer::BinaryLinear(_))
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Binary,
    Surrogate,
}

impl Model {
    /// Instantiates parameters for a topology. Proxy weights are normal with
    /// fan-in scaling; scale vectors start at the mean absolute normalized
    /// weight of their channel, biases at zero.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
        let shapes = infer_shapes(spec)?;
        let mut rng = derive_stream(seed, "init", 0);
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, ls) in spec.layers.iter().enumerate() {
            let in_shape = if i == 0 { &spec.input } else { &shapes[i - 1] };
            let layer = match ls {
                LayerSpec::BinaryConv {
                    c_out,
                    kernel,
                    stride,
                    padding,
                } => {
                    let c_in = *in_shape.last().unwrap();
                    let fan_in = kernel * kernel * c_in;
                    let std = (2.0 / fan_in as f64).sqrt();
                    let n = c_out * fan_in;
                    let data: Vec<f64> = (0..n)
                        .map(|_| standard_normal(&mut rng) * std)
                        .collect();
                    let proxy =
                        RealTensor::new(vec![*c_out, c_in, *kernel, *kernel], data)?;
                    let mut layer = ConvLayer {
                        kernel: *kernel,
                        stride: *stride,
                        padding: *padding,
                        c_in,
                        c_out: *c_out,
                        bits: PackedBinaryTensor::from_signs(
                            vec![*kernel, *kernel, c_in, *c_out],
                            &vec![1.0; *kernel * *kernel * c_in * *c_out],
                        )?,
                        bias: vec![0.0; *c_out],
                        scale: ScaleVector::ones(*c_out),
                        proxy: Some(proxy),
                    };
                    layer.scale = init_scale_conv(layer.proxy.as_ref().unwrap())?;
                    refresh_conv_bits(&mut layer)?;
                    Layer::BinaryConv(layer)
                }
                LayerSpec::BinaryLinear { out_features } => {
                    let in_features = in_shape[0];
                    let std = (2.0 / in_features as f64).sqrt();
                    let n = out_features * in_features;
                    let data: Vec<f64> = (0..n)
                        .map(|_| standard_normal(&mut rng) * std)
                        .collect();
                    let proxy = RealTensor::new(vec![*out_features, in_features], data)?;
                    let mut layer = LinearLayer {
                        in_features,
                        out_features: *out_features,
                        bits: PackedBinaryTensor::from_signs(
                            vec![*out_features, in_features],
                            &vec![1.0; n],
                        )?,
                        bias: vec![0.0; *out_features],
                        scale: ScaleVector::ones(*out_features),
                        proxy: Some(proxy),
                    };
                    layer.scale = init_scale_linear(layer.proxy.as_ref().unwrap())?;
                    refresh_linear_bits(&mut layer)?;
                    Layer::BinaryLinear(layer)
                }
                LayerSpec::BatchNorm => {
                    Layer::BatchNorm(BatchNormParams::new(*in_shape.last().unwrap()))
                }
                LayerSpec::Sign => Layer::Sign,
                LayerSpec::MaxPool { size, stride } => Layer::MaxPool(Pool {
                    size: *size,
                    stride: stride.unwrap_or(*size),
                }),
                LayerSpec::AvgPool { size, stride } => Layer::AvgPool(Pool {
                    size: *size,
                    stride: stride.unwrap_or(*size),
                }),
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::ResidualAdd { from } => Layer::ResidualAdd { from: *from },
            };
            layers.push(layer);
        }
        Ok(Model {
            input_shape: spec.input.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            input: self.input_shape.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::BinaryConv(c) => LayerSpec::BinaryConv {
                        c_out: c.c_out,
                        kernel: c.kernel,
                        stride: c.stride,
                        padding: c.padding,
                    },
                    Layer::BinaryLinear(l) => LayerSpec::BinaryLinear {
                        out_features: l.out_features,
                    },
                    Layer::BatchNorm(_) => LayerSpec::BatchNorm,
                    Layer::Sign => LayerSpec::Sign,
                    Layer::MaxPool(p) => LayerSpec::MaxPool {
                        size: p.size,
                        stride: Some(p.stride),
                    },
                    Layer::AvgPool(p) => LayerSpec::AvgPool {
                        size: p.size,
                        stride: Some(p.stride),
                    },
                    Layer::Flatten => LayerSpec::Flatten,
                    Layer::ResidualAdd { from } => LayerSpec::ResidualAdd { from: *from },
                })
                .collect(),
        }
    }

    pub fn binary_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.is_binary()).count()
    }

    /// Weight element counts of the binary layers, in order; feeds
    /// [`crate::dropout::adaptive_rates`].
    pub fn binary_layer_param_counts(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::BinaryConv(c) => Some(c.kernel * c.kernel * c.c_in * c.c_out),
                Layer::BinaryLinear(l) => Some(l.in_features * l.out_features),
                _ => None,
            })
            .collect()
    }

    /// Re-derives the frozen sign bits from the proxy weights. Called after
    /// every optimizer step; evaluation always runs off the frozen bits.
    pub fn refresh_bits(&mut self) -> Result<()> {
        for layer in &mut self.layers {
            match layer {
                Layer::BinaryConv(c) if c.proxy.is_some() => refresh_conv_bits(c)?,
                Layer::BinaryLinear(l) if l.proxy.is_some() => refresh_linear_bits(l)?,
                _ => {}
            }
        }
        Ok(())
    }

    /// Drops proxy weights, leaving an inference-only model.
    pub fn freeze(&mut self) {
        for layer in &mut self.layers {
            match layer {
                Layer::BinaryConv(c) => c.proxy = None,
                Layer::BinaryLinear(l) => l.proxy = None,
                _ => {}
            }
        }
    }

    /// Inference forward pass off the frozen bits; batch norm uses running
    /// statistics and nothing is mutated. `masks` supplies one dropout mask
    /// per binary layer (all-keep for point estimates).
    pub fn forward_eval(
        &self,
        x: &RealTensor,
        masks: &[DropoutMask],
        cfg: &DropoutConfig,
    ) -> Result<RealTensor> {
        self.check_masks(masks)?;
        let mut cur = x.clone();
        let mut outputs: Vec<RealTensor> = Vec::with_capacity(self.layers.len());
        let mut mask_idx = 0;
        for layer in &self.layers {
            cur = match layer {
                Layer::BinaryConv(c) => {
                    let mask = &masks[mask_idx];
                    mask_idx += 1;
                    conv_eval(c, &cur, mask, cfg)?
                }
                Layer::BinaryLinear(l) => {
                    let mask = &masks[mask_idx];
                    mask_idx += 1;
                    linear_eval(l, &cur, mask, cfg)?
                }
                Layer::BatchNorm(p) => {
                    let mut p = p.clone();
                    batchnorm_forward(&cur, &mut p, false)?.0
                }
                Layer::Sign => sign_values(&cur),
                Layer::MaxPool(p) => max_pool(&cur, p)?.0,
                Layer::AvgPool(p) => avg_pool(&cur, p)?,
                Layer::Flatten => flatten(cur)?,
                Layer::ResidualAdd { from } => residual_add(&cur, &outputs[*from])?,
            };
            outputs.push(cur.clone());
        }
        Ok(cur)
    }

    /// Training forward pass: batch norm uses batch statistics and updates
    /// running statistics in place; returns the logits and the tape needed
    /// by [`Model::backward`].
    pub fn forward_train(
        &mut self,
        x: &RealTensor,
        masks: &[DropoutMask],
        cfg: &DropoutConfig,
        mode: ForwardMode,
    ) -> Result<(RealTensor, Tape)> {
        self.check_masks(masks)?;
        let mut cur = x.clone();
        let mut nodes: Vec<Node> = Vec::with_capacity(self.layers.len());
        let mut outputs: Vec<RealTensor> = Vec::with_capacity(self.layers.len());
        let mut mask_idx = 0;
        for layer in &mut self.layers {
            let (next, node) = match layer {
                Layer::BinaryConv(c) => {
                    let mask = &masks[mask_idx];
                    mask_idx += 1;
                    conv_train(c, &cur, mask, cfg, mode)?
                }
                Layer::BinaryLinear(l) => {
                    let mask = &masks[mask_idx];
                    mask_idx += 1;
                    linear_train(l, &cur, mask, cfg, mode)?
                }
                Layer::BatchNorm(p) => {
                    let (out, cache) = batchnorm_forward(&cur, p, true)?;
                    (out, Node::BatchNorm(cache.expect("training mode caches")))
                }
                Layer::Sign => {
                    let out = match mode {
                        ForwardMode::Binary => sign_values(&cur),
                        ForwardMode::Surrogate => hardtanh_values(&cur),
                    };
                    (out, Node::Sign { pre: cur.clone() })
                }
                Layer::MaxPool(p) => {
                    let (out, argmax) = max_pool(&cur, p)?;
                    (
                        out,
                        Node::MaxPool {
                            argmax,
                            in_shape: cur.shape().to_vec(),
                        },
                    )
                }
                Layer::AvgPool(p) => {
                    let out = avg_pool(&cur, p)?;
                    (
                        out,
                        Node::AvgPool {
                            pool: *p,
                            in_shape: cur.shape().to_vec(),
                        },
                    )
                }
                Layer::Flatten => {
                    let in_shape = cur.shape().to_vec();
                    (flatten(cur.clone())?, Node::Flatten { in_shape })
                }
                Layer::ResidualAdd { from } => {
                    (residual_add(&cur, &outputs[*from])?, Node::Residual { from: *from })
                }
            };
            nodes.push(node);
            outputs.push(next.clone());
            cur = next;
        }
        Ok((cur, Tape { nodes }))
    }

    /// Back-propagates `grad_logits` through the tape. Gradients for sign
    /// functions are straight-through: hard-tanh clip for activations,
    /// identity onto the channel-normalized proxy weights.
    pub fn backward(
        &self,
        tape: &Tape,
        grad_logits: &RealTensor,
        cfg: &DropoutConfig,
    ) -> Result<Gradients> {
        let n = self.layers.len();
        if tape.nodes.len() != n {
            return Err(Error::InvalidArgument(
                "tape does not match model".to_string(),
            ));
        }
        let mut grads: Vec<LayerGrads> = self.layers.iter().map(|_| LayerGrads::None).collect();
        // Gradient w.r.t. each layer's output.
        let mut out_grads: Vec<Option<RealTensor>> = vec![None; n];
        out_grads[n - 1] = Some(grad_logits.clone());

        for i in (0..n).rev() {
            let g = match out_grads[i].take() {
                Some(g) => g,
                None => continue, // output unused (no gradient flows here)
            };
            let input_grad = match (&self.layers[i], &tape.nodes[i]) {
                (Layer::BinaryConv(c), Node::Bin(cache)) => {
                    let (dx, lg) = conv_backward(c, cache, &g, cfg)?;
                    grads[i] = lg;
                    dx
                }
                (Layer::BinaryLinear(l), Node::Bin(cache)) => {
                    let (dx, lg) = linear_backward(l, cache, &g, cfg)?;
                    grads[i] = lg;
                    dx
                }
                (Layer::BatchNorm(p), Node::BatchNorm(cache)) => {
                    let (dz, dgamma, dbeta) = batchnorm_backward(&g, p, cache)?;
                    grads[i] = LayerGrads::BatchNorm {
                        gamma: dgamma,
                        beta: dbeta,
                    };
                    dz
                }
                (Layer::Sign, Node::Sign { pre }) => ste_clip(&g, pre)?,
                (Layer::MaxPool(_), Node::MaxPool { argmax, in_shape }) => {
                    max_pool_backward(&g, argmax, in_shape)?
                }
                (Layer::AvgPool(_), Node::AvgPool { pool, in_shape }) => {
                    avg_pool_backward(&g, pool, in_shape)?
                }
                (Layer::Flatten, Node::Flatten { in_shape }) => {
                    g.clone().reshape(in_shape.clone())?
                }
                (Layer::ResidualAdd { from }, Node::Residual { .. }) => {
                    accumulate(&mut out_grads[*from], &g)?;
                    g
                }
                _ => {
                    return Err(Error::InvalidArgument(
                        "tape node does not match layer".to_string(),
                    ))
                }
            };
            if i > 0 {
                accumulate(&mut out_grads[i - 1], &input_grad)?;
            }
        }
        Ok(Gradients { layers: grads })
    }

    fn check_masks(&self, masks: &[DropoutMask]) -> Result<()> {
        let need = self.binary_layer_count();
        if masks.len() != need {
            return Err(Error::InvalidArgument(format!(
                "{} dropout masks supplied, model has {} binary layers",
                masks.len(),
                need
            )));
        }
        Ok(())
    }

    /// Per-sample output shape of every layer.
    pub fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        infer_shapes(&self.spec())
    }
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; one value per call keeps the stream layout simple.
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn init_scale_conv(proxy: &RealTensor) -> Result<ScaleVector> {
    let normed = channel_normalize(proxy, NORM_EPSILON)?;
    let [c_out, c_in, kh, kw] = *proxy.shape() else {
        return Err(Error::ShapeMismatch("conv proxy must be 4-d".to_string()));
    };
    let per = c_in * kh * kw;
    let alpha = (0..c_out)
        .map(|co| {
            normed.data()[co * per..(co + 1) * per]
                .iter()
                .map(|v| v.abs())
                .sum::<f64>()
                / per as f64
        })
        .collect();
    Ok(ScaleVector { alpha })
}

fn init_scale_linear(proxy: &RealTensor) -> Result<ScaleVector> {
    let normed = channel_normalize(proxy, NORM_EPSILON)?;
    let [out, inf] = *proxy.shape() else {
        return Err(Error::ShapeMismatch("linear proxy must be 2-d".to_string()));
    };
    let alpha = (0..out)
        .map(|o| {
            normed.data()[o * inf..(o + 1) * inf]
                .iter()
                .map(|v| v.abs())
                .sum::<f64>()
                / inf as f64
        })
        .collect();
    Ok(ScaleVector { alpha })
}

/// Proxy-layout signs permuted into the conv execution layout
/// `[k, k, c_in, c_out]`.
fn conv_exec_signs(c: &ConvLayer, w_norm: &RealTensor) -> Vec<f64> {
    let (k, ci, co) = (c.kernel, c.c_in, c.c_out);
    let mut out = vec![0.0; k * k * ci * co];
    for o in 0..co {
        for i in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    let v = w_norm.data()[((o * ci + i) * k + ky) * k + kx];
                    out[((ky * k + kx) * ci + i) * co + o] = v;
                }
            }
        }
    }
    out
}

fn refresh_conv_bits(c: &mut ConvLayer) -> Result<()> {
    let proxy = c.proxy.as_ref().expect("refresh requires proxy");
    let w_norm = channel_normalize(proxy, NORM_EPSILON)?;
    let exec = conv_exec_signs(c, &w_norm);
    c.bits =
        PackedBinaryTensor::from_signs(vec![c.kernel, c.kernel, c.c_in, c.c_out], &exec)?;
    Ok(())
}

fn refresh_linear_bits(l: &mut LinearLayer) -> Result<()> {
    let proxy = l.proxy.as_ref().expect("refresh requires proxy");
    let w_norm = channel_normalize(proxy, NORM_EPSILON)?;
    l.bits = PackedBinaryTensor::from_signs(
        vec![l.out_features, l.in_features],
        w_norm.data(),
    )?;
    Ok(())
}

pub struct Tape {
    pub nodes: Vec<Node>,
}

pub enum Node {
    Bin(BinCache),
    BatchNorm(BatchNormCache),
    Sign { pre: RealTensor },
    MaxPool { argmax: Vec<usize>, in_shape: Vec<usize> },
    AvgPool { pool: Pool, in_shape: Vec<usize> },
    Flatten { in_shape: Vec<usize> },
    Residual { from: usize },
}

/// Cache for a binary conv/linear layer.
pub struct BinCache {
    /// Raw layer input (pre-binarization), for the activation STE mask.
    pub input: RealTensor,
    /// LHS matrix actually multiplied: ±1 patches (binary) or hard-tanh
    /// values (surrogate). `[rows, k]`.
    pub a_mat: RealTensor,
    /// RHS matrix actually multiplied, execution layout `[k, c_out]`.
    pub w_mat: RealTensor,
    /// Channel-normalized proxy weights (proxy layout).
    pub w_norm: RealTensor,
    /// Weighted sums plus bias, flat `[rows, c_out]`.
    pub pre_scale: RealTensor,
    pub eff: EffectiveScale,
    /// Conv geometry; `None` for linear layers.
    pub conv: Option<ConvGeometry>,
    pub out_shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub c_in: usize,
    pub oh: usize,
    pub ow: usize,
    pub h: usize,
    pub w: usize,
    pub n: usize,
}

pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

pub enum LayerGrads {
    Bin {
        weight: RealTensor,
        bias: Vec<f64>,
        alpha: Vec<f64>,
    },
    BatchNorm {
        gamma: Vec<f64>,
        beta: Vec<f64>,
    },
    None,
}

fn sign_values(t: &RealTensor) -> RealTensor {
    let data = t
        .data()
        .iter()
        .map(|&v| if v >= 0.0 { 1.0 } else { -1.0 })
        .collect();
    RealTensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn hardtanh_values(t: &RealTensor) -> RealTensor {
    let data = t.data().iter().map(|&v| v.clamp(-1.0, 1.0)).collect();
    RealTensor::new(t.shape().to_vec(), data).expect("same shape")
}

/// Straight-through clip: gradient passes where |pre| <= 1.
fn ste_clip(g: &RealTensor, pre: &RealTensor) -> Result<RealTensor> {
    let data = g
        .data()
        .iter()
        .zip(pre.data())
        .map(|(&gv, &pv)| if pv.abs() <= 1.0 { gv } else { 0.0 })
        .collect();
    RealTensor::new(g.shape().to_vec(), data)
}

fn accumulate(slot: &mut Option<RealTensor>, g: &RealTensor) -> Result<()> {
    match slot {
        None => *slot = Some(g.clone()),
        Some(acc) => {
            if acc.shape() != g.shape() {
                return Err(Error::ShapeMismatch(
                    "gradient accumulation shape mismatch".to_string(),
                ));
            }
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    Ok(())
}

fn flatten(t: RealTensor) -> Result<RealTensor> {
    let n = t.shape()[0];
    let rest: usize = t.shape()[1..].iter().product();
    t.reshape(vec![n, rest])
}

fn residual_add(a: &RealTensor, b: &RealTensor) -> Result<RealTensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "residual add {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    RealTensor::new(a.shape().to_vec(), data)
}

fn image_dims(t: &RealTensor) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [n, h, w, c] => Ok((*n, *h, *w, *c)),
        s => Err(Error::ShapeMismatch(format!(
            "expected [n,h,w,c] activations, got {s:?}"
        ))),
    }
}

/// Max pooling without the argmax cache, for inference-only callers.
pub(crate) fn pool_max(x: &RealTensor, p: &Pool) -> Result<RealTensor> {
    Ok(max_pool(x, p)?.0)
}

/// Average pooling, for inference-only callers.
pub(crate) fn pool_avg(x: &RealTensor, p: &Pool) -> Result<RealTensor> {
    avg_pool(x, p)
}

fn max_pool(x: &RealTensor, p: &Pool) -> Result<(RealTensor, Vec<usize>)> {
    let (n, h, w, c) = image_dims(x)?;
    if p.size == 0 || p.stride == 0 || h < p.size || w < p.size {
        return Err(Error::ShapeMismatch(format!(
            "pool {}x{} stride {} on {}x{}",
            p.size, p.size, p.stride, h, w
        )));
    }
    let oh = (h - p.size) / p.stride + 1;
    let ow = (w - p.size) / p.stride + 1;
    let mut out = vec![f64::NEG_INFINITY; n * oh * ow * c];
    let mut argmax = vec![0usize; n * oh * ow * c];
    for img in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let oidx = ((img * oh + oy) * ow + ox) * c + ch;
                    for ky in 0..p.size {
                        for kx in 0..p.size {
                            let iy = oy * p.stride + ky;
                            let ix = ox * p.stride + kx;
                            let iidx = ((img * h + iy) * w + ix) * c + ch;
                            let v = x.data()[iidx];
                            if v > out[oidx] {
                                out[oidx] = v;
                                argmax[oidx] = iidx;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((RealTensor::new(vec![n, oh, ow, c], out)?, argmax))
}

fn max_pool_backward(g: &RealTensor, argmax: &[usize], in_shape: &[usize]) -> Result<RealTensor> {
    let mut dx = RealTensor::zeros(in_shape.to_vec());
    for (gv, &idx) in g.data().iter().zip(argmax) {
        dx.data_mut()[idx] += gv;
    }
    Ok(dx)
}

fn avg_pool(x: &RealTensor, p: &Pool) -> Result<RealTensor> {
    let (n, h, w, c) = image_dims(x)?;
    if p.size == 0 || p.stride == 0 || h < p.size || w < p.size {
        return Err(Error::ShapeMismatch("bad avg pool geometry".to_string()));
    }
    let oh = (h - p.size) / p.stride + 1;
    let ow = (w - p.size) / p.stride + 1;
    let area = (p.size * p.size) as f64;
    let mut out = vec![0.0; n * oh * ow * c];
    for img in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for ky in 0..p.size {
                        for kx in 0..p.size {
                            let iy = oy * p.stride + ky;
                            let ix = ox * p.stride + kx;
                            acc += x.data()[((img * h + iy) * w + ix) * c + ch];
                        }
                    }
                    out[((img * oh + oy) * ow + ox) * c + ch] = acc / area;
                }
            }
        }
    }
    RealTensor::new(vec![n, oh, ow, c], out)
}

fn avg_pool_backward(g: &RealTensor, p: &Pool, in_shape: &[usize]) -> Result<RealTensor> {
    let [n, h, w, c] = *in_shape else {
        return Err(Error::ShapeMismatch("avg pool input not 4-d".to_string()));
    };
    let oh = (h - p.size) / p.stride + 1;
    let ow = (w - p.size) / p.stride + 1;
    let area = (p.size * p.size) as f64;
    let mut dx = RealTensor::zeros(in_shape.to_vec());
    for img in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let gv = g.data()[((img * oh + oy) * ow + ox) * c + ch] / area;
                    for ky in 0..p.size {
                        for kx in 0..p.size {
                            let iy = oy * p.stride + ky;
                            let ix = ox * p.stride + kx;
                            dx.data_mut()[((img * h + iy) * w + ix) * c + ch] += gv;
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Applies an [`EffectiveScale`] to flat `[rows, c]` sums.
fn scale_rows(p: &RealTensor, eff: &EffectiveScale) -> RealTensor {
    let c = p.channels();
    let data = match eff {
        EffectiveScale::Bypass => p.data().to_vec(),
        EffectiveScale::Scalar(s) => p.data().iter().map(|v| v * s).collect(),
        EffectiveScale::PerChannel(a) => p
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * a[i % c])
            .collect(),
    };
    RealTensor::new(p.shape().to_vec(), data).expect("same shape")
}

/// Backward through the scale application. Returns (dPre, dAlpha).
fn scale_rows_backward(
    g: &RealTensor,
    pre: &RealTensor,
    eff: &EffectiveScale,
    cfg: &DropoutConfig,
    channels: usize,
) -> (RealTensor, Vec<f64>) {
    let c = channels;
    match eff {
        EffectiveScale::Bypass => (g.clone(), vec![0.0; c]),
        EffectiveScale::Scalar(s) => {
            let dpre = RealTensor::new(
                g.shape().to_vec(),
                g.data().iter().map(|v| v * s).collect(),
            )
            .expect("same shape");
            // Average variant: the scalar is the mean of alpha, so gradient
            // spreads evenly; Random: the scalar is a constant draw.
            let mut dalpha = vec![0.0; c];
            if cfg.variant == crate::dropout::DropoutVariant::Average {
                let total: f64 = g.data().iter().zip(pre.data()).map(|(a, b)| a * b).sum();
                for d in dalpha.iter_mut() {
                    *d = total / c as f64;
                }
            }
            (dpre, dalpha)
        }
        EffectiveScale::PerChannel(a) => {
            let mut dalpha = vec![0.0; c];
            let mut dpre = Vec::with_capacity(g.len());
            for (i, (gv, pv)) in g.data().iter().zip(pre.data()).enumerate() {
                let ch = i % c;
                dalpha[ch] += gv * pv;
                dpre.push(gv * a[ch]);
            }
            (
                RealTensor::new(g.shape().to_vec(), dpre).expect("same shape"),
                dalpha,
            )
        }
    }
}

/// Binarized (or surrogate) patch matrix for a conv input: rows are output
/// positions, columns run over (ky, kx, c_in). Padding taps are −1.
pub fn conv_patch_values(
    x: &RealTensor,
    geo: &ConvGeometry,
    mode: ForwardMode,
) -> RealTensor {
    let k = geo.kernel;
    let cols = k * k * geo.c_in;
    let rows = geo.n * geo.oh * geo.ow;
    let mut out = Vec::with_capacity(rows * cols);
    for img in 0..geo.n {
        for oy in 0..geo.oh {
            for ox in 0..geo.ow {
                for ky in 0..k {
                    let iy = (oy * geo.stride + ky) as isize - geo.padding as isize;
                    for kx in 0..k {
                        let ix = (ox * geo.stride + kx) as isize - geo.padding as isize;
                        let inside = iy >= 0
                            && (iy as usize) < geo.h
                            && ix >= 0
                            && (ix as usize) < geo.w;
                        if inside {
                            let base = ((img * geo.h + iy as usize) * geo.w + ix as usize)
                                * geo.c_in;
                            for c in 0..geo.c_in {
                                let v = x.data()[base + c];
                                out.push(match mode {
                                    ForwardMode::Binary => {
                                        if v >= 0.0 {
                                            1.0
                                        } else {
                                            -1.0
                                        }
                                    }
                                    ForwardMode::Surrogate => v.clamp(-1.0, 1.0),
                                });
                            }
                        } else {
                            for _ in 0..geo.c_in {
                                out.push(-1.0);
                            }
                        }
                    }
                }
            }
        }
    }
    RealTensor::new(vec![rows, cols], out).expect("sized above")
}

fn conv_geometry(c: &ConvLayer, x: &RealTensor) -> Result<ConvGeometry> {
    let (n, h, w, ci) = image_dims(x)?;
    if ci != c.c_in {
        return Err(Error::ShapeMismatch(format!(
            "conv input channels {} vs layer c_in {}",
            ci, c.c_in
        )));
    }
    let oh = conv_out_dim(h, c.kernel, c.stride, c.padding)?;
    let ow = conv_out_dim(w, c.kernel, c.stride, c.padding)?;
    Ok(ConvGeometry {
        kernel: c.kernel,
        stride: c.stride,
        padding: c.padding,
        c_in: c.c_in,
        oh,
        ow,
        h,
        w,
        n,
    })
}

fn add_bias(sums: &mut RealTensor, bias: &[f64]) {
    let c = bias.len();
    for (i, v) in sums.data_mut().iter_mut().enumerate() {
        *v += bias[i % c];
    }
}

/// Packed kernel rows (one per output channel) from frozen bits.
pub fn kernel_rows_from_bits(bits: &PackedBinaryTensor, k: usize, c_in: usize, c_out: usize) -> PackedRows {
    let cols = k * k * c_in;
    let mut rows = PackedRows::zeroed(c_out, cols);
    for co in 0..c_out {
        for col in 0..cols {
            rows.set(co, col, bits.get_bit(col * c_out + co));
        }
    }
    rows
}

/// Packed patch rows from real input values (sign applied).
pub fn pack_rows_from_values(vals: &RealTensor) -> PackedRows {
    let [rows, cols] = *vals.shape() else {
        panic!("pack_rows_from_values wants a matrix");
    };
    let mut out = PackedRows::zeroed(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            out.set(r, c, vals.data()[r * cols + c] >= 0.0);
        }
    }
    out
}

fn conv_eval(
    c: &ConvLayer,
    x: &RealTensor,
    mask: &DropoutMask,
    cfg: &DropoutConfig,
) -> Result<RealTensor> {
    let geo = conv_geometry(c, x)?;
    let patches = conv_patch_values(x, &geo, ForwardMode::Binary);
    let lhs = pack_rows_from_values(&patches);
    let kernels = kernel_rows_from_bits(&c.bits, c.kernel, c.c_in, c.c_out);
    let mut sums = xnor_matmul_rows(&lhs, &kernels);
    add_bias(&mut sums, &c.bias);
    let eff = effective_scale(&c.scale, mask, cfg);
    let out = scale_rows(&sums, &eff);
    out.reshape(vec![geo.n, geo.oh, geo.ow, c.c_out])
}

fn linear_eval(
    l: &LinearLayer,
    x: &RealTensor,
    mask: &DropoutMask,
    cfg: &DropoutConfig,
) -> Result<RealTensor> {
    let [n, f] = *x.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "linear input must be [n, features], got {:?}",
            x.shape()
        )));
    };
    if f != l.in_features {
        return Err(Error::ShapeMismatch(format!(
            "linear input features {} vs layer {}",
            f, l.in_features
        )));
    }
    let signed = sign_values(x);
    let lhs = pack_rows_from_values(&signed);
    let rows = PackedRows::from_matrix(&l.bits, l.out_features, l.in_features)?;
    let mut sums = xnor_matmul_rows(&lhs, &rows);
    add_bias(&mut sums, &l.bias);
    let eff = effective_scale(&l.scale, mask, cfg);
    let out = scale_rows(&sums, &eff);
    out.reshape(vec![n, l.out_features])
}

fn conv_train(
    c: &ConvLayer,
    x: &RealTensor,
    mask: &DropoutMask,
    cfg: &DropoutConfig,
    mode: ForwardMode,
) -> Result<(RealTensor, Node)> {
    let proxy = c
        .proxy
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("training a frozen model".to_string()))?;
    let geo = conv_geometry(c, x)?;
    let w_norm = channel_normalize(proxy, NORM_EPSILON)?;
    let exec = conv_exec_signs(c, &w_norm);
    let k_cols = c.kernel * c.kernel * c.c_in;

    let a_mat = conv_patch_values(x, &geo, mode);
    let (sums, w_mat) = match mode {
        ForwardMode::Binary => {
            let lhs = pack_rows_from_values(&a_mat);
            let kernels_signs: Vec<f64> = exec
                .iter()
                .map(|&v| if v >= 0.0 { 1.0 } else { -1.0 })
                .collect();
            let w_mat = RealTensor::new(vec![k_cols, c.c_out], kernels_signs)?;
            let bits = PackedBinaryTensor::from_signs(
                vec![c.kernel, c.kernel, c.c_in, c.c_out],
                &exec,
            )?;
            let kernels = kernel_rows_from_bits(&bits, c.kernel, c.c_in, c.c_out);
            (xnor_matmul_rows(&lhs, &kernels), w_mat)
        }
        ForwardMode::Surrogate => {
            let w_mat = RealTensor::new(vec![k_cols, c.c_out], exec)?;
            (matmul(&a_mat, &w_mat)?, w_mat)
        }
    };
    let mut pre = sums;
    add_bias(&mut pre, &c.bias);
    let eff = effective_scale(&c.scale, mask, cfg);
    let out = scale_rows(&pre, &eff);
    let out_shape = vec![geo.n, geo.oh, geo.ow, c.c_out];
    let cache = BinCache {
        input: x.clone(),
        a_mat,
        w_mat,
        w_norm,
        pre_scale: pre,
        eff,
        conv: Some(geo),
        out_shape: out_shape.clone(),
    };
    Ok((out.reshape(out_shape)?, Node::Bin(cache)))
}

fn linear_train(
    l: &LinearLayer,
    x: &RealTensor,
    mask: &DropoutMask,
    cfg: &DropoutConfig,
    mode: ForwardMode,
) -> Result<(RealTensor, Node)> {
    let proxy = l
        .proxy
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("training a frozen model".to_string()))?;
    let [n, f] = *x.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "linear input must be [n, features], got {:?}",
            x.shape()
        )));
    };
    if f != l.in_features {
        return Err(Error::ShapeMismatch(format!(
            "linear input features {} vs layer {}",
            f, l.in_features
        )));
    }
    let w_norm = channel_normalize(proxy, NORM_EPSILON)?;

    let (a_mat, w_mat) = match mode {
        ForwardMode::Binary => {
            let a = sign_values(x);
            // w_mat [in, out] = sign(w_norm)^T
            let mut wm = vec![0.0; l.in_features * l.out_features];
            for o in 0..l.out_features {
                for i in 0..l.in_features {
                    let v = w_norm.data()[o * l.in_features + i];
                    wm[i * l.out_features + o] = if v >= 0.0 { 1.0 } else { -1.0 };
                }
            }
            (a, RealTensor::new(vec![l.in_features, l.out_features], wm)?)
        }
        ForwardMode::Surrogate => {
            let a = hardtanh_values(x);
            let mut wm = vec![0.0; l.in_features * l.out_features];
            for o in 0..l.out_features {
                for i in 0..l.in_features {
                    wm[i * l.out_features + o] = w_norm.data()[o * l.in_features + i];
                }
            }
            (a, RealTensor::new(vec![l.in_features, l.out_features], wm)?)
        }
    };
    let mut pre = match mode {
        ForwardMode::Binary => {
            let lhs = pack_rows_from_values(&a_mat);
            let bits = PackedBinaryTensor::from_signs(
                vec![l.out_features, l.in_features],
                w_norm.data(),
            )?;
            let rows = PackedRows::from_matrix(&bits, l.out_features, l.in_features)?;
            xnor_matmul_rows(&lhs, &rows)
        }
        ForwardMode::Surrogate => matmul(&a_mat, &w_mat)?,
    };
    add_bias(&mut pre, &l.bias);
    let eff = effective_scale(&l.scale, mask, cfg);
    let out = scale_rows(&pre, &eff);
    let cache = BinCache {
        input: x.clone(),
        a_mat,
        w_mat,
        w_norm,
        pre_scale: pre,
        eff,
        conv: None,
        out_shape: vec![n, l.out_features],
    };
    Ok((out, Node::Bin(cache)))
}

fn conv_backward(
    c: &ConvLayer,
    cache: &BinCache,
    grad_out: &RealTensor,
    cfg: &DropoutConfig,
) -> Result<(RealTensor, LayerGrads)> {
    let geo = cache.conv.as_ref().expect("conv cache has geometry");
    let rows = geo.n * geo.oh * geo.ow;
    let g = grad_out.clone().reshape(vec![rows, c.c_out])?;
    let (dpre, dalpha) = scale_rows_backward(&g, &cache.pre_scale, &cache.eff, cfg, c.c_out);

    let mut dbias = vec![0.0; c.c_out];
    for (i, v) in dpre.data().iter().enumerate() {
        dbias[i % c.c_out] += v;
    }

    // dW_mat [k, c_out] = a_mat^T * dpre ; dA [rows, k] = dpre * w_mat^T
    let dw_mat = matmul_tn(&cache.a_mat, &dpre)?;
    let da = matmul_nt(&dpre, &cache.w_mat)?;

    // Un-permute execution-layout gradient into proxy layout.
    let k = c.kernel;
    let mut dw_norm = vec![0.0; c.c_out * c.c_in * k * k];
    for o in 0..c.c_out {
        for i in 0..c.c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let mat_idx = ((ky * k + kx) * c.c_in + i) * c.c_out + o;
                    dw_norm[((o * c.c_in + i) * k + ky) * k + kx] = dw_mat.data()[mat_idx];
                }
            }
        }
    }
    let dw_norm = RealTensor::new(vec![c.c_out, c.c_in, k, k], dw_norm)?;
    let proxy = c.proxy.as_ref().expect("backward requires proxy");
    let dweight = channel_normalize_backward(proxy, &dw_norm, NORM_EPSILON)?;

    // Scatter dA back through the patch extraction, gating by the
    // straight-through clip on the raw input values.
    let mut dx = RealTensor::zeros(cache.input.shape().to_vec());
    let cols = k * k * geo.c_in;
    let mut row = 0;
    for img in 0..geo.n {
        for oy in 0..geo.oh {
            for ox in 0..geo.ow {
                let grow = &da.data()[row * cols..(row + 1) * cols];
                let mut col = 0;
                for ky in 0..k {
                    let iy = (oy * geo.stride + ky) as isize - geo.padding as isize;
                    for kx in 0..k {
                        let ix = (ox * geo.stride + kx) as isize - geo.padding as isize;
                        let inside = iy >= 0
                            && (iy as usize) < geo.h
                            && ix >= 0
                            && (ix as usize) < geo.w;
                        if inside {
                            let base = ((img * geo.h + iy as usize) * geo.w
                                + ix as usize)
                                * geo.c_in;
                            for ch in 0..geo.c_in {
                                let xv = cache.input.data()[base + ch];
                                if xv.abs() <= 1.0 {
                                    dx.data_mut()[base + ch] += grow[col];
                                }
                                col += 1;
                            }
                        } else {
                            col += geo.c_in;
                        }
                    }
                }
                row += 1;
            }
        }
    }

    Ok((
        dx,
        LayerGrads::Bin {
            weight: dweight,
            bias: dbias,
            alpha: dalpha,
        },
    ))
}

fn linear_backward(
    l: &LinearLayer,
    cache: &BinCache,
    grad_out: &RealTensor,
    cfg: &DropoutConfig,
) -> Result<(RealTensor, LayerGrads)> {
    let (dpre, dalpha) =
        scale_rows_backward(grad_out, &cache.pre_scale, &cache.eff, cfg, l.out_features);

    let mut dbias = vec![0.0; l.out_features];
    for (i, v) in dpre.data().iter().enumerate() {
        dbias[i % l.out_features] += v;
    }

    let dw_mat = matmul_tn(&cache.a_mat, &dpre)?; // [in, out]
    let da = matmul_nt(&dpre, &cache.w_mat)?; // [n, in]

    // dW_norm proxy layout [out, in] = dw_mat^T
    let mut dw_norm = vec![0.0; l.out_features * l.in_features];
    for i in 0..l.in_features {
        for o in 0..l.out_features {
            dw_norm[o * l.in_features + i] = dw_mat.data()[i * l.out_features + o];
        }
    }
    let dw_norm = RealTensor::new(vec![l.out_features, l.in_features], dw_norm)?;
    let proxy = l.proxy.as_ref().expect("backward requires proxy");
    let dweight = channel_normalize_backward(proxy, &dw_norm, NORM_EPSILON)?;

    let dx_data: Vec<f64> = da
        .data()
        .iter()
        .zip(cache.input.data())
        .map(|(&g, &x)| if x.abs() <= 1.0 { g } else { 0.0 })
        .collect();
    let dx = RealTensor::new(cache.input.shape().to_vec(), dx_data)?;

    Ok((
        dx,
        LayerGrads::Bin {
            weight: dweight,
            bias: dbias,
            alpha: dalpha,
        },
    ))
}

/// Validates layer composition and returns each layer's per-sample output shape.
pub fn infer_shapes(spec: &ModelSpec) -> Result<Vec<Vec<usize>>> {
    let mut shapes = Vec::with_capacity(spec.layers.len());
    let mut cur = spec.input.clone();
    for (i, l) in spec.layers.iter().enumerate() {
        let err = |msg: String| Error::ShapeMismatch(format!("layer {i}: {msg}"));
        cur = match l {
            LayerSpec::BinaryConv {
                c_out,
                kernel,
                stride,
                padding,
            } => {
                let [h, w, c] = cur[..] else {
                    return Err(err(format!("conv needs [h,w,c] input, got {cur:?}")));
                };
                let _ = c;
                let oh = conv_out_dim(h, *kernel, *stride, *padding)
                    .map_err(|e| err(e.to_string()))?;
                let ow = conv_out_dim(w, *kernel, *stride, *padding)
                    .map_err(|e| err(e.to_string()))?;
                if *c_out == 0 || *kernel == 0 {
                    return Err(err("conv with zero size".to_string()));
                }
                vec![oh, ow, *c_out]
            }
            LayerSpec::BinaryLinear { out_features } => {
                let [f] = cur[..] else {
                    return Err(err(format!(
                        "linear needs flat [features] input, got {cur:?}"
                    )));
                };
                if *out_features == 0 || f == 0 {
                    return Err(err("linear with zero size".to_string()));
                }
                vec![*out_features]
            }
            LayerSpec::BatchNorm | LayerSpec::Sign => cur,
            LayerSpec::MaxPool { size, stride } | LayerSpec::AvgPool { size, stride } => {
                let [h, w, c] = cur[..] else {
                    return Err(err(format!("pool needs [h,w,c] input, got {cur:?}")));
                };
                let s = stride.unwrap_or(*size);
                if *size == 0 || s == 0 || h < *size || w < *size {
                    return Err(err("bad pool geometry".to_string()));
                }
                vec![(h - size) / s + 1, (w - size) / s + 1, c]
            }
            LayerSpec::Flatten => {
                let mut v: usize = 1;
                for d in &cur {
                    v = v
                        .checked_mul(*d)
                        .ok_or_else(|| err("flatten volume overflow".to_string()))?;
                }
                vec![v]
            }
            LayerSpec::ResidualAdd { from } => {
                if *from >= i {
                    return Err(err(format!("residual source {from} not before layer")));
                }
                let src: &Vec<usize> = &shapes[*from];
                if *src != cur {
                    return Err(err(format!(
                        "residual shapes {src:?} vs {cur:?} differ"
                    )));
                }
                cur
            }
        };
        shapes.push(cur.clone());
    }
    Ok(shapes)
}

/// Convenience: channel stats of normalized weights drive the initial scale;
/// re-exported for tests.
pub fn normalized_channel_mean_abs(w: &RealTensor) -> Result<Vec<f64>> {
    let normed = channel_normalize(w, NORM_EPSILON)?;
    let stats = channel_stats(w)?;
    let group = stats.group;
    let channels = w.len() / group;
    Ok((0..channels)
        .map(|c| {
            normed.data()[c * group..(c + 1) * group]
                .iter()
                .map(|v| v.abs())
                .sum::<f64>()
                / group as f64
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dropout::{sample_layer_masks, DropoutVariant};
    use crate::rng::MaskSource;

    fn mlp_spec() -> ModelSpec {
        ModelSpec {
            input: vec![8],
            layers: vec![
                LayerSpec::BinaryLinear { out_features: 6 },
                LayerSpec::BatchNorm,
                LayerSpec::Sign,
                LayerSpec::BinaryLinear { out_features: 3 },
            ],
        }
    }

    fn keep_masks(n: usize) -> Vec<DropoutMask> {
        vec![DropoutMask::keep(); n]
    }

    #[test]
    fn shape_inference_chains() {
        let spec = ModelSpec {
            input: vec![28, 28, 1],
            layers: vec![
                LayerSpec::BinaryConv {
                    c_out: 6,
                    kernel: 5,
                    stride: 1,
                    padding: 0,
                },
                LayerSpec::BatchNorm,
                LayerSpec::Sign,
                LayerSpec::MaxPool {
                    size: 2,
                    stride: None,
                },
                LayerSpec::Flatten,
                LayerSpec::BinaryLinear { out_features: 10 },
            ],
        };
        let shapes = infer_shapes(&spec).unwrap();
        assert_eq!(shapes[0], vec![24, 24, 6]);
        assert_eq!(shapes[3], vec![12, 12, 6]);
        assert_eq!(shapes[4], vec![864]);
        assert_eq!(shapes[5], vec![10]);
    }

    #[test]
    fn shape_inference_rejects_bad_compose() {
        let spec = ModelSpec {
            input: vec![28, 28, 1],
            layers: vec![LayerSpec::BinaryLinear { out_features: 10 }],
        };
        assert!(infer_shapes(&spec).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = mlp_spec();
        let mut model = Model::build(&spec, 3).unwrap();
        let x = RealTensor::new(vec![2, 8], (0..16).map(|i| (i as f64) / 8.0 - 1.0).collect())
            .unwrap();
        let cfg = DropoutConfig::disabled(2);
        let masks = keep_masks(2);
        let (a, _) = model
            .forward_train(&x, &masks, &cfg, ForwardMode::Binary)
            .unwrap();
        let b = {
            let model2 = Model::build(&spec, 3).unwrap();
            model2.forward_eval(&x, &masks, &cfg).unwrap()
        };
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn single_linear_hand_arithmetic() {
        // One binary linear layer, hand-set ±1 weights, 2-d input.
        let spec = ModelSpec {
            input: vec![2],
            layers: vec![LayerSpec::BinaryLinear { out_features: 2 }],
        };
        let mut model = Model::build(&spec, 0).unwrap();
        if let Layer::BinaryLinear(l) = &mut model.layers[0] {
            // proxy rows: [ +, + ] and [ +, − ] after normalize+sign.
            l.proxy = Some(RealTensor::new(vec![2, 2], vec![1.0, 2.0, 5.0, -3.0]).unwrap());
            l.bias = vec![0.5, -0.5];
            l.scale = ScaleVector {
                alpha: vec![2.0, 3.0],
            };
        }
        model.refresh_bits().unwrap();
        // input [0.7, -0.2] signs to [+1, -1]
        let x = RealTensor::new(vec![1, 2], vec![0.7, -0.2]).unwrap();
        let cfg = DropoutConfig::disabled(1);
        let out = model.forward_eval(&x, &keep_masks(1), &cfg).unwrap();
        // normalize row [1,2]: centered [-0.5, .5] -> signs [-1, +1]
        //   sum = (-1)(+1) + (+1)(-1) = -2 ; +bias 0.5 -> -1.5 ; *2 -> -3
        // normalize row [5,-3]: centered [4,-4] -> signs [+1,-1]
        //   sum = (+1)(+1) + (-1)(-1) = 2 ; -0.5 -> 1.5 ; *3 -> 4.5
        assert_eq!(out.data(), &[-3.0, 4.5]);
    }

    #[test]
    fn unitary_p0_matches_plain_bnn_forward() {
        // p = 0 everywhere (always dropped) with unit scales: identical to
        // a forward with scales kept at one.
        let spec = mlp_spec();
        let mut model = Model::build(&spec, 11).unwrap();
        for layer in &mut model.layers {
            if let Layer::BinaryLinear(l) = layer {
                l.scale = ScaleVector::ones(l.out_features);
            }
        }
        model.refresh_bits().unwrap();
        let x = RealTensor::new(vec![3, 8], (0..24).map(|i| ((i * 7) % 5) as f64 - 2.0).collect())
            .unwrap();
        let cfg = DropoutConfig::new(DropoutVariant::Unitary, vec![0.0, 0.0]).unwrap();
        let mut rng = MaskSource::for_pass(0, 0);
        let masks = sample_layer_masks(&cfg, &cfg.rates, &mut rng).unwrap();
        assert!(masks.iter().all(|m| !m.d));
        let dropped = model.forward_eval(&x, &masks, &cfg).unwrap();
        let kept = model.forward_eval(&x, &keep_masks(2), &cfg).unwrap();
        assert_eq!(dropped.data(), kept.data());
    }

    #[test]
    fn one_mask_sample_per_binary_layer_per_pass() {
        let spec = mlp_spec();
        let model = Model::build(&spec, 1).unwrap();
        let cfg = DropoutConfig::new(DropoutVariant::Unitary, vec![0.5, 0.5]).unwrap();
        let mut rng = MaskSource::for_pass(5, 0);
        let masks = sample_layer_masks(&cfg, &cfg.rates, &mut rng).unwrap();
        let x = RealTensor::new(vec![1, 8], vec![0.1; 8]).unwrap();
        model.forward_eval(&x, &masks, &cfg).unwrap();
        assert_eq!(rng.bernoulli_draws(), model.binary_layer_count() as u64);
    }

    #[test]
    fn residual_add_roundtrip() {
        let spec = ModelSpec {
            input: vec![4],
            layers: vec![
                LayerSpec::BinaryLinear { out_features: 4 },
                LayerSpec::Sign,
                LayerSpec::BinaryLinear { out_features: 4 },
                LayerSpec::ResidualAdd { from: 0 },
            ],
        };
        let mut model = Model::build(&spec, 2).unwrap();
        let x = RealTensor::new(vec![2, 4], vec![0.5; 8]).unwrap();
        let cfg = DropoutConfig::disabled(2);
        let (out, tape) = model
            .forward_train(&x, &keep_masks(2), &cfg, ForwardMode::Binary)
            .unwrap();
        assert_eq!(out.shape(), &[2, 4]);
        let g = RealTensor::full(vec![2, 4], 1.0);
        model.backward(&tape, &g, &cfg).unwrap();
    }

    #[test]
    fn pooling_known_values() {
        let x = RealTensor::new(
            vec![1, 2, 2, 1],
            vec![1.0, 2.0, 3.0, 4.0],
        )
        .unwrap();
        let p = Pool { size: 2, stride: 2 };
        let (mx, arg) = max_pool(&x, &p).unwrap();
        assert_eq!(mx.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        let av = avg_pool(&x, &p).unwrap();
        assert_eq!(av.data(), &[2.5]);
    }
}
