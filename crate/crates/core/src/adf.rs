//! Assumed-density filtering: factorised Gaussian moments pushed through the
//! decoder layer by layer.

use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderModel, Mode, PoolKind, P_BIAS, P_BN1, P_BN2, P_BN3, P_DENSE, P_DEPTHWISE, P_POINTWISE, P_TEMPORAL};
use crate::error::{Error, Result};
use crate::kernels::{self, conv2d, matmul, pool_geometry, window_indices, Padding2d};
use crate::rng::RngStream;
use crate::tensor::Tensor;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Element-wise mean and variance of a diagonal Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTensor {
    pub mean: Tensor,
    pub var: Tensor,
}

impl MomentTensor {
    pub fn new(mean: Tensor, var: Tensor) -> Result<Self> {
        var.expect_shape(mean.shape(), "moment tensor")?;
        if let Some(v) = var.data().iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::invalid(format!("variance must be non-negative, found {v}")));
        }
        Ok(Self { mean, var })
    }

    /// Zero-variance moments of a deterministic tensor.
    pub fn certain(mean: Tensor) -> Self {
        let var = Tensor::zeros(mean.shape());
        Self { mean, var }
    }

    pub fn shape(&self) -> &[usize] {
        self.mean.shape()
    }

    fn checked(self, layer: usize, name: &'static str) -> Result<Self> {
        match self.var.data().iter().position(|v| !(*v >= 0.0)) {
            Some(i) => Err(Error::invalid(format!("negative or undefined variance {} at element {i}", self.var.data()[i]))
                .at_layer(layer, name)),
            None => Ok(self),
        }
    }
}

/// Assumed input noise variance: a number, or a list with one entry per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InputNoise {
    Scalar(f64),
    /// One variance per electrode channel.
    PerChannel(Vec<f64>),
}

impl InputNoise {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            InputNoise::Scalar(u) => *u >= 0.0,
            InputNoise::PerChannel(v) => v.iter().all(|u| *u >= 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("input noise variance must be >= 0"))
        }
    }

    /// Largest variance, used for reporting.
    pub fn magnitude(&self) -> f64 {
        match self {
            InputNoise::Scalar(u) => *u,
            InputNoise::PerChannel(v) => v.iter().cloned().fold(0.0, f64::max),
        }
    }
}

/// Treat `x` as the mean of a Gaussian with variance `noise`. For per-channel
/// noise the channel axis is the second-to-last one.
pub fn lift(x: &Tensor, noise: &InputNoise) -> Result<MomentTensor> {
    noise.validate()?;
    let var = match noise {
        InputNoise::Scalar(u) => Tensor::full(x.shape(), *u),
        InputNoise::PerChannel(v) => {
            if x.ndim() < 2 || x.dim(x.ndim() - 2) != v.len() {
                return Err(Error::shape("lift", format!("{} channel variances for input {:?}", v.len(), x.shape())));
            }
            let t = x.dim(x.ndim() - 1);
            let c = v.len();
            let data = (0..x.len()).map(|i| v[(i / t) % c]).collect();
            Tensor::new(x.shape().to_vec(), data)?
        }
    };
    Ok(MomentTensor { mean: x.clone(), var })
}

/// Linear layer whose moments propagate exactly.
#[derive(Debug, Clone)]
pub enum LinearOp<'a> {
    Conv { kernel: &'a Tensor, pad: Padding2d, groups: usize, bias: Option<&'a [f64]> },
    /// `y = x · weight + bias` for `x: [m, in]`, `weight: [in, out]`.
    Dense { weight: &'a Tensor, bias: Option<&'a [f64]> },
}

pub fn adf_linear(m: &MomentTensor, op: &LinearOp) -> Result<MomentTensor> {
    let (mut mean, var) = match op {
        LinearOp::Conv { kernel, pad, groups, .. } => {
            let sq = kernel.map(|w| w * w);
            (conv2d(&m.mean, kernel, *pad, *groups)?, conv2d(&m.var, &sq, *pad, *groups)?)
        }
        LinearOp::Dense { weight, .. } => {
            let sq = weight.map(|w| w * w);
            (matmul(&m.mean, weight)?, matmul(&m.var, &sq)?)
        }
    };
    let bias = match op {
        LinearOp::Conv { bias, .. } | LinearOp::Dense { bias, .. } => *bias,
    };
    if let Some(b) = bias {
        let c = mean.dim(1);
        if b.len() != c {
            return Err(Error::shape("adf_linear", format!("bias of {} for {c} outputs", b.len())));
        }
        let inner: usize = mean.shape()[2..].iter().product();
        for (i, v) in mean.data_mut().iter_mut().enumerate() {
            *v += b[(i / inner) % c];
        }
    }
    Ok(MomentTensor { mean, var })
}

/// Moments of `max(0, X)` for `X ~ N(mu, v)`.
pub fn relu_moments(mu: f64, v: f64) -> (f64, f64) {
    if v <= 0.0 {
        return (mu.max(0.0), 0.0);
    }
    let sigma = v.sqrt();
    let r = mu / sigma;
    let x = r.abs();
    // delta = E[(Z - x)^+], eps = E[((Z - x)^+)^2] for Z standard normal,
    // both via an asymptotic series in the far tail to avoid cancellation.
    let (delta, eps) = if x > 30.0 {
        let (x2, pdf) = (x * x, norm_pdf(x));
        let delta = pdf * (1.0 / x2 - 3.0 / (x2 * x2) + 15.0 / (x2 * x2 * x2) - 105.0 / (x2 * x2 * x2 * x2));
        let eps = pdf * (2.0 / (x2 * x) - 12.0 / (x2 * x2 * x) + 90.0 / (x2 * x2 * x2 * x));
        (delta, eps)
    } else {
        let (pdf, tail) = (norm_pdf(x), norm_cdf(-x));
        (pdf - x * tail, (x * x + 1.0) * tail - x * pdf)
    };
    if r >= 0.0 {
        (mu + sigma * delta, v * (1.0 - eps - 2.0 * r * delta - delta * delta))
    } else {
        (sigma * delta, v * (eps - delta * delta))
    }
}

pub fn adf_relu(m: &MomentTensor) -> MomentTensor {
    let n = m.mean.len();
    let (mut mean, mut var) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for (&mu, &v) in m.mean.data().iter().zip(m.var.data()) {
        let (a, b) = relu_moments(mu, v);
        debug_assert!(b >= -1e-12 * v, "relu variance {b} from ({mu}, {v})");
        mean.push(a);
        var.push(b.max(0.0));
    }
    let shape = m.shape().to_vec();
    MomentTensor { mean: Tensor::new(shape.clone(), mean).unwrap(), var: Tensor::new(shape, var).unwrap() }
}

/// Batch norm with frozen statistics: an exact per-channel affine map.
pub fn adf_batchnorm(
    m: &MomentTensor,
    running_mean: &[f64],
    running_var: &[f64],
    scale: &[f64],
    shift: &[f64],
    eps: f64,
) -> Result<MomentTensor> {
    if m.mean.ndim() < 2 {
        return Err(Error::shape("adf_batchnorm", format!("need [batch, channels, ..], got {:?}", m.shape())));
    }
    let c = m.mean.dim(1);
    if [running_mean.len(), running_var.len(), scale.len(), shift.len()].iter().any(|&l| l != c) {
        return Err(Error::shape("adf_batchnorm", format!("per-channel parameters must have {c} entries")));
    }
    let coef: Vec<f64> = (0..c).map(|i| scale[i] / (running_var[i] + eps).sqrt()).collect();
    let offset: Vec<f64> = (0..c).map(|i| shift[i] - running_mean[i] * coef[i]).collect();
    let sq: Vec<f64> = coef.iter().map(|k| k * k).collect();
    Ok(MomentTensor {
        mean: kernels::channel_affine(&m.mean, &coef, &offset),
        var: kernels::channel_affine(&m.var, &sq, &vec![0.0; c]),
    })
}

pub fn adf_avgpool(m: &MomentTensor, window: (usize, usize)) -> Result<MomentTensor> {
    pool_geometry(m.shape(), window, "adf_avgpool")?;
    let n = (window.0 * window.1) as f64;
    Ok(MomentTensor {
        mean: kernels::window_reduce(&m.mean, window, |w| w.iter().sum::<f64>() / n),
        var: kernels::window_reduce(&m.var, window, |w| w.iter().sum::<f64>() / (n * n)),
    })
}

/// Moments of `max(X1, X2)` for independent Gaussians.
pub fn max_moments(m1: f64, v1: f64, m2: f64, v2: f64) -> (f64, f64) {
    let theta = (v1 + v2).sqrt();
    if theta == 0.0 {
        return (m1.max(m2), 0.0);
    }
    // Shift so the second operand is centred; the variance is unaffected.
    let d = m1 - m2;
    let alpha = d / theta;
    if alpha > 38.0 {
        return (m1, v1);
    }
    if alpha < -38.0 {
        return (m2, v2);
    }
    let (cdf, cdf_neg, pdf) = (norm_cdf(alpha), norm_cdf(-alpha), norm_pdf(alpha));
    let mean = d * cdf + theta * pdf;
    let second = (d * d + v1) * cdf + v2 * cdf_neg + d * theta * pdf;
    (m2 + mean, (second - mean * mean).max(0.0))
}

/// Pairwise Gaussian max folded left to right over each window.
pub fn adf_maxpool(m: &MomentTensor, window: (usize, usize)) -> Result<MomentTensor> {
    pool_geometry(m.shape(), window, "adf_maxpool")?;
    let s = m.shape();
    let out_shape = vec![s[0], s[1], s[2] / window.0, s[3] / window.1];
    let (mut mean, mut var) = (Vec::new(), Vec::new());
    for idx in window_indices(s, window) {
        let mut acc = (m.mean.data()[idx[0]], m.var.data()[idx[0]]);
        for &j in &idx[1..] {
            acc = max_moments(acc.0, acc.1, m.mean.data()[j], m.var.data()[j]);
        }
        mean.push(acc.0);
        var.push(acc.1);
    }
    Ok(MomentTensor { mean: Tensor::new(out_shape.clone(), mean)?, var: Tensor::new(out_shape, var)? })
}

/// Multiply both moments by a binary mask: dropped units become exactly 0.
pub fn adf_dropout(m: &MomentTensor, mask_layer: &Tensor) -> Result<MomentTensor> {
    mask_layer.expect_shape(m.shape(), "adf_dropout")?;
    if mask_layer.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("dropout mask entries must be 0 or 1"));
    }
    Ok(MomentTensor { mean: m.mean.mul(mask_layer)?, var: m.var.mul(mask_layer)? })
}

fn adf_scale(m: MomentTensor, k: f64) -> MomentTensor {
    MomentTensor { mean: m.mean.scale(k), var: m.var.scale(k * k) }
}

/// Binary unit masks for the two hidden dropout sites of the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub layers: Vec<Tensor>,
    pub keep_prob: f64,
}

impl DropoutMask {
    pub fn new(layers: Vec<Tensor>, keep_prob: f64) -> Result<Self> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::invalid(format!("keep probability {keep_prob} outside (0, 1]")));
        }
        if layers.iter().any(|l| l.data().iter().any(|&v| v != 0.0 && v != 1.0)) {
            return Err(Error::invalid("dropout mask entries must be 0 or 1"));
        }
        Ok(Self { layers, keep_prob })
    }

    /// Keep everything; equivalent to no dropout.
    pub fn ones(model: &DecoderModel, batch: usize) -> Self {
        let layers = model.dropout_shapes(batch).iter().map(|s| Tensor::ones(s)).collect();
        Self { layers, keep_prob: 1.0 }
    }

    /// Independent Bernoulli(keep_prob) draw for every hidden unit.
    pub fn sample(model: &DecoderModel, batch: usize, keep_prob: f64, stream: &mut RngStream) -> Result<Self> {
        let layers = model
            .dropout_shapes(batch)
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let data = (0..n).map(|_| if stream.bernoulli(keep_prob) { 1.0 } else { 0.0 }).collect();
                Tensor::new(s.clone(), data).unwrap()
            })
            .collect();
        Self::new(layers, keep_prob)
    }

    /// Multiplier applied to kept units so activations keep their expected size.
    pub fn scale(&self) -> f64 {
        1.0 / self.keep_prob
    }

    pub(crate) fn scaled_layer(&self, site: usize) -> Result<Tensor> {
        let l = self.layers.get(site).ok_or_else(|| Error::invalid(format!("mask has no layer {site}")))?;
        Ok(l.scale(self.scale()))
    }

    pub(crate) fn check_shapes(&self, expected: &[Vec<usize>]) -> Result<()> {
        if self.layers.len() != expected.len() {
            return Err(Error::shape("dropout mask", format!("{} layers, expected {}", self.layers.len(), expected.len())));
        }
        for (l, s) in self.layers.iter().zip(expected) {
            l.expect_shape(s, "dropout mask")?;
        }
        Ok(())
    }
}

fn bn_layer(model: &DecoderModel, m: &MomentTensor, at: usize, layer: usize) -> Result<MomentTensor> {
    let r = &model.running[(at - 1) / 3];
    adf_batchnorm(m, &r.mean, &r.var, model.params[at].data(), model.params[at + 1].data(), model.config.bn_eps)
        .and_then(|m| m.checked(layer, "batchnorm"))
        .map_err(|e| match e {
            Error::Layer { .. } => e,
            other => other.at_layer(layer, "batchnorm"),
        })
}

fn require_eval(model: &DecoderModel) -> Result<()> {
    if model.mode != Mode::Eval {
        return Err(Error::invalid("moment propagation needs an eval-mode model"));
    }
    Ok(())
}

/// Moments up to (not including) the first dropout site. Independent of the
/// mask, so Monte-Carlo passes can share it.
pub fn adf_prefix(model: &DecoderModel, m0: &MomentTensor) -> Result<MomentTensor> {
    require_eval(model)?;
    let c = &model.config;
    let m0 = MomentTensor { mean: model.canonical_input(&m0.mean)?, var: model.canonical_input(&m0.var)? };
    let p = &model.params;
    let conv = LinearOp::Conv { kernel: &p[P_TEMPORAL], pad: Padding2d::same(1, c.temporal_kernel), groups: 1, bias: None };
    let m = adf_linear(&m0, &conv).map_err(|e| e.at_layer(0, "temporal conv"))?.checked(0, "temporal conv")?;
    let m = bn_layer(model, &m, P_BN1, 1)?;
    let conv = LinearOp::Conv { kernel: &p[P_DEPTHWISE], pad: Padding2d::default(), groups: c.temporal_filters, bias: None };
    let m = adf_linear(&m, &conv).map_err(|e| e.at_layer(2, "depthwise conv"))?.checked(2, "depthwise conv")?;
    let m = bn_layer(model, &m, P_BN2, 3)?;
    adf_relu(&m).checked(4, "relu")
}

/// Remaining layers from the first dropout site to the logits.
pub fn adf_suffix(model: &DecoderModel, m: &MomentTensor, mask: Option<&DropoutMask>) -> Result<MomentTensor> {
    require_eval(model)?;
    let c = &model.config;
    let p = &model.params;
    let b = m.shape()[0];
    if let Some(mask) = mask {
        mask.check_shapes(&model.dropout_shapes(b))?;
    }
    let drop = |m: MomentTensor, site: usize, layer: usize| -> Result<MomentTensor> {
        match mask {
            None => Ok(m),
            Some(mask) => Ok(adf_scale(adf_dropout(&m, &mask.layers[site]).map_err(|e| e.at_layer(layer, "dropout"))?, mask.scale())),
        }
    };
    let m = drop(m.clone(), 0, 5)?;
    let conv = LinearOp::Conv { kernel: &p[P_POINTWISE], pad: Padding2d::default(), groups: 1, bias: None };
    let m = adf_linear(&m, &conv).map_err(|e| e.at_layer(6, "pointwise conv"))?.checked(6, "pointwise conv")?;
    let m = bn_layer(model, &m, P_BN3, 7)?;
    let m = adf_relu(&m).checked(8, "relu")?;
    let m = drop(m, 1, 9)?;
    let m = match c.pool {
        PoolKind::Average => adf_avgpool(&m, (1, c.pool_width)),
        PoolKind::Max => adf_maxpool(&m, (1, c.pool_width)),
    }
    .map_err(|e| e.at_layer(10, "pool"))?
    .checked(10, "pool")?;
    let flat = MomentTensor { mean: m.mean.reshape(&[b, c.feature_len()])?, var: m.var.reshape(&[b, c.feature_len()])? };
    let dense = LinearOp::Dense { weight: &p[P_DENSE], bias: Some(p[P_BIAS].data()) };
    adf_linear(&flat, &dense).map_err(|e| e.at_layer(11, "dense"))?.checked(11, "dense")
}

/// Logit moments `[b, classes]` of the decoder for Gaussian input `m0`.
pub fn adf_forward(model: &DecoderModel, m0: &MomentTensor, mask: Option<&DropoutMask>) -> Result<MomentTensor> {
    let pre = adf_prefix(model, m0)?;
    adf_suffix(model, &pre, mask)
}
