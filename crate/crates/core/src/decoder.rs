//! Three-block convolutional decoder and its training loop.
//!
//! Layout of one forward pass on `x: [b, 1, channels, samples]`:
//!
//! ```text
//! temporal conv [F1, 1, 1, K] (same padding) -> batchnorm
//! depthwise conv [F1*D, 1, channels, 1] (groups F1) -> batchnorm -> relu -> dropout
//! pointwise conv [F2, F1*D, 1, 1] -> batchnorm -> relu -> dropout -> pool (1, P)
//! flatten -> dense [F2 * samples / P, classes] + bias -> softmax
//! ```

use serde::{Deserialize, Serialize};

use crate::adf::DropoutMask;
use crate::data::SegmentSet;
use crate::error::{Error, Result};
use crate::io::{Checkpoint, SectionTag};
use crate::kernels::{softmax_rows, Padding2d};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::RngStream;
use crate::tape::{self, cross_entropy, js_divergence_rows, BatchStats, Tape, Var};
use crate::tensor::Tensor;

/// Stream labels shared by plain and augmented training so both see the
/// same batch order and dropout draws.
pub(crate) const STREAM_SHUFFLE: u64 = 0x5348;
pub(crate) const STREAM_DROPOUT: u64 = 0x4452;
const STREAM_INIT: u64 = 0x494e;
const STREAM_MODEL: u64 = 0x4d4f;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Average,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub n_channels: usize,
    pub n_samples: usize,
    pub n_classes: usize,
    /// F1
    pub temporal_filters: usize,
    /// D
    pub depth_multiplier: usize,
    /// F2
    pub pointwise_filters: usize,
    pub temporal_kernel: usize,
    pub pool_width: usize,
    pub pool: PoolKind,
    pub dropout_rate_train: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            n_channels: 22,
            n_samples: 400,
            n_classes: 4,
            temporal_filters: 8,
            depth_multiplier: 2,
            pointwise_filters: 16,
            temporal_kernel: 64,
            pool_width: 8,
            pool: PoolKind::Average,
            dropout_rate_train: 0.25,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl DecoderConfig {
    pub fn new(n_channels: usize, n_samples: usize, n_classes: usize) -> Self {
        Self { n_channels, n_samples, n_classes, ..Self::default() }
    }

    /// Narrow filters and a short temporal kernel for small windows.
    pub fn compact(n_channels: usize, n_samples: usize, n_classes: usize) -> Self {
        Self {
            n_channels,
            n_samples,
            n_classes,
            temporal_filters: 4,
            depth_multiplier: 2,
            pointwise_filters: 8,
            temporal_kernel: 16,
            ..Self::default()
        }
    }

    pub fn depthwise_filters(&self) -> usize {
        self.temporal_filters * self.depth_multiplier
    }

    pub fn pooled_len(&self) -> usize {
        self.n_samples / self.pool_width
    }

    pub fn feature_len(&self) -> usize {
        self.pointwise_filters * self.pooled_len()
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_channels", self.n_channels),
            ("n_samples", self.n_samples),
            ("n_classes", self.n_classes),
            ("temporal_filters", self.temporal_filters),
            ("depth_multiplier", self.depth_multiplier),
            ("pointwise_filters", self.pointwise_filters),
            ("temporal_kernel", self.temporal_kernel),
            ("pool_width", self.pool_width),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("decoder {name} must be positive")));
        }
        if self.temporal_kernel > self.n_samples {
            return Err(Error::invalid(format!(
                "temporal kernel {} is longer than the window of {} samples",
                self.temporal_kernel, self.n_samples
            )));
        }
        if self.n_samples % self.pool_width != 0 {
            return Err(Error::invalid(format!(
                "pool width {} does not divide {} samples",
                self.pool_width, self.n_samples
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate_train) {
            return Err(Error::invalid(format!("dropout_rate_train {} outside [0, 1)", self.dropout_rate_train)));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return Err(Error::invalid("bn_momentum must lie in [0, 1] and bn_eps be positive"));
        }
        Ok(())
    }

    /// Shapes of the parameter tensors in canonical order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let (f1, fd, f2) = (self.temporal_filters, self.depthwise_filters(), self.pointwise_filters);
        vec![
            vec![f1, 1, 1, self.temporal_kernel],
            vec![f1],
            vec![f1],
            vec![fd, 1, self.n_channels, 1],
            vec![fd],
            vec![fd],
            vec![f2, fd, 1, 1],
            vec![f2],
            vec![f2],
            vec![self.feature_len(), self.n_classes],
            vec![self.n_classes],
        ]
    }
}

pub const PARAM_NAMES: [&str; 11] = [
    "temporal.weight",
    "bn1.scale",
    "bn1.shift",
    "depthwise.weight",
    "bn2.scale",
    "bn2.shift",
    "pointwise.weight",
    "bn3.scale",
    "bn3.shift",
    "dense.weight",
    "dense.bias",
];

pub(crate) const P_TEMPORAL: usize = 0;
pub(crate) const P_BN1: usize = 1;
pub(crate) const P_DEPTHWISE: usize = 3;
pub(crate) const P_BN2: usize = 4;
pub(crate) const P_POINTWISE: usize = 6;
pub(crate) const P_BN3: usize = 7;
pub(crate) const P_DENSE: usize = 9;
pub(crate) const P_BIAS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch-norm running statistics for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn new(c: usize) -> Self {
        Self { mean: vec![0.0; c], var: vec![1.0; c] }
    }

    fn update(&mut self, stats: &BatchStats, momentum: f64) {
        let n = stats.count as f64;
        let unbias = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - momentum) * self.mean[c] + momentum * stats.mean[c];
            self.var[c] = (1.0 - momentum) * self.var[c] + momentum * stats.var[c] * unbias;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel {
    pub config: DecoderConfig,
    /// Parameters in `PARAM_NAMES` order.
    pub params: Vec<Tensor>,
    pub running: [RunningStats; 3],
    pub mode: Mode,
    stream: RngStream,
}

pub(crate) enum Norm {
    Batch,
    Running,
}

pub(crate) enum Dropout<'a> {
    Off,
    Mask(&'a DropoutMask),
    Sample { stream: &'a mut RngStream, rate: f64 },
}

pub(crate) struct Graph {
    pub logits: Var,
    /// Pooled block-3 activations `[b, F2, 1, samples / P]`.
    pub pooled: Var,
    pub stats: Vec<BatchStats>,
}

/// Inverted-dropout multiplier for a layer of `shape`.
pub fn inverted_dropout_mask(shape: &[usize], rate: f64, stream: &mut RngStream) -> Tensor {
    let keep = 1.0 - rate;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| if stream.bernoulli(keep) { 1.0 / keep } else { 0.0 }).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn build_decoder(config: DecoderConfig, stream: &RngStream) -> Result<DecoderModel> {
    config.validate()?;
    let mut init = stream.derive(STREAM_INIT);
    let shapes = config.param_shapes();
    let mut params = Vec::with_capacity(shapes.len());
    for (i, shape) in shapes.iter().enumerate() {
        let t = match i {
            P_TEMPORAL | P_DEPTHWISE | P_POINTWISE | P_DENSE => {
                let fan_in: usize = if i == P_DENSE { shape[0] } else { shape[1..].iter().product() };
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| bound * (2.0 * init.uniform() - 1.0)).collect();
                Tensor::new(shape.clone(), data)?
            }
            P_BIAS => Tensor::zeros(shape),
            _ if i % 3 == 1 => Tensor::ones(shape),
            _ => Tensor::zeros(shape),
        };
        params.push(t);
    }
    let running = [
        RunningStats::new(config.temporal_filters),
        RunningStats::new(config.depthwise_filters()),
        RunningStats::new(config.pointwise_filters),
    ];
    Ok(DecoderModel { config, params, running, mode: Mode::Eval, stream: stream.derive(STREAM_MODEL) })
}

impl DecoderModel {
    pub fn n_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Shapes of the two dropout sites for a batch of `b`.
    pub fn dropout_shapes(&self, b: usize) -> [Vec<usize>; 2] {
        let c = &self.config;
        [vec![b, c.depthwise_filters(), 1, c.n_samples], vec![b, c.pointwise_filters, 1, c.n_samples]]
    }

    /// Accepts `[b, 1, channels, samples]` or `[b, channels, 1, samples]`
    /// (same memory layout) and returns the former.
    pub fn canonical_input(&self, batch: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let s = batch.shape();
        let ok = s.len() == 4
            && s[3] == c.n_samples
            && ((s[1] == 1 && s[2] == c.n_channels) || (s[1] == c.n_channels && s[2] == 1));
        if !ok {
            return Err(Error::shape(
                "decoder input",
                format!("expected [b, 1, {}, {}], got {s:?}", c.n_channels, c.n_samples),
            ));
        }
        batch.clone().reshape(&[s[0], 1, c.n_channels, c.n_samples])
    }

    pub(crate) fn graph(&self, tape: &mut Tape, p: &[Var], x: Var, norm: Norm, mut dropout: Dropout) -> Result<Graph> {
        let c = &self.config;
        let b = tape.value(x).dim(0);
        let mut stats = Vec::new();
        let mut bn = |tape: &mut Tape, h: Var, at: usize, layer: usize, name: &'static str| -> Result<Var> {
            match norm {
                Norm::Batch => {
                    let (out, s) = tape.batchnorm_train(h, p[at], p[at + 1], c.bn_eps).map_err(|e| e.at_layer(layer, name))?;
                    stats.push(s);
                    Ok(out)
                }
                Norm::Running => {
                    let r = &self.running[(at - 1) / 3];
                    tape.batchnorm_eval(h, p[at], p[at + 1], &r.mean, &r.var, c.bn_eps).map_err(|e| e.at_layer(layer, name))
                }
            }
        };
        let shapes = self.dropout_shapes(b);
        let mut drop = |tape: &mut Tape, h: Var, site: usize| -> Result<Var> {
            match &mut dropout {
                Dropout::Off => Ok(h),
                Dropout::Mask(mask) => {
                    let m = mask.scaled_layer(site)?;
                    tape.mul_const(h, &m).map_err(|e| e.at_layer(4 + 4 * site, "dropout"))
                }
                Dropout::Sample { stream, rate } => {
                    if *rate == 0.0 {
                        return Ok(h);
                    }
                    let m = inverted_dropout_mask(&shapes[site], *rate, stream);
                    tape.mul_const(h, &m)
                }
            }
        };

        let h = tape.conv2d(x, p[P_TEMPORAL], Padding2d::same(1, c.temporal_kernel), 1).map_err(|e| e.at_layer(0, "temporal conv"))?;
        let h = bn(tape, h, P_BN1, 1, "batchnorm")?;
        let h = tape.conv2d(h, p[P_DEPTHWISE], Padding2d::default(), c.temporal_filters).map_err(|e| e.at_layer(2, "depthwise conv"))?;
        let h = bn(tape, h, P_BN2, 3, "batchnorm")?;
        let h = tape.relu(h);
        let h = drop(tape, h, 0)?;
        let h = tape.conv2d(h, p[P_POINTWISE], Padding2d::default(), 1).map_err(|e| e.at_layer(6, "pointwise conv"))?;
        let h = bn(tape, h, P_BN3, 7, "batchnorm")?;
        let h = tape.relu(h);
        let h = drop(tape, h, 1)?;
        let pooled = match c.pool {
            PoolKind::Average => tape.avgpool2d(h, (1, c.pool_width)),
            PoolKind::Max => tape.maxpool2d(h, (1, c.pool_width)),
        }
        .map_err(|e| e.at_layer(10, "pool"))?;
        let flat = tape.reshape(pooled, &[b, c.feature_len()])?;
        let z = tape.matmul(flat, p[P_DENSE]).map_err(|e| e.at_layer(11, "dense"))?;
        let logits = tape.add_row_bias(z, p[P_BIAS])?;
        Ok(Graph { logits, pooled, stats })
    }

    fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.param_vars(tape, true)
    }

    /// Parameters recorded on `tape`, trainable or frozen.
    pub(crate) fn param_vars(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) }).collect()
    }

    /// Eval-mode logits `[b, classes]` using running statistics. With a mask,
    /// dropped units are zeroed and kept units scaled by `1 / keep_prob`.
    pub fn forward(&self, batch: &Tensor, mask: Option<&DropoutMask>) -> Result<Tensor> {
        let x = self.canonical_input(batch)?;
        let b = x.dim(0);
        let mut tape = Tape::new();
        let p = self.leaves(&mut tape);
        let xv = tape.constant(x);
        let dropout = match mask {
            Some(m) => {
                m.check_shapes(&self.dropout_shapes(b))?;
                Dropout::Mask(m)
            }
            None => Dropout::Off,
        };
        let g = self.graph(&mut tape, &p, xv, Norm::Running, dropout)?;
        Ok(tape.value(g.logits).clone())
    }

    /// Train-mode logits: batch statistics (running stats updated) and
    /// inverted dropout drawn from the model's own stream.
    pub fn forward_train(&mut self, batch: &Tensor) -> Result<Tensor> {
        let x = self.canonical_input(batch)?;
        let mut tape = Tape::new();
        let p = self.leaves(&mut tape);
        let xv = tape.constant(x);
        let mut stream = self.stream.clone();
        let rate = self.config.dropout_rate_train;
        let g = self.graph(&mut tape, &p, xv, Norm::Batch, Dropout::Sample { stream: &mut stream, rate })?;
        self.stream = stream;
        self.update_running(&g.stats);
        Ok(tape.value(g.logits).clone())
    }

    pub fn predict_proba(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(softmax_rows(&self.forward(batch, None)?))
    }

    /// Pooled block-3 activations, eval mode, `[b, F2, 1, samples / P]`.
    pub fn features(&self, batch: &Tensor) -> Result<Tensor> {
        let x = self.canonical_input(batch)?;
        let mut tape = Tape::new();
        let p = self.leaves(&mut tape);
        let xv = tape.constant(x);
        let g = self.graph(&mut tape, &p, xv, Norm::Running, Dropout::Off)?;
        Ok(tape.value(g.pooled).clone())
    }

    pub(crate) fn update_running(&mut self, stats: &[BatchStats]) {
        for (r, s) in self.running.iter_mut().zip(stats) {
            r.update(s, self.config.bn_momentum);
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut config = json_pairs(&self.config)?;
        config.push(("stream.seed".into(), self.stream.seed().to_string()));
        config.push(("stream.id".into(), self.stream.stream_id().to_string()));
        let mut tensors: Vec<(String, Tensor)> =
            PARAM_NAMES.iter().zip(&self.params).map(|(n, t)| (n.to_string(), t.clone())).collect();
        for (i, r) in self.running.iter().enumerate() {
            tensors.push((format!("bn{}.running_mean", i + 1), Tensor::from_vec(r.mean.clone())));
            tensors.push((format!("bn{}.running_var", i + 1), Tensor::from_vec(r.var.clone())));
        }
        Ok(Checkpoint { tag: SectionTag::Decoder, config, tensors })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.tag != SectionTag::Decoder {
            return Err(Error::Format("checkpoint does not hold a decoder".into()));
        }
        let pairs: Vec<_> = ck.config.iter().filter(|(k, _)| !k.starts_with("stream.")).cloned().collect();
        let config: DecoderConfig = from_json_pairs(&pairs)?;
        config.validate()?;
        let mut params = Vec::with_capacity(PARAM_NAMES.len());
        for (name, shape) in PARAM_NAMES.iter().zip(config.param_shapes()) {
            let t = ck.tensor(name)?;
            t.expect_shape(&shape, "decoder checkpoint")?;
            params.push(t.clone());
        }
        let widths = [config.temporal_filters, config.depthwise_filters(), config.pointwise_filters];
        let mut running = Vec::with_capacity(3);
        for (i, &w) in widths.iter().enumerate() {
            let mean = ck.tensor(&format!("bn{}.running_mean", i + 1))?;
            let var = ck.tensor(&format!("bn{}.running_var", i + 1))?;
            mean.expect_shape(&[w], "decoder checkpoint")?;
            var.expect_shape(&[w], "decoder checkpoint")?;
            if var.data().iter().any(|&v| !(v > 0.0)) {
                return Err(Error::Format("running variance must be positive".into()));
            }
            running.push(RunningStats { mean: mean.data().to_vec(), var: var.data().to_vec() });
        }
        let stream = RngStream::new(ck.config_parse("stream.seed")?, ck.config_parse("stream.id")?);
        let running: [RunningStats; 3] = running.try_into().unwrap();
        Ok(Self { config, params, running, mode: Mode::Eval, stream })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint()?.write(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}

/// Flatten a serialisable struct into `(key, json value)` pairs.
pub(crate) fn json_pairs<T: Serialize>(value: &T) -> Result<Vec<(String, String)>> {
    match serde_json::to_value(value)? {
        serde_json::Value::Object(map) => Ok(map.into_iter().map(|(k, v)| (k, v.to_string())).collect()),
        _ => Err(Error::Format("config must serialise to an object".into())),
    }
}

pub(crate) fn from_json_pairs<T: for<'de> Deserialize<'de>>(pairs: &[(String, String)]) -> Result<T> {
    let mut map = serde_json::Map::new();
    for (k, v) in pairs {
        map.insert(k.clone(), serde_json::from_str(v)?);
    }
    Ok(serde_json::from_value(serde_json::Value::Object(map))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { epochs: 40, lr: 1e-3, batch_size: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean train-mode loss over the epoch's batches (dropout active).
    pub batch_loss: f64,
    /// Eval-mode loss and accuracy on the full training set after the epoch.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

/// One optimiser step on a batch. With `consistency = Some((x_orig, λ))` and
/// `λ > 0` the loss adds `λ · JS(p(x), p(x_orig))`; the original batch shares
/// the forward pass so batch statistics cover both halves.
/// Returns (loss, number of correct predictions on `x`).
pub(crate) fn train_step(
    model: &mut DecoderModel,
    opt: &mut AdamState,
    adam: AdamConfig,
    x: &Tensor,
    labels: &[usize],
    consistency: Option<(&Tensor, f64)>,
    dropout: &mut RngStream,
) -> Result<(f64, usize)> {
    let x = model.canonical_input(x)?;
    let b = x.dim(0);
    let k = model.config.n_classes;
    let mut tape = Tape::new();
    let p = model.leaves(&mut tape);
    let rate = model.config.dropout_rate_train;
    let (loss, logits, stats) = match consistency {
        Some((orig, lambda)) if lambda > 0.0 => {
            let orig = model.canonical_input(orig)?;
            orig.expect_shape(x.shape(), "consistency batch")?;
            let both = tape.constant(Tensor::concat_rows(&x, &orig)?);
            let g = model.graph(&mut tape, &p, both, Norm::Batch, Dropout::Sample { stream: dropout, rate })?;
            let flat = tape.reshape(g.logits, &[1, 2 * b * k])?;
            let first = tape.slice_cols(flat, 0, b * k)?;
            let second = tape.slice_cols(flat, b * k, b * k)?;
            let la = tape.reshape(first, &[b, k])?;
            let lo = tape.reshape(second, &[b, k])?;
            let ce = cross_entropy(&mut tape, la, labels)?;
            let pa = tape.softmax(la);
            let po = tape.softmax(lo);
            let js = js_divergence_rows(&mut tape, pa, po)?;
            let js = tape.scale(js, lambda);
            (tape.add(ce, js)?, la, g.stats)
        }
        _ => {
            let xv = tape.constant(x);
            let g = model.graph(&mut tape, &p, xv, Norm::Batch, Dropout::Sample { stream: dropout, rate })?;
            (cross_entropy(&mut tape, g.logits, labels)?, g.logits, g.stats)
        }
    };
    let correct = count_correct(tape.value(logits), labels);
    let loss_value = tape.value(loss).item();
    let grads = tape::grad(&tape, loss, &p)?;
    model.update_running(&stats);
    adam_step(&mut model.params, &grads, opt, adam)?;
    Ok((loss_value, correct))
}

/// Mean cross-entropy on a batch with batch statistics and the given
/// dropout mask (none: dropout off), and its gradient with respect to every
/// parameter in `PARAM_NAMES` order. The model is not modified.
pub fn loss_and_grad(model: &DecoderModel, batch: &Tensor, labels: &[usize], mask: Option<&DropoutMask>) -> Result<(f64, Vec<Tensor>)> {
    let x = model.canonical_input(batch)?;
    if labels.len() != x.dim(0) {
        return Err(Error::shape("loss_and_grad", format!("{} labels for {} inputs", labels.len(), x.dim(0))));
    }
    let mut tape = Tape::new();
    let p = model.leaves(&mut tape);
    let xv = tape.constant(x);
    let dropout = match mask {
        Some(m) => {
            m.check_shapes(&model.dropout_shapes(labels.len()))?;
            Dropout::Mask(m)
        }
        None => Dropout::Off,
    };
    let g = model.graph(&mut tape, &p, xv, Norm::Batch, dropout)?;
    let loss = cross_entropy(&mut tape, g.logits, labels)?;
    Ok((tape.value(loss).item(), tape::grad(&tape, loss, &p)?))
}

pub(crate) fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.dim(1);
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(&logits.data()[i * k..(i + 1) * k]) == y)
        .count()
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn check_labels(set: &SegmentSet, n_classes: usize) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Empty("segment set"));
    }
    if let Some(&bad) = set.labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {n_classes} classes")));
    }
    Ok(())
}

/// Eval-mode mean cross-entropy and accuracy over a set.
pub fn evaluate(model: &DecoderModel, set: &SegmentSet) -> Result<(f64, f64)> {
    check_labels(set, model.config.n_classes)?;
    let (mut loss, mut correct) = (0.0, 0usize);
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, y) = set.batch(chunk);
        let logits = model.forward(&x, None)?;
        let k = logits.dim(1);
        for (i, &label) in y.iter().enumerate() {
            let row = &logits.data()[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
        correct += count_correct(&logits, &y);
    }
    Ok((loss / set.len() as f64, correct as f64 / set.len() as f64))
}

/// Shuffled mini-batch index lists for one epoch.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, shuffle: &mut RngStream) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    shuffle.shuffle(&mut order);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn train(
    mut model: DecoderModel,
    train_set: &SegmentSet,
    val_set: &SegmentSet,
    opts: TrainOptions,
    stream: &RngStream,
) -> Result<(DecoderModel, TrainHistory)> {
    check_labels(train_set, model.config.n_classes)?;
    check_labels(val_set, model.config.n_classes)?;
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    model.mode = Mode::Train;
    let adam = AdamConfig::with_lr(opts.lr);
    let mut opt = AdamState::new(&model.params);
    let mut shuffle = stream.derive(STREAM_SHUFFLE);
    let mut dropout = stream.derive(STREAM_DROPOUT);
    let mut history = TrainHistory::default();
    for epoch in 0..opts.epochs {
        let mut loss_sum = 0.0;
        for batch in epoch_batches(train_set.len(), opts.batch_size, &mut shuffle) {
            let (x, y) = train_set.batch(&batch);
            let (loss, _) = train_step(&mut model, &mut opt, adam, &x, &y, None, &mut dropout)?;
            loss_sum += loss * batch.len() as f64;
        }
        let (train_loss, train_accuracy) = evaluate(&model, train_set)?;
        let (val_loss, val_accuracy) = evaluate(&model, val_set)?;
        history.epochs.push(EpochRecord {
            epoch,
            batch_loss: loss_sum / train_set.len() as f64,
            train_loss,
            train_accuracy,
            val_loss,
            val_accuracy,
        });
    }
    model.mode = Mode::Eval;
    Ok((model, history))
}
