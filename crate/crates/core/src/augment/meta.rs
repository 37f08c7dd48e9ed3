//! Inner/outer training loop for the mixing controller.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::controller::{step_graph, StepVars};
use super::{apply_chain, build_chain, controller_step, mix, split_ops, AugVariant, AugmentConfig, ControllerState, CorruptionKind, CorruptionOp};
use crate::data::SegmentSet;
use crate::decoder::{
    check_labels, epoch_batches, train_step, DecoderModel, Dropout, Mode, Norm, STREAM_DROPOUT, STREAM_SHUFFLE,
};
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::RngStream;
use crate::tape::{self, cross_entropy, js_divergence_rows, BatchStats, Tape, Var};
use crate::tensor::Tensor;

const STREAM_OPS: u64 = 0x4f50;
const STREAM_CHAINS: u64 = 0x4348;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugEpoch {
    pub epoch: usize,
    /// Mean inner (or joint) loss over batches.
    pub train_loss: f64,
    /// Mean outer loss over batches; equals `train_loss` for the joint variant.
    pub meta_loss: f64,
    /// Mean original-signal weight chosen by the controller.
    pub mean_m: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AugHistory {
    pub epochs: Vec<AugEpoch>,
}

/// Controller input: block-3 pooled activations averaged over batch and time, `[1, F2]`.
pub fn embedding(model: &DecoderModel, x: &Tensor) -> Result<Tensor> {
    let f = model.features(x)?;
    let (b, c, l) = (f.dim(0), f.dim(1), f.dim(2) * f.dim(3));
    let mut out = vec![0.0; c];
    for bi in 0..b {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += f.data()[(bi * c + ch) * l..(bi * c + ch + 1) * l].iter().sum::<f64>();
        }
    }
    out.iter_mut().for_each(|v| *v /= (b * l) as f64);
    Tensor::new(vec![1, c], out)
}

/// `J` optimiser steps on the mixed batch (cross-entropy plus λ·JS against
/// the original batch). Only decoder parameters change.
#[allow(clippy::too_many_arguments)]
pub fn inner_update(
    model: &mut DecoderModel,
    opt: &mut AdamState,
    adam: AdamConfig,
    x_mixed: &Tensor,
    x_orig: &Tensor,
    labels: &[usize],
    lambda: f64,
    steps: usize,
    dropout: &mut RngStream,
) -> Result<f64> {
    if steps == 0 {
        return Err(Error::invalid("inner_steps must be >= 1"));
    }
    let mut loss = 0.0;
    for _ in 0..steps {
        loss = train_step(model, opt, adam, x_mixed, labels, Some((x_orig, lambda)), dropout)?.0;
    }
    Ok(loss)
}

/// `m · x_orig + (1 − m) · Σ w_i · chain_i` recorded on the tape.
fn mixed_on_tape(tape: &mut Tape, sv: &StepVars, x_orig: Var, chains: &[Var]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (i, &c) in chains.iter().enumerate() {
        let wi = tape.index(sv.w, i)?;
        let term = tape.mul_scalar(wi, c)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    let acc = acc.ok_or(Error::Empty("chain outputs"))?;
    let neg = tape.scale(sv.m, -1.0);
    let one_minus = tape.shift(neg, 1.0);
    let a = tape.mul_scalar(sv.m, x_orig)?;
    let b = tape.mul_scalar(one_minus, acc)?;
    tape.add(a, b)
}

/// Cross-entropy on `x` plus λ·JS between predictions on `x` and `x_orig`.
#[allow(clippy::too_many_arguments)]
fn consistency_loss(
    tape: &mut Tape,
    model: &DecoderModel,
    p: &[Var],
    x: Var,
    x_orig: Var,
    labels: &[usize],
    lambda: f64,
    dropout: Dropout,
) -> Result<(Var, Vec<BatchStats>)> {
    let b = tape.value(x).dim(0);
    let k = model.config.n_classes;
    if lambda > 0.0 {
        let both = tape.concat_rows(x, x_orig)?;
        let g = model.graph(tape, p, both, Norm::Batch, dropout)?;
        let flat = tape.reshape(g.logits, &[1, 2 * b * k])?;
        let first = tape.slice_cols(flat, 0, b * k)?;
        let second = tape.slice_cols(flat, b * k, b * k)?;
        let la = tape.reshape(first, &[b, k])?;
        let lo = tape.reshape(second, &[b, k])?;
        let ce = cross_entropy(tape, la, labels)?;
        let pa = tape.softmax(la);
        let po = tape.softmax(lo);
        let js = js_divergence_rows(tape, pa, po)?;
        let js = tape.scale(js, lambda);
        Ok((tape.add(ce, js)?, g.stats))
    } else {
        let g = model.graph(tape, p, x, Norm::Batch, dropout)?;
        Ok((cross_entropy(tape, g.logits, labels)?, g.stats))
    }
}

fn controller_vars(tape: &mut Tape, ctrl: &ControllerState, embedding: &Tensor) -> Result<(Vec<Var>, StepVars)> {
    let cp: Vec<Var> = ctrl.params.iter().map(|t| tape.leaf(t.clone())).collect();
    let emb = tape.constant(embedding.clone().reshape(&[1, ctrl.shape.embedding_dim])?);
    let h = tape.constant(ctrl.h.clone());
    let c = tape.constant(ctrl.c.clone());
    let sv = step_graph(tape, &cp, emb, h, c, ctrl.shape.width)?;
    Ok((cp, sv))
}

/// Outer loss and its gradient with respect to the controller parameters:
/// unseen-op chains mixed by a fresh controller decision from `(ctrl.h,
/// ctrl.c)`, evaluated by the decoder with frozen parameters and batch
/// statistics. First order: θ_J is a constant.
#[allow(clippy::too_many_arguments)]
pub fn meta_loss_grad(
    ctrl: &ControllerState,
    model: &DecoderModel,
    x_orig: &Tensor,
    labels: &[usize],
    unseen_outputs: &[Tensor],
    embedding: &Tensor,
    lambda: f64,
) -> Result<(f64, Vec<Tensor>)> {
    if unseen_outputs.len() != ctrl.shape.width {
        return Err(Error::shape("meta_update", format!("{} chains for width {}", unseen_outputs.len(), ctrl.shape.width)));
    }
    let mut tape = Tape::new();
    let (cp, sv) = controller_vars(&mut tape, ctrl, embedding)?;
    let xo = tape.constant(model.canonical_input(x_orig)?);
    let chains: Vec<Var> = unseen_outputs
        .iter()
        .map(|t| Ok(tape.constant(model.canonical_input(t)?)))
        .collect::<Result<_>>()?;
    let xh = mixed_on_tape(&mut tape, &sv, xo, &chains)?;
    let p = model.param_vars(&mut tape, false);
    let (loss, _) = consistency_loss(&mut tape, model, &p, xh, xo, labels, lambda, Dropout::Off)?;
    let value = tape.value(loss).item();
    Ok((value, tape::grad(&tape, loss, &cp)?))
}

/// One optimiser step of the controller on the outer loss. Returns the loss
/// before the update.
#[allow(clippy::too_many_arguments)]
pub fn meta_update(
    ctrl: &mut ControllerState,
    ctrl_opt: &mut AdamState,
    adam: AdamConfig,
    model: &DecoderModel,
    x_orig: &Tensor,
    labels: &[usize],
    unseen_outputs: &[Tensor],
    embedding: &Tensor,
    lambda: f64,
) -> Result<f64> {
    let (value, grads) = meta_loss_grad(ctrl, model, x_orig, labels, unseen_outputs, embedding, lambda)?;
    adam_step(&mut ctrl.params, &grads, ctrl_opt, adam)?;
    Ok(value)
}

/// Joint variant: one loss, decoder and controller updated together.
#[allow(clippy::too_many_arguments)]
fn joint_step(
    model: &mut DecoderModel,
    opt: &mut AdamState,
    adam: AdamConfig,
    ctrl: &mut ControllerState,
    ctrl_opt: &mut AdamState,
    ctrl_adam: AdamConfig,
    x_orig: &Tensor,
    labels: &[usize],
    outputs: &[Tensor],
    embedding: &Tensor,
    lambda: f64,
    dropout: &mut RngStream,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let (cp, sv) = controller_vars(&mut tape, ctrl, embedding)?;
    let xo = tape.constant(model.canonical_input(x_orig)?);
    let chains: Vec<Var> = outputs.iter().map(|t| Ok(tape.constant(model.canonical_input(t)?))).collect::<Result<_>>()?;
    let xh = mixed_on_tape(&mut tape, &sv, xo, &chains)?;
    let p = model.param_vars(&mut tape, true);
    let rate = model.config.dropout_rate_train;
    let (loss, stats) = consistency_loss(&mut tape, model, &p, xh, xo, labels, lambda, Dropout::Sample { stream: dropout, rate })?;
    let value = tape.value(loss).item();
    let m = tape.value(sv.m).item();
    let all: Vec<Var> = cp.iter().chain(&p).copied().collect();
    let grads = tape::grad(&tape, loss, &all)?;
    let (gc, gp) = grads.split_at(cp.len());
    ctrl.h = tape.value(sv.h).clone();
    ctrl.c = tape.value(sv.c).clone();
    model.update_running(&stats);
    adam_step(&mut model.params, gp, opt, adam)?;
    adam_step(&mut ctrl.params, gc, ctrl_opt, ctrl_adam)?;
    Ok((value, m))
}

fn chain_outputs(ops: &[CorruptionKind], cfg: &AugmentConfig, x: &Tensor, stream: &mut RngStream) -> Result<Vec<Tensor>> {
    (0..cfg.width)
        .map(|_| {
            let chain = build_chain(ops, cfg.depth, stream)?;
            apply_chain(&chain, x, stream)
        })
        .collect()
}

/// Train decoder and controller over `epochs` passes of `set`. Batch order
/// and decoder dropout use the same derived streams as plain training.
pub fn train_uncer(
    mut model: DecoderModel,
    mut ctrl: ControllerState,
    set: &SegmentSet,
    cfg: &AugmentConfig,
    epochs: usize,
    batch_size: usize,
    stream: &RngStream,
) -> Result<(DecoderModel, ControllerState, AugHistory)> {
    cfg.validate()?;
    check_labels(set, model.config.n_classes)?;
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    if ctrl.shape.width != cfg.width || ctrl.shape.embedding_dim != model.config.pointwise_filters {
        return Err(Error::shape("train_uncer", "controller shape does not match config and decoder"));
    }
    model.mode = Mode::Train;
    let adam = AdamConfig::with_lr(cfg.inner_lr);
    let ctrl_adam = AdamConfig::with_lr(cfg.meta_lr);
    let mut opt = AdamState::new(&model.params);
    let mut ctrl_opt = AdamState::new(&ctrl.params);
    let mut shuffle = stream.derive(STREAM_SHUFFLE);
    let mut dropout = stream.derive(STREAM_DROPOUT);
    let mut op_stream = stream.derive(STREAM_OPS);
    let mut chain_stream = stream.derive(STREAM_CHAINS);
    let mut history = AugHistory::default();
    for epoch in 0..epochs {
        ctrl.reset();
        let (mut loss_sum, mut meta_sum, mut m_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for batch in epoch_batches(set.len(), batch_size, &mut shuffle) {
            let (x, y) = set.batch(&batch);
            let emb = embedding(&model, &x)?;
            match cfg.variant {
                AugVariant::Meta => {
                    let (seen, unseen) = split_ops(&cfg.ops, cfg.seen_count, &mut op_stream)?;
                    let (decision, next) = controller_step(&ctrl, &emb)?;
                    let outs = chain_outputs(&seen, cfg, &x, &mut chain_stream)?;
                    let x_mix = mix(&x, &outs, &decision)?;
                    let loss = inner_update(&mut model, &mut opt, adam, &x_mix, &x, &y, cfg.lambda, cfg.inner_steps, &mut dropout)?;
                    let unseen_outs = chain_outputs(&unseen, cfg, &x, &mut chain_stream)?;
                    let meta = meta_update(&mut ctrl, &mut ctrl_opt, ctrl_adam, &model, &x, &y, &unseen_outs, &emb, cfg.lambda)?;
                    ctrl.h = next.h;
                    ctrl.c = next.c;
                    loss_sum += loss;
                    meta_sum += meta;
                    m_sum += decision.m;
                }
                AugVariant::Joint => {
                    let outs = chain_outputs(&cfg.ops, cfg, &x, &mut chain_stream)?;
                    let (loss, m) = joint_step(
                        &mut model, &mut opt, adam, &mut ctrl, &mut ctrl_opt, ctrl_adam, &x, &y, &outs, &emb, cfg.lambda, &mut dropout,
                    )?;
                    loss_sum += loss;
                    meta_sum += loss;
                    m_sum += m;
                }
            }
            batches += 1;
        }
        let n = batches.max(1) as f64;
        history.epochs.push(AugEpoch { epoch, train_loss: loss_sum / n, meta_loss: meta_sum / n, mean_m: m_sum / n });
    }
    model.mode = Mode::Eval;
    Ok((model, ctrl, history))
}

/// Corrupted copies of `set`, one per (kind, severity 1..=5), keyed `kind@severity`.
pub fn corrupted_suite(set: &SegmentSet, kinds: &[CorruptionKind], stream: &RngStream) -> Result<BTreeMap<String, SegmentSet>> {
    let mut out = BTreeMap::new();
    for (ki, &kind) in kinds.iter().enumerate() {
        for s in 1..=5u8 {
            let mut st = stream.derive((ki * 8 + s as usize) as u64);
            let op = CorruptionOp::new(kind, s)?;
            let mut data = Vec::with_capacity(set.segments.len());
            for i in 0..set.len() {
                data.extend_from_slice(super::apply_corruption(op, &set.segment(i), &mut st)?.data());
            }
            out.insert(format!("{kind}@{s}"), set.with_segments(Tensor::new(set.segments.shape().to_vec(), data)?)?);
        }
    }
    Ok(out)
}

/// Each segment corrupted by one kind drawn from `kinds` at a random severity.
pub fn corrupt_each(set: &SegmentSet, kinds: &[CorruptionKind], stream: &RngStream) -> Result<SegmentSet> {
    if kinds.is_empty() {
        return Err(Error::Empty("corruption kinds"));
    }
    let mut st = stream.derive(0x4541);
    let mut data = Vec::with_capacity(set.segments.len());
    for i in 0..set.len() {
        let op = CorruptionOp::new(kinds[st.below(kinds.len())], 1 + st.below(5) as u8)?;
        data.extend_from_slice(super::apply_corruption(op, &set.segment(i), &mut st)?.data());
    }
    set.with_segments(Tensor::new(set.segments.shape().to_vec(), data)?)
}
