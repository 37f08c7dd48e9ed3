//! Augmentation for uncertainty reduction: corruption chains mixed by a
//! recurrent controller, trained with an inner (seen operations) and outer
//! (unseen operations) loop.

mod controller;
mod corruption;
mod meta;

use serde::{Deserialize, Serialize};

pub use controller::{controller_step, head_decision, step_graph, ControllerShape, ControllerState, MixDecision, StepVars, CONTROLLER_PARAM_NAMES};
pub use corruption::{apply_chain, apply_corruption, gaussian_sigma, intensity_step, CorruptionKind, CorruptionOp};
pub use meta::{corrupt_each, corrupted_suite, embedding, inner_update, meta_loss_grad, meta_update, train_uncer, AugEpoch, AugHistory};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugVariant {
    /// Seen/unseen split, inner step on θ, outer step on the controller.
    Meta,
    /// No split; one combined loss updates θ and the controller together.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Chains per mix (w).
    pub width: usize,
    /// Maximum ops per chain (d).
    pub depth: usize,
    /// Inner gradient steps per batch (J).
    pub inner_steps: usize,
    /// Inner learning rate (α).
    pub inner_lr: f64,
    /// Controller learning rate.
    pub meta_lr: f64,
    /// Consistency weight (λ).
    pub lambda: f64,
    pub seen_count: usize,
    pub hidden_dim: usize,
    pub ops: Vec<CorruptionKind>,
    pub variant: AugVariant,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            width: 3,
            depth: 3,
            inner_steps: 1,
            inner_lr: 1e-3,
            meta_lr: 1e-3,
            lambda: 15.0,
            seen_count: 6,
            hidden_dim: 16,
            ops: CorruptionKind::ALL.to_vec(),
            variant: AugVariant::Meta,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.inner_steps == 0 || self.hidden_dim == 0 {
            return Err(Error::invalid("width, depth, inner_steps and hidden_dim must be >= 1"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(self.inner_lr >= 0.0 && self.meta_lr >= 0.0) {
            return Err(Error::invalid("learning rates must be >= 0"));
        }
        if self.variant == AugVariant::Meta && (self.seen_count == 0 || self.seen_count >= self.ops.len()) {
            return Err(Error::invalid(format!(
                "seen_count {} must lie in [1, {})",
                self.seen_count,
                self.ops.len()
            )));
        }
        if self.ops.is_empty() {
            return Err(Error::Empty("corruption op set"));
        }
        Ok(())
    }
}

/// Random disjoint partition into `seen_count` seen ops and the rest.
pub fn split_ops(all_ops: &[CorruptionKind], seen_count: usize, stream: &mut RngStream) -> Result<(Vec<CorruptionKind>, Vec<CorruptionKind>)> {
    if seen_count == 0 || seen_count >= all_ops.len() {
        return Err(Error::invalid(format!("seen_count {seen_count} must lie in [1, {})", all_ops.len())));
    }
    let mut ops = all_ops.to_vec();
    stream.shuffle(&mut ops);
    let unseen = ops.split_off(seen_count);
    Ok((ops, unseen))
}

/// Chain of 1..=depth ops drawn with replacement from `ops`, each with a
/// severity uniform in 1..=5.
pub fn build_chain(ops: &[CorruptionKind], depth: usize, stream: &mut RngStream) -> Result<Vec<CorruptionOp>> {
    if ops.is_empty() {
        return Err(Error::Empty("op set for chain"));
    }
    if depth == 0 {
        return Err(Error::invalid("chain depth must be >= 1"));
    }
    let len = 1 + stream.below(depth);
    (0..len)
        .map(|_| {
            let kind = ops[stream.below(ops.len())];
            CorruptionOp::new(kind, 1 + stream.below(5) as u8)
        })
        .collect()
}

/// `m · x_orig + (1 − m) · Σ w_i · chain_i`, clamped element-wise to the
/// range spanned by the inputs so the result stays in their convex hull.
pub fn mix(x_orig: &Tensor, chain_outputs: &[Tensor], decision: &MixDecision) -> Result<Tensor> {
    if chain_outputs.len() != decision.w.len() {
        return Err(Error::shape("mix", format!("{} chain outputs for {} weights", chain_outputs.len(), decision.w.len())));
    }
    for c in chain_outputs {
        c.expect_shape(x_orig.shape(), "mix")?;
    }
    let m = decision.m;
    let out = (0..x_orig.len())
        .map(|i| {
            let xo = x_orig.data()[i];
            let (mut lo, mut hi) = (xo, xo);
            let mut acc = 0.0;
            for (c, &w) in chain_outputs.iter().zip(&decision.w) {
                let v = c.data()[i];
                acc += w * v;
                lo = lo.min(v);
                hi = hi.max(v);
            }
            (m * xo + (1.0 - m) * acc).clamp(lo, hi)
        })
        .collect();
    Tensor::new(x_orig.shape().to_vec(), out)
}

/// Jensen-Shannon divergence of two distributions, natural log, `0 log 0 = 0`.
pub fn js_consistency(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::shape("js_consistency", format!("{} vs {} entries", p.len(), q.len())));
    }
    for d in [p, q] {
        let s: f64 = d.iter().sum();
        if d.iter().any(|&v| !(v >= 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("js_consistency needs probability vectors"));
        }
    }
    let kl = |a: &[f64], mid: &[f64]| -> f64 {
        a.iter().zip(mid).filter(|(&x, _)| x > 0.0).map(|(&x, &m)| x * (x / m).ln()).sum()
    };
    let mid: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok((0.5 * (kl(p, &mid) + kl(q, &mid))).clamp(0.0, std::f64::consts::LN_2))
}
