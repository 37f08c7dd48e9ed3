//! Recurrent mixing controller: one LSTM cell plus a linear head that emits
//! chain weights (softmax) and an original-signal weight (sigmoid).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{Checkpoint, SectionTag};
use crate::kernels::{sigmoid, softmax_in_place};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const CONTROLLER_PARAM_NAMES: [&str; 5] = ["lstm.w_input", "lstm.w_hidden", "lstm.bias", "head.weight", "head.bias"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControllerShape {
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    /// Number of augmentation chains w.
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub shape: ControllerShape,
    /// `[E, 4H]`, `[H, 4H]`, `[4H]`, `[H, w + 1]`, `[w + 1]`; gate order i, f, g, o.
    pub params: Vec<Tensor>,
    /// `[1, H]`
    pub h: Tensor,
    pub c: Tensor,
}

/// Chain weights and the original-signal weight for one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixDecision {
    pub w: Vec<f64>,
    pub m: f64,
}

impl ControllerState {
    /// LSTM weights uniform in ±1/√H, zero biases, zero output head (so the
    /// first decision is uniform weights and m = 0.5).
    pub fn new(shape: ControllerShape, stream: &RngStream) -> Result<Self> {
        let ControllerShape { embedding_dim: e, hidden_dim: h, width } = shape;
        if e == 0 || h == 0 || width == 0 {
            return Err(Error::invalid("controller dimensions must be positive"));
        }
        let mut s = stream.derive(0x4c53);
        let bound = 1.0 / (h as f64).sqrt();
        let mut uniform = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| bound * (2.0 * s.uniform() - 1.0)).collect()).unwrap()
        };
        let params = vec![
            uniform(&[e, 4 * h]),
            uniform(&[h, 4 * h]),
            Tensor::zeros(&[4 * h]),
            Tensor::zeros(&[h, width + 1]),
            Tensor::zeros(&[width + 1]),
        ];
        Ok(Self { shape, params, h: Tensor::zeros(&[1, h]), c: Tensor::zeros(&[1, h]) })
    }

    pub fn reset(&mut self) {
        self.h = Tensor::zeros(&[1, self.shape.hidden_dim]);
        self.c = Tensor::zeros(&[1, self.shape.hidden_dim]);
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let config = crate::decoder::json_pairs(&self.shape)?;
        let tensors = CONTROLLER_PARAM_NAMES.iter().zip(&self.params).map(|(n, t)| (n.to_string(), t.clone())).collect();
        Ok(Checkpoint { tag: SectionTag::Controller, config, tensors })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.tag != SectionTag::Controller {
            return Err(Error::Format("checkpoint does not hold a controller".into()));
        }
        let shape: ControllerShape = crate::decoder::from_json_pairs(&ck.config)?;
        let mut state = Self::new(shape, &RngStream::new(0, 0))?;
        for (i, name) in CONTROLLER_PARAM_NAMES.iter().enumerate() {
            let t = ck.tensor(name)?;
            t.expect_shape(state.params[i].shape(), "controller checkpoint")?;
            state.params[i] = t.clone();
        }
        Ok(state)
    }
}

/// Vars produced by one differentiable controller step.
pub struct StepVars {
    /// `[1, w]`
    pub w: Var,
    /// `[1, 1]`
    pub m: Var,
    pub h: Var,
    pub c: Var,
}

/// Record one LSTM step on `tape`. `p` holds the five parameter vars.
pub fn step_graph(tape: &mut Tape, p: &[Var], embedding: Var, h: Var, c: Var, width: usize) -> Result<StepVars> {
    let hd = tape.value(h).dim(1);
    let xi = tape.matmul(embedding, p[0])?;
    let hh = tape.matmul(h, p[1])?;
    let sum = tape.add(xi, hh)?;
    let gates = tape.add_row_bias(sum, p[2])?;
    let gi = tape.slice_cols(gates, 0, hd)?;
    let gf = tape.slice_cols(gates, hd, hd)?;
    let gg = tape.slice_cols(gates, 2 * hd, hd)?;
    let go = tape.slice_cols(gates, 3 * hd, hd)?;
    let i = tape.sigmoid(gi);
    let f = tape.sigmoid(gf);
    let g = tape.tanh(gg);
    let o = tape.sigmoid(go);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_new = tape.add(fc, ig)?;
    let tc = tape.tanh(c_new);
    let h_new = tape.mul(o, tc)?;
    let z = tape.matmul(h_new, p[3])?;
    let z = tape.add_row_bias(z, p[4])?;
    let zw = tape.slice_cols(z, 0, width)?;
    let zm = tape.slice_cols(z, width, 1)?;
    let w = tape.softmax(zw);
    let m = tape.sigmoid(zm);
    Ok(StepVars { w, m, h: h_new, c: c_new })
}

/// One controller step on a `[1, E]` embedding; returns the decision and the
/// state with updated `h`, `c`.
pub fn controller_step(state: &ControllerState, embedding: &Tensor) -> Result<(MixDecision, ControllerState)> {
    let e = state.shape.embedding_dim;
    if embedding.len() != e {
        return Err(Error::shape("controller_step", format!("embedding has {} entries, expected {e}", embedding.len())));
    }
    let mut tape = Tape::new();
    let p: Vec<Var> = state.params.iter().map(|t| tape.leaf(t.clone())).collect();
    let emb = tape.leaf(embedding.clone().reshape(&[1, e])?);
    let h = tape.leaf(state.h.clone());
    let c = tape.leaf(state.c.clone());
    let v = step_graph(&mut tape, &p, emb, h, c, state.shape.width)?;
    let decision = MixDecision { w: tape.value(v.w).data().to_vec(), m: tape.value(v.m).item() };
    let next = ControllerState { h: tape.value(v.h).clone(), c: tape.value(v.c).clone(), ..state.clone() };
    Ok((decision, next))
}

/// Plain (tape-free) head evaluation, handy for checking `controller_step`.
pub fn head_decision(h: &[f64], weight: &Tensor, bias: &[f64], width: usize) -> MixDecision {
    let cols = width + 1;
    let z: Vec<f64> = (0..cols).map(|j| bias[j] + h.iter().enumerate().map(|(i, hv)| hv * weight.data()[i * cols + j]).sum::<f64>()).collect();
    let mut w = z[..width].to_vec();
    softmax_in_place(&mut w);
    MixDecision { w, m: sigmoid(z[width]) }
}
