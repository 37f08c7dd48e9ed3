//! Browser bindings for the static demo page in `www/`.
//!
//! Three operations are exposed: the rectified-Gaussian moment curve used by
//! moment propagation, a preview of one corruption on a synthetic segment,
//! and a small session that trains a decoder and decomposes its predictive
//! uncertainty for a chosen segment.

use eeg_uq::adf::{relu_moments, InputNoise};
use eeg_uq::augment::{apply_corruption, CorruptionKind, CorruptionOp};
use eeg_uq::data::{segment, split, synth_generate, SegmentSet, SplitMode, SynthSpec};
use eeg_uq::decoder::{build_decoder, evaluate, train, DecoderConfig, DecoderModel, TrainOptions};
use eeg_uq::metrics::nll;
use eeg_uq::uncertainty::{estimate, UncertaintyConfig, VARIANCE_FLOOR};
use eeg_uq::RngStream;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Output mean and variance of `max(0, z)` for `z ~ N(mu, v)` at `n` evenly
/// spaced means in `[mu_lo, mu_hi]`, flattened as `mu, mean, var` triples.
#[wasm_bindgen]
pub fn relu_moment_curve(mu_lo: f64, mu_hi: f64, v: f64, n: usize) -> Result<Vec<f64>, JsError> {
    if n < 2 || !(mu_hi > mu_lo) || !(v >= 0.0) {
        return Err(JsError::new("need n >= 2, mu_hi > mu_lo and v >= 0"));
    }
    let mut out = Vec::with_capacity(3 * n);
    for i in 0..n {
        let mu = mu_lo + (mu_hi - mu_lo) * i as f64 / (n - 1) as f64;
        let (m, var) = relu_moments(mu, v);
        out.extend([mu, m, var]);
    }
    Ok(out)
}

/// Names accepted by [`corruption_preview`].
#[wasm_bindgen]
pub fn corruption_kinds() -> Vec<String> {
    CorruptionKind::ALL.iter().map(|k| k.name().to_string()).collect()
}

/// One channel of a synthetic segment before and after a corruption,
/// concatenated (`samples` values each).
#[wasm_bindgen]
pub fn corruption_preview(kind: &str, severity: u8, seed: u32) -> Result<Vec<f64>, JsError> {
    let kind: CorruptionKind = kind.parse().map_err(js_err)?;
    let op = CorruptionOp::new(kind, severity).map_err(js_err)?;
    let spec = SynthSpec::new(1, 4, 4, 256, 4, 0.05);
    let trials = synth_generate(&spec, &RngStream::new(seed as u64, 0)).map_err(js_err)?;
    let x = eeg_uq::Tensor::new(vec![spec.n_channels, spec.n_samples], trials.trial(0).to_vec()).map_err(js_err)?;
    let y = apply_corruption(op, &x, &mut RngStream::new(seed as u64, 1)).map_err(js_err)?;
    let ch = spec.signal_channels[0];
    let t = spec.n_samples;
    let mut out = x.data()[ch * t..(ch + 1) * t].to_vec();
    out.extend_from_slice(&y.data()[ch * t..(ch + 1) * t]);
    Ok(out)
}

#[derive(Serialize)]
struct Estimate<'a> {
    label: usize,
    predictive_mean: &'a [f64],
    data_variance: &'a [f64],
    model_variance: &'a [f64],
    total_variance: &'a [f64],
    nll: f64,
}

/// A small synthetic task and the decoder trained on it.
#[wasm_bindgen]
pub struct Session {
    seed: u64,
    train_set: SegmentSet,
    test_set: SegmentSet,
    model: DecoderModel,
    epochs: usize,
}

#[wasm_bindgen]
impl Session {
    /// Two subjects, eight channels (signal on 3 and 7), 64-sample windows,
    /// noise variance `u_true`.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, u_true: f64) -> Result<Session, JsError> {
        let seed = seed as u64;
        let spec = SynthSpec::new(2, 24, 8, 128, 4, u_true);
        let root = RngStream::new(seed, 0);
        let trials = synth_generate(&spec, &root.derive(1)).map_err(js_err)?;
        let seg = segment(&trials, 64, 32).map_err(js_err)?;
        let (train_set, test_set) = split(&seg, SplitMode::Intra, None, 0.75, &mut root.derive(2)).map_err(js_err)?;
        let model = build_decoder(DecoderConfig::compact(8, 64, 4), &root.derive(4)).map_err(js_err)?;
        Ok(Session { seed, train_set, test_set, model, epochs: 0 })
    }

    /// Train for `epochs` more passes; returns test accuracy.
    pub fn train(&mut self, epochs: usize) -> Result<f64, JsError> {
        let opts = TrainOptions { epochs, batch_size: 32, ..TrainOptions::default() };
        let stream = RngStream::new(self.seed, 5).derive(self.epochs as u64);
        let (model, _) = train(self.model.clone(), &self.train_set, &self.test_set, opts, &stream).map_err(js_err)?;
        self.model = model;
        self.epochs += epochs;
        Ok(evaluate(&self.model, &self.test_set).map_err(js_err)?.1)
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    pub fn test_len(&self) -> usize {
        self.test_set.len()
    }

    /// Uncertainty report for test segment `index` as JSON.
    pub fn estimate(&self, index: usize, u: f64, phi: f64, passes: usize) -> Result<String, JsError> {
        if index >= self.test_set.len() {
            return Err(JsError::new("segment index out of range"));
        }
        let cfg = UncertaintyConfig { n_passes: passes, drop_prob: phi, input_noise: InputNoise::Scalar(u), seed: self.seed };
        let (x, labels) = self.test_set.batch(&[index]);
        let mut reports = estimate(&self.model, &x, &cfg).map_err(js_err)?;
        let r = reports.remove(0);
        let y = labels[0];
        let out = Estimate {
            label: y,
            predictive_mean: &r.predictive_mean,
            data_variance: &r.data_variance,
            model_variance: &r.model_variance,
            total_variance: &r.total_variance,
            nll: nll(1.0, r.predictive_mean[y], r.probability_variance()[y].max(VARIANCE_FLOOR)).map_err(js_err)?,
        };
        serde_json::to_string(&out).map_err(js_err)
    }
}
