//! Monte-Carlo dropout over moment-propagation passes, the total-variance
//! decomposition, and grid searches for the dropout rate and input noise.

use serde::{Deserialize, Serialize};

use crate::adf::{adf_prefix, adf_suffix, lift, DropoutMask, InputNoise, MomentTensor};
use crate::data::SegmentSet;
use crate::decoder::DecoderModel;
use crate::error::{Error, Result};
use crate::kernels::softmax_in_place;
use crate::metrics::nll;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Lower bound on the probability-space variance fed to the NLL.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintyConfig {
    /// Number of dropout passes N.
    pub n_passes: usize,
    /// Drop probability φ; each hidden unit is kept with probability `1 - φ`.
    pub drop_prob: f64,
    pub input_noise: InputNoise,
    pub seed: u64,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        Self { n_passes: 200, drop_prob: 0.1, input_noise: InputNoise::Scalar(0.1), seed: 0 }
    }
}

impl UncertaintyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_passes == 0 {
            return Err(Error::invalid("n_passes must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::invalid(format!("drop probability {} outside [0, 1)", self.drop_prob)));
        }
        self.input_noise.validate()
    }

    pub fn keep_prob(&self) -> f64 {
        1.0 - self.drop_prob
    }
}

/// Predictive moments of one example. Variances are in logit space; see
/// [`UncertaintyReport::probability_variance`] for class probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    /// softmax of the mean logits.
    pub predictive_mean: Vec<f64>,
    pub data_variance: Vec<f64>,
    pub model_variance: Vec<f64>,
    pub total_variance: Vec<f64>,
    pub n_passes: usize,
    pub phi: f64,
    pub u: f64,
    /// NLL of the true class, when a label was supplied.
    pub nll: Option<f64>,
    #[serde(skip)]
    pub mean_logits: Vec<f64>,
}

impl UncertaintyReport {
    /// Delta-method variance of each class probability: the diagonal of
    /// `J diag(total) Jᵀ` with `J` the softmax Jacobian at the mean logits.
    pub fn probability_variance(&self) -> Vec<f64> {
        let p = &self.predictive_mean;
        (0..p.len())
            .map(|k| {
                p.iter()
                    .zip(&self.total_variance)
                    .enumerate()
                    .map(|(j, (&pj, &v))| {
                        let jac = p[k] * (if j == k { 1.0 } else { 0.0 } - pj);
                        jac * jac * v
                    })
                    .sum()
            })
            .collect()
    }

    /// Gaussian NLL of a one-hot target on the true-class probability.
    pub fn true_class_nll(&self, label: usize) -> Result<f64> {
        let v = self.probability_variance()[label].max(VARIANCE_FLOOR);
        nll(1.0, self.predictive_mean[label], v)
    }
}

/// One example's pass moments: `(mu_n, v_n)` per pass.
pub fn decompose(samples: &[(Vec<f64>, Vec<f64>)]) -> Result<UncertaintyReport> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::Empty("dropout samples"));
    }
    let k = samples[0].0.len();
    if samples.iter().any(|(m, v)| m.len() != k || v.len() != k) {
        return Err(Error::shape("decompose", "samples disagree on class count"));
    }
    // Offsets from the first pass keep identical passes at exactly zero
    // model variance.
    let origin = &samples[0].0;
    let mut shift = vec![0.0; k];
    let mut data = vec![0.0; k];
    for (m, v) in samples {
        for j in 0..k {
            shift[j] += m[j] - origin[j];
            data[j] += v[j];
        }
    }
    shift.iter_mut().for_each(|x| *x /= n as f64);
    data.iter_mut().for_each(|x| *x /= n as f64);
    let mut model = vec![0.0; k];
    for (m, _) in samples {
        for j in 0..k {
            model[j] += (m[j] - origin[j] - shift[j]).powi(2);
        }
    }
    model.iter_mut().for_each(|x| *x /= n as f64);
    let mean: Vec<f64> = origin.iter().zip(&shift).map(|(o, s)| o + s).collect();
    let total: Vec<f64> = data.iter().zip(&model).map(|(a, b)| a + b).collect();
    let mut probs = mean.clone();
    softmax_in_place(&mut probs);
    Ok(UncertaintyReport {
        predictive_mean: probs,
        data_variance: data,
        model_variance: model,
        total_variance: total,
        n_passes: n,
        phi: 0.0,
        u: 0.0,
        nll: None,
        mean_logits: mean,
    })
}

/// Per-example reports from batched pass moments (`[b, classes]` each).
pub fn decompose_batch(samples: &[MomentTensor]) -> Result<Vec<UncertaintyReport>> {
    let first = samples.first().ok_or(Error::Empty("dropout samples"))?;
    let (b, k) = (first.shape()[0], first.shape()[1]);
    (0..b)
        .map(|i| {
            let per: Vec<(Vec<f64>, Vec<f64>)> = samples
                .iter()
                .map(|s| (s.mean.data()[i * k..(i + 1) * k].to_vec(), s.var.data()[i * k..(i + 1) * k].to_vec()))
                .collect();
            decompose(&per)
        })
        .collect()
}

/// Dropout masks for every pass; pass `n` draws from `RngStream(seed, n)`.
fn pass_masks(model: &DecoderModel, b: usize, cfg: &UncertaintyConfig) -> Result<Vec<Option<DropoutMask>>> {
    (0..cfg.n_passes)
        .map(|n| {
            if cfg.drop_prob == 0.0 {
                return Ok(None);
            }
            let mut s = RngStream::new(cfg.seed, n as u64);
            DropoutMask::sample(model, b, cfg.keep_prob(), &mut s).map(Some)
        })
        .collect()
}

/// Logit moments of `x` (one segment or a decoder batch) for each of the N passes.
pub fn mc_dropout_sample(model: &DecoderModel, x: &Tensor, cfg: &UncertaintyConfig) -> Result<Vec<MomentTensor>> {
    cfg.validate()?;
    let x = if x.ndim() == 2 { x.clone().reshape(&[1, 1, x.dim(0), x.dim(1)])? } else { model.canonical_input(x)? };
    let m0 = lift(&x, &cfg.input_noise)?;
    let pre = adf_prefix(model, &m0)?;
    let b = x.dim(0);
    pass_masks(model, b, cfg)?.iter().map(|mask| adf_suffix(model, &pre, mask.as_ref())).collect()
}

fn finish(mut reports: Vec<UncertaintyReport>, cfg: &UncertaintyConfig, labels: Option<&[usize]>) -> Result<Vec<UncertaintyReport>> {
    for (i, r) in reports.iter_mut().enumerate() {
        r.phi = cfg.drop_prob;
        r.u = cfg.input_noise.magnitude();
        if let Some(y) = labels {
            r.nll = Some(r.true_class_nll(y[i])?);
        }
    }
    Ok(reports)
}

/// Reports for each example of `x`.
pub fn estimate(model: &DecoderModel, x: &Tensor, cfg: &UncertaintyConfig) -> Result<Vec<UncertaintyReport>> {
    finish(decompose_batch(&mc_dropout_sample(model, x, cfg)?)?, cfg, None)
}

/// Reports for every segment of a set, with the true-class NLL filled in.
pub fn estimate_set(model: &DecoderModel, set: &SegmentSet, cfg: &UncertaintyConfig) -> Result<Vec<UncertaintyReport>> {
    if set.is_empty() {
        return Err(Error::Empty("segment set"));
    }
    let (x, y) = set.all();
    finish(decompose_batch(&mc_dropout_sample(model, &x, cfg)?)?, cfg, Some(&y))
}

/// Mean true-class NLL over a set.
pub fn mean_nll(model: &DecoderModel, set: &SegmentSet, cfg: &UncertaintyConfig) -> Result<f64> {
    let reports = estimate_set(model, set, cfg)?;
    Ok(reports.iter().map(|r| r.nll.unwrap()).sum::<f64>() / reports.len() as f64)
}

/// One row of a grid-search table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub value: f64,
    pub nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: f64,
    pub rows: Vec<GridRow>,
}

/// Argmin of the table; ties go to the smaller value.
fn pick(rows: Vec<GridRow>) -> GridResult {
    let mut best = &rows[0];
    for r in &rows[1..] {
        if r.nll < best.nll || (r.nll == best.nll && r.value < best.value) {
            best = r;
        }
    }
    GridResult { best: best.value, rows: rows.clone() }
}

pub const DEFAULT_NOISE_GRID: [f64; 5] = [0.02, 0.05, 0.1, 0.2, 0.3];
pub const FINE_NOISE_GRID: [f64; 5] = [0.002, 0.005, 0.01, 0.02, 0.03];

/// Scan scalar input-noise values with everything else from `cfg`.
pub fn gridsearch_input_noise(model: &DecoderModel, val_set: &SegmentSet, grid: &[f64], cfg: &UncertaintyConfig) -> Result<GridResult> {
    if grid.is_empty() {
        return Err(Error::Empty("noise grid"));
    }
    if let Some(u) = grid.iter().find(|u| !(**u >= 0.0)) {
        return Err(Error::invalid(format!("noise grid value {u} is negative")));
    }
    let rows = grid
        .iter()
        .map(|&u| {
            let c = UncertaintyConfig { input_noise: InputNoise::Scalar(u), ..cfg.clone() };
            Ok(GridRow { value: u, nll: mean_nll(model, val_set, &c)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(pick(rows))
}

/// `n` log-spaced drop probabilities over `[1e-3, 0.999]`.
pub fn dropout_grid(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::invalid("dropout grid needs at least 2 points"));
    }
    let (lo, hi) = (1e-3f64.ln(), 0.999f64.ln());
    Ok((0..n).map(|i| (lo + (hi - lo) * i as f64 / (n - 1) as f64).exp()).collect())
}

pub fn gridsearch_dropout(model: &DecoderModel, val_set: &SegmentSet, n_points: usize, cfg: &UncertaintyConfig) -> Result<GridResult> {
    let rows = dropout_grid(n_points)?
        .into_iter()
        .map(|phi| {
            let c = UncertaintyConfig { drop_prob: phi, ..cfg.clone() };
            Ok(GridRow { value: phi, nll: mean_nll(model, val_set, &c)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(pick(rows))
}
