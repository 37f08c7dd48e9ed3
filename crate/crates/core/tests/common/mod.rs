#![allow(dead_code)]

use eeg_uq::config::ExperimentConfig;
use eeg_uq::data::{segment, split, synth_generate, SegmentSet, SplitMode, SynthSpec};
use eeg_uq::decoder::{build_decoder, train, DecoderConfig, DecoderModel, TrainOptions};
use eeg_uq::rng::normal_sample;
use eeg_uq::tape::{grad, Tape, Var};
use eeg_uq::{RngStream, Tensor};

/// Central differences of `f` around `x`, one coordinate at a time.
pub fn numeric_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.clone();
    for i in 0..x.len() {
        let v = x.data()[i];
        xp.data_mut()[i] = v + h;
        let up = f(&xp);
        xp.data_mut()[i] = v - h;
        let down = f(&xp);
        xp.data_mut()[i] = v;
        g[i] = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), g).unwrap()
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let norm = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff = a.sub(b).unwrap();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Worst relative error, and the input it occurred at, between the tape
/// gradient of `sum(r ∘ f(inputs))` for a fixed random `r` and central
/// differences with step 1e-4.
pub fn tape_fd_error(name: &str, inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> (f64, usize) {
    let mut s = RngStream::new(77, name.len() as u64);
    let probe_shape = {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
        let out = build(&mut t, &vars);
        t.value(out).shape().to_vec()
    };
    let r = uniform_tensor(&mut s, &probe_shape, 0.5, 1.5);
    let loss_of = |vals: &[Tensor]| {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|x| t.leaf(x.clone())).collect();
        let out = build(&mut t, &vars);
        let w = t.mul_const(out, &r).unwrap();
        let l = t.sum(w);
        (t, vars, l)
    };
    let (t, vars, l) = loss_of(inputs);
    let analytic = grad(&t, l, &vars).unwrap();
    let mut worst = (0.0, 0);
    for i in 0..inputs.len() {
        let numeric = numeric_grad(&inputs[i], 1e-4, |xi| {
            let mut vals = inputs.to_vec();
            vals[i] = xi.clone();
            let (t, _, l) = loss_of(&vals);
            t.value(l).item()
        });
        let e = rel_err(&analytic[i], &numeric);
        if e > worst.0 {
            worst = (e, i);
        }
    }
    worst
}

pub fn uniform_tensor(stream: &mut RngStream, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| lo + (hi - lo) * stream.uniform()).collect()).unwrap()
}

pub fn gaussian(stream: &mut RngStream, shape: &[usize]) -> Tensor {
    normal_sample(stream, shape, 0.0, 1.0).unwrap()
}

/// Running first and second moments per element, with the standard error of
/// each.
pub struct Moments {
    n: usize,
    sum: Vec<f64>,
    sum2: Vec<f64>,
    sum3: Vec<f64>,
    sum4: Vec<f64>,
}

impl Moments {
    pub fn new(len: usize) -> Self {
        Self { n: 0, sum: vec![0.0; len], sum2: vec![0.0; len], sum3: vec![0.0; len], sum4: vec![0.0; len] }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.n += 1;
        for (i, &v) in x.iter().enumerate() {
            self.sum[i] += v;
            self.sum2[i] += v * v;
            self.sum3[i] += v * v * v;
            self.sum4[i] += v * v * v * v;
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        self.sum[i] / self.n as f64
    }

    pub fn var(&self, i: usize) -> f64 {
        let n = self.n as f64;
        let m = self.mean(i);
        (self.sum2[i] / n - m * m) * n / (n - 1.0)
    }

    pub fn mean_se(&self, i: usize) -> f64 {
        (self.var(i) / self.n as f64).sqrt()
    }

    /// Standard error of the sample variance from the fourth central moment.
    pub fn var_se(&self, i: usize) -> f64 {
        let n = self.n as f64;
        let m = self.mean(i);
        let (e2, e3, e4) = (self.sum2[i] / n, self.sum3[i] / n, self.sum4[i] / n);
        let mu4 = e4 - 4.0 * m * e3 + 6.0 * m * m * e2 - 3.0 * m.powi(4);
        let s2 = e2 - m * m;
        ((mu4 - s2 * s2).max(0.0) / n).sqrt()
    }

    pub fn count(&self) -> usize {
        self.n
    }
}

/// Synthetic task with the experiment defaults, split into train/val/test.
pub struct Task {
    pub train: SegmentSet,
    pub val: SegmentSet,
    pub test: SegmentSet,
    pub decoder: DecoderConfig,
}

pub fn task(spec: &SynthSpec, seed: u64, window: usize, stride: usize) -> Task {
    let root = RngStream::new(seed, 0);
    let trials = synth_generate(spec, &root.derive(1)).unwrap();
    let seg = segment(&trials, window, stride).unwrap();
    let (train_all, test) = split(&seg, SplitMode::Intra, None, 0.8, &mut root.derive(2)).unwrap();
    let (train, val) = split(&train_all, SplitMode::Intra, None, 0.8, &mut root.derive(3)).unwrap();
    let decoder = ExperimentConfig::default().decoder_for(seg.n_channels(), window, seg.n_classes).unwrap();
    Task { train, val, test, decoder }
}

pub fn trained(task: &Task, seed: u64, epochs: usize) -> DecoderModel {
    let root = RngStream::new(seed, 0);
    let model = build_decoder(task.decoder.clone(), &root.derive(4)).unwrap();
    train(model, &task.train, &task.val, TrainOptions { epochs, ..TrainOptions::default() }, &root.derive(5)).unwrap().0
}

/// Log power of every channel at every class frequency, one row per segment.
pub fn band_power_features(set: &SegmentSet, freqs: &[f64], sample_rate: f64) -> Vec<Vec<f64>> {
    let (c, t) = (set.n_channels(), set.window);
    (0..set.len())
        .map(|i| {
            let seg = set.segment(i);
            let mut row = Vec::with_capacity(c * freqs.len());
            for ch in 0..c {
                let x = &seg.data()[ch * t..(ch + 1) * t];
                for &f in freqs {
                    let (mut re, mut im) = (0.0, 0.0);
                    for (s, v) in x.iter().enumerate() {
                        let a = 2.0 * std::f64::consts::PI * f * s as f64 / sample_rate;
                        re += v * a.cos();
                        im += v * a.sin();
                    }
                    row.push(((re * re + im * im) / t as f64 + 1e-9).ln());
                }
            }
            row
        })
        .collect()
}

/// Multinomial logistic regression on standardised band-power features,
/// fitted by full-batch gradient descent. Returns test accuracy.
pub fn band_power_oracle(train: &SegmentSet, test: &SegmentSet, freqs: &[f64], sample_rate: f64) -> f64 {
    let xs = band_power_features(train, freqs, sample_rate);
    let xt = band_power_features(test, freqs, sample_rate);
    let d = xs[0].len();
    let k = train.n_classes;
    let mut mu = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for r in &xs {
        for j in 0..d {
            mu[j] += r[j] / xs.len() as f64;
        }
    }
    for r in &xs {
        for j in 0..d {
            sd[j] += (r[j] - mu[j]).powi(2) / xs.len() as f64;
        }
    }
    let norm = |r: &[f64]| -> Vec<f64> { (0..d).map(|j| (r[j] - mu[j]) / sd[j].sqrt().max(1e-12)).collect() };
    let xs: Vec<Vec<f64>> = xs.iter().map(|r| norm(r)).collect();
    let xt: Vec<Vec<f64>> = xt.iter().map(|r| norm(r)).collect();
    let mut w = vec![vec![0.0; d + 1]; k];
    let scores = |w: &[Vec<f64>], r: &[f64]| -> Vec<f64> {
        w.iter().map(|wk| wk[d] + r.iter().zip(wk).map(|(a, b)| a * b).sum::<f64>()).collect()
    };
    for _ in 0..500 {
        let mut g = vec![vec![0.0; d + 1]; k];
        for (r, &y) in xs.iter().zip(&train.labels) {
            let mut p = scores(&w, r);
            let m = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            p.iter_mut().for_each(|v| *v = (*v - m).exp());
            let z: f64 = p.iter().sum();
            for c in 0..k {
                let e = p[c] / z - if c == y { 1.0 } else { 0.0 };
                for j in 0..d {
                    g[c][j] += e * r[j];
                }
                g[c][d] += e;
            }
        }
        for c in 0..k {
            for j in 0..=d {
                w[c][j] -= 0.5 * g[c][j] / xs.len() as f64;
            }
        }
    }
    let correct = xt
        .iter()
        .zip(&test.labels)
        .filter(|(r, &y)| {
            let s = scores(&w, r);
            eeg_uq::decoder::argmax(&s) == y
        })
        .count();
    correct as f64 / xt.len() as f64
}

/// Eval-mode decoder forward for one example, written independently of the
/// library. The temporal conv, first batch norm and depthwise conv are
/// linear, so channels are mixed first and the temporal kernel applied after.
pub struct FastForward {
    ch: usize,
    t: usize,
    k: usize,
    left: usize,
    fd: usize,
    d: usize,
    f2: usize,
    pool: usize,
    classes: usize,
    max_pool: bool,
    spatial: Vec<f64>,
    temporal: Vec<f64>,
    gain2: Vec<f64>,
    offset2: Vec<f64>,
    pointwise: Vec<f64>,
    gain3: Vec<f64>,
    offset3: Vec<f64>,
    dense: Vec<f64>,
    bias: Vec<f64>,
}

impl FastForward {
    pub fn new(m: &eeg_uq::decoder::DecoderModel) -> Self {
        let c = &m.config;
        let (ch, t, k) = (c.n_channels, c.n_samples, c.temporal_kernel);
        let (f1, d, f2) = (c.temporal_filters, c.depth_multiplier, c.pointwise_filters);
        let fd = f1 * d;
        let w = |i: usize| m.params[i].data().to_vec();
        let affine = |layer: usize| -> (Vec<f64>, Vec<f64>) {
            let r = &m.running[layer];
            let (scale, shift) = (w(1 + 3 * layer), w(2 + 3 * layer));
            let a: Vec<f64> = (0..scale.len()).map(|i| scale[i] / (r.var[i] + c.bn_eps).sqrt()).collect();
            let b = (0..scale.len()).map(|i| shift[i] - r.mean[i] * a[i]).collect();
            (a, b)
        };
        let (a1, c1) = affine(0);
        let (a2, c2) = affine(1);
        let (gain3, offset3) = affine(2);
        let dw = w(3);
        // Fold batch norm 1 into the depthwise stage, then batch norm 2.
        let mut gain2 = vec![0.0; fd];
        let mut offset2 = vec![0.0; fd];
        for o in 0..fd {
            let g = o / d;
            let wsum: f64 = dw[o * ch..(o + 1) * ch].iter().sum();
            gain2[o] = a2[o] * a1[g];
            offset2[o] = a2[o] * c1[g] * wsum + c2[o];
        }
        Self {
            ch,
            t,
            k,
            left: (k - 1) / 2,
            fd,
            d,
            f2,
            pool: c.pool_width,
            classes: c.n_classes,
            max_pool: c.pool == eeg_uq::decoder::PoolKind::Max,
            spatial: dw,
            temporal: w(0),
            gain2,
            offset2,
            pointwise: w(6),
            gain3,
            offset3,
            dense: w(9),
            bias: w(10),
        }
    }

    pub fn input_len(&self) -> usize {
        self.ch * self.t
    }

    pub fn logits(&self, x: &[f64], out: &mut [f64]) {
        let (ch, t, k) = (self.ch, self.t, self.k);
        let mut mixed = vec![0.0; self.fd * t];
        for o in 0..self.fd {
            let row = &mut mixed[o * t..(o + 1) * t];
            for e in 0..ch {
                let w = self.spatial[o * ch + e];
                for (r, v) in row.iter_mut().zip(&x[e * t..(e + 1) * t]) {
                    *r += w * v;
                }
            }
        }
        let mut h2 = vec![0.0; self.fd * t];
        for o in 0..self.fd {
            let kern = &self.temporal[(o / self.d) * k..(o / self.d + 1) * k];
            let src = &mixed[o * t..(o + 1) * t];
            for s in 0..t {
                let lo = self.left.saturating_sub(s);
                let hi = k.min(t + self.left - s);
                let mut acc = 0.0;
                for j in lo..hi {
                    acc += kern[j] * src[s + j - self.left];
                }
                h2[o * t + s] = (self.gain2[o] * acc + self.offset2[o]).max(0.0);
            }
        }
        let l = t / self.pool;
        let mut flat = vec![0.0; self.f2 * l];
        let mut h3 = vec![0.0; t];
        for q in 0..self.f2 {
            h3.iter_mut().for_each(|v| *v = 0.0);
            for o in 0..self.fd {
                let w = self.pointwise[q * self.fd + o];
                for (a, b) in h3.iter_mut().zip(&h2[o * t..(o + 1) * t]) {
                    *a += w * b;
                }
            }
            for v in h3.iter_mut() {
                *v = (self.gain3[q] * *v + self.offset3[q]).max(0.0);
            }
            for j in 0..l {
                let win = &h3[j * self.pool..(j + 1) * self.pool];
                flat[q * l + j] = if self.max_pool {
                    win.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    win.iter().sum::<f64>() / self.pool as f64
                };
            }
        }
        out.copy_from_slice(&self.bias);
        for (i, v) in flat.iter().enumerate() {
            for c in 0..self.classes {
                out[c] += v * self.dense[i * self.classes + c];
            }
        }
    }
}

/// Logit moments of the decoder under `x ~ N(mean, u I)`, estimated from
/// `draws` input samples pushed through the deterministic forward.
pub fn input_sampling_moments(ff: &FastForward, mean: &[f64], u: f64, draws: usize, stream: &mut RngStream) -> Moments {
    let sd = u.sqrt();
    let mut acc = Moments::new(ff.classes);
    let mut x = vec![0.0; mean.len()];
    let mut out = vec![0.0; ff.classes];
    for _ in 0..draws {
        for (xi, mi) in x.iter_mut().zip(mean) {
            *xi = mi + sd * stream.normal();
        }
        ff.logits(&x, &mut out);
        acc.push(&out);
    }
    acc
}

/// Outcome of comparing analytic moments with a Monte-Carlo estimate.
#[derive(Debug, Default, Clone, Copy)]
pub struct OracleReport {
    pub configs: usize,
    pub checks: usize,
    pub failures: usize,
    /// Largest |analytic - estimate| in units of the estimate's standard error.
    pub worst_z: f64,
}

impl OracleReport {
    /// Compare `mean`/`var` with the sampled moments of element `i`.
    pub fn check(&mut self, mc: &Moments, i: usize, mean: f64, var: f64, z: f64) {
        for (got, est, se) in [(mean, mc.mean(i), mc.mean_se(i)), (var, mc.var(i), mc.var_se(i))] {
            self.checks += 1;
            let dev = (got - est).abs();
            let score = if se > 0.0 { dev / se } else if dev < 1e-12 { 0.0 } else { f64::INFINITY };
            self.worst_z = self.worst_z.max(score);
            if score > z {
                self.failures += 1;
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.configs >= 20
    }
}

fn random_moments(s: &mut RngStream, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mu = (0..n).map(|_| 2.0 * s.uniform() - 1.0).collect();
    let v = (0..n).map(|_| 0.05 + 0.95 * s.uniform()).collect();
    (mu, v)
}

fn draw(s: &mut RngStream, mu: &[f64], v: &[f64], out: &mut [f64]) {
    for i in 0..mu.len() {
        out[i] = mu[i] + v[i].sqrt() * s.normal();
    }
}

fn moment_tensor(shape: &[usize], mu: Vec<f64>, v: Vec<f64>) -> eeg_uq::adf::MomentTensor {
    eeg_uq::adf::MomentTensor::new(Tensor::new(shape.to_vec(), mu).unwrap(), Tensor::new(shape.to_vec(), v).unwrap()).unwrap()
}

/// Dense layers and small grouped convolutions against sampled outputs.
pub fn linear_oracle(seed: u64, configs: usize, draws: usize) -> OracleReport {
    use eeg_uq::adf::{adf_linear, LinearOp};
    use eeg_uq::kernels::Padding2d;
    let mut s = RngStream::new(seed, 0);
    let mut rep = OracleReport::default();
    for cfg in 0..configs {
        if cfg % 2 == 0 {
            let (n_in, n_out) = (2 + s.below(4), 1 + s.below(3));
            let (mu, v) = random_moments(&mut s, n_in);
            let w = uniform_tensor(&mut s, &[n_in, n_out], -1.0, 1.0);
            let b: Vec<f64> = (0..n_out).map(|_| s.normal()).collect();
            let out = adf_linear(&moment_tensor(&[1, n_in], mu.clone(), v.clone()), &LinearOp::Dense { weight: &w, bias: Some(&b) }).unwrap();
            let mut mc = Moments::new(n_out);
            let (mut x, mut y) = (vec![0.0; n_in], vec![0.0; n_out]);
            for _ in 0..draws {
                draw(&mut s, &mu, &v, &mut x);
                for o in 0..n_out {
                    y[o] = b[o] + (0..n_in).map(|i| x[i] * w.data()[i * n_out + o]).sum::<f64>();
                }
                mc.push(&y);
            }
            for o in 0..n_out {
                rep.check(&mc, o, out.mean.data()[o], out.var.data()[o], 3.0);
            }
        } else {
            // [1, 2, 1, 5] input, 2 groups, kernel width 3, same padding.
            let (c, t, k, cout) = (2, 5, 3, 4);
            let (mu, v) = random_moments(&mut s, c * t);
            let kern = uniform_tensor(&mut s, &[cout, 1, 1, k], -1.0, 1.0);
            let pad = Padding2d::same(1, k);
            let out = adf_linear(
                &moment_tensor(&[1, c, 1, t], mu.clone(), v.clone()),
                &LinearOp::Conv { kernel: &kern, pad, groups: 2, bias: None },
            )
            .unwrap();
            let mut mc = Moments::new(cout * t);
            let (mut x, mut y) = (vec![0.0; c * t], vec![0.0; cout * t]);
            for _ in 0..draws {
                draw(&mut s, &mu, &v, &mut x);
                for o in 0..cout {
                    let g = o / 2;
                    for p in 0..t {
                        let mut acc = 0.0;
                        for j in 0..k {
                            let src = p as isize + j as isize - pad.left as isize;
                            if src >= 0 && (src as usize) < t {
                                acc += kern.data()[o * k + j] * x[g * t + src as usize];
                            }
                        }
                        y[o * t + p] = acc;
                    }
                }
                mc.push(&y);
            }
            for i in 0..cout * t {
                rep.check(&mc, i, out.mean.data()[i], out.var.data()[i], 3.0);
            }
        }
        rep.configs += 1;
    }
    rep
}

pub fn relu_oracle(seed: u64, configs: usize, draws: usize) -> OracleReport {
    let mut s = RngStream::new(seed, 0);
    let mut rep = OracleReport::default();
    for _ in 0..configs {
        let mu = 4.0 * s.uniform() - 2.0;
        let v = 0.01 + 2.0 * s.uniform();
        let (m, var) = eeg_uq::adf::relu_moments(mu, v);
        let mut mc = Moments::new(1);
        for _ in 0..draws {
            mc.push(&[(mu + v.sqrt() * s.normal()).max(0.0)]);
        }
        rep.check(&mc, 0, m, var, 3.0);
        rep.configs += 1;
    }
    rep
}

pub fn batchnorm_oracle(seed: u64, configs: usize, draws: usize) -> OracleReport {
    let mut s = RngStream::new(seed, 0);
    let mut rep = OracleReport::default();
    for _ in 0..configs {
        let c = 1 + s.below(3);
        let (mu, v) = random_moments(&mut s, c);
        let rm: Vec<f64> = (0..c).map(|_| s.normal()).collect();
        let rv: Vec<f64> = (0..c).map(|_| 0.1 + 2.0 * s.uniform()).collect();
        let scale: Vec<f64> = (0..c).map(|_| 3.0 * s.uniform() - 1.5).collect();
        let shift: Vec<f64> = (0..c).map(|_| s.normal()).collect();
        let eps = 1e-5;
        let out = eeg_uq::adf::adf_batchnorm(&moment_tensor(&[1, c, 1, 1], mu.clone(), v.clone()), &rm, &rv, &scale, &shift, eps).unwrap();
        let mut mc = Moments::new(c);
        let mut x = vec![0.0; c];
        for _ in 0..draws {
            draw(&mut s, &mu, &v, &mut x);
            for i in 0..c {
                x[i] = (x[i] - rm[i]) / (rv[i] + eps).sqrt() * scale[i] + shift[i];
            }
            mc.push(&x);
        }
        for i in 0..c {
            rep.check(&mc, i, out.mean.data()[i], out.var.data()[i], 3.0);
        }
        rep.configs += 1;
    }
    rep
}

pub fn avgpool_oracle(seed: u64, configs: usize, draws: usize) -> OracleReport {
    let mut s = RngStream::new(seed, 0);
    let mut rep = OracleReport::default();
    for _ in 0..configs {
        let w = 1 + s.below(4);
        let (mu, v) = random_moments(&mut s, 2 * w);
        let out = eeg_uq::adf::adf_avgpool(&moment_tensor(&[1, 1, 1, 2 * w], mu.clone(), v.clone()), (1, w)).unwrap();
        let mut mc = Moments::new(2);
        let mut x = vec![0.0; 2 * w];
        for _ in 0..draws {
            draw(&mut s, &mu, &v, &mut x);
            mc.push(&[x[..w].iter().sum::<f64>() / w as f64, x[w..].iter().sum::<f64>() / w as f64]);
        }
        for i in 0..2 {
            rep.check(&mc, i, out.mean.data()[i], out.var.data()[i], 3.0);
        }
        rep.configs += 1;
    }
    rep
}

pub fn dropout_oracle(seed: u64, configs: usize, draws: usize) -> OracleReport {
    let mut s = RngStream::new(seed, 0);
    let mut rep = OracleReport::default();
    for _ in 0..configs {
        let n = 2 + s.below(6);
        let (mu, v) = random_moments(&mut s, n);
        let mask: Vec<f64> = (0..n).map(|_| if s.bernoulli(0.5) { 1.0 } else { 0.0 }).collect();
        let out = eeg_uq::adf::adf_dropout(&moment_tensor(&[1, n], mu.clone(), v.clone()), &Tensor::new(vec![1, n], mask.clone()).unwrap()).unwrap();
        let mut mc = Moments::new(n);
        let mut x = vec![0.0; n];
        for _ in 0..draws {
            draw(&mut s, &mu, &v, &mut x);
            for i in 0..n {
                x[i] *= mask[i];
            }
            mc.push(&x);
        }
        for i in 0..n {
            rep.check(&mc, i, out.mean.data()[i], out.var.data()[i], 3.0);
        }
        rep.configs += 1;
    }
    rep
}

/// 4-wide max pooling: largest relative error of the mean and of the
/// variance against the sampled maximum, over all configurations.
pub fn maxpool_oracle(seed: u64, configs: usize, draws: usize) -> (f64, f64) {
    let mut s = RngStream::new(seed, 0);
    let (mut worst_m, mut worst_v): (f64, f64) = (0.0, 0.0);
    for _ in 0..configs {
        let (mu, v) = random_moments(&mut s, 4);
        let out = eeg_uq::adf::adf_maxpool(&moment_tensor(&[1, 1, 1, 4], mu.clone(), v.clone()), (1, 4)).unwrap();
        let mut mc = Moments::new(1);
        let mut x = vec![0.0; 4];
        for _ in 0..draws {
            draw(&mut s, &mu, &v, &mut x);
            mc.push(&[x.iter().cloned().fold(f64::NEG_INFINITY, f64::max)]);
        }
        let rel_m = (out.mean.data()[0] - mc.mean(0)).abs() / mc.mean(0).abs();
        let rel_v = (out.var.data()[0] - mc.var(0)).abs() / mc.var(0);
        worst_m = worst_m.max(rel_m);
        worst_v = worst_v.max(rel_v);
    }
    (worst_m, worst_v)
}
