mod common;

use common::{band_power_oracle, gaussian, uniform_tensor};
use eeg_uq::adf::DropoutMask;
use eeg_uq::config::ExperimentConfig;
use eeg_uq::data::{segment, split, synth_generate, SegmentSet, SplitMode};
use eeg_uq::decoder::{
    build_decoder, evaluate, inverted_dropout_mask, train, DecoderConfig, DecoderModel, Mode, PoolKind, TrainOptions,
};
use eeg_uq::io::Checkpoint;
use eeg_uq::{Error, RngStream, Tensor};

fn small(pool: PoolKind) -> DecoderConfig {
    let mut c = DecoderConfig::compact(5, 24, 3);
    c.temporal_kernel = 6;
    c.pool_width = 4;
    c.pool = pool;
    c
}

/// Random weights, affine batch-norm parameters and running statistics.
fn randomised(config: DecoderConfig, seed: u64) -> DecoderModel {
    let mut m = build_decoder(config, &RngStream::new(seed, 0)).unwrap();
    let mut s = RngStream::new(seed, 99);
    for p in m.params.iter_mut() {
        let shape = p.shape().to_vec();
        *p = uniform_tensor(&mut s, &shape, -0.8, 0.8);
    }
    for r in m.running.iter_mut() {
        for v in r.mean.iter_mut() {
            *v = s.normal() * 0.3;
        }
        for v in r.var.iter_mut() {
            *v = 0.2 + 2.0 * s.uniform();
        }
    }
    m
}

/// Straight-line eval-mode forward, one example at a time.
fn reference_logits(m: &DecoderModel, x: &Tensor) -> Vec<f64> {
    let c = &m.config;
    let (ch, t, k) = (c.n_channels, c.n_samples, c.temporal_kernel);
    let (f1, d, f2, p) = (c.temporal_filters, c.depth_multiplier, c.pointwise_filters, c.pool_width);
    let fd = f1 * d;
    let left = (k - 1) / 2;
    let w = |i: usize| m.params[i].data();
    let bn = |v: f64, layer: usize, f: usize| {
        let r = &m.running[layer];
        let (scale, shift) = (w(1 + 3 * layer)[f], w(2 + 3 * layer)[f]);
        (v - r.mean[f]) / (r.var[f] + c.bn_eps).sqrt() * scale + shift
    };
    let b = x.dim(0);
    let mut out = Vec::with_capacity(b * c.n_classes);
    for n in 0..b {
        let xs = &x.data()[n * ch * t..(n + 1) * ch * t];
        let mut h1 = vec![0.0; f1 * ch * t];
        for f in 0..f1 {
            for e in 0..ch {
                for s in 0..t {
                    let mut acc = 0.0;
                    for j in 0..k {
                        let src = s as isize + j as isize - left as isize;
                        if src >= 0 && (src as usize) < t {
                            acc += w(0)[f * k + j] * xs[e * t + src as usize];
                        }
                    }
                    h1[(f * ch + e) * t + s] = bn(acc, 0, f);
                }
            }
        }
        let mut h2 = vec![0.0; fd * t];
        for o in 0..fd {
            let g = o / d;
            for s in 0..t {
                let mut acc = 0.0;
                for e in 0..ch {
                    acc += w(3)[o * ch + e] * h1[(g * ch + e) * t + s];
                }
                h2[o * t + s] = bn(acc, 1, o).max(0.0);
            }
        }
        let mut h3 = vec![0.0; f2 * t];
        for q in 0..f2 {
            for s in 0..t {
                let acc: f64 = (0..fd).map(|o| w(6)[q * fd + o] * h2[o * t + s]).sum();
                h3[q * t + s] = bn(acc, 2, q).max(0.0);
            }
        }
        let l = t / p;
        let mut flat = vec![0.0; f2 * l];
        for q in 0..f2 {
            for j in 0..l {
                let win = &h3[q * t + j * p..q * t + (j + 1) * p];
                flat[q * l + j] = match c.pool {
                    PoolKind::Average => win.iter().sum::<f64>() / p as f64,
                    PoolKind::Max => win.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                };
            }
        }
        for cls in 0..c.n_classes {
            let z: f64 = flat.iter().enumerate().map(|(i, v)| v * w(9)[i * c.n_classes + cls]).sum();
            out.push(z + w(10)[cls]);
        }
    }
    out
}

fn synthetic_split(seed: u64) -> (SegmentSet, SegmentSet, DecoderConfig) {
    let cfg = ExperimentConfig::default();
    let root = RngStream::new(seed, 0);
    let trials = synth_generate(&cfg.synth, &root.derive(1)).unwrap();
    let seg = segment(&trials, cfg.data.window, cfg.data.stride).unwrap();
    let (tr, te) = split(&seg, SplitMode::Intra, None, 0.8, &mut root.derive(2)).unwrap();
    let dc = cfg.decoder_for(seg.n_channels(), cfg.data.window, seg.n_classes).unwrap();
    (tr, te, dc)
}

#[test]
fn probabilities_sum_to_one_for_both_montages() {
    for ch in [22, 44] {
        let m = build_decoder(DecoderConfig::new(ch, 400, 4), &RngStream::new(7, 0)).unwrap();
        let x = gaussian(&mut RngStream::new(8, 0), &[3, 1, ch, 400]);
        let p = m.predict_proba(&x).unwrap();
        assert_eq!(p.shape(), &[3, 4]);
        for r in 0..3 {
            let row = p.row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }
}

#[test]
fn builds_are_deterministic_per_stream() {
    let c = small(PoolKind::Average);
    let a = build_decoder(c.clone(), &RngStream::new(1, 0)).unwrap();
    let b = build_decoder(c.clone(), &RngStream::new(1, 0)).unwrap();
    let other = build_decoder(c, &RngStream::new(2, 0)).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, other.params);
    assert_eq!(a.mode, Mode::Eval);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = small(PoolKind::Average);
    c.temporal_kernel = 25;
    assert!(build_decoder(c, &RngStream::new(0, 0)).is_err());
    let mut c = small(PoolKind::Average);
    c.pointwise_filters = 0;
    assert!(build_decoder(c, &RngStream::new(0, 0)).is_err());
    let mut c = small(PoolKind::Average);
    c.dropout_rate_train = 1.0;
    assert!(build_decoder(c, &RngStream::new(0, 0)).is_err());
}

#[test]
fn forward_rejects_mismatched_batch() {
    let m = build_decoder(small(PoolKind::Average), &RngStream::new(0, 0)).unwrap();
    assert!(matches!(m.forward(&Tensor::zeros(&[2, 1, 5, 23]), None), Err(Error::Shape { .. })));
    assert!(m.forward(&Tensor::zeros(&[2, 1, 4, 24]), None).is_err());
    let wrong = DropoutMask::ones(&m, 3);
    assert!(m.forward(&Tensor::zeros(&[2, 1, 5, 24]), Some(&wrong)).is_err());
}

#[test]
fn all_ones_mask_is_no_dropout() {
    let m = randomised(small(PoolKind::Average), 3);
    let x = gaussian(&mut RngStream::new(4, 0), &[4, 1, 5, 24]);
    let plain = m.forward(&x, None).unwrap();
    assert_eq!(m.forward(&x, Some(&DropoutMask::ones(&m, 4))).unwrap(), plain);
    let eval_again = m.forward(&x, None).unwrap();
    assert_eq!(eval_again, plain);
}

#[test]
fn explicit_mask_is_applied_verbatim() {
    let m = randomised(small(PoolKind::Average), 5);
    let x = gaussian(&mut RngStream::new(6, 0), &[2, 1, 5, 24]);
    let mask = DropoutMask::sample(&m, 2, 0.6, &mut RngStream::new(7, 0)).unwrap();
    let a = m.forward(&x, Some(&mask)).unwrap();
    assert_eq!(a, m.forward(&x, Some(&mask)).unwrap());
    assert!(a.max_abs_diff(&m.forward(&x, None).unwrap()) > 1e-6);
    let zeros = DropoutMask::new(mask.layers.iter().map(|l| Tensor::zeros(l.shape())).collect(), 0.6).unwrap();
    let z = m.forward(&x, Some(&zeros)).unwrap();
    for r in 0..2 {
        assert_eq!(z.row(r), m.params[10].data());
    }
}

#[test]
fn duplicated_rows_give_duplicated_logits() {
    let m = randomised(small(PoolKind::Max), 8);
    let one = gaussian(&mut RngStream::new(9, 0), &[1, 1, 5, 24]);
    let both = Tensor::concat_rows(&one, &one).unwrap();
    let out = m.forward(&both, None).unwrap();
    assert_eq!(out.row(0), out.row(1));
    assert_eq!(out.row(0), m.forward(&one, None).unwrap().row(0));
}

#[test]
fn eval_forward_matches_reference() {
    for (pool, seed) in [(PoolKind::Average, 10), (PoolKind::Max, 11), (PoolKind::Average, 12)] {
        let m = randomised(small(pool), seed);
        let x = gaussian(&mut RngStream::new(seed, 1), &[3, 1, 5, 24]);
        let got = m.forward(&x, None).unwrap();
        let want = reference_logits(&m, &x);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-9, "{pool:?}: {g} vs {w}");
        }
    }
    let mut c = small(PoolKind::Average);
    c.temporal_kernel = 7;
    let m = randomised(c, 13);
    let x = gaussian(&mut RngStream::new(13, 1), &[2, 5, 1, 24]);
    let got = m.forward(&x, None).unwrap();
    for (g, w) in got.data().iter().zip(&reference_logits(&m, &x)) {
        assert!((g - w).abs() < 1e-9);
    }
}

#[test]
fn train_mode_dropout_fraction() {
    for rate in [0.1, 0.25, 0.5] {
        let mask = inverted_dropout_mask(&[100_000], rate, &mut RngStream::new(21, 0));
        let zeros = mask.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
        assert!((zeros - rate).abs() < 0.02, "rate {rate}: {zeros}");
        let keep = 1.0 / (1.0 - rate);
        assert!(mask.data().iter().all(|&v| v == 0.0 || v == keep));
    }
}

#[test]
fn forward_train_uses_batch_statistics_and_advances() {
    let mut m = randomised(small(PoolKind::Average), 14);
    let x = gaussian(&mut RngStream::new(15, 0), &[8, 1, 5, 24]);
    let before = m.running.clone();
    let a = m.forward_train(&x).unwrap();
    let b = m.forward_train(&x).unwrap();
    assert_ne!(a, b, "dropout stream should advance");
    assert_ne!(m.running, before);
    assert!(m.running.iter().all(|r| r.var.iter().all(|&v| v > 0.0)));
}

#[test]
fn checkpoint_file_round_trip() {
    let m = randomised(small(PoolKind::Max), 16);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.uncm");
    m.save(&path).unwrap();
    let back = DecoderModel::load(&path).unwrap();
    assert_eq!(back, m);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"UNCM");
    assert_eq!(back.to_checkpoint().unwrap().to_bytes().unwrap(), bytes);
    let x = gaussian(&mut RngStream::new(17, 0), &[2, 1, 5, 24]);
    assert_eq!(back.forward(&x, None).unwrap(), m.forward(&x, None).unwrap());

    let mut ck = Checkpoint::from_bytes(&bytes).unwrap();
    ck.tensors.retain(|(n, _)| n != "dense.bias");
    assert!(DecoderModel::from_checkpoint(&ck).is_err());
    let mut ck = Checkpoint::from_bytes(&bytes).unwrap();
    for (n, t) in ck.tensors.iter_mut() {
        if n == "bn2.running_var" {
            t.data_mut()[0] = 0.0;
        }
    }
    assert!(DecoderModel::from_checkpoint(&ck).is_err());
}

#[test]
fn train_rejects_bad_sets() {
    let (tr, te, dc) = synthetic_split(0);
    let m = build_decoder(dc, &RngStream::new(0, 4)).unwrap();
    let opts = TrainOptions { epochs: 1, ..TrainOptions::default() };
    let empty = SegmentSet {
        labels: vec![],
        subjects: vec![],
        trial_index: vec![],
        ..tr.clone()
    };
    assert!(matches!(train(m.clone(), &empty, &te, opts, &RngStream::new(0, 5)), Err(Error::Empty(_))));
    let mut bad = tr.clone();
    bad.labels[3] = 4;
    assert!(matches!(train(m.clone(), &bad, &te, opts, &RngStream::new(0, 5)), Err(Error::InvalidArgument(_))));
    let zero_batch = TrainOptions { batch_size: 0, ..opts };
    assert!(train(m, &tr, &te, zero_batch, &RngStream::new(0, 5)).is_err());
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let (tr, te, mut dc) = synthetic_split(1);
    dc.dropout_rate_train = 0.0;
    let m = build_decoder(dc, &RngStream::new(1, 4)).unwrap();
    let opts = TrainOptions { epochs: 4, lr: 0.0, batch_size: tr.len() };
    let (trained, hist) = train(m.clone(), &tr, &te, opts, &RngStream::new(1, 5)).unwrap();
    assert_eq!(trained.params, m.params);
    assert_eq!(hist.epochs.len(), 4);
    let first = hist.epochs[0].batch_loss;
    for e in &hist.epochs {
        assert!((e.batch_loss - first).abs() <= 1e-12 * first.abs(), "{} vs {first}", e.batch_loss);
    }
}

#[test]
fn learns_separable_synthetic_task() {
    let (tr, te, dc) = synthetic_split(0);
    let cfg = ExperimentConfig::default();
    let freqs: Vec<f64> = (0..cfg.synth.n_classes).map(|k| cfg.synth.class_frequency(k)).collect();
    let oracle = band_power_oracle(&tr, &te, &freqs, cfg.synth.sample_rate as f64);
    assert!(oracle >= 0.9, "band-power oracle accuracy {oracle}");

    let root = RngStream::new(0, 0);
    let m = build_decoder(dc, &root.derive(4)).unwrap();
    let (m, hist) = train(m, &tr, &te, TrainOptions::default(), &root.derive(5)).unwrap();
    assert_eq!(m.mode, Mode::Eval);
    assert_eq!(hist.epochs.len(), 40);
    let (_, acc) = evaluate(&m, &tr).unwrap();
    assert!(acc >= 0.95, "train accuracy {acc}");
    assert_eq!(hist.epochs[39].train_accuracy, acc);
}

#[test]
fn training_loss_mostly_non_increasing() {
    let mut monotone = 0;
    for seed in 0..10 {
        let (tr, te, dc) = synthetic_split(seed);
        let root = RngStream::new(seed, 0);
        let m = build_decoder(dc, &root.derive(4)).unwrap();
        let (_, hist) = train(m, &tr, &te, TrainOptions::default(), &root.derive(5)).unwrap();
        if hist.epochs.windows(2).all(|w| w[1].train_loss <= w[0].train_loss) {
            monotone += 1;
        }
    }
    assert!(monotone >= 9, "{monotone}/10 runs with non-increasing training loss");
}
