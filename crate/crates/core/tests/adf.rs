mod common;

use common::{
    avgpool_oracle, batchnorm_oracle, dropout_oracle, gaussian, input_sampling_moments, linear_oracle, maxpool_oracle,
    relu_oracle, task, trained, uniform_tensor, FastForward, Moments,
};
use eeg_uq::adf::{
    adf_avgpool, adf_batchnorm, adf_dropout, adf_forward, adf_linear, adf_maxpool, adf_prefix, adf_relu, adf_suffix,
    lift, max_moments, relu_moments, DropoutMask, InputNoise, LinearOp, MomentTensor,
};
use eeg_uq::config::ExperimentConfig;
use eeg_uq::decoder::{build_decoder, DecoderConfig, Mode, PoolKind};
use eeg_uq::kernels::Padding2d;
use eeg_uq::{Error, RngStream, Tensor};

fn moments(shape: &[usize], s: &mut RngStream) -> MomentTensor {
    let mean = gaussian(s, shape);
    let var = uniform_tensor(s, shape, 0.0, 1.0);
    MomentTensor::new(mean, var).unwrap()
}

#[test]
fn lift_examples() {
    let x = gaussian(&mut RngStream::new(0, 0), &[1, 1, 22, 400]);
    let m = lift(&x, &InputNoise::Scalar(0.0)).unwrap();
    assert!(m.var.data().iter().all(|&v| v == 0.0));
    assert_eq!(m.mean, x);
    let m = lift(&x, &InputNoise::Scalar(0.1)).unwrap();
    assert!(m.var.data().iter().all(|&v| v == 0.1));
    let per: Vec<f64> = (0..22).map(|i| i as f64 * 0.01).collect();
    let m = lift(&x, &InputNoise::PerChannel(per.clone())).unwrap();
    for ch in 0..22 {
        assert!(m.var.data()[ch * 400..(ch + 1) * 400].iter().all(|&v| v == per[ch]));
    }
    assert!(lift(&x, &InputNoise::Scalar(-0.1)).is_err());
    assert!(lift(&x, &InputNoise::PerChannel(vec![0.1; 21])).is_err());
}

#[test]
fn moment_tensor_rejects_negative_variance() {
    let mean = Tensor::zeros(&[2]);
    assert!(MomentTensor::new(mean.clone(), Tensor::from_vec(vec![0.1, -1e-9])).is_err());
    assert!(MomentTensor::new(mean.clone(), Tensor::from_vec(vec![0.1, f64::NAN])).is_err());
    assert!(MomentTensor::new(mean, Tensor::zeros(&[3])).is_err());
}

#[test]
fn linear_examples() {
    let mut s = RngStream::new(1, 0);
    let m = moments(&[3, 4], &mut s);
    let mut eye = Tensor::zeros(&[4, 4]);
    for i in 0..4 {
        eye.data_mut()[i * 5] = 1.0;
    }
    let out = adf_linear(&m, &LinearOp::Dense { weight: &eye, bias: None }).unwrap();
    assert_eq!(out, m);

    let m = moments(&[1, 1, 3, 5], &mut s);
    let two = Tensor::full(&[1, 1, 1, 1], 2.0);
    let out = adf_linear(&m, &LinearOp::Conv { kernel: &two, pad: Padding2d::default(), groups: 1, bias: None }).unwrap();
    for i in 0..15 {
        assert_eq!(out.mean.data()[i], 2.0 * m.mean.data()[i]);
        assert_eq!(out.var.data()[i], 4.0 * m.var.data()[i]);
    }
    let bad = Tensor::zeros(&[5, 2]);
    assert!(matches!(adf_linear(&moments(&[1, 4], &mut s), &LinearOp::Dense { weight: &bad, bias: None }), Err(Error::Shape { .. })));
}

#[test]
fn linear_matches_sampling() {
    let r = linear_oracle(10, 20, 100_000);
    assert!(r.passed(), "{r:?}");
}

#[test]
fn relu_examples() {
    let (m, v) = relu_moments(0.0, 1.0);
    assert!((m - 0.39894).abs() < 1e-4 && (v - 0.34085).abs() < 1e-4, "{m} {v}");
    let (m, v) = relu_moments(10.0, 1.0);
    assert!((m - 10.0).abs() < 1e-6 && (v - 1.0).abs() < 1e-6);
    let (m, v) = relu_moments(-10.0, 1.0);
    assert!(m < 1e-6 && v < 1e-6 && v >= 0.0);
    assert_eq!(relu_moments(-2.0, 0.0), (0.0, 0.0));
    assert_eq!(relu_moments(1.5, 0.0), (1.5, 0.0));

    let mut s = RngStream::new(1, 1);
    let m = moments(&[2, 3, 1, 5], &mut s);
    let out = adf_relu(&m);
    for i in 0..m.mean.len() {
        let (a, b) = relu_moments(m.mean.data()[i], m.var.data()[i]);
        assert_eq!((out.mean.data()[i], out.var.data()[i]), (a, b.max(0.0)));
    }
}

#[test]
fn relu_standard_normal_against_long_run() {
    let mut s = RngStream::new(2, 0);
    let mut mc = Moments::new(1);
    for _ in 0..10_000_000 {
        mc.push(&[s.normal().max(0.0)]);
    }
    let (m, v) = relu_moments(0.0, 1.0);
    assert!((m - mc.mean(0)).abs() < 3.0 * mc.mean_se(0));
    assert!((v - mc.var(0)).abs() < 3.0 * mc.var_se(0));
}

#[test]
fn relu_matches_sampling() {
    let r = relu_oracle(11, 20, 100_000);
    assert!(r.passed(), "{r:?}");
}

#[test]
fn batchnorm_examples() {
    let mut s = RngStream::new(3, 0);
    let m = moments(&[2, 3, 1, 4], &mut s);
    let out = adf_batchnorm(&m, &[0.0; 3], &[1.0; 3], &[1.0; 3], &[0.0; 3], 0.0).unwrap();
    assert_eq!(out, m);
    let out = adf_batchnorm(&m, &[0.0; 3], &[1.0; 3], &[3.0; 3], &[0.0; 3], 0.0).unwrap();
    for (a, b) in out.var.data().iter().zip(m.var.data()) {
        assert!((a - 9.0 * b).abs() < 1e-12);
    }
    assert!(adf_batchnorm(&m, &[0.0; 2], &[1.0; 3], &[1.0; 3], &[0.0; 3], 0.0).is_err());
}

#[test]
fn batchnorm_matches_sampling() {
    let r = batchnorm_oracle(12, 20, 100_000);
    assert!(r.passed(), "{r:?}");
}

#[test]
fn avgpool_examples() {
    let mut s = RngStream::new(4, 0);
    let m = moments(&[1, 2, 1, 6], &mut s);
    assert_eq!(adf_avgpool(&m, (1, 1)).unwrap(), m);
    let flat = MomentTensor::new(Tensor::zeros(&[1, 1, 1, 4]), Tensor::full(&[1, 1, 1, 4], 0.3)).unwrap();
    let out = adf_avgpool(&flat, (1, 2)).unwrap();
    assert!(out.var.data().iter().all(|&v| (v - 0.15).abs() < 1e-15));
    assert!(adf_avgpool(&m, (1, 4)).is_err());
}

#[test]
fn avgpool_matches_sampling() {
    let r = avgpool_oracle(13, 20, 100_000);
    assert!(r.passed(), "{r:?}");
}

#[test]
fn maxpool_examples() {
    let mut s = RngStream::new(5, 0);
    let m = moments(&[1, 2, 1, 6], &mut s);
    assert_eq!(adf_maxpool(&m, (1, 1)).unwrap(), m);
    let (mean, var) = max_moments(0.0, 1.0, 0.0, 1.0);
    assert!((mean - 1.0 / std::f64::consts::PI.sqrt()).abs() < 1e-3);
    assert!((var - (1.0 - 1.0 / std::f64::consts::PI)).abs() < 1e-3);
    let pair = MomentTensor::new(Tensor::zeros(&[1, 1, 1, 2]), Tensor::ones(&[1, 1, 1, 2])).unwrap();
    let out = adf_maxpool(&pair, (1, 2)).unwrap();
    assert_eq!((out.mean.item(), out.var.item()), (mean, var));
    assert!(adf_maxpool(&m, (1, 4)).is_err());
}

/// Folding pairwise maxima treats each partial maximum as Gaussian; the mean
/// stays within 5% of sampling, the variance comes out somewhat low.
#[test]
fn maxpool_against_sampling() {
    let (mean, var) = maxpool_oracle(14, 20, 1_000_000);
    assert!(mean < 0.05, "worst mean relative error {mean}");
    assert!(var < 0.15, "worst variance relative error {var}");
}

#[test]
fn dropout_examples() {
    let mut s = RngStream::new(6, 0);
    let m = moments(&[2, 3, 1, 4], &mut s);
    assert_eq!(adf_dropout(&m, &Tensor::ones(m.shape())).unwrap(), m);
    let z = adf_dropout(&m, &Tensor::zeros(m.shape())).unwrap();
    assert!(z.mean.data().iter().chain(z.var.data()).all(|&v| v == 0.0));
    assert!(adf_dropout(&m, &Tensor::full(m.shape(), 0.5)).is_err());
    assert!(adf_dropout(&m, &Tensor::ones(&[2, 3, 1, 5])).is_err());
}

#[test]
fn dropout_is_diagonal_linear_map() {
    let mut s = RngStream::new(7, 0);
    for _ in 0..10 {
        let n = 1 + s.below(12);
        let m = moments(&[1, n], &mut s);
        let mask: Vec<f64> = (0..n).map(|_| if s.bernoulli(0.6) { 1.0 } else { 0.0 }).collect();
        let mut diag = Tensor::zeros(&[n, n]);
        for i in 0..n {
            diag.data_mut()[i * n + i] = mask[i];
        }
        let a = adf_dropout(&m, &Tensor::new(vec![1, n], mask).unwrap()).unwrap();
        let b = adf_linear(&m, &LinearOp::Dense { weight: &diag, bias: None }).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn dropout_matches_sampling() {
    let r = dropout_oracle(15, 20, 100_000);
    assert!(r.passed(), "{r:?}");
}

#[test]
fn zero_noise_reduces_to_deterministic_forward() {
    let mut s = RngStream::new(8, 0);
    let configs = [
        DecoderConfig::compact(6, 32, 3),
        DecoderConfig { pool: PoolKind::Max, ..DecoderConfig::compact(6, 32, 3) },
        DecoderConfig { temporal_kernel: 7, pool_width: 4, ..DecoderConfig::compact(3, 20, 2) },
        DecoderConfig::new(22, 400, 4),
    ];
    for (i, c) in configs.into_iter().enumerate() {
        let (ch, t) = (c.n_channels, c.n_samples);
        let mut m = build_decoder(c, &RngStream::new(i as u64, 0)).unwrap();
        for r in m.running.iter_mut() {
            r.var.iter_mut().for_each(|v| *v = 0.5 + s.uniform());
            r.mean.iter_mut().for_each(|v| *v = 0.2 * s.normal());
        }
        let x = gaussian(&mut s, &[2, 1, ch, t]);
        let det = m.forward(&x, None).unwrap();
        let m0 = lift(&x, &InputNoise::Scalar(0.0)).unwrap();
        for mask in [None, Some(DropoutMask::ones(&m, 2))] {
            let out = adf_forward(&m, &m0, mask.as_ref()).unwrap();
            assert!(out.mean.max_abs_diff(&det) <= 1e-9);
            assert!(out.var.data().iter().all(|&v| v == 0.0));
        }
        let n_params = m.n_params();
        assert_eq!(m.n_params(), n_params);
    }
}

#[test]
fn prefix_and_suffix_compose() {
    let m = build_decoder(DecoderConfig::compact(6, 32, 3), &RngStream::new(9, 0)).unwrap();
    let mut s = RngStream::new(9, 1);
    let x = gaussian(&mut s, &[3, 1, 6, 32]);
    let m0 = lift(&x, &InputNoise::Scalar(0.05)).unwrap();
    let mask = DropoutMask::sample(&m, 3, 0.7, &mut s).unwrap();
    let whole = adf_forward(&m, &m0, Some(&mask)).unwrap();
    let split = adf_suffix(&m, &adf_prefix(&m, &m0).unwrap(), Some(&mask)).unwrap();
    assert_eq!(whole, split);
}

#[test]
fn mask_matches_deterministic_dropout_forward() {
    let m = build_decoder(DecoderConfig::compact(6, 32, 3), &RngStream::new(10, 0)).unwrap();
    let mut s = RngStream::new(10, 1);
    let x = gaussian(&mut s, &[2, 1, 6, 32]);
    let mask = DropoutMask::sample(&m, 2, 0.5, &mut s).unwrap();
    let out = adf_forward(&m, &lift(&x, &InputNoise::Scalar(0.0)).unwrap(), Some(&mask)).unwrap();
    assert!(out.mean.max_abs_diff(&m.forward(&x, Some(&mask)).unwrap()) <= 1e-9);
}

#[test]
fn train_mode_model_is_rejected() {
    let mut m = build_decoder(DecoderConfig::compact(6, 32, 3), &RngStream::new(11, 0)).unwrap();
    m.mode = Mode::Train;
    let x = Tensor::zeros(&[1, 1, 6, 32]);
    assert!(adf_forward(&m, &lift(&x, &InputNoise::Scalar(0.1)).unwrap(), None).is_err());
}

#[test]
fn layer_errors_carry_the_layer_index() {
    let mut m = build_decoder(DecoderConfig::compact(6, 32, 3), &RngStream::new(12, 0)).unwrap();
    m.running[2].var[0] = -5.0;
    let x = Tensor::ones(&[1, 1, 6, 32]);
    match adf_forward(&m, &lift(&x, &InputNoise::Scalar(0.1)).unwrap(), None) {
        Err(Error::Layer { index, .. }) => assert_eq!(index, 7),
        other => panic!("expected a layer error, got {other:?}"),
    }
}

#[test]
fn output_variance_grows_with_input_noise() {
    let cfg = ExperimentConfig::default();
    let tk = task(&cfg.synth, 3, cfg.data.window, cfg.data.stride);
    let m = trained(&tk, 3, 5);
    let idx: Vec<usize> = (0..100).collect();
    let (x, _) = tk.test.batch(&idx);
    let grid = [0.01, 0.02, 0.05, 0.1, 0.2, 0.3];
    let mut prev: Option<MomentTensor> = None;
    for &u in &grid {
        let out = adf_forward(&m, &lift(&x, &InputNoise::Scalar(u)).unwrap(), None).unwrap();
        assert!(out.var.data().iter().all(|&v| v >= 0.0));
        if let Some(p) = &prev {
            for (a, b) in out.var.data().iter().zip(p.var.data()) {
                assert!(a >= b, "variance fell from {b} to {a} at u = {u}");
            }
        }
        let doubled = adf_forward(&m, &lift(&x, &InputNoise::Scalar(2.0 * u)).unwrap(), None).unwrap();
        assert!(doubled.var.data().iter().zip(out.var.data()).all(|(a, b)| a >= b));
        prev = Some(out);
    }
}

/// Logit moments of a trained decoder under input noise against pushing
/// sampled inputs through the deterministic network. Means agree closely on
/// average over inputs; the diagonal approximation misses the correlations
/// that the temporal convolution induces, so variances are only checked to be
/// of the right order here.
#[test]
fn trained_network_against_input_sampling() {
    let cfg = ExperimentConfig::default();
    let tk = task(&cfg.synth, 4, cfg.data.window, cfg.data.stride);
    let m = trained(&tk, 4, 10);
    let ff = FastForward::new(&m);
    let n = ff.input_len();
    let (x, _) = tk.test.batch(&[0, 1, 2]);
    let lib = m.forward(&x, None).unwrap();
    let adf = adf_forward(&m, &lift(&x, &InputNoise::Scalar(0.1)).unwrap(), None).unwrap();
    let mut s = RngStream::new(4, 9);
    let k = m.config.n_classes;
    let mut rel = Vec::new();
    for i in 0..3 {
        let mut out = vec![0.0; k];
        ff.logits(&x.data()[i * n..(i + 1) * n], &mut out);
        for (a, b) in out.iter().zip(lib.row(i)) {
            assert!((a - b).abs() < 1e-9);
        }
        let mc = input_sampling_moments(&ff, &x.data()[i * n..(i + 1) * n], 0.1, 20_000, &mut s);
        let mean_mc: Vec<f64> = (0..k).map(|c| mc.mean(c)).collect();
        let norm = mean_mc.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff = (0..k).map(|c| (adf.mean.row(i)[c] - mean_mc[c]).powi(2)).sum::<f64>().sqrt();
        rel.push(diff / norm);
        for c in 0..k {
            let ratio = adf.var.row(i)[c] / mc.var(c);
            assert!(ratio > 0.05 && ratio < 1.5, "input {i} class {c}: variance ratio {ratio}");
        }
    }
    let avg = rel.iter().sum::<f64>() / rel.len() as f64;
    assert!(avg < 0.03, "mean relative error {avg} (per input {rel:?})");
}
