//! Trials, segments, the synthetic generator, splits and the UEEG container.
//!
//! UEEG layout (all little-endian):
//!
//! ```text
//! "UEEG" | version u8 = 1
//! u32 n_trials | u32 n_channels | u32 n_samples | u32 n_classes | u32 n_subjects | u32 sample_rate_hz
//! f64 data, trial-major ([trial][channel][sample])
//! u8 label per trial | u8 subject per trial
//! u32 meta length | meta as JSON text
//! ```

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::io::{put_f64s, ByteReader};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const UEEG_MAGIC: [u8; 4] = *b"UEEG";
pub const UEEG_VERSION: u8 = 1;

pub type Meta = BTreeMap<String, Value>;

/// Continuous trials, one label and subject per trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    /// `[n_trials, n_channels, n_samples]`
    pub data: Tensor,
    pub labels: Vec<usize>,
    pub subjects: Vec<usize>,
    pub n_classes: usize,
    pub sample_rate: u32,
    pub meta: Meta,
}

impl TrialSet {
    pub fn new(data: Tensor, labels: Vec<usize>, subjects: Vec<usize>, n_classes: usize, sample_rate: u32, meta: Meta) -> Result<Self> {
        if data.ndim() != 3 {
            return Err(Error::shape("trial set", format!("data must be [trials, channels, samples], got {:?}", data.shape())));
        }
        let n = data.dim(0);
        if labels.len() != n || subjects.len() != n {
            return Err(Error::shape("trial set", format!("{n} trials but {} labels and {} subjects", labels.len(), subjects.len())));
        }
        if n_classes == 0 || labels.iter().any(|&l| l >= n_classes) {
            return Err(Error::invalid(format!("labels must lie in [0, {n_classes})")));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        Ok(Self { data, labels, subjects, n_classes, sample_rate, meta })
    }

    pub fn n_trials(&self) -> usize {
        self.data.dim(0)
    }

    pub fn n_channels(&self) -> usize {
        self.data.dim(1)
    }

    pub fn n_samples(&self) -> usize {
        self.data.dim(2)
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.iter().max().map_or(0, |&s| s + 1)
    }

    pub fn trial(&self, i: usize) -> &[f64] {
        self.data.row(i)
    }

    /// Injected white-noise variance recorded by the synthetic generator.
    pub fn u_true(&self) -> Option<f64> {
        self.meta.get("u_true").and_then(Value::as_f64)
    }
}

/// Fixed-length windows cut from trials; provenance is kept per segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSet {
    /// `[n_segments, n_channels, window]`
    pub segments: Tensor,
    pub labels: Vec<usize>,
    pub subjects: Vec<usize>,
    /// Index of the source trial in the originating `TrialSet`.
    pub trial_index: Vec<usize>,
    pub n_classes: usize,
    pub window: usize,
    pub stride: usize,
}

impl SegmentSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_channels(&self) -> usize {
        self.segments.dim(1)
    }

    pub fn segment(&self, i: usize) -> Tensor {
        Tensor::new(vec![self.n_channels(), self.window], self.segments.row(i).to_vec()).unwrap()
    }

    /// Decoder input `[b, 1, channels, window]` and labels for `indices`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let w = self.n_channels() * self.window;
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(self.segments.row(i));
        }
        let x = Tensor::new(vec![indices.len(), 1, self.n_channels(), self.window], data).unwrap();
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Entire set as one decoder batch.
    pub fn all(&self) -> (Tensor, Vec<usize>) {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<SegmentSet> {
        if indices.is_empty() {
            return Err(Error::Empty("segment subset"));
        }
        let w = self.n_channels() * self.window;
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(self.segments.row(i));
        }
        Ok(SegmentSet {
            segments: Tensor::new(vec![indices.len(), self.n_channels(), self.window], data)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            subjects: indices.iter().map(|&i| self.subjects[i]).collect(),
            trial_index: indices.iter().map(|&i| self.trial_index[i]).collect(),
            n_classes: self.n_classes,
            window: self.window,
            stride: self.stride,
        })
    }

    /// Same provenance, new signal values (used for corrupted copies).
    pub fn with_segments(&self, segments: Tensor) -> Result<SegmentSet> {
        segments.expect_shape(self.segments.shape(), "with_segments")?;
        Ok(SegmentSet { segments, ..self.clone() })
    }
}

/// Number of windows one trial of `n_samples` yields.
pub fn segment_count(n_samples: usize, window: usize, stride: usize) -> usize {
    (n_samples - window) / stride + 1
}

pub fn segment(trials: &TrialSet, window: usize, stride: usize) -> Result<SegmentSet> {
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    if window == 0 || window > trials.n_samples() {
        return Err(Error::invalid(format!(
            "window {window} must lie in [1, n_samples = {}]",
            trials.n_samples()
        )));
    }
    let (c, t) = (trials.n_channels(), trials.n_samples());
    let per = segment_count(t, window, stride);
    let n = trials.n_trials() * per;
    let mut data = Vec::with_capacity(n * c * window);
    let (mut labels, mut subjects, mut trial_index) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for tr in 0..trials.n_trials() {
        let src = trials.trial(tr);
        for s in 0..per {
            let start = s * stride;
            for ch in 0..c {
                data.extend_from_slice(&src[ch * t + start..ch * t + start + window]);
            }
            labels.push(trials.labels[tr]);
            subjects.push(trials.subjects[tr]);
            trial_index.push(tr);
        }
    }
    Ok(SegmentSet {
        segments: Tensor::new(vec![n, c, window], data)?,
        labels,
        subjects,
        trial_index,
        n_classes: trials.n_classes,
        window,
        stride,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Intra,
    Cross,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intra" => Ok(SplitMode::Intra),
            "cross" => Ok(SplitMode::Cross),
            other => Err(Error::invalid(format!("unknown split mode `{other}` (intra | cross)"))),
        }
    }
}

/// Train/test split at trial granularity.
///
/// `Intra` stratifies per (subject, class) and sends `fraction` of the trials
/// of every group to train. `Cross` sends every segment of `holdout_subject`
/// to test and everything else to train.
pub fn split(
    set: &SegmentSet,
    mode: SplitMode,
    holdout_subject: Option<usize>,
    fraction: f64,
    stream: &mut RngStream,
) -> Result<(SegmentSet, SegmentSet)> {
    let (train_idx, test_idx): (Vec<usize>, Vec<usize>) = match mode {
        SplitMode::Cross => {
            let s = holdout_subject.ok_or_else(|| Error::invalid("cross split needs a holdout subject"))?;
            if !set.subjects.contains(&s) {
                return Err(Error::invalid(format!("holdout subject {s} not present in data")));
            }
            (0..set.len()).partition(|&i| set.subjects[i] != s)
        }
        SplitMode::Intra => {
            if !(0.0..=1.0).contains(&fraction) {
                return Err(Error::invalid(format!("train fraction {fraction} outside [0, 1]")));
            }
            let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
            for i in 0..set.len() {
                let g = groups.entry((set.labels[i], set.subjects[i])).or_default();
                if !g.contains(&set.trial_index[i]) {
                    g.push(set.trial_index[i]);
                }
            }
            // Within each class, walk the subjects in random order and give
            // each the difference of the rounded cumulative targets, so every
            // (subject, class) group and every class total lands within one
            // trial of `fraction`.
            let mut by_class: BTreeMap<usize, Vec<Vec<usize>>> = BTreeMap::new();
            for ((label, _), trials) in groups {
                by_class.entry(label).or_default().push(trials);
            }
            let mut train_trials = std::collections::BTreeSet::new();
            for subjects in by_class.values_mut() {
                stream.shuffle(subjects);
                let (mut seen, mut taken) = (0usize, 0usize);
                for trials in subjects.iter_mut() {
                    stream.shuffle(trials);
                    seen += trials.len();
                    let target = (fraction * seen as f64).round() as usize;
                    train_trials.extend(trials.iter().take(target - taken).copied());
                    taken = target;
                }
            }
            (0..set.len()).partition(|&i| train_trials.contains(&set.trial_index[i]))
        }
    };
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::Empty("split produced an empty side"));
    }
    Ok((set.subset(&train_idx)?, set.subset(&test_idx)?))
}

/// Parameters of the synthetic motor-imagery generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub trials_per_subject: usize,
    pub n_channels: usize,
    pub n_samples: usize,
    pub n_classes: usize,
    /// Variance of the white noise present in the final data.
    pub u_true: f64,
    pub sample_rate: u32,
    /// Channels that carry class signal before subject mixing.
    pub signal_channels: Vec<usize>,
    /// Angular scale of the per-subject orthogonal channel mixing; 0 disables it.
    pub mixing_strength: f64,
    /// Relative per-trial amplitude jitter of the oscillations.
    pub amplitude_jitter: f64,
}

impl SynthSpec {
    pub fn new(n_subjects: usize, trials_per_subject: usize, n_channels: usize, n_samples: usize, n_classes: usize, u_true: f64) -> Self {
        let signal_channels = if n_channels >= 8 { vec![3, 7] } else { (0..n_channels.min(2)).collect() };
        Self {
            n_subjects,
            trials_per_subject,
            n_channels,
            n_samples,
            n_classes,
            u_true,
            sample_rate: 128,
            signal_channels,
            mixing_strength: 0.0,
            amplitude_jitter: 0.2,
        }
    }

    /// Oscillation frequency of class `k`, spread over 8–30 Hz.
    pub fn class_frequency(&self, k: usize) -> f64 {
        if self.n_classes == 1 {
            10.0
        } else {
            8.0 + 22.0 * k as f64 / (self.n_classes - 1) as f64
        }
    }

    /// Signal channels active for class `k`: first only, second only, or both,
    /// cycling over classes.
    pub fn class_channels(&self, k: usize) -> Vec<usize> {
        let s = &self.signal_channels;
        if s.len() < 2 {
            return s.clone();
        }
        match k % 3 {
            0 => vec![s[0]],
            1 => vec![s[1]],
            _ => s.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.trials_per_subject == 0 || self.n_channels == 0 || self.n_samples == 0 || self.n_classes == 0 {
            return Err(Error::invalid("synthetic generator counts must be positive"));
        }
        if self.n_subjects > 256 || self.n_classes > 256 {
            return Err(Error::invalid("at most 256 subjects and classes"));
        }
        if !(self.u_true >= 0.0) {
            return Err(Error::invalid(format!("u_true must be >= 0, got {}", self.u_true)));
        }
        if self.signal_channels.is_empty() || self.signal_channels.iter().any(|&c| c >= self.n_channels) {
            return Err(Error::invalid("signal channels must be non-empty and within range"));
        }
        if self.sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        Ok(())
    }
}

/// Random orthogonal matrix near the identity: a product of Givens
/// rotations over every channel pair with angles `~ N(0, strength^2)`.
fn subject_mixing(n: usize, strength: f64, stream: &mut RngStream) -> Vec<f64> {
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }
    if strength == 0.0 {
        return q;
    }
    for i in 0..n {
        for j in i + 1..n {
            let theta = strength * stream.normal();
            let (s, c) = theta.sin_cos();
            for col in 0..n {
                let (a, b) = (q[i * n + col], q[j * n + col]);
                q[i * n + col] = c * a - s * b;
                q[j * n + col] = s * a + c * b;
            }
        }
    }
    q
}

/// Synthetic trials plus the noise-free component, `[trials, channels, samples]`.
pub fn synth_generate_with_clean(spec: &SynthSpec, stream: &RngStream) -> Result<(TrialSet, Tensor)> {
    spec.validate()?;
    let (c, t) = (spec.n_channels, spec.n_samples);
    let n = spec.n_subjects * spec.trials_per_subject;
    let mut mix_stream = stream.derive(1);
    let mut trial_stream = stream.derive(2);
    let mut noise_stream = stream.derive(3);
    let mixings: Vec<Vec<f64>> = (0..spec.n_subjects).map(|_| subject_mixing(c, spec.mixing_strength, &mut mix_stream)).collect();

    let mut clean = vec![0.0; n * c * t];
    let mut labels = Vec::with_capacity(n);
    let mut subjects = Vec::with_capacity(n);
    let mut source = vec![0.0; c * t];
    for subj in 0..spec.n_subjects {
        for j in 0..spec.trials_per_subject {
            let tr = subj * spec.trials_per_subject + j;
            let label = j % spec.n_classes;
            labels.push(label);
            subjects.push(subj);
            source.iter_mut().for_each(|v| *v = 0.0);
            let f = spec.class_frequency(label);
            for ch in spec.class_channels(label) {
                let phase = 2.0 * PI * trial_stream.uniform();
                let amp = 1.0 + spec.amplitude_jitter * (2.0 * trial_stream.uniform() - 1.0);
                for s in 0..t {
                    let time = s as f64 / spec.sample_rate as f64;
                    source[ch * t + s] = amp * (2.0 * PI * f * time + phase).sin();
                }
            }
            let q = &mixings[subj];
            let dst = &mut clean[tr * c * t..(tr + 1) * c * t];
            for out_ch in 0..c {
                for in_ch in 0..c {
                    let w = q[out_ch * c + in_ch];
                    if w == 0.0 {
                        continue;
                    }
                    for s in 0..t {
                        dst[out_ch * t + s] += w * source[in_ch * t + s];
                    }
                }
            }
        }
    }

    // Centre each channel, then scale every channel by one factor that gives
    // the signal channels unit mean variance. A shared factor keeps leaked
    // signal on the other channels at its true relative amplitude, and the
    // injected noise keeps exactly the requested variance.
    let mut channel_mean = vec![0.0; c];
    let mut channel_var = vec![0.0; c];
    for ch in 0..c {
        let vals = || (0..n).flat_map(|tr| clean[(tr * c + ch) * t..(tr * c + ch + 1) * t].iter());
        let m = vals().sum::<f64>() / (n * t) as f64;
        channel_mean[ch] = m;
        channel_var[ch] = vals().map(|v| (v - m).powi(2)).sum::<f64>() / (n * t) as f64;
    }
    let signal_var = spec.signal_channels.iter().map(|&ch| channel_var[ch]).sum::<f64>() / spec.signal_channels.len() as f64;
    let scale = if signal_var > 1e-24 { 1.0 / signal_var.sqrt() } else { 1.0 };
    for tr in 0..n {
        for ch in 0..c {
            for v in &mut clean[(tr * c + ch) * t..(tr * c + ch + 1) * t] {
                *v = (*v - channel_mean[ch]) * scale;
            }
        }
    }
    let sd = spec.u_true.sqrt();
    let data: Vec<f64> = clean.iter().map(|&v| if sd > 0.0 { v + sd * noise_stream.normal() } else { v }).collect();

    let mut meta = Meta::new();
    meta.insert("generator".into(), Value::from("synthetic"));
    meta.insert("u_true".into(), Value::from(spec.u_true));
    meta.insert("signal_channels".into(), Value::from(spec.signal_channels.clone()));
    meta.insert("class_frequencies_hz".into(), Value::from((0..spec.n_classes).map(|k| spec.class_frequency(k)).collect::<Vec<_>>()));
    meta.insert("mixing_strength".into(), Value::from(spec.mixing_strength));
    meta.insert("amplitude_jitter".into(), Value::from(spec.amplitude_jitter));
    meta.insert("clean_scale".into(), Value::from(scale));
    meta.insert("seed".into(), Value::from(stream.seed()));

    let shape = vec![n, c, t];
    let set = TrialSet::new(Tensor::new(shape.clone(), data)?, labels, subjects, spec.n_classes, spec.sample_rate, meta)?;
    Ok((set, Tensor::new(shape, clean)?))
}

pub fn synth_generate(spec: &SynthSpec, stream: &RngStream) -> Result<TrialSet> {
    synth_generate_with_clean(spec, stream).map(|(set, _)| set)
}

pub fn write_dataset(set: &TrialSet, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_dataset(set)?)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<TrialSet> {
    decode_dataset(&std::fs::read(path)?)
}

pub fn encode_dataset(set: &TrialSet) -> Result<Vec<u8>> {
    let to_u8 = |v: usize, what: &str| u8::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit in u8")));
    let mut out = Vec::with_capacity(64 + set.data.len() * 8 + 2 * set.n_trials());
    out.extend_from_slice(&UEEG_MAGIC);
    out.push(UEEG_VERSION);
    let header = [
        set.n_trials(),
        set.n_channels(),
        set.n_samples(),
        set.n_classes,
        set.n_subjects(),
        set.sample_rate as usize,
    ];
    for v in header {
        let v = u32::try_from(v).map_err(|_| Error::invalid("header field exceeds u32"))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    put_f64s(&mut out, set.data.data());
    for &l in &set.labels {
        out.push(to_u8(l, "label")?);
    }
    for &s in &set.subjects {
        out.push(to_u8(s, "subject")?);
    }
    let meta = serde_json::to_string(&set.meta)?;
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<TrialSet> {
    let mut r = ByteReader::new(bytes);
    r.magic(UEEG_MAGIC)?;
    let version = r.u8("version")?;
    if version != UEEG_VERSION {
        return Err(Error::VersionMismatch { expected: UEEG_VERSION, found: version });
    }
    let mut h = [0usize; 6];
    for v in h.iter_mut() {
        *v = r.u32("header")? as usize;
    }
    let [n, c, t, k, _n_subjects, rate] = h;
    let count = n.checked_mul(c).and_then(|v| v.checked_mul(t)).ok_or(Error::Format("header overflows".into()))?;
    let data = r.f64s(count, "signal data")?;
    let labels: Vec<usize> = r.take(n, "labels")?.iter().map(|&b| b as usize).collect();
    let subjects: Vec<usize> = r.take(n, "subjects")?.iter().map(|&b| b as usize).collect();
    let meta_len = r.u32("meta length")? as usize;
    let meta_bytes = r.take(meta_len, "meta block")?;
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes after meta block", r.remaining())));
    }
    let meta: Meta = serde_json::from_slice(meta_bytes)?;
    TrialSet::new(Tensor::new(vec![n, c, t], data)?, labels, subjects, k, rate as u32, meta)
}
