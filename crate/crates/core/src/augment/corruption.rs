//! Signal-domain corruption operators. Every operator treats its input as a
//! stack of rows whose last axis is time.

use std::fmt;
use std::str::FromStr;

use rand_distr::Poisson;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    MotionBlur,
    ZoomBlur,
    Intensity,
    Contrast,
    Elastic,
    /// Leaves the signal untouched.
    Identity,
}

impl CorruptionKind {
    /// The eight signal corruptions (identity excluded).
    pub const ALL: [CorruptionKind; 8] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::MotionBlur,
        CorruptionKind::ZoomBlur,
        CorruptionKind::Intensity,
        CorruptionKind::Contrast,
        CorruptionKind::Elastic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::ZoomBlur => "zoom_blur",
            CorruptionKind::Intensity => "intensity",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Elastic => "elastic",
            CorruptionKind::Identity => "identity",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .iter()
            .chain(std::iter::once(&CorruptionKind::Identity))
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown corruption `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionOp {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionOp {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::invalid(format!("severity {severity} outside 1..=5")));
        }
        Ok(Self { kind, severity })
    }
}

/// Noise standard deviation of `gaussian_noise`.
pub fn gaussian_sigma(severity: u8) -> f64 {
    [0.1, 0.2, 0.3, 0.4, 0.5][severity as usize - 1]
}

/// Magnitude of the `intensity` gain deviation from 1.
pub fn intensity_step(severity: u8) -> f64 {
    0.1 * severity as f64
}

fn rows(x: &Tensor) -> Result<(usize, usize)> {
    let t = *x.shape().last().ok_or(Error::Empty("signal"))?;
    Ok((x.len() / t, t))
}

/// Sample of `row` at fractional time `pos`, clamped to the ends.
fn interp(row: &[f64], pos: f64) -> f64 {
    let last = (row.len() - 1) as f64;
    let p = pos.clamp(0.0, last);
    let i = p.floor() as usize;
    let frac = p - i as f64;
    if i + 1 >= row.len() {
        row[row.len() - 1]
    } else {
        row[i] * (1.0 - frac) + row[i + 1] * frac
    }
}

pub fn apply_corruption(op: CorruptionOp, x: &Tensor, stream: &mut RngStream) -> Result<Tensor> {
    let s = op.severity;
    if !(1..=5).contains(&s) {
        return Err(Error::invalid(format!("severity {s} outside 1..=5")));
    }
    let (n_rows, t) = rows(x)?;
    let mut out = x.data().to_vec();
    match op.kind {
        CorruptionKind::Identity => {}
        CorruptionKind::GaussianNoise => {
            let sigma = gaussian_sigma(s);
            out.iter_mut().for_each(|v| *v += sigma * stream.normal());
        }
        CorruptionKind::ShotNoise => {
            // Photon-count style noise whose variance grows with |x| / k.
            let k = [60.0, 25.0, 12.0, 5.0, 3.0][s as usize - 1];
            for v in out.iter_mut() {
                let rate = v.abs() * k;
                if rate > 0.0 {
                    let count: f64 = stream.sample(&Poisson::new(rate).map_err(|e| Error::invalid(e.to_string()))?);
                    *v = v.signum() * count / k;
                }
            }
        }
        CorruptionKind::ImpulseNoise => {
            let density = [0.01, 0.02, 0.04, 0.07, 0.1][s as usize - 1];
            let amp = [2.0, 3.0, 4.0, 5.0, 6.0][s as usize - 1];
            for v in out.iter_mut() {
                let u = stream.uniform();
                if u < density {
                    *v += if u < density / 2.0 { amp } else { -amp };
                }
            }
        }
        CorruptionKind::MotionBlur => {
            let half = s as usize;
            for r in 0..n_rows {
                let src = &x.data()[r * t..(r + 1) * t];
                for i in 0..t {
                    let (lo, hi) = (i.saturating_sub(half), (i + half).min(t - 1));
                    out[r * t + i] = src[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
                }
            }
        }
        CorruptionKind::ZoomBlur => {
            let copies = 4 * s as usize + 1;
            let centre = (t - 1) as f64 / 2.0;
            for r in 0..n_rows {
                let src = &x.data()[r * t..(r + 1) * t];
                for i in 0..t {
                    let mut acc = 0.0;
                    for j in 0..copies {
                        let f = 1.0 + 0.01 * j as f64;
                        acc += interp(src, centre + (i as f64 - centre) / f);
                    }
                    out[r * t + i] = acc / copies as f64;
                }
            }
        }
        CorruptionKind::Intensity => {
            let sign = if stream.bernoulli(0.5) { 1.0 } else { -1.0 };
            let gain = 1.0 + sign * intensity_step(s);
            out.iter_mut().for_each(|v| *v *= gain);
        }
        CorruptionKind::Contrast => {
            let c = [0.8, 0.65, 0.5, 0.35, 0.2][s as usize - 1];
            for r in 0..n_rows {
                let row = &mut out[r * t..(r + 1) * t];
                let m = row.iter().sum::<f64>() / t as f64;
                row.iter_mut().for_each(|v| *v = m + c * (*v - m));
            }
        }
        CorruptionKind::Elastic => {
            // Smooth displacement field shared by all rows: three random
            // low-frequency sinusoids, peak displacement 0.4 * s samples.
            let amp = 0.4 * s as f64;
            let mut field = vec![0.0; t];
            let mut peak: f64 = 0.0;
            let comps: Vec<(f64, f64, f64)> = (0..3)
                .map(|j| (stream.normal(), (j + 1) as f64 * (0.5 + stream.uniform()), 2.0 * std::f64::consts::PI * stream.uniform()))
                .collect();
            for (i, d) in field.iter_mut().enumerate() {
                let tau = i as f64 / t as f64;
                *d = comps.iter().map(|(a, f, ph)| a * (2.0 * std::f64::consts::PI * f * tau + ph).sin()).sum();
                peak = peak.max(d.abs());
            }
            let norm = if peak > 0.0 { amp / peak } else { 0.0 };
            for r in 0..n_rows {
                let src = &x.data()[r * t..(r + 1) * t];
                for i in 0..t {
                    out[r * t + i] = interp(src, i as f64 + field[i] * norm);
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Apply ops in order.
pub fn apply_chain(chain: &[CorruptionOp], x: &Tensor, stream: &mut RngStream) -> Result<Tensor> {
    let mut out = x.clone();
    for &op in chain {
        out = apply_corruption(op, &out, stream)?;
    }
    Ok(out)
}
