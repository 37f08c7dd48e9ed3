//! Occlusion attribution: how prediction and uncertainty change when one
//! electrode is zeroed.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SegmentSet;
use crate::decoder::DecoderModel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::uncertainty::{estimate_set, UncertaintyConfig, UncertaintyReport};

pub const TOPOGRAPHY_HEADER: &str = "channel,x,y,influence_pred,influence_unc";

/// 22-electrode motor-imagery montage on a unit grid (Cz at the origin row).
pub const BCI_IV_2A_LAYOUT: &str = include_str!("../data/bci_iv_2a_layout.csv");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelInfluence {
    /// Mean drop in true-class probability when the channel is occluded.
    pub delta_prediction: Vec<f64>,
    /// Mean rise in true-class total variance when the channel is occluded.
    pub delta_uncertainty: Vec<f64>,
    pub runs: usize,
}

/// Zero one channel of a `[channels, samples]` segment.
pub fn occlude(x: &Tensor, channel: usize) -> Result<Tensor> {
    if x.ndim() != 2 {
        return Err(Error::shape("occlude", format!("expected [channels, samples], got {:?}", x.shape())));
    }
    if channel >= x.dim(0) {
        return Err(Error::invalid(format!("channel {channel} out of range for {} channels", x.dim(0))));
    }
    let mut out = x.clone();
    let t = x.dim(1);
    out.data_mut()[channel * t..(channel + 1) * t].iter_mut().for_each(|v| *v = 0.0);
    Ok(out)
}

fn occlude_set(set: &SegmentSet, channel: usize) -> SegmentSet {
    let (c, w) = (set.n_channels(), set.window);
    let mut segments = set.segments.clone();
    for i in 0..set.len() {
        let base = i * c * w + channel * w;
        segments.data_mut()[base..base + w].iter_mut().for_each(|v| *v = 0.0);
    }
    set.with_segments(segments).unwrap()
}

fn true_class(reports: &[UncertaintyReport], labels: &[usize]) -> (Vec<f64>, Vec<f64>) {
    reports.iter().zip(labels).map(|(r, &y)| (r.predictive_mean[y], r.total_variance[y])).unzip()
}

/// Occlusion influence per channel averaged over the set and `runs`
/// independent dropout seeds (`cfg.seed + run`).
pub fn channel_influence(model: &DecoderModel, set: &SegmentSet, cfg: &UncertaintyConfig, runs: usize) -> Result<ChannelInfluence> {
    if runs == 0 {
        return Err(Error::invalid("runs must be >= 1"));
    }
    if set.is_empty() {
        return Err(Error::Empty("segment set"));
    }
    let c = set.n_channels();
    let n = set.len() as f64;
    let mut dp = vec![0.0; c];
    let mut du = vec![0.0; c];
    for run in 0..runs {
        let cfg = UncertaintyConfig { seed: cfg.seed.wrapping_add(run as u64), ..cfg.clone() };
        let (base_p, base_v) = true_class(&estimate_set(model, set, &cfg)?, &set.labels);
        for ch in 0..c {
            let (p, v) = true_class(&estimate_set(model, &occlude_set(set, ch), &cfg)?, &set.labels);
            dp[ch] += base_p.iter().zip(&p).map(|(a, b)| a - b).sum::<f64>() / n;
            du[ch] += v.iter().zip(&base_v).map(|(a, b)| a - b).sum::<f64>() / n;
        }
    }
    let r = runs as f64;
    Ok(ChannelInfluence {
        delta_prediction: dp.into_iter().map(|v| v / r).collect(),
        delta_uncertainty: du.into_iter().map(|v| v / r).collect(),
        runs,
    })
}

/// Electrode position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Electrode {
    pub name: String,
    pub x: f64,
    pub y: f64,
}

/// Parse `name,x,y` rows; a leading header row is skipped.
pub fn parse_layout(text: &str) -> Result<Vec<Electrode>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("name")) {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 {
            return Err(Error::Format(format!("layout line {}: expected name,x,y", i + 1)));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("layout line {}: bad coordinate `{s}`", i + 1)));
        out.push(Electrode { name: f[0].to_string(), x: num(f[1])?, y: num(f[2])? });
    }
    Ok(out)
}

pub fn load_layout(path: impl AsRef<Path>) -> Result<Vec<Electrode>> {
    parse_layout(&std::fs::read_to_string(path)?)
}

pub fn bci_iv_2a_layout() -> Vec<Electrode> {
    parse_layout(BCI_IV_2A_LAYOUT).expect("bundled layout parses")
}

/// One row of a topography export.
#[derive(Debug, Clone, PartialEq)]
pub struct TopoRow {
    pub channel: String,
    pub x: f64,
    pub y: f64,
    pub influence_pred: f64,
    pub influence_unc: f64,
}

pub fn topography_csv(infl: &ChannelInfluence, layout: &[Electrode]) -> Result<String> {
    let c = infl.delta_prediction.len();
    if layout.len() < c {
        return Err(Error::invalid(format!("layout has {} electrodes, influence covers {c} channels", layout.len())));
    }
    let mut out = String::from(TOPOGRAPHY_HEADER);
    out.push('\n');
    for (ch, e) in layout.iter().take(c).enumerate() {
        writeln!(out, "{},{},{},{},{}", e.name, e.x, e.y, infl.delta_prediction[ch], infl.delta_uncertainty[ch]).unwrap();
    }
    Ok(out)
}

pub fn export_topography(infl: &ChannelInfluence, layout: &[Electrode], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, topography_csv(infl, layout)?)?;
    Ok(())
}

pub fn read_topography(path: impl AsRef<Path>) -> Result<Vec<TopoRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(TOPOGRAPHY_HEADER) {
        return Err(Error::Format("topography header mismatch".into()));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Format(format!("topography row `{l}` needs 5 fields")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number `{s}`")));
            Ok(TopoRow { channel: f[0].to_string(), x: num(f[1])?, y: num(f[2])?, influence_pred: num(f[3])?, influence_unc: num(f[4])? })
        })
        .collect()
}
