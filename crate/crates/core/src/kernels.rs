//! Raw numeric kernels shared by the autodiff tape and the moment-propagation
//! pass. Everything here works on `Tensor` values without recording history.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Zero padding applied around the two spatial axes of a 4-d input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding2d {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding2d {
    pub fn symmetric(h: usize, w: usize) -> Self {
        Self { top: h, bottom: h, left: w, right: w }
    }

    /// Padding that keeps the spatial extent unchanged for a stride-1 kernel
    /// (extra element on the bottom/right for even kernels).
    pub fn same(kh: usize, kw: usize) -> Self {
        Self { top: (kh - 1) / 2, bottom: kh / 2, left: (kw - 1) / 2, right: kw / 2 }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub cin_g: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub groups: usize,
    pub pad: Padding2d,
}

pub(crate) fn conv_geometry(input: &[usize], kernel: &[usize], pad: Padding2d, groups: usize) -> Result<ConvGeom> {
    if input.len() != 4 {
        return Err(Error::shape("conv2d", format!("input must be 4-d [batch, ch_in, H, W], got {input:?}")));
    }
    if kernel.len() != 4 {
        return Err(Error::shape("conv2d", format!("kernel must be 4-d [ch_out, ch_in/groups, kh, kw], got {kernel:?}")));
    }
    if groups == 0 {
        return Err(Error::invalid("conv2d: groups must be positive"));
    }
    let (n, cin, h, w) = (input[0], input[1], input[2], input[3]);
    let (cout, cin_g, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
    if cin % groups != 0 {
        return Err(Error::shape("conv2d", format!("dimension 1 (ch_in={cin}) not divisible by groups={groups}")));
    }
    if cout % groups != 0 {
        return Err(Error::shape("conv2d", format!("dimension 0 of kernel (ch_out={cout}) not divisible by groups={groups}")));
    }
    if cin / groups != cin_g {
        return Err(Error::shape(
            "conv2d",
            format!("dimension 1: kernel expects {cin_g} input channels per group, input provides {}", cin / groups),
        ));
    }
    let hp = h + pad.top + pad.bottom;
    let wp = w + pad.left + pad.right;
    if kh > hp {
        return Err(Error::shape("conv2d", format!("dimension 2 (H): kernel {kh} exceeds padded input {hp}")));
    }
    if kw > wp {
        return Err(Error::shape("conv2d", format!("dimension 3 (W): kernel {kw} exceeds padded input {wp}")));
    }
    Ok(ConvGeom { n, cin, h, w, cout, cin_g, kh, kw, oh: hp - kh + 1, ow: wp - kw + 1, groups, pad })
}

/// Range of output columns `ow` for which `ow + kx - left` is a valid input column.
#[inline]
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = g.pad.left.saturating_sub(kx);
    let hi = (g.w + g.pad.left).saturating_sub(kx).min(g.ow);
    (lo, hi.max(lo))
}

#[inline]
fn input_row(g: &ConvGeom, oy: usize, ky: usize) -> Option<usize> {
    let iy = oy + ky;
    if iy < g.pad.top || iy - g.pad.top >= g.h {
        None
    } else {
        Some(iy - g.pad.top)
    }
}

/// Cross-correlation with zero padding and channel groups.
pub fn conv2d(input: &Tensor, kernel: &Tensor, pad: Padding2d, groups: usize) -> Result<Tensor> {
    let g = conv_geometry(input.shape(), kernel.shape(), pad, groups)?;
    let mut out = vec![0.0; g.n * g.cout * g.oh * g.ow];
    conv2d_into(&g, input.data(), kernel.data(), &mut out);
    Tensor::new(vec![g.n, g.cout, g.oh, g.ow], out)
}

pub(crate) fn conv2d_into(g: &ConvGeom, x: &[f64], k: &[f64], out: &mut [f64]) {
    let cout_g = g.cout / g.groups;
    for n in 0..g.n {
        for oc in 0..g.cout {
            let grp = oc / cout_g;
            let obase = (n * g.cout + oc) * g.oh * g.ow;
            for icl in 0..g.cin_g {
                let ic = grp * g.cin_g + icl;
                let ibase = (n * g.cin + ic) * g.h * g.w;
                let kbase = (oc * g.cin_g + icl) * g.kh * g.kw;
                for ky in 0..g.kh {
                    for oy in 0..g.oh {
                        let Some(iy) = input_row(g, oy, ky) else { continue };
                        let orow = &mut out[obase + oy * g.ow..obase + (oy + 1) * g.ow];
                        let irow = &x[ibase + iy * g.w..ibase + (iy + 1) * g.w];
                        for kx in 0..g.kw {
                            let wv = k[kbase + ky * g.kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let (lo, hi) = valid_cols(g, kx);
                            if lo == hi {
                                continue;
                            }
                            let off = kx as isize - g.pad.left as isize;
                            let src = &irow[(lo as isize + off) as usize..(hi as isize + off) as usize];
                            for (o, &v) in orow[lo..hi].iter_mut().zip(src) {
                                *o += wv * v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of `conv2d` with respect to its input.
pub(crate) fn conv2d_grad_input(g: &ConvGeom, gout: &[f64], k: &[f64]) -> Vec<f64> {
    let mut gin = vec![0.0; g.n * g.cin * g.h * g.w];
    let cout_g = g.cout / g.groups;
    for n in 0..g.n {
        for oc in 0..g.cout {
            let grp = oc / cout_g;
            let obase = (n * g.cout + oc) * g.oh * g.ow;
            for icl in 0..g.cin_g {
                let ic = grp * g.cin_g + icl;
                let ibase = (n * g.cin + ic) * g.h * g.w;
                let kbase = (oc * g.cin_g + icl) * g.kh * g.kw;
                for ky in 0..g.kh {
                    for oy in 0..g.oh {
                        let Some(iy) = input_row(g, oy, ky) else { continue };
                        let grow = &gout[obase + oy * g.ow..obase + (oy + 1) * g.ow];
                        let irow = &mut gin[ibase + iy * g.w..ibase + (iy + 1) * g.w];
                        for kx in 0..g.kw {
                            let wv = k[kbase + ky * g.kw + kx];
                            let (lo, hi) = valid_cols(g, kx);
                            if lo == hi {
                                continue;
                            }
                            let off = kx as isize - g.pad.left as isize;
                            let dst = &mut irow[(lo as isize + off) as usize..(hi as isize + off) as usize];
                            for (d, &go) in dst.iter_mut().zip(&grow[lo..hi]) {
                                *d += wv * go;
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

/// Gradient of `conv2d` with respect to its kernel.
pub(crate) fn conv2d_grad_kernel(g: &ConvGeom, gout: &[f64], x: &[f64]) -> Vec<f64> {
    let mut gk = vec![0.0; g.cout * g.cin_g * g.kh * g.kw];
    let cout_g = g.cout / g.groups;
    for n in 0..g.n {
        for oc in 0..g.cout {
            let grp = oc / cout_g;
            let obase = (n * g.cout + oc) * g.oh * g.ow;
            for icl in 0..g.cin_g {
                let ic = grp * g.cin_g + icl;
                let ibase = (n * g.cin + ic) * g.h * g.w;
                let kbase = (oc * g.cin_g + icl) * g.kh * g.kw;
                for ky in 0..g.kh {
                    for oy in 0..g.oh {
                        let Some(iy) = input_row(g, oy, ky) else { continue };
                        let grow = &gout[obase + oy * g.ow..obase + (oy + 1) * g.ow];
                        let irow = &x[ibase + iy * g.w..ibase + (iy + 1) * g.w];
                        for kx in 0..g.kw {
                            let (lo, hi) = valid_cols(g, kx);
                            if lo == hi {
                                continue;
                            }
                            let off = kx as isize - g.pad.left as isize;
                            let src = &irow[(lo as isize + off) as usize..(hi as isize + off) as usize];
                            let dot: f64 = grow[lo..hi].iter().zip(src).map(|(a, b)| a * b).sum();
                            gk[kbase + ky * g.kw + kx] += dot;
                        }
                    }
                }
            }
        }
    }
    gk
}

/// `[m, k] x [k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 {
        return Err(Error::shape("matmul", format!("operands must be 2-d, got {:?} and {:?}", a.shape(), b.shape())));
    }
    let (m, k) = (a.dim(0), a.dim(1));
    let (k2, n) = (b.dim(0), b.dim(1));
    if k != k2 {
        return Err(Error::shape("matmul", format!("inner dimension: left has {k}, right has {k2}")));
    }
    Tensor::new(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T b` for `a: [m, k]`, `b: [m, n]` → `[k, n]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a b^T` for `a: [m, n]`, `b: [k, n]` → `[m, k]`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            out[i * k + j] = arow.iter().zip(&b[j * n..(j + 1) * n]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

pub(crate) fn pool_geometry(shape: &[usize], window: (usize, usize), op: &'static str) -> Result<()> {
    if shape.len() != 4 {
        return Err(Error::shape(op, format!("input must be 4-d, got {shape:?}")));
    }
    let (ph, pw) = window;
    if ph == 0 || pw == 0 {
        return Err(Error::invalid(format!("{op}: window must be positive")));
    }
    if shape[2] % ph != 0 {
        return Err(Error::shape(op, format!("dimension 2 (H={}) not divisible by window {ph}", shape[2])));
    }
    if shape[3] % pw != 0 {
        return Err(Error::shape(op, format!("dimension 3 (W={}) not divisible by window {pw}", shape[3])));
    }
    Ok(())
}

/// Non-overlapping average pooling over the two spatial axes.
pub fn avgpool2d(x: &Tensor, window: (usize, usize)) -> Result<Tensor> {
    pool_geometry(x.shape(), window, "avgpool2d")?;
    Ok(window_reduce(x, window, |vals| vals.iter().sum::<f64>() / vals.len() as f64))
}

/// Apply `f` to the values of each non-overlapping window.
pub(crate) fn window_reduce(x: &Tensor, window: (usize, usize), f: impl Fn(&[f64]) -> f64) -> Tensor {
    let s = x.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let (ph, pw) = window;
    let (oh, ow) = (h / ph, w / pw);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut buf = Vec::with_capacity(ph * pw);
    let d = x.data();
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                buf.clear();
                for dy in 0..ph {
                    let row = p * h * w + (oy * ph + dy) * w + ox * pw;
                    buf.extend_from_slice(&d[row..row + pw]);
                }
                out.push(f(&buf));
            }
        }
    }
    Tensor::new(vec![s[0], s[1], oh, ow], out).expect("pool shape")
}

/// Flat input index of each window element, window-major.
pub(crate) fn window_indices(shape: &[usize], window: (usize, usize)) -> Vec<Vec<usize>> {
    let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (ph, pw) = window;
    let mut out = Vec::with_capacity(planes * (h / ph) * (w / pw));
    for p in 0..planes {
        for oy in 0..h / ph {
            for ox in 0..w / pw {
                let mut idx = Vec::with_capacity(ph * pw);
                for dy in 0..ph {
                    for dx in 0..pw {
                        idx.push(p * h * w + (oy * ph + dy) * w + ox * pw + dx);
                    }
                }
                out.push(idx);
            }
        }
    }
    out
}

/// Row-wise softmax over the last axis.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let n = *x.shape().last().unwrap();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        softmax_in_place(row);
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-channel affine map `y = x * coef[c] + offset[c]` over axis 1.
pub(crate) fn channel_affine(x: &Tensor, coef: &[f64], offset: &[f64]) -> Tensor {
    let s = x.shape();
    let c = s[1];
    let inner: usize = s[2..].iter().product();
    let mut out = x.data().to_vec();
    for (i, v) in out.iter_mut().enumerate() {
        let ch = (i / inner) % c;
        *v = *v * coef[ch] + offset[ch];
    }
    Tensor::new(s.to_vec(), out).unwrap()
}
