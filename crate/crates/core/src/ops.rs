//! Forward primitives and their adjoint kernels.
//!
//! Every function here is pure. Reductions run in a fixed sequential
//! order so identical inputs give bit-identical outputs.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn ensure_finite(t: Tensor, what: &str) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Output indices `o` in `[lo, hi)` whose input index `o*stride + tap - pad`
/// lies inside `[0, in_len)`.
fn valid_range(tap: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > tap { (pad - tap).div_ceil(stride) } else { 0 };
    let limit = in_len + pad; // o*stride + tap < in_len + pad
    let hi = if limit > tap { (limit - tap - 1) / stride + 1 } else { 0 };
    (lo.min(out_len), hi.min(out_len))
}

fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    if len + 2 * pad < k {
        return Err(Error::shape(format!(
            "kernel {k} larger than padded input {}",
            len + 2 * pad
        )));
    }
    Ok((len + 2 * pad - k) / stride + 1)
}

fn check_bias(b: Option<&Tensor>, n: usize) -> Result<()> {
    if let Some(b) = b {
        if b.shape() != [n] {
            return Err(Error::shape(format!("bias {:?} does not match {n} outputs", b.shape())));
        }
    }
    Ok(())
}

fn kernel_dims(w: &Tensor) -> Result<(usize, usize, usize)> {
    match w.shape() {
        &[a, b, k, k2] if k == k2 => Ok((a, b, k)),
        s => Err(Error::shape(format!("expected a square kernel [A,B,k,k], got {s:?}"))),
    }
}

/// 2-D cross-correlation. `w` is `[C_out, C_in, k, k]`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let (cin, h, wd) = x.dims3()?;
    let (cout, wcin, k) = kernel_dims(w)?;
    if wcin != cin {
        return Err(Error::shape(format!("conv2d kernel expects {wcin} input channels, input has {cin}")));
    }
    check_bias(b, cout)?;
    let oh = conv_out_len(h, k, stride, pad)?;
    let ow = conv_out_len(wd, k, stride, pad)?;
    let xs = x.data();
    let ws = w.data();
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        if let Some(b) = b {
            plane.fill(b.data()[co]);
        }
        for ci in 0..cin {
            let xin = &xs[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(ky, pad, stride, h, oh);
                for kx in 0..k {
                    let wv = ws[((co * cin + ci) * k + ky) * k + kx];
                    let (ox0, ox1) = valid_range(kx, pad, stride, wd, ow);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        let irow = &xin[iy * wd..(iy + 1) * wd];
                        if stride == 1 {
                            let ix0 = ox0 + kx - pad;
                            for (o, i) in orow[ox0..ox1].iter_mut().zip(&irow[ix0..]) {
                                *o += wv * i;
                            }
                        } else {
                            for (ox, o) in orow.iter_mut().enumerate().take(ox1).skip(ox0) {
                                *o += wv * irow[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    ensure_finite(Tensor::new(vec![cout, oh, ow], out)?, "conv2d")
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: usize,
    need_input: bool,
) -> Result<ConvGrads> {
    let (cin, h, wd) = x.dims3()?;
    let (cout, _, k) = kernel_dims(w)?;
    let (_, oh, ow) = gout.dims3()?;
    let xs = x.data();
    let ws = w.data();
    let gs = gout.data();
    let mut gx = if need_input { vec![0.0; cin * h * wd] } else { Vec::new() };
    let mut gw = vec![0.0; ws.len()];
    let mut gb = vec![0.0; cout];
    for co in 0..cout {
        let gplane = &gs[co * oh * ow..(co + 1) * oh * ow];
        gb[co] = gplane.iter().sum();
        for ci in 0..cin {
            let xin = &xs[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(ky, pad, stride, h, oh);
                for kx in 0..k {
                    let widx = ((co * cin + ci) * k + ky) * k + kx;
                    let wv = ws[widx];
                    let (ox0, ox1) = valid_range(kx, pad, stride, wd, ow);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let irow = &xin[iy * wd..(iy + 1) * wd];
                        for ox in ox0..ox1 {
                            acc += grow[ox] * irow[ox * stride + kx - pad];
                        }
                        if need_input {
                            let gxrow = &mut gx[ci * h * wd + iy * wd..ci * h * wd + (iy + 1) * wd];
                            for ox in ox0..ox1 {
                                gxrow[ox * stride + kx - pad] += wv * grow[ox];
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    Ok(ConvGrads {
        input: if need_input { Some(Tensor::new(vec![cin, h, wd], gx)?) } else { None },
        weight: Tensor::new(w.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![cout], gb)?,
    })
}

/// Transposed convolution (scatter-add form), no padding.
/// `w` is `[C_in, C_out, k, k]`; output side is `(H-1)*stride + k`.
pub fn deconv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    if stride == 0 {
        return Err(Error::invalid("deconv2d stride must be positive"));
    }
    let (cin, h, wd) = x.dims3()?;
    let (wcin, cout, k) = kernel_dims(w)?;
    if wcin != cin {
        return Err(Error::shape(format!("deconv2d kernel expects {wcin} input channels, input has {cin}")));
    }
    check_bias(b, cout)?;
    let oh = (h - 1) * stride + k;
    let ow = (wd - 1) * stride + k;
    let xs = x.data();
    let ws = w.data();
    let mut out = vec![0.0; cout * oh * ow];
    if let Some(b) = b {
        for co in 0..cout {
            out[co * oh * ow..(co + 1) * oh * ow].fill(b.data()[co]);
        }
    }
    for ci in 0..cin {
        let xin = &xs[ci * h * wd..(ci + 1) * h * wd];
        for co in 0..cout {
            let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = ws[((ci * cout + co) * k + ky) * k + kx];
                    for iy in 0..h {
                        let oy = iy * stride + ky;
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        let irow = &xin[iy * wd..(iy + 1) * wd];
                        for (ix, &v) in irow.iter().enumerate() {
                            orow[ix * stride + kx] += wv * v;
                        }
                    }
                }
            }
        }
    }
    ensure_finite(Tensor::new(vec![cout, oh, ow], out)?, "deconv2d")
}

pub fn deconv2d_backward(x: &Tensor, w: &Tensor, gout: &Tensor, stride: usize, need_input: bool) -> Result<ConvGrads> {
    let (cin, h, wd) = x.dims3()?;
    let (_, cout, k) = kernel_dims(w)?;
    let (_, oh, ow) = gout.dims3()?;
    let xs = x.data();
    let ws = w.data();
    let gs = gout.data();
    let mut gx = if need_input { vec![0.0; cin * h * wd] } else { Vec::new() };
    let mut gw = vec![0.0; ws.len()];
    let gb: Vec<f64> = (0..cout).map(|co| gs[co * oh * ow..(co + 1) * oh * ow].iter().sum()).collect();
    for ci in 0..cin {
        let xin = &xs[ci * h * wd..(ci + 1) * h * wd];
        for co in 0..cout {
            let gplane = &gs[co * oh * ow..(co + 1) * oh * ow];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((ci * cout + co) * k + ky) * k + kx;
                    let wv = ws[widx];
                    let mut acc = 0.0;
                    for iy in 0..h {
                        let oy = iy * stride + ky;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let irow = &xin[iy * wd..(iy + 1) * wd];
                        for ix in 0..wd {
                            acc += grow[ix * stride + kx] * irow[ix];
                        }
                        if need_input {
                            let gxrow = &mut gx[ci * h * wd + iy * wd..ci * h * wd + (iy + 1) * wd];
                            for ix in 0..wd {
                                gxrow[ix] += wv * grow[ix * stride + kx];
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    Ok(ConvGrads {
        input: if need_input { Some(Tensor::new(vec![cin, h, wd], gx)?) } else { None },
        weight: Tensor::new(w.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![cout], gb)?,
    })
}

fn linear_dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize)> {
    let (cout, cin) = match w.shape() {
        &[o, i] => (o, i),
        s => return Err(Error::shape(format!("linear weight must be [C_out,C_in], got {s:?}"))),
    };
    match x.shape().last() {
        Some(&c) if c == cin => Ok((x.len() / cin.max(1), cin, cout)),
        _ => Err(Error::shape(format!(
            "linear expects trailing dimension {cin}, input is {:?}",
            x.shape()
        ))),
    }
}

/// `y = x Wᵀ + b` over the trailing axis.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (rows, cin, cout) = linear_dims(x, w)?;
    check_bias(b, cout)?;
    let xs = x.data();
    let ws = w.data();
    let mut out = vec![0.0; rows * cout];
    for r in 0..rows {
        let xr = &xs[r * cin..(r + 1) * cin];
        for o in 0..cout {
            let wr = &ws[o * cin..(o + 1) * cin];
            let mut acc = b.map_or(0.0, |b| b.data()[o]);
            for (a, c) in xr.iter().zip(wr) {
                acc += a * c;
            }
            out[r * cout + o] = acc;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    ensure_finite(Tensor::new(shape, out)?, "linear")
}

pub struct LinearGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn linear_backward(x: &Tensor, w: &Tensor, gout: &Tensor, need_input: bool) -> Result<LinearGrads> {
    let (rows, cin, cout) = linear_dims(x, w)?;
    let xs = x.data();
    let ws = w.data();
    let gs = gout.data();
    let mut gx = if need_input { vec![0.0; rows * cin] } else { Vec::new() };
    let mut gw = vec![0.0; cout * cin];
    let mut gb = vec![0.0; cout];
    for r in 0..rows {
        let xr = &xs[r * cin..(r + 1) * cin];
        for o in 0..cout {
            let g = gs[r * cout + o];
            gb[o] += g;
            let gwr = &mut gw[o * cin..(o + 1) * cin];
            for (a, xv) in gwr.iter_mut().zip(xr) {
                *a += g * xv;
            }
            if need_input {
                let wr = &ws[o * cin..(o + 1) * cin];
                let gxr = &mut gx[r * cin..(r + 1) * cin];
                for (a, wv) in gxr.iter_mut().zip(wr) {
                    *a += g * wv;
                }
            }
        }
    }
    Ok(LinearGrads {
        input: if need_input { Some(Tensor::new(x.shape().to_vec(), gx)?) } else { None },
        weight: Tensor::new(vec![cout, cin], gw)?,
        bias: Tensor::new(vec![cout], gb)?,
    })
}

fn bmm_dims(a: &Tensor, b: &Tensor, transpose_b: bool) -> Result<(usize, usize, usize, usize)> {
    match (a.shape(), b.shape()) {
        (&[ba, n, k], &[bb, p, q]) if ba == bb => {
            let (kb, m) = if transpose_b { (q, p) } else { (p, q) };
            if kb != k {
                return Err(Error::shape(format!("bmm inner dimensions {k} and {kb} differ")));
            }
            Ok((ba, n, k, m))
        }
        (sa, sb) => Err(Error::shape(format!("bmm shapes {sa:?} and {sb:?} do not conform"))),
    }
}

/// Batched matrix product `[B,n,k] x [B,k,m]`, or `[B,n,k] x [B,m,k]ᵀ`
/// when `transpose_b`.
pub fn bmm(a: &Tensor, b: &Tensor, transpose_b: bool) -> Result<Tensor> {
    let (batch, n, k, m) = bmm_dims(a, b, transpose_b)?;
    let mut out = vec![0.0; batch * n * m];
    for bi in 0..batch {
        let am = &a.data()[bi * n * k..(bi + 1) * n * k];
        let bm = &b.data()[bi * k * m..(bi + 1) * k * m];
        let om = &mut out[bi * n * m..(bi + 1) * n * m];
        matmul_into(om, am, bm, n, k, m, false, transpose_b);
    }
    ensure_finite(Tensor::new(vec![batch, n, m], out)?, "bmm")
}

pub fn bmm_backward(a: &Tensor, b: &Tensor, gout: &Tensor, transpose_b: bool) -> Result<(Tensor, Tensor)> {
    let (batch, n, k, m) = bmm_dims(a, b, transpose_b)?;
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    for bi in 0..batch {
        let am = &a.data()[bi * n * k..(bi + 1) * n * k];
        let bm = &b.data()[bi * k * m..(bi + 1) * k * m];
        let gm = &gout.data()[bi * n * m..(bi + 1) * n * m];
        // ga[n,k] = g[n,m] · B[k,m]ᵀ
        matmul_into(&mut ga[bi * n * k..(bi + 1) * n * k], gm, bm, n, m, k, false, !transpose_b);
        if transpose_b {
            // gb[m,k] = g[n,m]ᵀ · a[n,k]
            matmul_into(&mut gb[bi * k * m..(bi + 1) * k * m], gm, am, m, n, k, true, false);
        } else {
            // gb[k,m] = a[n,k]ᵀ · g[n,m]
            matmul_into(&mut gb[bi * k * m..(bi + 1) * k * m], am, gm, k, n, m, true, false);
        }
    }
    Ok((
        Tensor::new(a.shape().to_vec(), ga)?,
        Tensor::new(b.shape().to_vec(), gb)?,
    ))
}

/// `out[r,c] += Σ_i A[r,i]·B[i,c]` with `A` stored `[rows,inner]` (or
/// `[inner,rows]` when `ta`) and `B` stored `[inner,cols]` (or `[cols,inner]`).
#[allow(clippy::too_many_arguments)]
fn matmul_into(out: &mut [f64], a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize, ta: bool, tb: bool) {
    for r in 0..rows {
        for i in 0..inner {
            let av = if ta { a[i * rows + r] } else { a[r * inner + i] };
            if tb {
                for c in 0..cols {
                    out[r * cols + c] += av * b[c * inner + i];
                }
            } else {
                let brow = &b[i * cols..(i + 1) * cols];
                for (o, bv) in out[r * cols..(r + 1) * cols].iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v * FRAC_1_SQRT_2))
}

pub fn gelu_grad(v: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(v * FRAC_1_SQRT_2));
    let pdf = (-0.5 * v * v).exp() / (2.0 * PI).sqrt();
    cdf + v * pdf
}

/// Softmax over the last axis, max-subtracted.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let n = *x.shape().last().ok_or_else(|| Error::shape("softmax of a rank-0 tensor"))?;
    if n == 0 {
        return Err(Error::shape("softmax over an empty axis"));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn softmax_last_backward(y: &Tensor, gout: &Tensor) -> Result<Tensor> {
    let n = *y.shape().last().unwrap();
    let mut gx = vec![0.0; y.len()];
    for ((yr, gr), out) in y.data().chunks(n).zip(gout.data().chunks(n)).zip(gx.chunks_mut(n)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), gx)
}

#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    frac: f64,
}

/// Half-pixel (align-corners-false) source taps along one axis.
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            Tap { i0, i1, frac }
        })
        .collect()
}

/// Bilinear resize of a `[C,H,W]` map, align-corners-false convention.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::shape("bilinear resize needs non-empty spatial dimensions"));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let xs = x.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &xs[ch * h * w..(ch + 1) * h * w];
        for y in &ty {
            let r0 = &plane[y.i0 * w..(y.i0 + 1) * w];
            let r1 = &plane[y.i1 * w..(y.i1 + 1) * w];
            for t in &tx {
                let top = r0[t.i0] + t.frac * (r0[t.i1] - r0[t.i0]);
                let bot = r1[t.i0] + t.frac * (r1[t.i1] - r1[t.i0]);
                out.push(top + y.frac * (bot - top));
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Adjoint of [`bilinear_resize`]: scatters output gradients back onto the
/// `in_h × in_w` source grid.
pub fn bilinear_resize_backward(gout: &Tensor, in_h: usize, in_w: usize) -> Result<Tensor> {
    let (c, out_h, out_w) = gout.dims3()?;
    if (out_h, out_w) == (in_h, in_w) {
        return Ok(gout.clone());
    }
    let ty = bilinear_taps(in_h, out_h);
    let tx = bilinear_taps(in_w, out_w);
    let gs = gout.data();
    let mut gx = vec![0.0; c * in_h * in_w];
    for ch in 0..c {
        let plane = &mut gx[ch * in_h * in_w..(ch + 1) * in_h * in_w];
        for (oy, y) in ty.iter().enumerate() {
            for (ox, t) in tx.iter().enumerate() {
                let g = gs[(ch * out_h + oy) * out_w + ox];
                let gt = g * (1.0 - y.frac);
                let gbm = g * y.frac;
                plane[y.i0 * in_w + t.i0] += gt * (1.0 - t.frac);
                plane[y.i0 * in_w + t.i1] += gt * t.frac;
                plane[y.i1 * in_w + t.i0] += gbm * (1.0 - t.frac);
                plane[y.i1 * in_w + t.i1] += gbm * t.frac;
            }
        }
    }
    Tensor::new(vec![c, in_h, in_w], gx)
}

/// Stacks `a` over `b` along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (c1, h, w) = a.dims3()?;
    let (c2, h2, w2) = b.dims3()?;
    if (h, w) != (h2, w2) {
        return Err(Error::shape(format!(
            "concat: spatial sizes {h}x{w} and {h2}x{w2} differ"
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(vec![c1 + c2, h, w], data)
}

/// Per-pixel cosine similarity over the channel axis.
pub fn cosine_map(a: &Tensor, b: &Tensor, eps: f64) -> Result<Tensor> {
    a.expect_same_shape(b, "cosine_map")?;
    let (c, h, w) = a.dims3()?;
    let hw = h * w;
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(hw);
    for p in 0..hw {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for ch in 0..c {
            let (u, v) = (ad[ch * hw + p], bd[ch * hw + p]);
            dot += u * v;
            na += u * u;
            nb += v * v;
        }
        out.push(dot / (na.sqrt() * nb.sqrt() + eps));
    }
    Tensor::new(vec![h, w], out)
}

pub fn cosine_map_backward(a: &Tensor, b: &Tensor, eps: f64, gout: &Tensor) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = a.dims3()?;
    let hw = h * w;
    let (ad, bd, gs) = (a.data(), b.data(), gout.data());
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    for p in 0..hw {
        let (mut dot, mut na2, mut nb2) = (0.0, 0.0, 0.0);
        for ch in 0..c {
            let (u, v) = (ad[ch * hw + p], bd[ch * hw + p]);
            dot += u * v;
            na2 += u * u;
            nb2 += v * v;
        }
        let (na, nb) = (na2.sqrt(), nb2.sqrt());
        let denom = na * nb + eps;
        let g = gs[p];
        // d(dot/denom) = d dot/denom - dot/denom² · d denom
        let ka = if na > 0.0 { dot * nb / (denom * denom * na) } else { 0.0 };
        let kb = if nb > 0.0 { dot * na / (denom * denom * nb) } else { 0.0 };
        for ch in 0..c {
            let i = ch * hw + p;
            ga[i] = g * (bd[i] / denom - ka * ad[i]);
            gb[i] = g * (ad[i] / denom - kb * bd[i]);
        }
    }
    Ok((
        Tensor::new(a.shape().to_vec(), ga)?,
        Tensor::new(b.shape().to_vec(), gb)?,
    ))
}

/// Splits `[C,h,w]` into row-major `size × size` windows, giving
/// `[N_w, size², C]` with row-major tokens inside each window.
pub fn window_partition(x: &Tensor, size: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    check_window(h, w, size)?;
    x.reshape(&[c, h / size, size, w / size, size])?
        .permute(&[1, 3, 2, 4, 0])?
        .reshape(&[(h / size) * (w / size), size * size, c])
}

/// Inverse of [`window_partition`] for an `h × w` map.
pub fn window_reverse(windows: &Tensor, size: usize, h: usize, w: usize) -> Result<Tensor> {
    check_window(h, w, size)?;
    let c = match windows.shape() {
        &[n, t, c] if n == (h / size) * (w / size) && t == size * size => c,
        s => {
            return Err(Error::shape(format!(
                "{s:?} is not a {size}x{size} window stack of a {h}x{w} map"
            )))
        }
    };
    windows
        .reshape(&[h / size, w / size, size, size, c])?
        .permute(&[4, 0, 2, 1, 3])?
        .reshape(&[c, h, w])
}

pub(crate) fn check_window(h: usize, w: usize, size: usize) -> Result<()> {
    if size == 0 || h % size != 0 || w % size != 0 {
        return Err(Error::shape(format!(
            "spatial size {h}x{w} is not divisible by window {size}"
        )));
    }
    Ok(())
}

/// Index into a `(2S-1)²` relative-position table for every token pair of an
/// `S × S` window, laid out `[S², S²]`.
pub fn relative_position_index(size: usize) -> Vec<usize> {
    let t = size * size;
    let span = 2 * size - 1;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        let (yi, xi) = (i / size, i % size);
        for j in 0..t {
            let (yj, xj) = (j / size, j % size);
            let dy = yi + size - 1 - yj;
            let dx = xi + size - 1 - xj;
            idx.push(dy * span + dx);
        }
    }
    idx
}

/// Adds the per-head relative-position bias to `[N_w·heads, T, T]` scores.
/// `table` is `[(2S-1)², heads]`; batch entries are ordered window-major.
pub fn add_relative_bias(scores: &Tensor, table: &Tensor, size: usize) -> Result<Tensor> {
    let (batch, t, heads) = rel_bias_dims(scores, table, size)?;
    let idx = relative_position_index(size);
    let mut out = scores.data().to_vec();
    let tab = table.data();
    for b in 0..batch {
        let h = b % heads;
        for (o, &r) in out[b * t * t..(b + 1) * t * t].iter_mut().zip(&idx) {
            *o += tab[r * heads + h];
        }
    }
    Tensor::new(scores.shape().to_vec(), out)
}

pub fn add_relative_bias_backward(gout: &Tensor, table: &Tensor, size: usize) -> Result<Tensor> {
    let (batch, t, heads) = rel_bias_dims(gout, table, size)?;
    let idx = relative_position_index(size);
    let mut gt = vec![0.0; table.len()];
    let gs = gout.data();
    for b in 0..batch {
        let h = b % heads;
        for (g, &r) in gs[b * t * t..(b + 1) * t * t].iter().zip(&idx) {
            gt[r * heads + h] += g;
        }
    }
    Tensor::new(table.shape().to_vec(), gt)
}

fn rel_bias_dims(scores: &Tensor, table: &Tensor, size: usize) -> Result<(usize, usize, usize)> {
    let t = size * size;
    let span = 2 * size - 1;
    let heads = match table.shape() {
        &[r, h] if r == span * span && h > 0 => h,
        s => return Err(Error::shape(format!("relative bias table {s:?} does not fit window {size}"))),
    };
    match scores.shape() {
        &[b, t1, t2] if t1 == t && t2 == t && b % heads == 0 => Ok((b, t, heads)),
        s => Err(Error::shape(format!("scores {s:?} do not fit window {size} with {heads} heads"))),
    }
}

/// `Σ_j gate[:, j] · experts[j]` row by row. `gate` is `[P, N]`, each
/// expert output `[P, C]`.
pub fn mix_experts(gate: &Tensor, experts: &[&Tensor]) -> Result<Tensor> {
    let (p, c) = mix_dims(gate, experts)?;
    let n = experts.len();
    let gs = gate.data();
    let mut out = vec![0.0; p * c];
    for (j, e) in experts.iter().enumerate() {
        let es = e.data();
        for r in 0..p {
            let g = gs[r * n + j];
            for (o, v) in out[r * c..(r + 1) * c].iter_mut().zip(&es[r * c..(r + 1) * c]) {
                *o += g * v;
            }
        }
    }
    Tensor::new(vec![p, c], out)
}

pub fn mix_experts_backward(gate: &Tensor, experts: &[&Tensor], gout: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let (p, c) = mix_dims(gate, experts)?;
    let n = experts.len();
    let gs = gate.data();
    let go = gout.data();
    let mut ggate = vec![0.0; p * n];
    let mut gexp = Vec::with_capacity(n);
    for (j, e) in experts.iter().enumerate() {
        let es = e.data();
        let mut ge = vec![0.0; p * c];
        for r in 0..p {
            let g = gs[r * n + j];
            let row = r * c..(r + 1) * c;
            ggate[r * n + j] = go[row.clone()].iter().zip(&es[row.clone()]).map(|(a, b)| a * b).sum();
            for (o, v) in ge[row.clone()].iter_mut().zip(&go[row]) {
                *o = g * v;
            }
        }
        gexp.push(Tensor::new(vec![p, c], ge)?);
    }
    Ok((Tensor::new(vec![p, n], ggate)?, gexp))
}

fn mix_dims(gate: &Tensor, experts: &[&Tensor]) -> Result<(usize, usize)> {
    let (p, n) = match gate.shape() {
        &[p, n] => (p, n),
        s => return Err(Error::shape(format!("gate must be [P,N], got {s:?}"))),
    };
    if n != experts.len() || n == 0 {
        return Err(Error::shape(format!("gate has {n} columns for {} experts", experts.len())));
    }
    let c = match experts[0].shape() {
        &[q, c] if q == p => c,
        s => return Err(Error::shape(format!("expert output {s:?} does not match {p} rows"))),
    };
    if experts.iter().any(|e| e.shape() != [p, c]) {
        return Err(Error::shape("expert outputs differ in shape"));
    }
    Ok((p, c))
}

fn check_labels(logits: &Tensor, labels: &[u8]) -> Result<(usize, usize)> {
    let (k, h, w) = logits.dims3()?;
    if labels.len() != h * w {
        return Err(Error::shape(format!(
            "{} labels for a {h}x{w} prediction",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::invalid(format!("label value {bad} outside 0..{k}")));
    }
    Ok((k, h * w))
}

/// Mean over pixels of the softmax cross-entropy between `[K,H,W]` logits
/// and per-pixel class labels.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[u8]) -> Result<f64> {
    let (k, n) = check_labels(logits, labels)?;
    let ls = logits.data();
    let mut total = 0.0;
    for (p, &y) in labels.iter().enumerate() {
        let m = (0..k).map(|c| ls[c * n + p]).fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = (0..k).map(|c| (ls[c * n + p] - m).exp()).sum();
        total += m + s.ln() - ls[y as usize * n + p];
    }
    Ok(total / n as f64)
}

pub fn softmax_cross_entropy_backward(logits: &Tensor, labels: &[u8], gout: f64) -> Result<Tensor> {
    let (k, n) = check_labels(logits, labels)?;
    let ls = logits.data();
    let mut g = vec![0.0; ls.len()];
    let scale = gout / n as f64;
    for (p, &y) in labels.iter().enumerate() {
        let m = (0..k).map(|c| ls[c * n + p]).fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = (0..k).map(|c| (ls[c * n + p] - m).exp()).sum();
        for c in 0..k {
            let prob = (ls[c * n + p] - m).exp() / s;
            let target = if c == y as usize { 1.0 } else { 0.0 };
            g[c * n + p] = scale * (prob - target);
        }
    }
    Tensor::new(logits.shape().to_vec(), g)
}

/// `Σ wᵢxᵢ / Σ wᵢ`, defined as 0 when the weights sum to zero.
pub fn weighted_mean(x: &Tensor, weights: &Tensor) -> Result<f64> {
    x.expect_same_shape(weights, "weighted_mean")?;
    let total: f64 = weights.sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok(x.dot(weights)? / total)
}

/// 3×3 box mean over the valid neighbours of every pixel.
pub fn mean_smooth3(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let xs = x.data();
    let mut out = vec![0.0; xs.len()];
    for ch in 0..c {
        let plane = &xs[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
            for xx in 0..w {
                let (x0, x1) = (xx.saturating_sub(1), (xx + 1).min(w - 1));
                let mut s = 0.0;
                for yy in y0..=y1 {
                    for v in &plane[yy * w + x0..=yy * w + x1] {
                        s += v;
                    }
                }
                out[(ch * h + y) * w + xx] = s / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::ones(&[1, 3, 3]);
        let w = Tensor::ones(&[1, 1, 1, 1]);
        assert_eq!(conv2d(&x, &w, None, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_sum_kernel() {
        let x = Tensor::from_fn(&[1, 3, 3], |i| (i + 1) as f64);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[45.0]);
    }

    #[test]
    fn conv_strided_shape() {
        let y = conv2d(&Tensor::ones(&[1, 4, 4]), &Tensor::ones(&[1, 1, 3, 3]), None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        // corners see a 2x2 valid patch of ones
        assert_eq!(y.data(), &[4.0, 6.0, 6.0, 9.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let r = conv2d(&Tensor::ones(&[2, 4, 4]), &Tensor::ones(&[1, 3, 3, 3]), None, 1, 1);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn conv_matches_direct_definition() {
        let x = random(&[2, 5, 6], 1);
        let w = random(&[3, 2, 3, 3], 2);
        let b = random(&[3], 3);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let y = conv2d(&x, &w, Some(&b), stride, pad).unwrap();
            let (_, oh, ow) = y.dims3().unwrap();
            for co in 0..3 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[co];
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && iy < 5 && ix < 6 {
                                        acc += w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                            * x.at3(ci, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        assert!((y.at3(co, oy, ox) - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn deconv_scatter_examples() {
        let y = deconv2d(&Tensor::full(&[1, 1, 1], 2.0), &Tensor::ones(&[1, 1, 2, 2]), None, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[2.0; 4]);

        let x = Tensor::from_fn(&[1, 2, 2], |i| (i + 1) as f64);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[0] = 1.0;
        let y = deconv2d(&x, &k, None, 3).unwrap();
        assert_eq!(y.shape(), &[1, 6, 6]);
        for oy in 0..6 {
            for ox in 0..6 {
                let expect = if oy % 3 == 0 && ox % 3 == 0 { x.at3(0, oy / 3, ox / 3) } else { 0.0 };
                assert_eq!(y.at3(0, oy, ox), expect);
            }
        }
        assert!(deconv2d(&x, &k, None, 0).is_err());
    }

    #[test]
    fn deconv_is_adjoint_of_conv() {
        for (k, stride) in [(3, 1), (2, 2), (4, 4)] {
            let x = random(&[2, 4, 4], 10 + k as u64);
            let kern = random(&[3, 2, k, k], 20 + k as u64);
            let cx = conv2d(&x, &kern, None, stride, 0).unwrap();
            let y = random(cx.shape(), 30 + k as u64);
            let lhs = cx.dot(&y).unwrap();
            let rhs = x.dot(&deconv2d(&y, &kern, None, stride).unwrap()).unwrap();
            assert!((lhs - rhs).abs() < 1e-9, "k={k}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn linear_examples() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::new(vec![1], vec![3.0]).unwrap();
        assert_eq!(linear(&x, &w, Some(&b)).unwrap().data(), &[6.0]);

        let x = random(&[3, 2, 5, 4], 5);
        let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        assert_eq!(linear(&x, &eye, Some(&Tensor::zeros(&[4]))).unwrap(), x);
        let w = random(&[7, 4], 6);
        assert_eq!(linear(&x, &w, None).unwrap().shape(), &[3, 2, 5, 7]);
        assert!(linear(&x, &random(&[7, 3], 1), None).is_err());
    }

    #[test]
    fn pointwise_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(relu(-3.0), 0.0);
        assert_eq!(relu(3.0), 3.0);
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_last(&Tensor::zeros(&[2])).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax_last(&Tensor::new(vec![2], vec![2f64.ln(), 0.0]).unwrap()).unwrap();
        assert!((y.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((y.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let x = random(&[4, 6], 8);
        let a = softmax_last(&x).unwrap();
        let b = softmax_last(&x.map(|v| v + 123.25)).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        for row in a.data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_constant_and_identity() {
        let c = Tensor::full(&[2, 3, 5], 0.37);
        let up = bilinear_resize(&c, 7, 11).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.37));
        let x = random(&[2, 4, 4], 9);
        assert_eq!(bilinear_resize(&x, 4, 4).unwrap(), x);
    }

    #[test]
    fn bilinear_backward_is_adjoint() {
        let x = random(&[2, 3, 5], 11);
        for (oh, ow) in [(6, 10), (7, 3), (1, 1), (12, 20)] {
            let y = bilinear_resize(&x, oh, ow).unwrap();
            let g = random(y.shape(), 12);
            let lhs = y.dot(&g).unwrap();
            let rhs = x.dot(&bilinear_resize_backward(&g, 3, 5).unwrap()).unwrap();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_placement() {
        let a = random(&[3, 4, 4], 1);
        let b = random(&[5, 4, 4], 2);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[8, 4, 4]);
        assert_eq!(c.channel(0).unwrap(), a.channel(0).unwrap());
        assert_eq!(c.channel(3).unwrap(), b.channel(0).unwrap());
        assert_eq!(concat_channels(&a, &Tensor::zeros(&[0, 4, 4])).unwrap(), a);
        assert!(concat_channels(&a, &Tensor::zeros(&[1, 4, 5])).is_err());
    }

    #[test]
    fn cosine_examples() {
        let a = random(&[4, 3, 3], 3);
        let same = cosine_map(&a, &a, 1e-8).unwrap();
        assert!(same.data().iter().all(|v| (v - 1.0).abs() < 1e-6));
        let anti = cosine_map(&a, &a.scale(-1.0), 1e-8).unwrap();
        assert!(anti.data().iter().all(|v| (v + 1.0).abs() < 1e-6));
        let e1 = Tensor::new(vec![2, 1, 1], vec![1.0, 0.0]).unwrap();
        let e2 = Tensor::new(vec![2, 1, 1], vec![0.0, 1.0]).unwrap();
        assert_eq!(cosine_map(&e1, &e2, 1e-8).unwrap().data(), &[0.0]);
        let z = Tensor::zeros(&[2, 1, 1]);
        assert_eq!(cosine_map(&z, &e1, 1e-8).unwrap().data(), &[0.0]);
    }

    #[test]
    fn window_partition_layout() {
        let x = Tensor::from_fn(&[2, 6, 6], |i| i as f64);
        let w = window_partition(&x, 3).unwrap();
        assert_eq!(w.shape(), &[4, 9, 2]);
        // window 1 is the top-right block; its token 4 is pixel (1, 4)
        assert_eq!(w.data()[(9 + 4) * 2 + 1], x.at3(1, 1, 4));
        assert_eq!(window_reverse(&w, 3, 6, 6).unwrap(), x);
        let single = window_partition(&x, 6).unwrap();
        assert_eq!(single.shape(), &[1, 36, 2]);
        assert!(window_partition(&x, 4).is_err());
    }

    #[test]
    fn relative_index_is_offset_symmetric() {
        let idx = relative_position_index(3);
        assert_eq!(idx.len(), 81);
        // zero offset maps to the table centre
        for i in 0..9 {
            assert_eq!(idx[i * 9 + i], 12);
        }
        assert!(idx.iter().all(|&r| r < 25));
        // token 0 -> token 8 is offset (-2,-2): row 0 of the table
        assert_eq!(idx[8], 0);
        assert_eq!(idx[8 * 9], 24);
    }

    #[test]
    fn cross_entropy_values() {
        let labels = [0u8, 1, 1, 0];
        let z = Tensor::zeros(&[2, 2, 2]);
        assert!((softmax_cross_entropy(&z, &labels).unwrap() - 2f64.ln()).abs() < 1e-15);
        let mut sharp = Tensor::zeros(&[2, 2, 2]);
        for (p, &l) in labels.iter().enumerate() {
            sharp.data_mut()[l as usize * 4 + p] = 20.0;
            sharp.data_mut()[(1 - l as usize) * 4 + p] = -20.0;
        }
        assert!(softmax_cross_entropy(&sharp, &labels).unwrap() < 1e-8);
        assert!(softmax_cross_entropy(&z, &[0, 1, 2, 0]).is_err());
    }

    #[test]
    fn smoothing_keeps_constants() {
        let c = Tensor::full(&[1, 4, 5], 2.5);
        assert!(mean_smooth3(&c).unwrap().max_abs_diff(&c).unwrap() < 1e-15);
    }
}
