//! Numeric kernels: convolution, normalization, attention primitives,
//! resampling. Generic over [`Scalar`] so oracles can replay them in f64.
//!
//! Reductions that feed statistics (norm moments, softmax sums, weight-gradient
//! accumulation) run in f64 regardless of the working dtype.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, TensorOf};

/// Output extent of a convolution along one axis. Requires exact division.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("conv stride must be positive"));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::shape(format!(
            "kernel {kernel} exceeds padded input {padded}"
        )));
    }
    let span = padded - kernel;
    if span % stride != 0 {
        return Err(Error::invalid(format!(
            "conv span {span} not divisible by stride {stride}"
        )));
    }
    Ok(span / stride + 1)
}

/// Cross-correlation of `x` [N,Cin,H,W] with `w` [Cout,Cin,kh,kw] plus bias [Cout].
pub fn conv2d_forward<S: Scalar>(
    x: &TensorOf<S>,
    w: &TensorOf<S>,
    b: &TensorOf<S>,
    stride: usize,
    pad: usize,
) -> Result<TensorOf<S>> {
    let (n, cin, h, wd) = x.dims4()?;
    let (cout, wcin, kh, kw) = w.dims4()?;
    if wcin != cin {
        return Err(Error::shape(format!(
            "conv input channels {cin} vs kernel channels {wcin}"
        )));
    }
    if b.shape() != [cout] {
        return Err(Error::shape(format!(
            "conv bias shape {:?}, expected [{cout}]",
            b.shape()
        )));
    }
    let ho = conv_out_extent(h, kh, stride, pad)?;
    let wo = conv_out_extent(wd, kw, stride, pad)?;

    let xs = x.data();
    let ws = w.data();
    let bs = b.data();
    let mut out = vec![S::zero(); n * cout * ho * wo];

    if stride == 1 && kh == 3 && kw == 3 && pad == 1 && h >= 2 && wd >= 2 {
        conv3x3_same(xs, ws, bs, &mut out, n, cin, cout, h, wd);
        return TensorOf::new(vec![n, cout, ho, wo], out);
    }

    for ni in 0..n {
        for co in 0..cout {
            let plane = &mut out[(ni * cout + co) * ho * wo..][..ho * wo];
            plane.fill(bs[co]);
        }
        for ci in 0..cin {
            let xp = &xs[(ni * cin + ci) * h * wd..][..h * wd];
            for co in 0..cout {
                let wbase = (co * cin + ci) * kh * kw;
                let op = &mut out[(ni * cout + co) * ho * wo..][..ho * wo];
                for u in 0..kh {
                    for v in 0..kw {
                        let wv = ws[wbase + u * kw + v];
                        if wv == S::zero() {
                            continue;
                        }
                        accumulate_shifted(op, xp, wv, h, wd, ho, wo, stride, pad, u, v);
                    }
                }
            }
        }
    }
    TensorOf::new(vec![n, cout, ho, wo], out)
}

/// Fused row kernel for the dominant 3x3 / stride 1 / pad 1 case: all three
/// taps of a kernel row are applied in one pass so the inner loop carries
/// enough work to vectorize.
#[allow(clippy::too_many_arguments)]
fn conv3x3_same<S: Scalar>(
    xs: &[S],
    ws: &[S],
    bs: &[S],
    out: &mut [S],
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) {
    let plane = h * w;
    for ni in 0..n {
        for co in 0..cout {
            let op = &mut out[(ni * cout + co) * plane..][..plane];
            op.fill(bs[co]);
            for ci in 0..cin {
                let xp = &xs[(ni * cin + ci) * plane..][..plane];
                let wbase = (co * cin + ci) * 9;
                for i in 0..h {
                    let orow = &mut op[i * w..(i + 1) * w];
                    for u in 0..3usize {
                        let iy = (i + u) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xp[iy as usize * w..][..w];
                        let w0 = ws[wbase + u * 3];
                        let w1 = ws[wbase + u * 3 + 1];
                        let w2 = ws[wbase + u * 3 + 2];
                        // Left edge: x[-1] is padding.
                        orow[0] = orow[0] + w1 * xrow[0] + w2 * xrow[1];
                        // Interior: all three taps in one fused pass.
                        for (((o, &xa), &xb), &xc) in orow[1..w - 1]
                            .iter_mut()
                            .zip(&xrow[..w - 2])
                            .zip(&xrow[1..w - 1])
                            .zip(&xrow[2..])
                        {
                            *o = *o + w0 * xa + w1 * xb + w2 * xc;
                        }
                        // Right edge: x[w] is padding.
                        orow[w - 1] = orow[w - 1] + w0 * xrow[w - 2] + w1 * xrow[w - 1];
                    }
                }
            }
        }
    }
}

/// First output index whose source index `j*stride + k - pad` is >= 0.
#[inline]
fn shift_lo(k: usize, pad: usize, stride: usize) -> usize {
    if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    }
}

/// One-past-last output index whose source index stays < `extent`.
#[inline]
fn shift_hi(k: usize, pad: usize, stride: usize, extent: usize, out_extent: usize) -> usize {
    // j*stride + k - pad <= extent - 1  =>  j <= (extent - 1 + pad - k)/stride.
    let top = extent + pad;
    if top <= k {
        return 0;
    }
    (((top - 1 - k) / stride) + 1).min(out_extent)
}

/// out[i,j] += wv * x[i*stride+u-pad, j*stride+v-pad] over valid positions.
/// Valid ranges are hoisted out of the inner loop so it vectorizes.
#[inline]
#[allow(clippy::too_many_arguments)]
fn accumulate_shifted<S: Scalar>(
    out: &mut [S],
    x: &[S],
    wv: S,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    u: usize,
    v: usize,
) {
    let i_lo = shift_lo(u, pad, stride);
    let i_hi = shift_hi(u, pad, stride, h, ho);
    let j_lo = shift_lo(v, pad, stride);
    let j_hi = shift_hi(v, pad, stride, w, wo);
    if j_lo >= j_hi {
        return;
    }
    for i in i_lo..i_hi {
        let iy = i * stride + u - pad;
        let x_base = iy * w + (j_lo * stride + v - pad);
        let orow = &mut out[i * wo + j_lo..i * wo + j_hi];
        if stride == 1 {
            let xrow = &x[x_base..x_base + (j_hi - j_lo)];
            for (o, &xv) in orow.iter_mut().zip(xrow) {
                *o = *o + wv * xv;
            }
        } else {
            for (jj, o) in orow.iter_mut().enumerate() {
                *o = *o + wv * x[x_base + jj * stride];
            }
        }
    }
}

/// Gradients of [`conv2d_forward`] w.r.t. input, kernel, and bias.
pub fn conv2d_backward<S: Scalar>(
    x: &TensorOf<S>,
    w: &TensorOf<S>,
    dy: &TensorOf<S>,
    stride: usize,
    pad: usize,
) -> Result<(TensorOf<S>, TensorOf<S>, TensorOf<S>)> {
    let (n, cin, h, wd) = x.dims4()?;
    let (cout, _, kh, kw) = w.dims4()?;
    let (_, _, ho, wo) = dy.dims4()?;

    let xs = x.data();
    let ws = w.data();
    let dys = dy.data();
    let mut dx = vec![S::zero(); xs.len()];
    let mut dw = vec![0.0f64; ws.len()];
    let mut db = vec![0.0f64; cout];

    for ni in 0..n {
        for co in 0..cout {
            let dyp = &dys[(ni * cout + co) * ho * wo..][..ho * wo];
            db[co] += dyp.iter().map(|v| v.as_f64()).sum::<f64>();
            for ci in 0..cin {
                let xp = &xs[(ni * cin + ci) * h * wd..][..h * wd];
                let dxp = &mut dx[(ni * cin + ci) * h * wd..][..h * wd];
                let wbase = (co * cin + ci) * kh * kw;
                for u in 0..kh {
                    let i_lo = shift_lo(u, pad, stride);
                    let i_hi = shift_hi(u, pad, stride, h, ho);
                    for v in 0..kw {
                        let wv = ws[wbase + u * kw + v];
                        let j_lo = shift_lo(v, pad, stride);
                        let j_hi = shift_hi(v, pad, stride, wd, wo);
                        if j_lo >= j_hi {
                            continue;
                        }
                        let mut wacc = 0.0f64;
                        for i in i_lo..i_hi {
                            let iy = i * stride + u - pad;
                            let x_base = iy * wd + (j_lo * stride + v - pad);
                            let dyrow = &dyp[i * wo + j_lo..i * wo + j_hi];
                            if stride == 1 {
                                let span = j_hi - j_lo;
                                let xrow = &xp[x_base..x_base + span];
                                let dxrow = &mut dxp[x_base..x_base + span];
                                for ((d, &xv), &g) in
                                    dxrow.iter_mut().zip(xrow).zip(dyrow)
                                {
                                    *d = *d + wv * g;
                                    wacc += xv.as_f64() * g.as_f64();
                                }
                            } else {
                                for (jj, &g) in dyrow.iter().enumerate() {
                                    let off = x_base + jj * stride;
                                    dxp[off] = dxp[off] + wv * g;
                                    wacc += xp[off].as_f64() * g.as_f64();
                                }
                            }
                        }
                        dw[wbase + u * kw + v] += wacc;
                    }
                }
            }
        }
    }

    let dxt = TensorOf::new(x.shape().to_vec(), dx)?;
    let dwt = TensorOf::new(
        w.shape().to_vec(),
        dw.into_iter().map(S::of_f64).collect(),
    )?;
    let dbt = TensorOf::new(vec![cout], db.into_iter().map(S::of_f64).collect())?;
    Ok((dxt, dwt, dbt))
}

/// 2x2 average pooling with stride 2.
pub fn avg_pool2_forward<S: Scalar>(x: &TensorOf<S>) -> Result<TensorOf<S>> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("avg_pool2 needs even extents, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let xs = x.data();
    let quarter = S::of_f64(0.25);
    let mut out = vec![S::zero(); n * c * ho * wo];
    for p in 0..n * c {
        let xp = &xs[p * h * w..][..h * w];
        let op = &mut out[p * ho * wo..][..ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                let a = xp[2 * i * w + 2 * j];
                let b = xp[2 * i * w + 2 * j + 1];
                let cc = xp[(2 * i + 1) * w + 2 * j];
                let d = xp[(2 * i + 1) * w + 2 * j + 1];
                op[i * wo + j] = (a + b + cc + d) * quarter;
            }
        }
    }
    TensorOf::new(vec![n, c, ho, wo], out)
}

pub fn avg_pool2_backward<S: Scalar>(dy: &TensorOf<S>, h: usize, w: usize) -> Result<TensorOf<S>> {
    let (n, c, ho, wo) = dy.dims4()?;
    let dys = dy.data();
    let quarter = S::of_f64(0.25);
    let mut dx = vec![S::zero(); n * c * h * w];
    for p in 0..n * c {
        let dyp = &dys[p * ho * wo..][..ho * wo];
        let dxp = &mut dx[p * h * w..][..h * w];
        for i in 0..ho {
            for j in 0..wo {
                let g = dyp[i * wo + j] * quarter;
                dxp[2 * i * w + 2 * j] = g;
                dxp[2 * i * w + 2 * j + 1] = g;
                dxp[(2 * i + 1) * w + 2 * j] = g;
                dxp[(2 * i + 1) * w + 2 * j + 1] = g;
            }
        }
    }
    TensorOf::new(vec![n, c, h, w], dx)
}

/// 2x nearest-neighbor upsampling.
pub fn upsample2_forward<S: Scalar>(x: &TensorOf<S>) -> Result<TensorOf<S>> {
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = (h * 2, w * 2);
    let xs = x.data();
    let mut out = vec![S::zero(); n * c * ho * wo];
    for p in 0..n * c {
        let xp = &xs[p * h * w..][..h * w];
        let op = &mut out[p * ho * wo..][..ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                op[i * wo + j] = xp[(i / 2) * w + j / 2];
            }
        }
    }
    TensorOf::new(vec![n, c, ho, wo], out)
}

pub fn upsample2_backward<S: Scalar>(dy: &TensorOf<S>) -> Result<TensorOf<S>> {
    let (n, c, ho, wo) = dy.dims4()?;
    let (h, w) = (ho / 2, wo / 2);
    let dys = dy.data();
    let mut dx = vec![S::zero(); n * c * h * w];
    for p in 0..n * c {
        let dyp = &dys[p * ho * wo..][..ho * wo];
        let dxp = &mut dx[p * h * w..][..h * w];
        for i in 0..ho {
            for j in 0..wo {
                let t = &mut dxp[(i / 2) * w + j / 2];
                *t = *t + dyp[i * wo + j];
            }
        }
    }
    TensorOf::new(vec![n, c, h, w], dx)
}

/// Per-(sample, group) statistics saved by group-norm for the backward pass.
#[derive(Clone, Debug)]
pub struct GroupNormSaved {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Group normalization over [N,C,H,W] with affine gamma/beta of shape [C].
pub fn group_norm_forward<S: Scalar>(
    x: &TensorOf<S>,
    groups: usize,
    gamma: &TensorOf<S>,
    beta: &TensorOf<S>,
    eps: f64,
) -> Result<(TensorOf<S>, GroupNormSaved)> {
    let (n, c, h, w) = x.dims4()?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::invalid(format!(
            "channels {c} not divisible by groups {groups}"
        )));
    }
    if eps <= 0.0 {
        return Err(Error::invalid("group_norm eps must be positive"));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("group_norm affine params must have shape [C]".to_string()));
    }
    let cpg = c / groups;
    let plane = h * w;
    let m = (cpg * plane) as f64;
    let xs = x.data();
    let gs = gamma.data();
    let bs = beta.data();
    let mut out = vec![S::zero(); xs.len()];
    let mut means = Vec::with_capacity(n * groups);
    let mut inv_stds = Vec::with_capacity(n * groups);

    for ni in 0..n {
        for g in 0..groups {
            let start = (ni * c + g * cpg) * plane;
            let seg = &xs[start..start + cpg * plane];
            let mean = seg.iter().map(|v| v.as_f64()).sum::<f64>() / m;
            let var = seg
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / m;
            let inv = 1.0 / (var + eps).sqrt();
            means.push(mean);
            inv_stds.push(inv);
            let mean_s = S::of_f64(mean);
            let inv_s = S::of_f64(inv);
            for cc in 0..cpg {
                let ch = g * cpg + cc;
                let scale = gs[ch] * inv_s;
                let be = bs[ch];
                let src = &seg[cc * plane..][..plane];
                let dst = &mut out[start + cc * plane..][..plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = (s - mean_s) * scale + be;
                }
            }
        }
    }
    Ok((
        TensorOf::new(vec![n, c, h, w], out)?,
        GroupNormSaved {
            mean: means,
            inv_std: inv_stds,
        },
    ))
}

pub fn group_norm_backward<S: Scalar>(
    x: &TensorOf<S>,
    groups: usize,
    gamma: &TensorOf<S>,
    saved: &GroupNormSaved,
    dy: &TensorOf<S>,
) -> Result<(TensorOf<S>, TensorOf<S>, TensorOf<S>)> {
    let (n, c, h, w) = x.dims4()?;
    let cpg = c / groups;
    let plane = h * w;
    let m = (cpg * plane) as f64;
    let xs = x.data();
    let gs = gamma.data();
    let dys = dy.data();
    let mut dx = vec![S::zero(); xs.len()];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];

    for ni in 0..n {
        for g in 0..groups {
            let idx = ni * groups + g;
            let mean = saved.mean[idx];
            let inv = saved.inv_std[idx];
            let start = (ni * c + g * cpg) * plane;

            let mut sum_dxhat = 0.0f64;
            let mut sum_dxhat_xhat = 0.0f64;
            for cc in 0..cpg {
                let ch = g * cpg + cc;
                let ga = gs[ch].as_f64();
                for k in 0..plane {
                    let off = start + cc * plane + k;
                    let xhat = (xs[off].as_f64() - mean) * inv;
                    let dyv = dys[off].as_f64();
                    let dxhat = dyv * ga;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    dgamma[ch] += dyv * xhat;
                    dbeta[ch] += dyv;
                }
            }
            let mean_dxhat = sum_dxhat / m;
            let mean_dxhat_xhat = sum_dxhat_xhat / m;
            for cc in 0..cpg {
                let ch = g * cpg + cc;
                let ga = gs[ch].as_f64();
                for k in 0..plane {
                    let off = start + cc * plane + k;
                    let xhat = (xs[off].as_f64() - mean) * inv;
                    let dxhat = dys[off].as_f64() * ga;
                    dx[off] = S::of_f64(inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat));
                }
            }
        }
    }
    Ok((
        TensorOf::new(x.shape().to_vec(), dx)?,
        TensorOf::new(vec![c], dgamma.into_iter().map(S::of_f64).collect())?,
        TensorOf::new(vec![c], dbeta.into_iter().map(S::of_f64).collect())?,
    ))
}

pub fn silu_forward<S: Scalar>(x: &TensorOf<S>) -> TensorOf<S> {
    let one = S::one();
    x.map(|v| v / (one + (-v).exp()))
}

pub fn silu_backward<S: Scalar>(x: &TensorOf<S>, dy: &TensorOf<S>) -> Result<TensorOf<S>> {
    let one = S::one();
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let s = one / (one + (-v).exp());
            g * s * (one + v * (one - s))
        })
        .collect();
    TensorOf::new(x.shape().to_vec(), data)
}

/// Affine map y = x·wᵀ + b with x [N,F], w [O,F], b [O].
pub fn linear_forward<S: Scalar>(
    x: &TensorOf<S>,
    w: &TensorOf<S>,
    b: &TensorOf<S>,
) -> Result<TensorOf<S>> {
    let (n, f) = x.dims2()?;
    let (o, wf) = w.dims2()?;
    if wf != f {
        return Err(Error::shape(format!("linear features {f} vs weight {wf}")));
    }
    if b.shape() != [o] {
        return Err(Error::shape("linear bias must have shape [O]".to_string()));
    }
    let xs = x.data();
    let ws = w.data();
    let bs = b.data();
    let mut out = vec![S::zero(); n * o];
    for ni in 0..n {
        let xrow = &xs[ni * f..][..f];
        for oi in 0..o {
            let wrow = &ws[oi * f..][..f];
            let mut acc = S::zero();
            for (xa, wa) in xrow.iter().zip(wrow) {
                acc = acc + *xa * *wa;
            }
            out[ni * o + oi] = acc + bs[oi];
        }
    }
    TensorOf::new(vec![n, o], out)
}

pub fn linear_backward<S: Scalar>(
    x: &TensorOf<S>,
    w: &TensorOf<S>,
    dy: &TensorOf<S>,
) -> Result<(TensorOf<S>, TensorOf<S>, TensorOf<S>)> {
    let (n, f) = x.dims2()?;
    let (o, _) = w.dims2()?;
    let xs = x.data();
    let ws = w.data();
    let dys = dy.data();
    let mut dx = vec![S::zero(); n * f];
    let mut dw = vec![0.0f64; o * f];
    let mut db = vec![0.0f64; o];
    for ni in 0..n {
        for oi in 0..o {
            let g = dys[ni * o + oi];
            let gf = g.as_f64();
            db[oi] += gf;
            let wrow = &ws[oi * f..][..f];
            let xrow = &xs[ni * f..][..f];
            let dxrow = &mut dx[ni * f..][..f];
            for k in 0..f {
                dxrow[k] = dxrow[k] + g * wrow[k];
                dw[oi * f + k] += gf * xrow[k].as_f64();
            }
        }
    }
    Ok((
        TensorOf::new(vec![n, f], dx)?,
        TensorOf::new(vec![o, f], dw.into_iter().map(S::of_f64).collect())?,
        TensorOf::new(vec![o], db.into_iter().map(S::of_f64).collect())?,
    ))
}

/// Batched matmul y[b] = a[b]·c[b] with a [B,M,K], c [B,K,P].
pub fn bmm_forward<S: Scalar>(a: &TensorOf<S>, c: &TensorOf<S>) -> Result<TensorOf<S>> {
    let (ba, m, k) = a.dims3()?;
    let (bc, kc, p) = c.dims3()?;
    if ba != bc || k != kc {
        return Err(Error::shape(format!(
            "bmm: {:?} x {:?}",
            a.shape(),
            c.shape()
        )));
    }
    let xs = a.data();
    let cs = c.data();
    let mut out = vec![S::zero(); ba * m * p];
    for b in 0..ba {
        let ap = &xs[b * m * k..][..m * k];
        let cp = &cs[b * k * p..][..k * p];
        let op = &mut out[b * m * p..][..m * p];
        for i in 0..m {
            for kk in 0..k {
                let av = ap[i * k + kk];
                if av == S::zero() {
                    continue;
                }
                let crow = &cp[kk * p..][..p];
                let orow = &mut op[i * p..][..p];
                for (o, cv) in orow.iter_mut().zip(crow) {
                    *o = *o + av * *cv;
                }
            }
        }
    }
    TensorOf::new(vec![ba, m, p], out)
}

pub fn bmm_backward<S: Scalar>(
    a: &TensorOf<S>,
    c: &TensorOf<S>,
    dy: &TensorOf<S>,
) -> Result<(TensorOf<S>, TensorOf<S>)> {
    let (b, m, k) = a.dims3()?;
    let (_, _, p) = c.dims3()?;
    let as_ = a.data();
    let cs = c.data();
    let dys = dy.data();
    let mut da = vec![S::zero(); b * m * k];
    let mut dc = vec![S::zero(); b * k * p];
    for bi in 0..b {
        let ap = &as_[bi * m * k..][..m * k];
        let cp = &cs[bi * k * p..][..k * p];
        let dyp = &dys[bi * m * p..][..m * p];
        let dap = &mut da[bi * m * k..][..m * k];
        let dcp = &mut dc[bi * k * p..][..k * p];
        for i in 0..m {
            for kk in 0..k {
                let mut acc = S::zero();
                let crow = &cp[kk * p..][..p];
                let dyrow = &dyp[i * p..][..p];
                for (cv, g) in crow.iter().zip(dyrow) {
                    acc = acc + *cv * *g;
                }
                dap[i * k + kk] = dap[i * k + kk] + acc;
                let av = ap[i * k + kk];
                let dcrow = &mut dcp[kk * p..][..p];
                for (d, g) in dcrow.iter_mut().zip(dyrow) {
                    *d = *d + av * *g;
                }
            }
        }
    }
    Ok((
        TensorOf::new(vec![b, m, k], da)?,
        TensorOf::new(vec![b, k, p], dc)?,
    ))
}

/// Batched y[b] = a[b]·c[b]ᵀ with a [B,M,K], c [B,P,K].
pub fn bmm_nt_forward<S: Scalar>(a: &TensorOf<S>, c: &TensorOf<S>) -> Result<TensorOf<S>> {
    let (ba, m, k) = a.dims3()?;
    let (bc, p, kc) = c.dims3()?;
    if ba != bc || k != kc {
        return Err(Error::shape(format!(
            "bmm_nt: {:?} x {:?}",
            a.shape(),
            c.shape()
        )));
    }
    let xs = a.data();
    let cs = c.data();
    let mut out = vec![S::zero(); ba * m * p];
    for b in 0..ba {
        let ap = &xs[b * m * k..][..m * k];
        let cp = &cs[b * p * k..][..p * k];
        let op = &mut out[b * m * p..][..m * p];
        for i in 0..m {
            let arow = &ap[i * k..][..k];
            for j in 0..p {
                let crow = &cp[j * k..][..k];
                let mut acc = S::zero();
                for (av, cv) in arow.iter().zip(crow) {
                    acc = acc + *av * *cv;
                }
                op[i * p + j] = acc;
            }
        }
    }
    TensorOf::new(vec![ba, m, p], out)
}

pub fn bmm_nt_backward<S: Scalar>(
    a: &TensorOf<S>,
    c: &TensorOf<S>,
    dy: &TensorOf<S>,
) -> Result<(TensorOf<S>, TensorOf<S>)> {
    let (b, m, k) = a.dims3()?;
    let (_, p, _) = c.dims3()?;
    let as_ = a.data();
    let cs = c.data();
    let dys = dy.data();
    let mut da = vec![S::zero(); b * m * k];
    let mut dc = vec![S::zero(); b * p * k];
    for bi in 0..b {
        let ap = &as_[bi * m * k..][..m * k];
        let cp = &cs[bi * p * k..][..p * k];
        let dyp = &dys[bi * m * p..][..m * p];
        let dap = &mut da[bi * m * k..][..m * k];
        let dcp = &mut dc[bi * p * k..][..p * k];
        for i in 0..m {
            for j in 0..p {
                let g = dyp[i * p + j];
                if g == S::zero() {
                    continue;
                }
                let crow = &cp[j * k..][..k];
                let arow = &ap[i * k..][..k];
                let darow = &mut dap[i * k..][..k];
                for kk in 0..k {
                    darow[kk] = darow[kk] + g * crow[kk];
                }
                let dcrow = &mut dcp[j * k..][..k];
                for kk in 0..k {
                    dcrow[kk] = dcrow[kk] + g * arow[kk];
                }
            }
        }
    }
    Ok((
        TensorOf::new(vec![b, m, k], da)?,
        TensorOf::new(vec![b, p, k], dc)?,
    ))
}

/// Numerically stable softmax over the last axis of a rank-3 tensor.
pub fn softmax_last_forward<S: Scalar>(x: &TensorOf<S>) -> Result<TensorOf<S>> {
    let (b, m, l) = x.dims3()?;
    let xs = x.data();
    let mut out = vec![S::zero(); xs.len()];
    for row in 0..b * m {
        let src = &xs[row * l..][..l];
        let dst = &mut out[row * l..][..l];
        let mx = src
            .iter()
            .fold(f64::NEG_INFINITY, |acc, v| acc.max(v.as_f64()));
        let mut sum = 0.0f64;
        for (d, s) in dst.iter_mut().zip(src) {
            let e = (s.as_f64() - mx).exp();
            sum += e;
            *d = S::of_f64(e);
        }
        let inv = 1.0 / sum;
        for d in dst.iter_mut() {
            *d = S::of_f64(d.as_f64() * inv);
        }
    }
    TensorOf::new(vec![b, m, l], out)
}

pub fn softmax_last_backward<S: Scalar>(y: &TensorOf<S>, dy: &TensorOf<S>) -> Result<TensorOf<S>> {
    let (b, m, l) = y.dims3()?;
    let ys = y.data();
    let dys = dy.data();
    let mut dx = vec![S::zero(); ys.len()];
    for row in 0..b * m {
        let yr = &ys[row * l..][..l];
        let dyr = &dys[row * l..][..l];
        let dot: f64 = yr
            .iter()
            .zip(dyr)
            .map(|(a, g)| a.as_f64() * g.as_f64())
            .sum();
        let dst = &mut dx[row * l..][..l];
        for k in 0..l {
            dst[k] = S::of_f64(yr[k].as_f64() * (dyr[k].as_f64() - dot));
        }
    }
    TensorOf::new(vec![b, m, l], dx)
}

/// [N,C,H,W] -> [N, H·W, C] token layout.
pub fn to_tokens<S: Scalar>(x: &TensorOf<S>) -> Result<TensorOf<S>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let xs = x.data();
    let mut out = vec![S::zero(); xs.len()];
    for ni in 0..n {
        for ci in 0..c {
            for p in 0..hw {
                out[(ni * hw + p) * c + ci] = xs[(ni * c + ci) * hw + p];
            }
        }
    }
    TensorOf::new(vec![n, hw, c], out)
}

/// [N, H·W, C] -> [N,C,H,W].
pub fn from_tokens<S: Scalar>(x: &TensorOf<S>, h: usize, w: usize) -> Result<TensorOf<S>> {
    let (n, hw, c) = x.dims3()?;
    if hw != h * w {
        return Err(Error::shape(format!("token count {hw} vs {h}x{w}")));
    }
    let xs = x.data();
    let mut out = vec![S::zero(); xs.len()];
    for ni in 0..n {
        for ci in 0..c {
            for p in 0..hw {
                out[(ni * c + ci) * hw + p] = xs[(ni * hw + p) * c + ci];
            }
        }
    }
    TensorOf::new(vec![n, c, h, w], out)
}

/// Bilinear resize of a [C,Hp,Wp] map to [C,H,W], corner-aligned.
pub fn bilinear_resize_chw<S: Scalar>(p: &TensorOf<S>, h: usize, w: usize) -> Result<TensorOf<S>> {
    let (c, hp, wp) = p.dims3()?;
    if hp == h && wp == w {
        return Ok(p.clone());
    }
    let ps = p.data();
    let mut out = vec![S::zero(); c * h * w];
    let sy = if h > 1 { (hp - 1) as f64 / (h - 1) as f64 } else { 0.0 };
    let sx = if w > 1 { (wp - 1) as f64 / (w - 1) as f64 } else { 0.0 };
    for i in 0..h {
        let fy = i as f64 * sy;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(hp - 1);
        let wy = fy - y0 as f64;
        for j in 0..w {
            let fx = j as f64 * sx;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(wp - 1);
            let wx = fx - x0 as f64;
            for ci in 0..c {
                let base = ci * hp * wp;
                let v = (1.0 - wy) * (1.0 - wx) * ps[base + y0 * wp + x0].as_f64()
                    + (1.0 - wy) * wx * ps[base + y0 * wp + x1].as_f64()
                    + wy * (1.0 - wx) * ps[base + y1 * wp + x0].as_f64()
                    + wy * wx * ps[base + y1 * wp + x1].as_f64();
                out[ci * h * w + i * w + j] = S::of_f64(v);
            }
        }
    }
    TensorOf::new(vec![c, h, w], out)
}

/// Scatter-adjoint of [`bilinear_resize_chw`].
pub fn bilinear_resize_chw_backward<S: Scalar>(
    dy: &TensorOf<S>,
    hp: usize,
    wp: usize,
) -> Result<TensorOf<S>> {
    let (c, h, w) = dy.dims3()?;
    if hp == h && wp == w {
        return Ok(dy.clone());
    }
    let dys = dy.data();
    let mut dp = vec![0.0f64; c * hp * wp];
    let sy = if h > 1 { (hp - 1) as f64 / (h - 1) as f64 } else { 0.0 };
    let sx = if w > 1 { (wp - 1) as f64 / (w - 1) as f64 } else { 0.0 };
    for i in 0..h {
        let fy = i as f64 * sy;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(hp - 1);
        let wy = fy - y0 as f64;
        for j in 0..w {
            let fx = j as f64 * sx;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(wp - 1);
            let wx = fx - x0 as f64;
            for ci in 0..c {
                let g = dys[ci * h * w + i * w + j].as_f64();
                let base = ci * hp * wp;
                dp[base + y0 * wp + x0] += (1.0 - wy) * (1.0 - wx) * g;
                dp[base + y0 * wp + x1] += (1.0 - wy) * wx * g;
                dp[base + y1 * wp + x0] += wy * (1.0 - wx) * g;
                dp[base + y1 * wp + x1] += wy * wx * g;
            }
        }
    }
    TensorOf::new(
        vec![c, hp, wp],
        dp.into_iter().map(S::of_f64).collect(),
    )
}

pub fn concat_channels<S: Scalar>(a: &TensorOf<S>, b: &TensorOf<S>) -> Result<TensorOf<S>> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if n != nb || h != hb || w != wb {
        return Err(Error::shape(format!(
            "concat: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let plane = h * w;
    let as_ = a.data();
    let bs = b.data();
    let mut out = vec![S::zero(); n * (ca + cb) * plane];
    for ni in 0..n {
        let dst = &mut out[ni * (ca + cb) * plane..][..(ca + cb) * plane];
        dst[..ca * plane].copy_from_slice(&as_[ni * ca * plane..][..ca * plane]);
        dst[ca * plane..].copy_from_slice(&bs[ni * cb * plane..][..cb * plane]);
    }
    TensorOf::new(vec![n, ca + cb, h, w], out)
}

pub fn split_channels<S: Scalar>(
    dy: &TensorOf<S>,
    ca: usize,
) -> Result<(TensorOf<S>, TensorOf<S>)> {
    let (n, c, h, w) = dy.dims4()?;
    let cb = c - ca;
    let plane = h * w;
    let dys = dy.data();
    let mut da = vec![S::zero(); n * ca * plane];
    let mut db = vec![S::zero(); n * cb * plane];
    for ni in 0..n {
        let src = &dys[ni * c * plane..][..c * plane];
        da[ni * ca * plane..][..ca * plane].copy_from_slice(&src[..ca * plane]);
        db[ni * cb * plane..][..cb * plane].copy_from_slice(&src[ca * plane..]);
    }
    Ok((
        TensorOf::new(vec![n, ca, h, w], da)?,
        TensorOf::new(vec![n, cb, h, w], db)?,
    ))
}

/// x[N,C,H,W] + v[N,C], broadcasting v over the spatial plane.
pub fn add_nc<S: Scalar>(x: &TensorOf<S>, v: &TensorOf<S>) -> Result<TensorOf<S>> {
    let (n, c, h, w) = x.dims4()?;
    let (vn, vc) = v.dims2()?;
    if vn != n || vc != c {
        return Err(Error::shape(format!("add_nc: [{n},{c},..] vs [{vn},{vc}]")));
    }
    let plane = h * w;
    let vs = v.data();
    let mut out = x.data().to_vec();
    for ni in 0..n {
        for ci in 0..c {
            let bias = vs[ni * c + ci];
            for t in &mut out[(ni * c + ci) * plane..][..plane] {
                *t = *t + bias;
            }
        }
    }
    TensorOf::new(vec![n, c, h, w], out)
}

/// x[N,C,H,W] + p[C,H,W], broadcasting p over the batch.
pub fn add_chw<S: Scalar>(x: &TensorOf<S>, p: &TensorOf<S>) -> Result<TensorOf<S>> {
    let (n, c, h, w) = x.dims4()?;
    let (pc, ph, pw) = p.dims3()?;
    if pc != c || ph != h || pw != w {
        return Err(Error::shape(format!(
            "add_chw: [{n},{c},{h},{w}] vs [{pc},{ph},{pw}]"
        )));
    }
    let chw = c * h * w;
    let ps = p.data();
    let mut out = x.data().to_vec();
    for ni in 0..n {
        for (t, &pv) in out[ni * chw..][..chw].iter_mut().zip(ps) {
            *t = *t + pv;
        }
    }
    TensorOf::new(vec![n, c, h, w], out)
}

/// Row gather: table [K,E] indexed per sample.
pub fn embed_rows<S: Scalar>(table: &TensorOf<S>, indices: &[usize]) -> Result<TensorOf<S>> {
    let (rows, dim) = table.dims2()?;
    let ts = table.data();
    let mut out = Vec::with_capacity(indices.len() * dim);
    for &i in indices {
        if i >= rows {
            return Err(Error::invalid(format!(
                "embedding index {i} out of range 0..{rows}"
            )));
        }
        out.extend_from_slice(&ts[i * dim..][..dim]);
    }
    TensorOf::new(vec![indices.len(), dim], out)
}

/// Sinusoidal timestep features of width `dim` (even) for integer timesteps.
pub fn sinusoidal_features<S: Scalar>(ts: &[usize], dim: usize) -> Result<TensorOf<S>> {
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::invalid(format!("feature dim must be even >= 2, got {dim}")));
    }
    let half = dim / 2;
    let mut out = vec![S::zero(); ts.len() * dim];
    for (n, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let exponent = if half > 1 {
                i as f64 / (half - 1) as f64
            } else {
                0.0
            };
            let freq = (-(10000.0f64).ln() * exponent).exp();
            let arg = t as f64 * freq;
            out[n * dim + i] = S::of_f64(arg.sin());
            out[n * dim + half + i] = S::of_f64(arg.cos());
        }
    }
    TensorOf::new(vec![ts.len(), dim], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let x = Tensor::new(vec![1, 1, 3, 3], (0..9).map(|i| i as f32).collect()).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_shape_algebra() {
        let x = Tensor::zeros(&[2, 3, 16, 16]);
        let w = Tensor::zeros(&[8, 3, 3, 3]);
        let b = Tensor::zeros(&[8]);
        let y = conv2d_forward(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), &[2, 8, 16, 16]);
    }

    #[test]
    fn conv_hand_evaluated_cross_correlation() {
        // 2x2 input [[1,2],[3,4]] against diag kernel [[1,0],[0,1]]: 1*1 + 4*1 = 5.
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 5.0);
    }

    #[test]
    fn conv_rejects_non_divisible_stride() {
        let x = Tensor::zeros(&[1, 1, 5, 5]);
        let w = Tensor::zeros(&[1, 1, 2, 2]);
        let b = Tensor::zeros(&[1]);
        assert!(conv2d_forward(&x, &w, &b, 2, 0).is_err());
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let b = Tensor::zeros(&[1]);
        assert!(conv2d_forward(&x, &w, &b, 1, 1).is_err());
    }

    #[test]
    fn group_norm_constant_input_gives_zero() {
        let x = Tensor::filled(&[1, 4, 2, 2], 3.25);
        let gamma = Tensor::filled(&[4], 1.0);
        let beta = Tensor::zeros(&[4]);
        let (y, _) = group_norm_forward(&x, 2, &gamma, &beta, 1e-5).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn group_norm_affine_collapse() {
        let x = Tensor::from_fn(&[1, 4, 2, 2], |i| i as f32);
        let gamma = Tensor::zeros(&[4]);
        let beta = Tensor::filled(&[4], 5.0);
        let (y, _) = group_norm_forward(&x, 2, &gamma, &beta, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn group_norm_two_element_group() {
        // values [1,3]: mean 2, population std 1 -> normalized [-1, 1].
        let x = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let gamma = Tensor::filled(&[1], 1.0);
        let beta = Tensor::zeros(&[1]);
        let (y, _) = group_norm_forward(&x, 1, &gamma, &beta, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-5);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn group_norm_rejects_indivisible_groups() {
        let x = Tensor::zeros(&[1, 3, 2, 2]);
        let gamma = Tensor::filled(&[3], 1.0);
        let beta = Tensor::zeros(&[3]);
        assert!(group_norm_forward(&x, 2, &gamma, &beta, 1e-5).is_err());
    }

    #[test]
    fn silu_known_values() {
        let x = Tensor::new(vec![3], vec![0.0, 1.0, 20.0]).unwrap();
        let y = silu_forward(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.731059).abs() < 1e-5);
        assert!((y.data()[2] - 20.0).abs() < 1e-4);
    }

    #[test]
    fn pool_then_upsample_shapes() {
        let x = Tensor::from_fn(&[1, 2, 4, 4], |i| i as f32);
        let p = avg_pool2_forward(&x).unwrap();
        assert_eq!(p.shape(), &[1, 2, 2, 2]);
        let u = upsample2_forward(&p).unwrap();
        assert_eq!(u.shape(), &[1, 2, 4, 4]);
        assert!(avg_pool2_forward(&Tensor::zeros(&[1, 1, 3, 4])).is_err());
    }

    #[test]
    fn token_round_trip() {
        let x = Tensor::from_fn(&[2, 3, 2, 2], |i| i as f32);
        let t = to_tokens(&x).unwrap();
        assert_eq!(t.shape(), &[2, 4, 3]);
        let back = from_tokens(&t, 2, 2).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn resize_identity_when_extents_match() {
        let p = Tensor::from_fn(&[2, 3, 3], |i| (i as f32).cos());
        let r = bilinear_resize_chw(&p, 3, 3).unwrap();
        assert_eq!(r.data(), p.data());
    }

    #[test]
    fn resize_midpoint_interpolates() {
        let p = Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap();
        let r = bilinear_resize_chw(&p, 1, 3).unwrap();
        assert_eq!(r.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_fn(&[2, 2, 5], |i| (i as f32) * 0.3 - 1.0);
        let y = softmax_last_forward(&x).unwrap();
        for row in 0..4 {
            let s: f32 = y.data()[row * 5..(row + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }
}
