//! Raw forward/backward kernels over row-major slices.
//!
//! The tape dispatches into these; the pure wavelet API reuses the band
//! kernels. Inner loops are written as contiguous slice traversals so the
//! compiler can vectorize them.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::wavelet::Band;

/// `floor((in + 2*pad - k) / stride) + 1`, with validity checks.
pub fn conv2d_output_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {}x{} exceeds padded input {}x{}", kh, kw, h + 2 * pad, w + 2 * pad),
        ));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    if oh == 0 || ow == 0 {
        return Err(Error::shape("conv2d", "zero-size output"));
    }
    Ok((oh, ow))
}

/// Range of output columns whose input column `c*stride + v - pad` is valid.
#[inline]
fn valid_col_range(w: usize, ow: usize, stride: usize, pad: usize, v: usize) -> (usize, usize) {
    // need 0 <= c*stride + v - pad < w
    let lo = if v >= pad {
        0
    } else {
        (pad - v).div_ceil(stride)
    };
    let hi = if w + pad > v {
        (((w + pad - v - 1) / stride) + 1).min(ow)
    } else {
        0
    };
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[Scalar],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    wgt: &[Scalar],
    cout: usize,
    kh: usize,
    kw: usize,
    bias: &[Scalar],
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [Scalar],
) {
    for img in 0..n {
        for co in 0..cout {
            let out_base = ((img * cout) + co) * oh * ow;
            out[out_base..out_base + oh * ow].fill(bias[co]);
            for ci in 0..cin {
                let x_base = ((img * cin) + ci) * h * w;
                let w_base = ((co * cin) + ci) * kh * kw;
                for u in 0..kh {
                    for v in 0..kw {
                        let wv = wgt[w_base + u * kw + v];
                        let (c_lo, c_hi) = valid_col_range(w, ow, stride, pad, v);
                        if c_lo >= c_hi {
                            continue;
                        }
                        for r in 0..oh {
                            let ir = (r * stride + u) as isize - pad as isize;
                            if ir < 0 || ir >= h as isize {
                                continue;
                            }
                            let in_row = &x[x_base + ir as usize * w..x_base + (ir as usize + 1) * w];
                            let out_row = &mut out[out_base + r * ow..out_base + (r + 1) * ow];
                            if stride == 1 {
                                let ic0 = c_lo + v - pad;
                                for (o, i) in out_row[c_lo..c_hi]
                                    .iter_mut()
                                    .zip(&in_row[ic0..ic0 + (c_hi - c_lo)])
                                {
                                    *o += wv * i;
                                }
                            } else {
                                for c in c_lo..c_hi {
                                    let ic = c * stride + v - pad;
                                    out_row[c] += wv * in_row[ic];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_input(
    gout: &[Scalar],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    wgt: &[Scalar],
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    gx: &mut [Scalar],
) {
    for img in 0..n {
        for co in 0..cout {
            let go_base = ((img * cout) + co) * oh * ow;
            for ci in 0..cin {
                let gx_base = ((img * cin) + ci) * h * w;
                let w_base = ((co * cin) + ci) * kh * kw;
                for u in 0..kh {
                    for v in 0..kw {
                        let wv = wgt[w_base + u * kw + v];
                        let (c_lo, c_hi) = valid_col_range(w, ow, stride, pad, v);
                        if c_lo >= c_hi {
                            continue;
                        }
                        for r in 0..oh {
                            let ir = (r * stride + u) as isize - pad as isize;
                            if ir < 0 || ir >= h as isize {
                                continue;
                            }
                            let go_row = &gout[go_base + r * ow..go_base + (r + 1) * ow];
                            let gx_row =
                                &mut gx[gx_base + ir as usize * w..gx_base + (ir as usize + 1) * w];
                            if stride == 1 {
                                let ic0 = c_lo + v - pad;
                                for (g, o) in gx_row[ic0..ic0 + (c_hi - c_lo)]
                                    .iter_mut()
                                    .zip(&go_row[c_lo..c_hi])
                                {
                                    *g += wv * o;
                                }
                            } else {
                                for c in c_lo..c_hi {
                                    let ic = c * stride + v - pad;
                                    gx_row[ic] += wv * go_row[c];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_filter(
    gout: &[Scalar],
    x: &[Scalar],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    gw: &mut [Scalar],
    gb: &mut [Scalar],
) {
    for img in 0..n {
        for co in 0..cout {
            let go_base = ((img * cout) + co) * oh * ow;
            let mut bsum = 0.0;
            for r in 0..oh {
                for c in 0..ow {
                    bsum += gout[go_base + r * ow + c];
                }
            }
            gb[co] += bsum;
            for ci in 0..cin {
                let x_base = ((img * cin) + ci) * h * w;
                let w_base = ((co * cin) + ci) * kh * kw;
                for u in 0..kh {
                    for v in 0..kw {
                        let (c_lo, c_hi) = valid_col_range(w, ow, stride, pad, v);
                        if c_lo >= c_hi {
                            continue;
                        }
                        let mut acc = 0.0;
                        for r in 0..oh {
                            let ir = (r * stride + u) as isize - pad as isize;
                            if ir < 0 || ir >= h as isize {
                                continue;
                            }
                            let in_row = &x[x_base + ir as usize * w..x_base + (ir as usize + 1) * w];
                            let go_row = &gout[go_base + r * ow..go_base + (r + 1) * ow];
                            if stride == 1 {
                                let ic0 = c_lo + v - pad;
                                acc += go_row[c_lo..c_hi]
                                    .iter()
                                    .zip(&in_row[ic0..ic0 + (c_hi - c_lo)])
                                    .map(|(g, i)| g * i)
                                    .sum::<Scalar>();
                            } else {
                                for c in c_lo..c_hi {
                                    let ic = c * stride + v - pad;
                                    acc += go_row[c] * in_row[ic];
                                }
                            }
                        }
                        gw[w_base + u * kw + v] += acc;
                    }
                }
            }
        }
    }
}

/// out[n,j] = sum_i x[n,i] * w[j,i] + b[j]
pub fn linear_forward(
    x: &[Scalar],
    n: usize,
    din: usize,
    wgt: &[Scalar],
    dout: usize,
    bias: &[Scalar],
    out: &mut [Scalar],
) {
    for img in 0..n {
        let x_row = &x[img * din..(img + 1) * din];
        let out_row = &mut out[img * dout..(img + 1) * dout];
        for (j, o) in out_row.iter_mut().enumerate() {
            let w_row = &wgt[j * din..(j + 1) * din];
            let dot: Scalar = x_row.iter().zip(w_row).map(|(a, b)| a * b).sum();
            *o = dot + bias[j];
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    gout: &[Scalar],
    x: &[Scalar],
    n: usize,
    din: usize,
    wgt: &[Scalar],
    dout: usize,
    gx: &mut [Scalar],
    gw: &mut [Scalar],
    gb: &mut [Scalar],
) {
    for img in 0..n {
        let go_row = &gout[img * dout..(img + 1) * dout];
        let x_row = &x[img * din..(img + 1) * din];
        let gx_row = &mut gx[img * din..(img + 1) * din];
        for (j, &g) in go_row.iter().enumerate() {
            gb[j] += g;
            let w_row = &wgt[j * din..(j + 1) * din];
            let gw_row = &mut gw[j * din..(j + 1) * din];
            for i in 0..din {
                gx_row[i] += g * w_row[i];
                gw_row[i] += g * x_row[i];
            }
        }
    }
}

/// Stride-2 2x2 average pooling over `[N, C, H, W]`.
pub fn down2_forward(x: &[Scalar], nc: usize, h: usize, w: usize, out: &mut [Scalar]) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..nc {
        let xb = p * h * w;
        let ob = p * oh * ow;
        for r in 0..oh {
            let top = &x[xb + 2 * r * w..xb + (2 * r + 1) * w];
            let bot = &x[xb + (2 * r + 1) * w..xb + (2 * r + 2) * w];
            let out_row = &mut out[ob + r * ow..ob + (r + 1) * ow];
            for (c, o) in out_row.iter_mut().enumerate() {
                *o = (top[2 * c] + top[2 * c + 1] + bot[2 * c] + bot[2 * c + 1]) * 0.25;
            }
        }
    }
}

pub fn down2_backward(gout: &[Scalar], nc: usize, h: usize, w: usize, gx: &mut [Scalar]) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..nc {
        let gb = p * oh * ow;
        let xb = p * h * w;
        for r in 0..oh {
            let go_row = &gout[gb + r * ow..gb + (r + 1) * ow];
            for (c, &g) in go_row.iter().enumerate() {
                let q = g * 0.25;
                gx[xb + 2 * r * w + 2 * c] += q;
                gx[xb + 2 * r * w + 2 * c + 1] += q;
                gx[xb + (2 * r + 1) * w + 2 * c] += q;
                gx[xb + (2 * r + 1) * w + 2 * c + 1] += q;
            }
        }
    }
}

/// Nearest-neighbor 2x upsampling over `[N, C, H, W]`.
pub fn up2_forward(x: &[Scalar], nc: usize, h: usize, w: usize, out: &mut [Scalar]) {
    let ow = 2 * w;
    for p in 0..nc {
        let xb = p * h * w;
        let ob = p * 4 * h * w;
        for r in 0..h {
            let in_row = &x[xb + r * w..xb + (r + 1) * w];
            for half in 0..2 {
                let out_row = &mut out[ob + (2 * r + half) * ow..ob + (2 * r + half + 1) * ow];
                for (c, &v) in in_row.iter().enumerate() {
                    out_row[2 * c] = v;
                    out_row[2 * c + 1] = v;
                }
            }
        }
    }
}

pub fn up2_backward(gout: &[Scalar], nc: usize, h: usize, w: usize, gx: &mut [Scalar]) {
    let ow = 2 * w;
    for p in 0..nc {
        let xb = p * h * w;
        let ob = p * 4 * h * w;
        for r in 0..h {
            let gx_row = &mut gx[xb + r * w..xb + (r + 1) * w];
            for half in 0..2 {
                let go_row = &gout[ob + (2 * r + half) * ow..ob + (2 * r + half + 1) * ow];
                for (c, g) in gx_row.iter_mut().enumerate() {
                    *g += go_row[2 * c] + go_row[2 * c + 1];
                }
            }
        }
    }
}

/// Mean over the spatial dims: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool_forward(x: &[Scalar], hw: usize, out: &mut [Scalar]) {
    let inv = 1.0 / hw as Scalar;
    for (p, o) in out.iter_mut().enumerate() {
        *o = x[p * hw..(p + 1) * hw].iter().sum::<Scalar>() * inv;
    }
}

pub fn global_avg_pool_backward(gout: &[Scalar], hw: usize, gx: &mut [Scalar]) {
    let inv = 1.0 / hw as Scalar;
    for (p, &go) in gout.iter().enumerate() {
        let g = go * inv;
        for v in gx[p * hw..(p + 1) * hw].iter_mut() {
            *v += g;
        }
    }
}

/// Per-block coefficients of the orthonormal Haar analysis for one band.
///
/// Block `[a b; c d]` maps to `(a*s0 + b*s1 + c*s2 + d*s3) / 2` where the
/// signs depend on the band. The 4x4 analysis matrix is symmetric and
/// orthogonal, so the same coefficients serve analysis, synthesis, and both
/// backward passes.
#[inline]
pub fn band_signs(band: Band) -> [Scalar; 4] {
    match band {
        Band::Ll => [1.0, 1.0, 1.0, 1.0],
        Band::Lh => [1.0, -1.0, 1.0, -1.0],
        Band::Hl => [1.0, 1.0, -1.0, -1.0],
        Band::Hh => [1.0, -1.0, -1.0, 1.0],
    }
}

/// One Haar sub-band of `[.., H, W]` -> `[.., H/2, W/2]`.
pub fn dwt_band_forward(x: &[Scalar], nc: usize, h: usize, w: usize, band: Band, out: &mut [Scalar]) {
    let s = band_signs(band);
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..nc {
        let xb = p * h * w;
        let ob = p * oh * ow;
        for r in 0..oh {
            let top = &x[xb + 2 * r * w..xb + (2 * r + 1) * w];
            let bot = &x[xb + (2 * r + 1) * w..xb + (2 * r + 2) * w];
            let out_row = &mut out[ob + r * ow..ob + (r + 1) * ow];
            for (c, o) in out_row.iter_mut().enumerate() {
                *o = (s[0] * top[2 * c] + s[1] * top[2 * c + 1] + s[2] * bot[2 * c]
                    + s[3] * bot[2 * c + 1])
                    * 0.5;
            }
        }
    }
}

pub fn dwt_band_backward(
    gout: &[Scalar],
    nc: usize,
    h: usize,
    w: usize,
    band: Band,
    gx: &mut [Scalar],
) {
    let s = band_signs(band);
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..nc {
        let xb = p * h * w;
        let ob = p * oh * ow;
        for r in 0..oh {
            let go_row = &gout[ob + r * ow..ob + (r + 1) * ow];
            for (c, &g) in go_row.iter().enumerate() {
                let g = g * 0.5;
                gx[xb + 2 * r * w + 2 * c] += s[0] * g;
                gx[xb + 2 * r * w + 2 * c + 1] += s[1] * g;
                gx[xb + (2 * r + 1) * w + 2 * c] += s[2] * g;
                gx[xb + (2 * r + 1) * w + 2 * c + 1] += s[3] * g;
            }
        }
    }
}

/// Haar synthesis: four `[.., h, w]` bands -> `[.., 2h, 2w]`.
pub fn idwt2_forward(
    ll: &[Scalar],
    lh: &[Scalar],
    hl: &[Scalar],
    hh: &[Scalar],
    nc: usize,
    bh: usize,
    bw: usize,
    out: &mut [Scalar],
) {
    let w = 2 * bw;
    for p in 0..nc {
        let bb = p * bh * bw;
        let ob = p * 4 * bh * bw;
        for r in 0..bh {
            for c in 0..bw {
                let i = bb + r * bw + c;
                let (vll, vlh, vhl, vhh) = (ll[i], lh[i], hl[i], hh[i]);
                out[ob + 2 * r * w + 2 * c] = (vll + vlh + vhl + vhh) * 0.5;
                out[ob + 2 * r * w + 2 * c + 1] = (vll - vlh + vhl - vhh) * 0.5;
                out[ob + (2 * r + 1) * w + 2 * c] = (vll + vlh - vhl - vhh) * 0.5;
                out[ob + (2 * r + 1) * w + 2 * c + 1] = (vll - vlh - vhl + vhh) * 0.5;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn idwt2_backward(
    gout: &[Scalar],
    nc: usize,
    bh: usize,
    bw: usize,
    gll: &mut [Scalar],
    glh: &mut [Scalar],
    ghl: &mut [Scalar],
    ghh: &mut [Scalar],
) {
    let w = 2 * bw;
    for p in 0..nc {
        let bb = p * bh * bw;
        let ob = p * 4 * bh * bw;
        for r in 0..bh {
            for c in 0..bw {
                let ga = gout[ob + 2 * r * w + 2 * c];
                let gb = gout[ob + 2 * r * w + 2 * c + 1];
                let gc = gout[ob + (2 * r + 1) * w + 2 * c];
                let gd = gout[ob + (2 * r + 1) * w + 2 * c + 1];
                let i = bb + r * bw + c;
                gll[i] += (ga + gb + gc + gd) * 0.5;
                glh[i] += (ga - gb + gc - gd) * 0.5;
                ghl[i] += (ga + gb - gc - gd) * 0.5;
                ghh[i] += (ga - gb - gc + gd) * 0.5;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_output_dims_match_formula() {
        assert_eq!(conv2d_output_dims(32, 32, 3, 3, 1, 1).unwrap(), (32, 32));
        assert_eq!(conv2d_output_dims(32, 32, 3, 3, 2, 1).unwrap(), (16, 16));
        assert_eq!(conv2d_output_dims(2, 2, 2, 2, 1, 0).unwrap(), (1, 1));
        assert!(conv2d_output_dims(2, 2, 5, 5, 1, 0).is_err());
        assert!(conv2d_output_dims(4, 4, 3, 3, 0, 0).is_err());
    }

    #[test]
    fn valid_col_range_respects_padding() {
        // w=4, ow=4, stride=1, pad=1: v=0 needs c>=1; v=2 needs c<=2
        assert_eq!(valid_col_range(4, 4, 1, 1, 0), (1, 4));
        assert_eq!(valid_col_range(4, 4, 1, 1, 1), (0, 4));
        assert_eq!(valid_col_range(4, 4, 1, 1, 2), (0, 3));
    }
}
