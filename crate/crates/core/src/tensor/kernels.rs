//! Convolution, transposed convolution, average pooling and dense kernels.
//!
//! Spatial kernels take `[C,H,W]` or batched `[B,C,H,W]` inputs and return
//! the same rank. Every reduction accumulates in `f64`.

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Output spatial size `ceil(H / stride)`, zero padding split top/left first.
    Same,
    /// No padding.
    Valid,
}

/// Resolved geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        batch: usize,
        (c_in, h, w): (usize, usize, usize),
        (c_out, kh, kw): (usize, usize, usize),
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if stride == 0 {
            return invalid("stride must be positive");
        }
        let (ho, pad_top) = out_and_pad(h, kh, stride, padding)?;
        let (wo, pad_left) = out_and_pad(w, kw, stride, padding)?;
        Ok(Self { batch, c_in, h, w, c_out, kh, kw, stride, pad_top, pad_left, ho, wo })
    }

    /// Geometry of the convolution whose input-adjoint is a transposed
    /// convolution of `(h_in, w_in)` inputs with no padding.
    pub fn for_transpose(
        batch: usize,
        (c_in_t, h_in, w_in): (usize, usize, usize),
        (c_out_t, kh, kw): (usize, usize, usize),
        stride: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return invalid("stride must be positive");
        }
        let h = (h_in - 1) * stride + kh;
        let w = (w_in - 1) * stride + kw;
        Ok(Self {
            batch,
            c_in: c_out_t,
            h,
            w,
            c_out: c_in_t,
            kh,
            kw,
            stride,
            pad_top: 0,
            pad_left: 0,
            ho: h_in,
            wo: w_in,
        })
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.c_in * self.h * self.w
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.c_out * self.ho * self.wo
    }

    pub fn kernel_len(&self) -> usize {
        self.c_out * self.c_in * self.kh * self.kw
    }
}

fn out_and_pad(n: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if k > n {
                return invalid(format!("kernel extent {k} exceeds input extent {n}"));
            }
            Ok(((n - k) / stride + 1, 0))
        }
        Padding::Same => {
            let out = n.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(n);
            if k > n + total {
                return invalid(format!("kernel extent {k} exceeds padded extent {}", n + total));
            }
            Ok((out, total / 2))
        }
    }
}

/// Output indices `o < n_out` with `0 <= o * stride + offset < n_in`.
#[inline]
fn valid_range(n_out: usize, n_in: usize, stride: usize, offset: isize) -> (usize, usize) {
    let lo = if offset >= 0 { 0 } else { ((-offset) as usize).div_ceil(stride) };
    let span = n_in as isize - offset;
    let hi = if span <= 0 { 0 } else { ((span - 1) as usize) / stride + 1 };
    (lo, hi.min(n_out).max(lo))
}

pub(crate) fn conv_forward<S: Scalar>(x: &[S], k: &[S], g: &ConvGeom) -> Vec<S> {
    let ConvGeom { batch, c_in, h, w, c_out, kh, kw, stride, pad_top, pad_left, ho, wo } = *g;
    let mut out = Vec::with_capacity(g.output_len());
    let mut acc = vec![0f64; ho * wo];
    for b in 0..batch {
        for o in 0..c_out {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for c in 0..c_in {
                let plane = &x[(b * c_in + c) * h * w..][..h * w];
                for ky in 0..kh {
                    let dy = ky as isize - pad_top as isize;
                    let (oy0, oy1) = valid_range(ho, h, stride, dy);
                    for kx in 0..kw {
                        let wv = k[((o * c_in + c) * kh + ky) * kw + kx].to_acc();
                        if wv == 0.0 {
                            continue;
                        }
                        let dx = kx as isize - pad_left as isize;
                        let (ox0, ox1) = valid_range(wo, w, stride, dx);
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = (oy * stride) as isize + dy;
                            let row = &plane[iy as usize * w..][..w];
                            let arow = &mut acc[oy * wo..][..wo];
                            if stride == 1 {
                                let start = (ox0 as isize + dx) as usize;
                                let src = &row[start..start + (ox1 - ox0)];
                                for (a, &v) in arow[ox0..ox1].iter_mut().zip(src) {
                                    *a += wv * v.to_acc();
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    let ix = ((ox * stride) as isize + dx) as usize;
                                    arow[ox] += wv * row[ix].to_acc();
                                }
                            }
                        }
                    }
                }
            }
            out.extend(acc.iter().map(|&a| S::from_acc(a)));
        }
    }
    out
}

/// Gradient of `conv_forward` with respect to its input; also the
/// transposed-convolution forward map.
pub(crate) fn conv_backward_input<S: Scalar>(dy: &[S], k: &[S], g: &ConvGeom) -> Vec<S> {
    let ConvGeom { batch, c_in, h, w, c_out, kh, kw, stride, pad_top, pad_left, ho, wo } = *g;
    let mut out = Vec::with_capacity(g.input_len());
    let mut acc = vec![0f64; h * w];
    for b in 0..batch {
        for c in 0..c_in {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for o in 0..c_out {
                let gplane = &dy[(b * c_out + o) * ho * wo..][..ho * wo];
                for ky in 0..kh {
                    let ddy = ky as isize - pad_top as isize;
                    let (oy0, oy1) = valid_range(ho, h, stride, ddy);
                    for kx in 0..kw {
                        let wv = k[((o * c_in + c) * kh + ky) * kw + kx].to_acc();
                        if wv == 0.0 {
                            continue;
                        }
                        let ddx = kx as isize - pad_left as isize;
                        let (ox0, ox1) = valid_range(wo, w, stride, ddx);
                        for oy in oy0..oy1 {
                            let iy = ((oy * stride) as isize + ddy) as usize;
                            let grow = &gplane[oy * wo..][..wo];
                            let arow = &mut acc[iy * w..][..w];
                            if stride == 1 {
                                let start = (ox0 as isize + ddx) as usize;
                                let dst = &mut arow[start..start + (ox1 - ox0)];
                                for (a, &v) in dst.iter_mut().zip(&grow[ox0..ox1]) {
                                    *a += wv * v.to_acc();
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    let ix = ((ox * stride) as isize + ddx) as usize;
                                    arow[ix] += wv * grow[ox].to_acc();
                                }
                            }
                        }
                    }
                }
            }
            out.extend(acc.iter().map(|&a| S::from_acc(a)));
        }
    }
    out
}

/// Gradient of `conv_forward` with respect to its kernel.
pub(crate) fn conv_backward_kernel<S: Scalar>(x: &[S], dy: &[S], g: &ConvGeom) -> Vec<S> {
    let ConvGeom { batch, c_in, h, w, c_out, kh, kw, stride, pad_top, pad_left, ho, wo } = *g;
    let mut out = Vec::with_capacity(g.kernel_len());
    for o in 0..c_out {
        for c in 0..c_in {
            for ky in 0..kh {
                let ddy = ky as isize - pad_top as isize;
                let (oy0, oy1) = valid_range(ho, h, stride, ddy);
                for kx in 0..kw {
                    let ddx = kx as isize - pad_left as isize;
                    let (ox0, ox1) = valid_range(wo, w, stride, ddx);
                    let mut acc = 0f64;
                    for b in 0..batch {
                        let plane = &x[(b * c_in + c) * h * w..][..h * w];
                        let gplane = &dy[(b * c_out + o) * ho * wo..][..ho * wo];
                        for oy in oy0..oy1 {
                            let iy = ((oy * stride) as isize + ddy) as usize;
                            let row = &plane[iy * w..][..w];
                            let grow = &gplane[oy * wo..][..wo];
                            if stride == 1 {
                                let start = (ox0 as isize + ddx) as usize;
                                let src = &row[start..start + (ox1 - ox0)];
                                for (&gv, &xv) in grow[ox0..ox1].iter().zip(src) {
                                    acc += gv.to_acc() * xv.to_acc();
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    let ix = ((ox * stride) as isize + ddx) as usize;
                                    acc += grow[ox].to_acc() * row[ix].to_acc();
                                }
                            }
                        }
                    }
                    out.push(S::from_acc(acc));
                }
            }
        }
    }
    out
}

pub(crate) fn pool_forward<S: Scalar>(x: &[S], (planes, h, w): (usize, usize, usize), win: usize) -> Vec<S> {
    let (ho, wo) = (h / win, w / win);
    let norm = 1.0 / (win * win) as f64;
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut acc = vec![0f64; wo];
    for p in 0..planes {
        let plane = &x[p * h * w..][..h * w];
        for oy in 0..ho {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for iy in oy * win..(oy + 1) * win {
                let row = &plane[iy * w..][..w];
                for (ox, a) in acc.iter_mut().enumerate() {
                    for &v in &row[ox * win..(ox + 1) * win] {
                        *a += v.to_acc();
                    }
                }
            }
            out.extend(acc.iter().map(|&a| S::from_acc(a * norm)));
        }
    }
    out
}

pub(crate) fn pool_backward<S: Scalar>(dy: &[S], (planes, h, w): (usize, usize, usize), win: usize) -> Vec<S> {
    let (ho, wo) = (h / win, w / win);
    let norm = S::lit(1.0 / (win * win) as f64);
    let mut out = vec![S::zero(); planes * h * w];
    for p in 0..planes {
        for iy in 0..h {
            let grow = &dy[(p * ho + iy / win) * wo..][..wo];
            let row = &mut out[(p * h + iy) * w..][..w];
            for (ix, v) in row.iter_mut().enumerate() {
                *v = grow[ix / win] * norm;
            }
        }
    }
    out
}

/// `y[b, m] = sum_n W[m, n] x[b, n]` (no bias).
pub(crate) fn dense_forward<S: Scalar>(x: &[S], wt: &[S], batch: usize, n: usize, m: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(batch * m);
    for b in 0..batch {
        let xr = &x[b * n..][..n];
        for r in 0..m {
            let wr = &wt[r * n..][..n];
            let acc: f64 = wr.iter().zip(xr).map(|(a, b)| a.to_acc() * b.to_acc()).sum();
            out.push(S::from_acc(acc));
        }
    }
    out
}

pub(crate) fn dense_backward_input<S: Scalar>(dy: &[S], wt: &[S], batch: usize, n: usize, m: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(batch * n);
    let mut acc = vec![0f64; n];
    for b in 0..batch {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for r in 0..m {
            let g = dy[b * m + r].to_acc();
            if g == 0.0 {
                continue;
            }
            for (a, &wv) in acc.iter_mut().zip(&wt[r * n..][..n]) {
                *a += g * wv.to_acc();
            }
        }
        out.extend(acc.iter().map(|&a| S::from_acc(a)));
    }
    out
}

pub(crate) fn dense_backward_weight<S: Scalar>(x: &[S], dy: &[S], batch: usize, n: usize, m: usize) -> Vec<S> {
    let mut acc = vec![0f64; m * n];
    for b in 0..batch {
        let xr = &x[b * n..][..n];
        for r in 0..m {
            let g = dy[b * m + r].to_acc();
            if g == 0.0 {
                continue;
            }
            for (a, &xv) in acc[r * n..][..n].iter_mut().zip(xr) {
                *a += g * xv.to_acc();
            }
        }
    }
    acc.into_iter().map(S::from_acc).collect()
}

/// Splits a `[C,H,W]` / `[B,C,H,W]` shape into `(batch, (C, H, W), was_batched)`.
pub(crate) fn spatial_dims(shape: &[usize]) -> Result<(usize, (usize, usize, usize), bool)> {
    match *shape {
        [c, h, w] => Ok((1, (c, h, w), false)),
        [b, c, h, w] => Ok((b, (c, h, w), true)),
        _ => invalid(format!("expected [C,H,W] or [B,C,H,W], got {shape:?}")),
    }
}

fn kernel_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [o, i, kh, kw] => Ok((o, i, kh, kw)),
        _ => invalid(format!("expected kernel [C_out,C_in,kH,kW], got {shape:?}")),
    }
}

fn spatial_shape(batched: bool, batch: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if batched {
        vec![batch, c, h, w]
    } else {
        vec![c, h, w]
    }
}

pub(crate) fn conv_geom(input: &[usize], kernel: &[usize], stride: usize, padding: Padding) -> Result<(ConvGeom, bool)> {
    let (batch, (c, h, w), batched) = spatial_dims(input)?;
    let (o, i, kh, kw) = kernel_dims(kernel)?;
    if i != c {
        return invalid(format!("input has {c} channels but kernel expects {i}"));
    }
    Ok((ConvGeom::new(batch, (c, h, w), (o, kh, kw), stride, padding)?, batched))
}

pub(crate) fn transpose_geom(input: &[usize], kernel: &[usize], stride: usize) -> Result<(ConvGeom, bool)> {
    let (batch, (c, h, w), batched) = spatial_dims(input)?;
    let (o, i, kh, kw) = kernel_dims(kernel)?;
    if o != c {
        return invalid(format!("transpose input has {c} channels but kernel maps {o}"));
    }
    Ok((ConvGeom::for_transpose(batch, (c, h, w), (i, kh, kw), stride)?, batched))
}

/// 2-D cross-correlation.
pub fn conv2d<S: Scalar>(input: &Tensor<S>, kernel: &Tensor<S>, stride: usize, padding: Padding) -> Result<Tensor<S>> {
    let (g, batched) = conv_geom(input.shape(), kernel.shape(), stride, padding)?;
    let out = conv_forward(input.data(), kernel.data(), &g);
    Ok(Tensor::from_parts(spatial_shape(batched, g.batch, g.c_out, g.ho, g.wo), out))
}

/// Adjoint of [`conv2d`] with `Valid` padding: maps `C_out` channels back
/// to `C_in`, output extent `(H - 1) * stride + kH`.
pub fn conv2d_transpose<S: Scalar>(input: &Tensor<S>, kernel: &Tensor<S>, stride: usize) -> Result<Tensor<S>> {
    let (g, batched) = transpose_geom(input.shape(), kernel.shape(), stride)?;
    let out = conv_backward_input(input.data(), kernel.data(), &g);
    Ok(Tensor::from_parts(spatial_shape(batched, g.batch, g.c_in, g.h, g.w), out))
}

pub(crate) fn pool_dims(shape: &[usize], window: usize) -> Result<(usize, (usize, usize, usize), bool)> {
    let (batch, (c, h, w), batched) = spatial_dims(shape)?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return invalid(format!("spatial dims {h}x{w} not divisible by pool window {window}"));
    }
    Ok((batch, (c, h, w), batched))
}

/// Non-overlapping mean pooling; spatial dims must divide by `window`.
pub fn avg_pool2d<S: Scalar>(input: &Tensor<S>, window: usize) -> Result<Tensor<S>> {
    let (batch, (c, h, w), batched) = pool_dims(input.shape(), window)?;
    let out = pool_forward(input.data(), (batch * c, h, w), window);
    Ok(Tensor::from_parts(spatial_shape(batched, batch, c, h / window, w / window), out))
}

/// `W x + b` for `x` of shape `[N]` or `[B, N]`.
pub fn dense<S: Scalar>(input: &Tensor<S>, weights: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let (batch, n, batched) = match *input.shape() {
        [n] => (1, n, false),
        [b, n] => (b, n, true),
        _ => return invalid(format!("dense input must be [N] or [B,N], got {:?}", input.shape())),
    };
    let m = match *weights.shape() {
        [m, wn] if wn == n => m,
        _ => return invalid(format!("dense weights {:?} incompatible with input width {n}", weights.shape())),
    };
    if bias.shape() != [m] {
        return invalid(format!("dense bias {:?} should be [{m}]", bias.shape()));
    }
    let mut out = dense_forward(input.data(), weights.data(), batch, n, m);
    for row in out.chunks_mut(m) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v = *v + b;
        }
    }
    let shape = if batched { vec![batch, m] } else { vec![m] };
    Ok(Tensor::from_parts(shape, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Quadruple-loop reference with explicit zero padding.
    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, padding: Padding) -> Tensor<f64> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let (ho, wo, pt, pl) = match padding {
            Padding::Valid => ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0),
            Padding::Same => {
                let ho = h.div_ceil(stride);
                let wo = w.div_ceil(stride);
                let th = ((ho - 1) * stride + kh).saturating_sub(h);
                let tw = ((wo - 1) * stride + kw).saturating_sub(w);
                (ho, wo, th / 2, tw / 2)
            }
        };
        let mut out = vec![0.0; o * ho * wo];
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pt as isize;
                                let ix = (ox * stride + kx) as isize - pl as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += x.data()[(ic * h + iy as usize) * w + ix as usize]
                                    * k.data()[((oc * c + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[(oc * ho + oy) * wo + ox] = s;
                }
            }
        }
        Tensor::new(vec![o, ho, wo], out).unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::<f32>::ones(&[1, 1, 3, 3]);
        let k = Tensor::<f32>::ones(&[1, 1, 1, 1]);
        let y = conv2d(&x, &k, 1, Padding::Valid).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn two_by_two_dot_product() {
        let x = Tensor::<f32>::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::<f32>::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = conv2d(&x, &k, 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn matches_naive_oracle_for_all_layer_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cases = [
            (3, 8, 8, 4, 3, 2, Padding::Same),
            (3, 8, 8, 4, 3, 2, Padding::Valid),
            (3, 8, 8, 4, 3, 1, Padding::Same),
            (2, 9, 7, 3, 3, 1, Padding::Same),
            (2, 8, 8, 2, 2, 2, Padding::Valid),
            (1, 5, 6, 2, 3, 1, Padding::Valid),
        ];
        for (c, h, w, o, k, s, p) in cases {
            let x = Tensor::<f64>::uniform(&[c, h, w], -1.0, 1.0, &mut rng);
            let kern = Tensor::<f64>::uniform(&[o, c, k, k], -1.0, 1.0, &mut rng);
            let fast = conv2d(&x, &kern, s, p).unwrap();
            let slow = naive_conv(&x, &kern, s, p);
            assert_eq!(fast.shape(), slow.shape());
            let err = fast.zip_map(&slow, |a, b| a - b).unwrap().max_abs();
            assert!(err <= 1e-5, "case {:?} err {err}", (c, h, w, o, k, s, p));
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::<f32>::zeros(&[2, 4, 4]);
        let k = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        assert!(conv2d(&x, &k, 1, Padding::Same).is_err());
        assert!(conv2d_transpose(&x, &k, 1).is_err());
    }

    #[test]
    fn transpose_expands_single_pixel() {
        let x = Tensor::<f32>::ones(&[1, 1, 1]);
        let k = Tensor::<f32>::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = conv2d_transpose(&x, &k, 1).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn stride_two_transpose_doubles_even_extents() {
        let x = Tensor::<f32>::ones(&[3, 4, 6]);
        let k = Tensor::<f32>::ones(&[3, 2, 2, 2]);
        let y = conv2d_transpose(&x, &k, 2).unwrap();
        assert_eq!(y.shape(), &[2, 8, 12]);
    }

    #[test]
    fn pool_window_mean() {
        let x = Tensor::<f32>::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avg_pool2d(&x, 2).unwrap().data(), &[2.5]);
        let c = Tensor::<f32>::full(&[2, 4, 4], 3.25);
        assert_eq!(avg_pool2d(&c, 2).unwrap(), Tensor::full(&[2, 2, 2], 3.25));
        assert!(avg_pool2d(&Tensor::<f32>::zeros(&[1, 3, 4]), 2).is_err());
    }

    #[test]
    fn dense_hand_values() {
        let x = Tensor::<f32>::vector(vec![3.0, 4.0]);
        let w = Tensor::<f32>::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f32>::vector(vec![1.0]);
        assert_eq!(dense(&x, &w, &b).unwrap().data(), &[12.0]);
        let eye = Tensor::<f32>::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero = Tensor::<f32>::zeros(&[2]);
        assert_eq!(dense(&x, &eye, &zero).unwrap(), x);
        assert!(dense(&x, &Tensor::zeros(&[2, 3]), &zero).is_err());
    }
}
