//! 2-D convolution and transposed convolution (NCHW), via im2col + gemm.

use super::matmul::gemm;
use crate::{Tensor, Var};

#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

/// Valid output range `[lo, hi)` of `o` such that `o*stride + k - pad` lies in `[0, n)`.
#[inline]
fn out_range(k: usize, pad: usize, stride: usize, n: usize, out: usize) -> (usize, usize) {
    // need o*stride + k >= pad  and  o*stride + k < n + pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if n + pad > k { (n + pad - k).div_ceil(stride).min(out) } else { 0 };
    (lo, hi.max(lo))
}

fn im2col(x: &[f64], g: Geom, col: &mut [f64]) {
    let l = g.oh * g.ow;
    for ci in 0..g.c {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (y0, y1) = out_range(ky, g.pad, g.stride, g.h, g.oh);
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * l;
                let dst = &mut col[row..row + l];
                dst.fill(0.0);
                let (x0, x1) = out_range(kx, g.pad, g.stride, g.w, g.ow);
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &xc[iy * g.w..(iy + 1) * g.w];
                    let d = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if g.stride == 1 {
                        let ix0 = x0 + kx - g.pad;
                        d[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                    } else {
                        for ox in x0..x1 {
                            d[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: Geom, x: &mut [f64]) {
    let l = g.oh * g.ow;
    for ci in 0..g.c {
        let xc = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (y0, y1) = out_range(ky, g.pad, g.stride, g.h, g.oh);
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * l;
                let src = &col[row..row + l];
                let (x0, x1) = out_range(kx, g.pad, g.stride, g.w, g.ow);
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut xc[iy * g.w..(iy + 1) * g.w];
                    let s = &src[oy * g.ow..(oy + 1) * g.ow];
                    for ox in x0..x1 {
                        dst[ox * g.stride + kx - g.pad] += s[ox];
                    }
                }
            }
        }
    }
}

fn depthwise_forward(x: &[f64], w: &[f64], g: Geom, out: &mut [f64]) {
    for ci in 0..g.c {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        let oc = &mut out[ci * g.oh * g.ow..(ci + 1) * g.oh * g.ow];
        for ky in 0..g.kh {
            let (y0, y1) = out_range(ky, g.pad, g.stride, g.h, g.oh);
            for kx in 0..g.kw {
                let wv = w[(ci * g.kh + ky) * g.kw + kx];
                let (x0, x1) = out_range(kx, g.pad, g.stride, g.w, g.ow);
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &xc[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut oc[oy * g.ow..(oy + 1) * g.ow];
                    for ox in x0..x1 {
                        dst[ox] += wv * src[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

fn depthwise_backward(x: &[f64], w: &[f64], gout: &[f64], g: Geom, gx: Option<&mut [f64]>, gw: Option<&mut [f64]>) {
    let mut gx = gx;
    let mut gw = gw;
    for ci in 0..g.c {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        let gc = &gout[ci * g.oh * g.ow..(ci + 1) * g.oh * g.ow];
        for ky in 0..g.kh {
            let (y0, y1) = out_range(ky, g.pad, g.stride, g.h, g.oh);
            for kx in 0..g.kw {
                let widx = (ci * g.kh + ky) * g.kw + kx;
                let wv = w[widx];
                let (x0, x1) = out_range(kx, g.pad, g.stride, g.w, g.ow);
                let mut acc = 0.0;
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let grow = &gc[oy * g.ow..(oy + 1) * g.ow];
                    for ox in x0..x1 {
                        let ix = ox * g.stride + kx - g.pad;
                        acc += grow[ox] * xc[iy * g.w + ix];
                        if let Some(gx) = gx.as_deref_mut() {
                            gx[ci * g.h * g.w + iy * g.w + ix] += wv * grow[ox];
                        }
                    }
                }
                if let Some(gw) = gw.as_deref_mut() {
                    gw[widx] += acc;
                }
            }
        }
    }
}

fn add_bias(out: &mut [f64], bias: &[f64], n: usize, c: usize, l: usize) {
    for i in 0..n {
        for (ci, &b) in bias.iter().enumerate().take(c) {
            for v in &mut out[(i * c + ci) * l..(i * c + ci + 1) * l] {
                *v += b;
            }
        }
    }
}

fn bias_grad(g: &Tensor) -> Tensor {
    let (n, c, h, w) = g.dims4().expect("4-d grad");
    let l = h * w;
    let mut gb = vec![0.0; c];
    for i in 0..n {
        for (ci, acc) in gb.iter_mut().enumerate() {
            *acc += g.data()[(i * c + ci) * l..(i * c + ci + 1) * l].iter().sum::<f64>();
        }
    }
    Tensor::from_vec(&[c], gb)
}

/// Output spatial size of a convolution.
pub fn conv_out_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize, groups: usize) -> Tensor {
    let (n, cin, h, wd) = x.dims4().expect("conv2d input must be NCHW");
    let (cout, cin_g, kh, kw) = w.dims4().expect("conv2d weight must be OIHW");
    assert!(groups >= 1 && cin % groups == 0 && cout % groups == 0, "conv2d groups {groups} vs {cin}->{cout}");
    assert_eq!(cin_g, cin / groups, "conv2d weight {:?} vs input {:?}", w.shape(), x.shape());
    assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d kernel larger than padded input");
    let (oh, ow) = (conv_out_size(h, kh, stride, pad), conv_out_size(wd, kw, stride, pad));
    let l = oh * ow;
    let mut out = vec![0.0; n * cout * l];
    let xd = x.data();
    if groups == cin && cout == cin {
        let g = Geom { c: cin, h, w: wd, kh, kw, stride, pad, oh, ow };
        for i in 0..n {
            depthwise_forward(
                &xd[i * cin * h * wd..(i + 1) * cin * h * wd],
                w.data(),
                g,
                &mut out[i * cout * l..(i + 1) * cout * l],
            );
        }
        return Tensor::from_vec(&[n, cout, oh, ow], out);
    }
    let cout_g = cout / groups;
    let g = Geom { c: cin_g, h, w: wd, kh, kw, stride, pad, oh, ow };
    let pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
    let kk = cin_g * kh * kw;
    let mut col = if pointwise { Vec::new() } else { vec![0.0; kk * l] };
    for i in 0..n {
        for gi in 0..groups {
            let xs = &xd[(i * cin + gi * cin_g) * h * wd..(i * cin + (gi + 1) * cin_g) * h * wd];
            let cols: &[f64] = if pointwise {
                xs
            } else {
                im2col(xs, g, &mut col);
                &col
            };
            let wg = &w.data()[gi * cout_g * kk..(gi + 1) * cout_g * kk];
            let o = &mut out[(i * cout + gi * cout_g) * l..(i * cout + (gi + 1) * cout_g) * l];
            gemm(cout_g, kk, l, wg, false, cols, false, 0.0, o);
        }
    }
    Tensor::from_vec(&[n, cout, oh, ow], out)
}

/// Returns (grad_x, grad_w) of a bias-free convolution.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: usize,
    groups: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let (cout, cin_g, kh, kw) = w.dims4().unwrap();
    let (_, _, oh, ow) = gout.dims4().unwrap();
    let l = oh * ow;
    let mut gx = need_x.then(|| vec![0.0; x.numel()]);
    let mut gw = need_w.then(|| vec![0.0; w.numel()]);
    let xd = x.data();
    let gd = gout.data();
    if groups == cin && cout == cin {
        let g = Geom { c: cin, h, w: wd, kh, kw, stride, pad, oh, ow };
        for i in 0..n {
            depthwise_backward(
                &xd[i * cin * h * wd..(i + 1) * cin * h * wd],
                w.data(),
                &gd[i * cout * l..(i + 1) * cout * l],
                g,
                gx.as_deref_mut().map(|v| &mut v[i * cin * h * wd..(i + 1) * cin * h * wd]),
                gw.as_deref_mut(),
            );
        }
    } else {
        let cout_g = cout / groups;
        let g = Geom { c: cin_g, h, w: wd, kh, kw, stride, pad, oh, ow };
        let pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
        let kk = cin_g * kh * kw;
        let mut col = vec![0.0; kk * l];
        for i in 0..n {
            for gi in 0..groups {
                let xoff = (i * cin + gi * cin_g) * h * wd;
                let xs = &xd[xoff..xoff + cin_g * h * wd];
                let go = &gd[(i * cout + gi * cout_g) * l..(i * cout + (gi + 1) * cout_g) * l];
                let wg = &w.data()[gi * cout_g * kk..(gi + 1) * cout_g * kk];
                if let Some(gw) = gw.as_deref_mut() {
                    let cols: &[f64] = if pointwise {
                        xs
                    } else {
                        im2col(xs, g, &mut col);
                        &col
                    };
                    gemm(cout_g, l, kk, go, false, cols, true, 1.0, &mut gw[gi * cout_g * kk..(gi + 1) * cout_g * kk]);
                }
                if let Some(gx) = gx.as_deref_mut() {
                    let dst = &mut gx[xoff..xoff + cin_g * h * wd];
                    if pointwise {
                        gemm(kk, cout_g, l, wg, true, go, false, 1.0, dst);
                    } else {
                        gemm(kk, cout_g, l, wg, true, go, false, 0.0, &mut col);
                        col2im(&col, g, dst);
                    }
                }
            }
        }
    }
    (
        gx.map(|v| Tensor::from_vec(x.shape(), v)),
        gw.map(|v| Tensor::from_vec(w.shape(), v)),
    )
}

pub(crate) fn conv_transpose2d_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize, out_pad: usize) -> Tensor {
    let (n, cin, h, wd) = x.dims4().expect("conv_transpose2d input must be NCHW");
    let (cin_w, cout, kh, kw) = w.dims4().expect("conv_transpose2d weight must be IOHW");
    assert_eq!(cin, cin_w, "conv_transpose2d weight {:?} vs input {:?}", w.shape(), x.shape());
    assert!(out_pad < stride.max(1), "output padding must be smaller than stride");
    let oh = (h - 1) * stride + kh + out_pad - 2 * pad;
    let ow = (wd - 1) * stride + kw + out_pad - 2 * pad;
    let l = h * wd;
    let kk = cout * kh * kw;
    // Geometry of the adjoint convolution: output plane -> input plane.
    let g = Geom { c: cout, h: oh, w: ow, kh, kw, stride, pad, oh: h, ow: wd };
    let mut out = vec![0.0; n * cout * oh * ow];
    let mut col = vec![0.0; kk * l];
    for i in 0..n {
        let xs = &x.data()[i * cin * l..(i + 1) * cin * l];
        gemm(kk, cin, l, w.data(), true, xs, false, 0.0, &mut col);
        col2im(&col, g, &mut out[i * cout * oh * ow..(i + 1) * cout * oh * ow]);
    }
    Tensor::from_vec(&[n, cout, oh, ow], out)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let (_, cout, kh, kw) = w.dims4().unwrap();
    let (_, _, oh, ow) = gout.dims4().unwrap();
    let l = h * wd;
    let kk = cout * kh * kw;
    let g = Geom { c: cout, h: oh, w: ow, kh, kw, stride, pad, oh: h, ow: wd };
    let mut gx = need_x.then(|| vec![0.0; x.numel()]);
    let mut gw = need_w.then(|| vec![0.0; w.numel()]);
    let mut col = vec![0.0; kk * l];
    for i in 0..n {
        im2col(&gout.data()[i * cout * oh * ow..(i + 1) * cout * oh * ow], g, &mut col);
        if let Some(gx) = gx.as_deref_mut() {
            gemm(cin, kk, l, w.data(), false, &col, false, 0.0, &mut gx[i * cin * l..(i + 1) * cin * l]);
        }
        if let Some(gw) = gw.as_deref_mut() {
            gemm(cin, l, kk, &x.data()[i * cin * l..(i + 1) * cin * l], false, &col, true, 1.0, gw);
        }
    }
    (
        gx.map(|v| Tensor::from_vec(x.shape(), v)),
        gw.map(|v| Tensor::from_vec(w.shape(), v)),
    )
}

impl<'g> Var<'g> {
    /// 2-D convolution of an NCHW input with an OIHW kernel and optional bias.
    pub fn conv2d(self, weight: Var<'g>, bias: Option<Var<'g>>, stride: usize, pad: usize, groups: usize) -> Var<'g> {
        let (x, w) = (self.value(), weight.value());
        let mut out = conv2d_forward(&x, &w, stride, pad, groups);
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            let (n, c, oh, ow) = out.dims4().unwrap();
            add_bias(out.data_mut(), b.value().data(), n, c, oh * ow);
            parents.push(b);
        }
        self.graph.custom(&parents, out, move |g, need| {
            let (gx, gw) = conv2d_backward(&x, &w, g, stride, pad, groups, need[0], need[1]);
            let mut grads = vec![gx, gw];
            if need.len() == 3 {
                grads.push(need[2].then(|| bias_grad(g)));
            }
            grads
        })
    }

    /// Transposed convolution with an IOHW kernel (groups = 1).
    pub fn conv_transpose2d(
        self,
        weight: Var<'g>,
        bias: Option<Var<'g>>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var<'g> {
        let (x, w) = (self.value(), weight.value());
        let mut out = conv_transpose2d_forward(&x, &w, stride, pad, out_pad);
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            let (n, c, oh, ow) = out.dims4().unwrap();
            add_bias(out.data_mut(), b.value().data(), n, c, oh * ow);
            parents.push(b);
        }
        self.graph.custom(&parents, out, move |g, need| {
            let (gx, gw) = conv_transpose2d_backward(&x, &w, g, stride, pad, need[0], need[1]);
            let mut grads = vec![gx, gw];
            if need.len() == 3 {
                grads.push(need[2].then(|| bias_grad(g)));
            }
            grads
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop convolution used as the reference.
    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize, groups: usize) -> Tensor {
        let (n, cin, h, wd) = x.dims4().unwrap();
        let (cout, cin_g, kh, kw) = w.dims4().unwrap();
        let (oh, ow) = (conv_out_size(h, kh, stride, pad), conv_out_size(wd, kw, stride, pad));
        let cout_g = cout / groups;
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        for i in 0..n {
            for co in 0..cout {
                let gi = co / cout_g;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..cin_g {
                            let ci = gi * cin_g + c;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data()[((co * cin_g + c) * kh + ky) * kw + kx]
                                        * x.data()[((i * cin + ci) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        out.data_mut()[((i * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
    }

    #[test]
    fn conv_matches_naive_reference() {
        for &(cin, cout, k, stride, pad, groups, h) in &[
            (3, 4, 5, 2, 2, 1, 8),
            (4, 4, 3, 1, 1, 4, 5),
            (4, 6, 3, 1, 1, 2, 6),
            (2, 3, 1, 1, 0, 1, 4),
            (3, 2, 3, 2, 1, 1, 7),
        ] {
            let x = pseudo(&[2, cin, h, h + 1], 1);
            let w = pseudo(&[cout, cin / groups, k, k], 2);
            let got = conv2d_forward(&x, &w, stride, pad, groups);
            let want = naive_conv(&x, &w, stride, pad, groups);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_t(y)> for matching geometry.
        let x = pseudo(&[1, 3, 8, 8], 3);
        let w = pseudo(&[4, 3, 5, 5], 4);
        let y = pseudo(&[1, 4, 4, 4], 5);
        let cx = conv2d_forward(&x, &w, 2, 2, 1);
        let ty = conv_transpose2d_forward(&y, &w, 2, 2, 1);
        assert_eq!(ty.shape(), &[1, 3, 8, 8]);
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
