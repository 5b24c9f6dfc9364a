//! Distortion metrics, rate-distortion loss and BD-rate.

use lic_autodiff::{Graph, Tensor, Var};

use crate::config::Metric;
use crate::{Error, Result};

pub const PSNR_CAP: f64 = 100.0;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("metric inputs {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse(x: &Tensor, y: &Tensor) -> Result<f64> {
    same_shape(x, y)?;
    Ok(x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.numel().max(1) as f64)
}

/// PSNR in dB for signals in `[0, 1]`; `+inf` for identical inputs.
pub fn psnr(x: &Tensor, y: &Tensor) -> Result<f64> {
    let m = mse(x, y)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

/// Window size used at a scale of spatial size `h x w`: 11, shrunk (to an odd
/// size) when the image is smaller than the window.
pub fn ssim_window(h: usize, w: usize) -> usize {
    let s = SSIM_WIN.min(h).min(w);
    if s % 2 == 0 {
        s - 1
    } else {
        s
    }
}

/// Normalised 1-D Gaussian taps of length `n`.
pub fn gaussian_taps(n: usize) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let t: Vec<f64> = (0..n).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let z: f64 = t.iter().sum();
    t.into_iter().map(|v| v / z).collect()
}

fn blur<'g>(x: Var<'g>, win: usize) -> Var<'g> {
    let c = x.shape()[1];
    let taps = gaussian_taps(win);
    let g = x.graph();
    let kh = g.constant(Tensor::from_fn(&[c, 1, win, 1], |i| taps[i % win]));
    let kw = g.constant(Tensor::from_fn(&[c, 1, 1, win], |i| taps[i % win]));
    x.conv2d(kh, None, 1, 0, c).conv2d(kw, None, 1, 0, c)
}

fn avg_pool2<'g>(x: Var<'g>) -> Var<'g> {
    let c = x.shape()[1];
    let k = x.graph().constant(Tensor::full(&[c, 1, 2, 2], 0.25));
    x.conv2d(k, None, 2, 0, c)
}

/// `(ssim, contrast-structure)` means at one scale.
fn ssim_terms<'g>(x: Var<'g>, y: Var<'g>) -> (Var<'g>, Var<'g>) {
    let s = x.shape();
    let win = ssim_window(s[2], s[3]);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mx = blur(x, win);
    let my = blur(y, win);
    let sxx = blur(x * x, win) - mx * mx;
    let syy = blur(y * y, win) - my * my;
    let sxy = blur(x * y, win) - mx * my;
    let cs = (sxy.scale(2.0).add_scalar(c2)) / (sxx + syy).add_scalar(c2);
    let l = (mx * my).scale(2.0).add_scalar(c1) / (mx * mx + my * my).add_scalar(c1);
    ((l * cs).mean(), cs.mean())
}

/// Differentiable 5-scale MS-SSIM of `[B, C, H, W]` inputs in `[0, 1]`.
pub fn ms_ssim_var<'g>(x: Var<'g>, y: Var<'g>) -> Result<Var<'g>> {
    if x.shape() != y.shape() || x.shape().len() != 4 {
        return Err(Error::Shape(format!("ms_ssim inputs {:?} vs {:?}", x.shape(), y.shape())));
    }
    let s = x.shape();
    if s[2] < 16 || s[3] < 16 {
        return Err(Error::Shape(format!("ms_ssim needs at least 16x16 inputs, got {}x{}", s[2], s[3])));
    }
    let (mut x, mut y) = (x, y);
    let mut out: Option<Var<'g>> = None;
    for (k, &wt) in MS_SSIM_WEIGHTS.iter().enumerate() {
        let (ssim, cs) = ssim_terms(x, y);
        let last = k + 1 == MS_SSIM_WEIGHTS.len();
        let term = if last { ssim } else { cs };
        let term = term.relu().add_scalar(1e-12).powf(wt);
        out = Some(match out {
            Some(o) => o * term,
            None => term,
        });
        if !last {
            x = avg_pool2(x);
            y = avg_pool2(y);
        }
    }
    Ok(out.expect("five scales"))
}

pub fn ms_ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    same_shape(x, y)?;
    if x == y {
        return Ok(1.0);
    }
    let g = Graph::inference();
    Ok(ms_ssim_var(g.constant(x.clone()), g.constant(y.clone()))?.value().item())
}

/// MS-SSIM in dB for plotting.
pub fn ms_ssim_db(score: f64) -> f64 {
    -10.0 * (1.0 - score).max(1e-10).log10()
}

/// `rate + lambda * D` with `D` the 0-255 scale MSE or `1 - MS-SSIM`.
pub fn rd_loss(x: &Tensor, x_hat: &Tensor, bpp: f64, lambda: f64, metric: Metric) -> Result<f64> {
    let d = match metric {
        Metric::Mse => 255.0 * 255.0 * mse(x, x_hat)?,
        Metric::MsSsim => 1.0 - ms_ssim(x, x_hat)?,
    };
    Ok(bpp + lambda * d)
}

/// Differentiable distortion term matching [`rd_loss`].
pub fn distortion_var<'g>(x: Var<'g>, x_hat: Var<'g>, metric: Metric) -> Result<Var<'g>> {
    if x.shape() != x_hat.shape() {
        return Err(Error::Shape(format!("distortion inputs {:?} vs {:?}", x.shape(), x_hat.shape())));
    }
    Ok(match metric {
        Metric::Mse => (x - x_hat).sqr().mean().scale(255.0 * 255.0),
        Metric::MsSsim => ms_ssim_var(x, x_hat)?.neg().add_scalar(1.0),
    })
}

/// One operating point.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RdPoint {
    pub bpp: f64,
    pub psnr_db: f64,
    pub msssim: f64,
    pub encode_s: f64,
    pub decode_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BdMethod {
    /// Piecewise cubic Hermite interpolation, trapezoidal integration.
    Pchip,
    /// Classic cubic polynomial fit, integrated analytically.
    Cubic,
}

/// `(rate, distortion)` pairs; distortion is usually PSNR.
pub type Curve = [(f64, f64)];

fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = (0..n - 1).map(|i| x[i + 1] - x[i]).collect();
    let d: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
    if n == 2 {
        return vec![d[0], d[0]];
    }
    let mut m = vec![0.0; n];
    for k in 1..n - 1 {
        if d[k - 1] * d[k] > 0.0 {
            let (w1, w2) = (2.0 * h[k] + h[k - 1], h[k] + 2.0 * h[k - 1]);
            m[k] = (w1 + w2) / (w1 / d[k - 1] + w2 / d[k]);
        }
    }
    let end = |h0: f64, h1: f64, d0: f64, d1: f64| {
        let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if s * d0 <= 0.0 {
            0.0
        } else if d0 * d1 <= 0.0 && s.abs() > 3.0 * d0.abs() {
            3.0 * d0
        } else {
            s
        }
    };
    m[0] = end(h[0], h[1], d[0], d[1]);
    m[n - 1] = end(h[n - 2], h[n - 3], d[n - 2], d[n - 3]);
    m
}

fn pchip_eval(x: &[f64], y: &[f64], m: &[f64], t: f64) -> f64 {
    let n = x.len();
    let i = match x.iter().position(|&v| v > t) {
        Some(0) => 0,
        Some(k) => k - 1,
        None => n - 2,
    };
    let h = x[i + 1] - x[i];
    let s = (t - x[i]) / h;
    let (h00, h10, h01, h11) =
        (2.0 * s.powi(3) - 3.0 * s * s + 1.0, s.powi(3) - 2.0 * s * s + s, -2.0 * s.powi(3) + 3.0 * s * s, s.powi(3) - s * s);
    h00 * y[i] + h10 * h * m[i] + h01 * y[i + 1] + h11 * h * m[i + 1]
}

/// Integral of log-rate over `[lo, hi]` of distortion.
fn integrate(curve: &Curve, lo: f64, hi: f64, method: BdMethod) -> Result<f64> {
    let mut pts: Vec<(f64, f64)> = curve.iter().map(|&(r, d)| (d, r.ln())).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::Domain("distortion values must be distinct".into()));
    }
    let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
    match method {
        BdMethod::Pchip => {
            let m = pchip_slopes(&x, &y);
            let n = 1000;
            let step = (hi - lo) / n as f64;
            let f = |t: f64| pchip_eval(&x, &y, &m, t);
            let inner: f64 = (1..n).map(|k| f(lo + k as f64 * step)).sum();
            Ok(step * (0.5 * (f(lo) + f(hi)) + inner))
        }
        BdMethod::Cubic => {
            let c = polyfit3(&x, &y)?;
            let prim = |t: f64| c[0] * t + c[1] * t * t / 2.0 + c[2] * t.powi(3) / 3.0 + c[3] * t.powi(4) / 4.0;
            Ok(prim(hi) - prim(lo))
        }
    }
}

/// Least-squares cubic `c0 + c1 t + c2 t^2 + c3 t^3` via normal equations
/// on centred data.
fn polyfit3(x: &[f64], y: &[f64]) -> Result<[f64; 4]> {
    if x.len() < 4 {
        return Err(Error::Domain("cubic fit needs at least four points".into()));
    }
    let mut a = [[0.0f64; 5]; 4];
    for (&t, &v) in x.iter().zip(y) {
        let p = [1.0, t, t * t, t * t * t];
        for r in 0..4 {
            for c in 0..4 {
                a[r][c] += p[r] * p[c];
            }
            a[r][4] += p[r] * v;
        }
    }
    for col in 0..4 {
        let piv = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).expect("rows");
        a.swap(col, piv);
        if a[col][col].abs() < 1e-300 {
            return Err(Error::Domain("singular cubic fit".into()));
        }
        for r in 0..4 {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..5 {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    Ok([a[0][4] / a[0][0], a[1][4] / a[1][1], a[2][4] / a[2][2], a[3][4] / a[3][3]])
}

/// Average bitrate difference of `test` against `anchor` at equal
/// distortion, in percent (negative = savings).
pub fn bd_rate(anchor: &Curve, test: &Curve, method: BdMethod) -> Result<f64> {
    for c in [anchor, test] {
        if c.len() < 2 || (method == BdMethod::Cubic && c.len() < 4) {
            return Err(Error::Domain("curve has too few points".into()));
        }
        if c.iter().any(|&(r, d)| r <= 0.0 || !r.is_finite() || !d.is_finite()) {
            return Err(Error::Domain("rates must be positive and values finite".into()));
        }
    }
    let range = |c: &Curve| {
        let lo = c.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let hi = c.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let (a0, a1) = range(anchor);
    let (t0, t1) = range(test);
    let (lo, hi) = (a0.max(t0), a1.min(t1));
    if hi <= lo {
        return Err(Error::Domain(format!("no distortion overlap: [{a0}, {a1}] vs [{t0}, {t1}]")));
    }
    let ia = integrate(anchor, lo, hi, method)?;
    let it = integrate(test, lo, hi, method)?;
    Ok((((it - ia) / (hi - lo)).exp() - 1.0) * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_form() {
        let x = Tensor::zeros(&[1, 1, 10, 10]);
        let y = Tensor::full(&[1, 1, 10, 10], 1e-3f64.sqrt());
        assert!((psnr(&x, &y).unwrap() - 30.0).abs() < 1e-9);
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
    }

    #[test]
    fn bd_rate_of_scaled_curves() {
        let a: Vec<(f64, f64)> = vec![(0.1, 28.0), (0.2, 30.5), (0.4, 33.0), (0.8, 35.2)];
        let double: Vec<(f64, f64)> = a.iter().map(|&(r, d)| (2.0 * r, d)).collect();
        let half: Vec<(f64, f64)> = a.iter().map(|&(r, d)| (0.5 * r, d)).collect();
        for m in [BdMethod::Pchip, BdMethod::Cubic] {
            assert!(bd_rate(&a, &a, m).unwrap().abs() < 1e-9);
            assert!((bd_rate(&a, &double, m).unwrap() - 100.0).abs() < 1e-6);
            assert!((bd_rate(&a, &half, m).unwrap() + 50.0).abs() < 1e-6);
        }
        let far: Vec<(f64, f64)> = a.iter().map(|&(r, d)| (r, d + 20.0)).collect();
        assert!(matches!(bd_rate(&a, &far, BdMethod::Pchip), Err(Error::Domain(_))));
    }
}
