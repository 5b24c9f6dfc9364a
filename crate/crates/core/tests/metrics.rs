#[macro_use]
mod common;

use common::rng;
use lic_autodiff::Tensor;
use lic_core::data::synthetic_image;
use lic_core::metrics::{bd_rate, ms_ssim, ms_ssim_db, psnr, BdMethod};
use lic_core::Error;
use proptest::prelude::*;
use rand::Rng;

/// Direct-summation MS-SSIM over every valid window position.
fn ms_ssim_reference(x: &Tensor, y: &Tensor) -> f64 {
    let weights = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    let s = x.shape();
    let (c, mut h, mut w) = (s[1], s[2], s[3]);
    let mut a: Vec<f64> = x.data().to_vec();
    let mut b: Vec<f64> = y.data().to_vec();
    let mut score = 1.0;
    for (scale, &wt) in weights.iter().enumerate() {
        let mut win = 11.min(h).min(w);
        if win % 2 == 0 {
            win -= 1;
        }
        let centre = (win as f64 - 1.0) / 2.0;
        let mut kern = vec![0.0; win * win];
        for i in 0..win {
            for j in 0..win {
                let r2 = (i as f64 - centre).powi(2) + (j as f64 - centre).powi(2);
                kern[i * win + j] = (-r2 / 4.5).exp();
            }
        }
        let z: f64 = kern.iter().sum();
        kern.iter_mut().for_each(|k| *k /= z);
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let (mut ssim_sum, mut cs_sum, mut count) = (0.0, 0.0, 0usize);
        for ch in 0..c {
            for oy in 0..=h - win {
                for ox in 0..=w - win {
                    let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..win {
                        for j in 0..win {
                            let k = kern[i * win + j];
                            let p = a[ch * h * w + (oy + i) * w + ox + j];
                            let q = b[ch * h * w + (oy + i) * w + ox + j];
                            mx += k * p;
                            my += k * q;
                            xx += k * p * p;
                            yy += k * q * q;
                            xy += k * p * q;
                        }
                    }
                    let cs = (2.0 * (xy - mx * my) + c2) / (xx - mx * mx + yy - my * my + c2);
                    let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                    ssim_sum += l * cs;
                    cs_sum += cs;
                    count += 1;
                }
            }
        }
        let term = if scale == 4 { ssim_sum } else { cs_sum } / count as f64;
        score *= term.max(0.0).powf(wt);
        if scale < 4 {
            let (nh, nw) = (h / 2, w / 2);
            let pool = |v: &[f64]| {
                let mut out = vec![0.0; c * nh * nw];
                for ch in 0..c {
                    for i in 0..nh {
                        for j in 0..nw {
                            let at = |di: usize, dj: usize| v[ch * h * w + (2 * i + di) * w + 2 * j + dj];
                            out[ch * nh * nw + i * nw + j] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                        }
                    }
                }
                out
            };
            a = pool(&a);
            b = pool(&b);
            h = nh;
            w = nw;
        }
    }
    score
}

fn degrade(x: &Tensor, seed: u64, amount: f64) -> Tensor {
    let mut r = rng(seed);
    let w = x.shape()[3];
    let d = x.data();
    Tensor::from_fn(x.shape(), |i| {
        let col = i % w;
        let neighbour = d[i - col + (col + 1).min(w - 1)];
        let blur = 0.5 * (d[i] + neighbour);
        (blur + amount * (r.random::<f64>() - 0.5)).clamp(0.0, 1.0)
    })
}

fn anchor() -> Vec<(f64, f64)> {
    [0.12, 0.21, 0.35, 0.55, 0.83, 1.2].iter().map(|&r: &f64| (r, 26.0 + 4.8 * (r / 0.1).ln() - 0.35 * (r / 0.1).ln().powi(2))).collect()
}

proptest! {
    #[test]
    fn rate_scaling_gives_exact_percentages(k in 0.2f64..5.0, shift in -0.5f64..0.5) {
        let a: Vec<_> = anchor().iter().map(|&(r, d)| (r, d + shift)).collect();
        let t: Vec<_> = a.iter().map(|&(r, d)| (k * r, d)).collect();
        for m in [BdMethod::Pchip, BdMethod::Cubic] {
            prop_assert!((bd_rate(&a, &t, m).unwrap() - (k - 1.0) * 100.0).abs() < 1e-6);
            prop_assert!((bd_rate(&t, &a, m).unwrap() - (1.0 / k - 1.0) * 100.0).abs() < 1e-6);
        }
    }
}

suite! {
    fn ms_ssim_agrees_with_direct_summation() {
        let sizes = [(176, 176), (180, 200), (64, 64), (96, 48), (33, 41)];
        for (k, &(h, w)) in sizes.iter().enumerate() {
            let x = synthetic_image(&mut rng(k as u64), h, w);
            let y = degrade(&x, 100 + k as u64, 0.05 + 0.05 * k as f64);
            let got = ms_ssim(&x, &y).unwrap();
            let want = ms_ssim_reference(&x, &y);
            assert!((got - want).abs() < 1e-4, "{h}x{w}: {got} vs {want}");
            assert!(got > 0.0 && got < 1.0);
        }
    }

    fn metric_edge_cases() {
        let x = synthetic_image(&mut rng(1), 32, 32);
        assert_eq!(ms_ssim(&x, &x).unwrap(), 1.0);
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
        let off = x.map(|v| v + 0.1);
        assert!((psnr(&x, &off).unwrap() - 20.0).abs() < 1e-9);
        assert!((ms_ssim_db(0.99) - 20.0).abs() < 1e-9);
        let small = Tensor::full(&[1, 3, 8, 8], 0.5);
        assert!(matches!(ms_ssim(&small, &small.map(|v| v * 0.5)), Err(Error::Shape(_))));
        assert!(matches!(psnr(&x, &small), Err(Error::Shape(_))));
    }

    fn bd_rate_reference_values() {
        let a = anchor();
        for m in [BdMethod::Pchip, BdMethod::Cubic] {
            assert!(bd_rate(&a, &a, m).unwrap().abs() < 1e-9);
            let double: Vec<_> = a.iter().map(|&(r, d)| (2.0 * r, d)).collect();
            assert!((bd_rate(&a, &double, m).unwrap() - 100.0).abs() < 1e-6);
            let half: Vec<_> = a.iter().map(|&(r, d)| (0.5 * r, d)).collect();
            assert!((bd_rate(&a, &half, m).unwrap() + 50.0).abs() < 1e-6);
        }
    }

    fn pchip_and_cubic_agree_on_a_realistic_pair() {
        let a = anchor();
        // better at low rates, converging at the top
        let t: Vec<(f64, f64)> = a.iter().map(|&(r, d)| (r * 1.05, d + 0.6 - 0.3 * r)).collect();
        let p = bd_rate(&a, &t, BdMethod::Pchip).unwrap();
        let c = bd_rate(&a, &t, BdMethod::Cubic).unwrap();
        assert!(p < 0.0, "{p}");
        assert!((p - c).abs() < 0.5, "pchip {p} cubic {c}");
    }

    fn bd_rate_domain_errors() {
        let a = anchor();
        let dom = |r: lic_core::Result<f64>| matches!(r, Err(Error::Domain(_)));
        assert!(dom(bd_rate(&a[..1], &a, BdMethod::Pchip)));
        assert!(dom(bd_rate(&a[..3], &a, BdMethod::Cubic)));
        let mut neg = a.clone();
        neg[0].0 = 0.0;
        assert!(dom(bd_rate(&a, &neg, BdMethod::Pchip)));
        let far: Vec<_> = a.iter().map(|&(r, d)| (r, d + 40.0)).collect();
        assert!(dom(bd_rate(&a, &far, BdMethod::Pchip)));
        let mut dup = a.clone();
        dup[1].1 = dup[0].1;
        assert!(dom(bd_rate(&a, &dup, BdMethod::Pchip)));
        let mut nan = a.clone();
        nan[2].1 = f64::NAN;
        assert!(dom(bd_rate(&nan, &a, BdMethod::Pchip)));
    }
}
